use doss_core::cli::{pearson, SweepResult};
use doss_core::cli::sweep::SweepRow;
use doss_core::eval::Cell;

/// Published per-domain BLEU for an eight-point (α, β) grid, averaged by the
/// sweep code itself.
fn fixture() -> SweepResult {
    let text = include_str!("fixtures/alpha_beta_bleu.csv");
    let rows = text
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            let cells = v[2..].iter().map(|&bleu| Cell { bleu, exact_match: 0.0, n_sentences: 1 }).collect();
            SweepRow { alpha: v[0], beta: v[1], outcome: Ok(cells) }
        })
        .collect();
    SweepResult { rows }
}

#[test]
fn correlations_on_reference_grid() {
    let (a, b) = fixture().correlations();
    let (a, b) = (a.unwrap(), b.unwrap());
    assert!((a - -0.74).abs() <= 0.05, "rho_alpha {a}");
    assert!((b - -0.54).abs() <= 0.05, "rho_beta {b}");
}

#[test]
fn failed_rows_are_left_out() {
    let mut r = fixture();
    let full = r.correlations();
    r.rows.push(SweepRow { alpha: 0.9, beta: 0.4, outcome: Err("diverged".into()) });
    assert_eq!(r.correlations(), full);
    assert!(r.to_csv(&["medical", "religion", "tech"]).lines().last().unwrap().ends_with("failed: diverged"));
}

#[test]
fn pearson_edge_cases() {
    assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
    assert_eq!(pearson(&[1.0], &[2.0]), None);
    assert_eq!(pearson(&[1.0, 2.0], &[2.0]), None);
}
