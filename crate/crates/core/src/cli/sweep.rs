use std::fmt::Write as _;

use super::manifest::SweepSection;
use crate::data::DomainDataset;
use crate::error::Result;
use crate::eval::{eval_cell, Cell, EvalOptions};
use crate::mask::{magnitude_prune, magnitude_prune_disjoint, MaskSet, PruneSpec};
use crate::model::{ModelConfig, ParamStore, ParameterRegistry};
use crate::train::{train_doss, TrainConfig};

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub struct SweepInputs<'a> {
    pub model: &'a ModelConfig,
    pub registry: &'a ParameterRegistry,
    pub base: &'a ParamStore,
    /// Per-domain fine-tuned copies of `base`, pruned at every grid point.
    pub tuned: &'a [ParamStore],
    pub train: &'a [DomainDataset],
    pub test: &'a [DomainDataset],
    pub ft_epochs: usize,
    pub disjoint: bool,
    pub doss_cfg: &'a TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    /// Per-domain cells, or the error message of a failed run.
    pub outcome: std::result::Result<Vec<Cell>, String>,
}

impl SweepRow {
    pub fn average_bleu(&self) -> Option<f64> {
        let cells = self.outcome.as_ref().ok()?;
        Some(cells.iter().map(|c| c.bleu).sum::<f64>() / cells.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self, ids: &[&str]) -> String {
        let mut s = String::from("alpha,beta");
        for id in ids {
            let _ = write!(s, ",{id}_bleu,{id}_exact_match");
        }
        s.push_str(",average_bleu,average_exact_match,status\n");
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.alpha, r.beta);
            match &r.outcome {
                Ok(cells) => {
                    for c in cells {
                        let _ = write!(s, ",{},{}", c.bleu, c.exact_match);
                    }
                    let em = cells.iter().map(|c| c.exact_match).sum::<f64>() / cells.len() as f64;
                    let _ = writeln!(s, ",{},{},ok", r.average_bleu().unwrap_or(f64::NAN), em);
                }
                Err(e) => {
                    s.push_str(&",".repeat(2 * ids.len() + 2));
                    let _ = writeln!(s, ",failed: {}", e.replace([',', '\n'], " "));
                }
            }
        }
        s
    }

    /// Correlation of α and of β with the average BLEU over successful rows.
    pub fn correlations(&self) -> (Option<f64>, Option<f64>) {
        let ok: Vec<(f64, f64, f64)> = self
            .rows
            .iter()
            .filter_map(|r| Some((r.alpha, r.beta, r.average_bleu()?)))
            .collect();
        let a: Vec<f64> = ok.iter().map(|r| r.0).collect();
        let b: Vec<f64> = ok.iter().map(|r| r.1).collect();
        let y: Vec<f64> = ok.iter().map(|r| r.2).collect();
        (pearson(&a, &y), pearson(&b, &y))
    }

    pub fn correlation_text(&self) -> String {
        let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let (a, b) = self.correlations();
        format!("rho_alpha = {}\nrho_beta = {}\n", f(a), f(b))
    }
}

/// Grid points sorted by (α, β).
pub fn grid(sweep: &SweepSection) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = sweep
        .alphas
        .iter()
        .flat_map(|&a| sweep.betas.iter().map(move |&b| (a, b)))
        .collect();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    pts.dedup();
    pts
}

fn run_point(inp: &SweepInputs<'_>, alpha: f64, beta: f64) -> Result<Vec<Cell>> {
    let spec = PruneSpec { ft_epochs: inp.ft_epochs, ..PruneSpec::new(alpha, beta)? };
    let mut masks = if inp.disjoint { MaskSet::new_disjoint() } else { MaskSet::new() };
    for (tuned, d) in inp.tuned.iter().zip(inp.train) {
        let mut m = if inp.disjoint && !masks.is_empty() {
            magnitude_prune_disjoint(tuned, inp.registry, &spec, &masks)?
        } else {
            magnitude_prune(tuned, inp.registry, &spec)?
        };
        m.domain_id = d.domain_id().to_string();
        masks.push(m)?;
    }
    let refs: Vec<&DomainDataset> = inp.train.iter().collect();
    let (lambda, _) = train_doss(inp.base, inp.registry, inp.model, &masks, &refs, inp.doss_cfg)?;
    inp.test
        .iter()
        .map(|t| {
            let p = crate::mask::overlay(inp.base, &lambda, masks.get(t.domain_id()).expect("mask per domain"))?;
            eval_cell(&p, inp.model, t, EvalOptions::default())
        })
        .collect()
}

/// One joint-training run per grid point. Failed points are recorded and the
/// rest continue.
pub fn run_sweep(inp: &SweepInputs<'_>, sweep: &SweepSection, threads: usize) -> SweepResult {
    let pts = grid(sweep);
    let threads = threads.clamp(1, pts.len().max(1));
    let mut rows: Vec<Option<SweepRow>> = vec![None; pts.len()];
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let pts = &pts;
                s.spawn(move || {
                    (t..pts.len())
                        .step_by(threads)
                        .map(|i| {
                            let (alpha, beta) = pts[i];
                            log::info!("sweep point alpha={alpha} beta={beta}");
                            let outcome = run_point(inp, alpha, beta).map_err(|e| e.to_string());
                            if let Err(e) = &outcome {
                                log::warn!("sweep point alpha={alpha} beta={beta} failed: {e}");
                            }
                            (i, SweepRow { alpha, beta, outcome })
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, row) in h.join().expect("sweep worker panicked") {
                rows[i] = Some(row);
            }
        }
    });
    SweepResult { rows: rows.into_iter().map(|r| r.expect("every point visited")).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0], &[2.0]), None);
    }

    #[test]
    fn grid_is_sorted() {
        let g = grid(&SweepSection { alphas: vec![0.9, 0.4, 0.6], betas: vec![0.8, 0.6] });
        assert_eq!(g.len(), 6);
        assert!(g.windows(2).all(|w| (w[0].0, w[0].1) < (w[1].0, w[1].1)));
        let single = grid(&SweepSection { alphas: vec![0.6], betas: vec![0.6] });
        assert_eq!(single, vec![(0.6, 0.6)]);
    }
}
