//! Shared test oracles: central finite differences and a full-sort mask count.
#![allow(dead_code)]

use std::collections::HashMap;

use doss_core::autograd::{DropoutCtx, Graph, Var};
use doss_core::data::Batch;
use doss_core::mask::{DomainMask, PruneSpec};
use doss_core::model::{loss_and_grads, ModelConfig, ParamStore, ParameterRegistry, Region};
use doss_core::rng::{mix64, unit_f64};
use doss_core::{Result, Tensor};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Below this magnitude both gradients count as zero and the absolute
/// difference is compared instead.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        d / ABS_FLOOR
    } else {
        d / scale
    }
}

/// Uniform values in `[lo, hi)` from a counter-based stream.
pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64).map(|i| lo + (hi - lo) * unit_f64(mix64(seed ^ mix64(i)))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `op` over fresh leaves for `inputs`, then reduces its output with a
/// fixed random weighting so every output element contributes to the loss.
fn eval_op<F>(op: &F, inputs: &[Tensor], dropout: Option<DropoutCtx>) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = dropout.map_or_else(Graph::new, Graph::with_dropout);
    let vars = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), true, Some(format!("x{i}"))))
        .collect::<Result<Vec<_>>>()?;
    let out = op(&mut g, &vars)?;
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let w = rand_tensor(g.value(out).shape(), 0xfeed, -1.0, 1.0);
        let w = g.input(w)?;
        let prod = g.mul(out, w)?;
        g.sum(prod)?
    };
    Ok((g, vars, loss))
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input.
pub fn op_grad_error<F>(op: F, inputs: &[Tensor], dropout: Option<DropoutCtx>) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = eval_op(&op, inputs, dropout).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let f = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += delta;
                let (g, _, loss) = eval_op(&op, &xs, dropout).unwrap();
                g.value(loss).data()[0]
            };
            let numeric = (f(H) - f(-H)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Largest relative error of the full teacher-forced loss with respect to the
/// selected elements of every parameter tensor. `per_tensor = None` checks
/// every element.
pub fn model_grad_error(
    params: &ParamStore,
    config: &ModelConfig,
    batch: &Batch,
    dropout: Option<DropoutCtx>,
    per_tensor: Option<usize>,
) -> (f64, usize) {
    let (_, grads) = loss_and_grads(params, config, &batch.src, &batch.tgt_in, &batch.tgt_out, dropout).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, t) in params.iter() {
        let analytic = grads.get(name).unwrap();
        let picks: Vec<usize> = match per_tensor {
            None => (0..t.len()).collect(),
            Some(k) => (0..k as u64).map(|i| (mix64(crate_seed(name) ^ i) % t.len() as u64) as usize).collect(),
        };
        for j in picks {
            let f = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[j] += delta;
                loss_and_grads(&p, config, &batch.src, &batch.tgt_in, &batch.tgt_out, dropout).unwrap().0
            };
            let numeric = (f(H) - f(-H)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

fn crate_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Smallest full transformer: one layer on each side.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        d_model: 8,
        ffn_dim: 12,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        dropout: 0.1,
        max_len: 16,
        tie_embeddings: false,
    }
}

pub fn toy_batch(vocab: usize) -> Batch {
    let v = |x: usize| 4 + x % (vocab - 4);
    let a: Vec<usize> = (0..5).map(v).collect();
    let b: Vec<usize> = (3..6).map(v).collect();
    let ta: Vec<usize> = a.iter().rev().copied().collect();
    let tb: Vec<usize> = (1..6).map(v).collect();
    Batch::from_pairs(0, "t", &[(&a, &ta), (&b, &tb)]).unwrap()
}

/// Ones count per region computed by sorting every magnitude in the pool.
/// Ties at the threshold are not resolved, so the count may exceed the target
/// only when equal magnitudes straddle the cut.
pub fn full_sort_keep(params: &ParamStore, registry: &ParameterRegistry, spec: &PruneSpec, region: Region) -> usize {
    let mut mags: Vec<f64> = registry
        .pool(region)
        .flat_map(|p| params.get(&p.name).unwrap().data().iter().map(|v| v.abs()))
        .collect();
    let pool = mags.len();
    let frac = match region {
        Region::Encoder => spec.alpha,
        Region::Decoder => spec.beta,
    };
    let target = ((1.0 - frac) * pool as f64).round() as usize;
    if target == 0 {
        return 0;
    }
    mags.sort_by(|a, b| b.total_cmp(a));
    let threshold = mags[target - 1];
    mags.iter().filter(|&&m| m >= threshold).count()
}

pub fn ones_in(mask: &DomainMask, registry: &ParameterRegistry, region: Region) -> usize {
    mask.count_ones_in(registry, region) as usize
}

/// Finite-difference error for every differentiable graph operation.
pub fn all_op_errors() -> Vec<(&'static str, f64)> {
    let r = |shape: &[usize], seed: u64| rand_tensor(shape, seed, -1.0, 1.0);
    // ReLU inputs kept away from the kink.
    let mut relu_in = r(&[3, 5], 9);
    for v in relu_in.data_mut() {
        *v += 0.1f64.copysign(*v);
    }
    let ctx = Some(DropoutCtx { seed: 7, step: 3 });
    vec![
        ("matmul", op_grad_error(|g, v| g.matmul(v[0], v[1]), &[r(&[3, 4], 1), r(&[4, 2], 2)], None)),
        ("matmul_rank3", op_grad_error(|g, v| g.matmul(v[0], v[1]), &[r(&[2, 3, 4], 3), r(&[4, 5], 4)], None)),
        ("bmm", op_grad_error(|g, v| g.bmm(v[0], v[1], false), &[r(&[2, 3, 4], 5), r(&[2, 4, 2], 6)], None)),
        ("bmm_transposed", op_grad_error(|g, v| g.bmm(v[0], v[1], true), &[r(&[2, 3, 4], 7), r(&[2, 5, 4], 8)], None)),
        ("add", op_grad_error(|g, v| g.add(v[0], v[1]), &[r(&[2, 3], 10), r(&[2, 3], 11)], None)),
        ("add_row", op_grad_error(|g, v| g.add_row(v[0], v[1]), &[r(&[2, 3, 4], 12), r(&[4], 13)], None)),
        (
            "add_const",
            op_grad_error(|g, v| g.add_const(v[0], &rand_tensor(&[3, 3], 99, -1.0, 1.0)), &[r(&[3, 3], 14)], None),
        ),
        ("mul", op_grad_error(|g, v| g.mul(v[0], v[1]), &[r(&[4, 3], 15), r(&[4, 3], 16)], None)),
        ("scale", op_grad_error(|g, v| g.scale(v[0], -2.5), &[r(&[5], 17)], None)),
        ("relu", op_grad_error(|g, v| g.relu(v[0]), &[relu_in], None)),
        ("softmax_last", op_grad_error(|g, v| g.softmax(v[0], 1), &[r(&[3, 5], 18)], None)),
        ("softmax_axis0", op_grad_error(|g, v| g.softmax(v[0], 0), &[r(&[3, 2, 4], 19)], None)),
        (
            "layer_norm",
            op_grad_error(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &[r(&[3, 6], 20), r(&[6], 21), r(&[6], 22)], None),
        ),
        ("gather", op_grad_error(|g, v| g.gather(v[0], &[2, 0, 2, 3]), &[r(&[5, 3], 23)], None)),
        ("reshape", op_grad_error(|g, v| g.reshape(v[0], &[3, 4]), &[r(&[2, 6], 24)], None)),
        ("permute", op_grad_error(|g, v| g.permute(v[0], &[2, 0, 1]), &[r(&[2, 3, 4], 25)], None)),
        ("dropout", op_grad_error(|g, v| g.dropout(v[0], 0.3, "site"), &[r(&[4, 5], 26)], ctx)),
        (
            "cross_entropy",
            op_grad_error(|g, v| g.cross_entropy(v[0], &[1, 0, 4, 2], 0), &[rand_tensor(&[4, 6], 27, -3.0, 3.0)], None),
        ),
        ("sum", op_grad_error(|g, v| g.sum(v[0]), &[r(&[3, 3], 28)], None)),
    ]
}

fn ngrams(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Straightforward corpus BLEU: clipped counts per sentence summed over the
/// corpus, add-one smoothing from bigrams on, brevity penalty on total lengths.
pub fn oracle_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let (mut c, mut r) = (0usize, 0usize);
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngrams(h, n);
            let rc = ngrams(rf, n);
            for (g, k) in &hc {
                matches[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if c == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut log_sum = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_sum += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (log_sum / 4.0).exp()
}
