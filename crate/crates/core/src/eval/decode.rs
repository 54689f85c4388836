use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelGraph, ParamStore, TokenBatch};

/// Greedy decoding. Each output ends with `EOS` unless `max_len` tokens were
/// produced first. Argmax ties go to the lowest token id.
pub fn greedy_decode<R: AsRef<[usize]>>(
    params: &ParamStore,
    config: &ModelConfig,
    src: &[R],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be at least 1".into()));
    }
    if src.is_empty() {
        return Ok(Vec::new());
    }
    let src = TokenBatch::from_rows(src)?;
    let b = src.rows();
    let v = config.vocab_size;
    // the decoder input includes BOS, so at most config.max_len tokens fit
    let steps = max_len.min(config.max_len);
    let mut mg = ModelGraph::new(params, config, None, false);
    let enc = mg.encode(&src)?;
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    for t in 0..steps {
        let prefix: Vec<Vec<usize>> = out.iter().map(|o| std::iter::once(BOS).chain(o.iter().copied()).collect()).collect();
        let tgt_in = TokenBatch::from_rows(&prefix)?;
        let logits = mg.decode(&enc, &tgt_in)?;
        let data = mg.graph.value(logits).data();
        for (i, row) in out.iter_mut().enumerate() {
            if done[i] {
                continue;
            }
            let base = (i * (t + 1) + t) * v;
            let best = argmax_lowest(&data[base..base + v]);
            row.push(best);
            done[i] = best == EOS;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

/// Index of the first maximum.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}
