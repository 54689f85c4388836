use crate::error::{Error, Result};

/// Linear warmup to `base_lr`, then inverse square-root decay:
/// `base_lr · min(step/warmup, √(warmup/step))`.
pub fn lr_schedule(step: u64, warmup: u64, base_lr: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Input("learning-rate schedule starts at step 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup must be at least 1 step".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(base_lr * (s / w).min((w / s).sqrt()))
}
