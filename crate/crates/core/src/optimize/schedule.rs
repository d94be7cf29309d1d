//! Linear warmup over the first fifth of a stage, then cosine decay.

/// Learning rate at iteration `iter` of an `n_iters` stage.
///
/// Warmup is `base·(iter+1)/(0.2·n)`, capped at `base` for stages shorter
/// than five iterations; decay is `base·½(1 + cos(π(iter − 0.2n)/(0.8n)))`.
pub fn lr_at(iter: usize, n_iters: usize, base_lr: f64) -> f64 {
    let n = n_iters.max(1) as f64;
    let warm = 0.2 * n;
    let it = iter as f64;
    if it < warm {
        base_lr * ((it + 1.0) / warm).min(1.0)
    } else {
        let phase = (it - warm) / (0.8 * n);
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}
