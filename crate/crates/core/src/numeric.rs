//! Small numerical kernels shared across modules.

/// Arithmetic mean computed as an offset from the first element, so a
/// constant slice returns that constant bit-for-bit.
pub fn mean(xs: &[f64]) -> f64 {
    let Some(&first) = xs.first() else {
        return f64::NAN;
    };
    first + xs.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by n).
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn min(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `ln(Σ exp(x_i))` with the max subtracted first.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = max(xs);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln((1/n) Σ exp(x_i))`. Returns the common value exactly when all inputs agree.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = max(xs);
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = max(xs);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
