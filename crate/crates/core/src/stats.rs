use alloc::vec::Vec;

/// Percentile with linear interpolation between order statistics
/// (rank `p/100 · (n-1)`), `p` in `[0, 100]`.
pub(crate) fn percentile(values: &[f32], p: f64) -> f32 {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    percentile_sorted(&sorted, p)
}

pub(crate) fn percentile_sorted(sorted: &[f32], p: f64) -> f32 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let rank = p.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    (sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)) as f32
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}
