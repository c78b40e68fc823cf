//! Plain softmax cross-entropy over the fine classes only.

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Same as [`logsumexp`] over the indexed subset `xs[idx]`.
pub fn logsumexp_subset(xs: &[f64], idx: &[usize]) -> f64 {
    let max = idx.iter().map(|&i| xs[i]).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = idx.iter().map(|&i| (xs[i] - max).exp()).sum();
    max + s.ln()
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let lz = logsumexp(f);
    f.iter().map(|&x| (x - lz).exp()).collect()
}

/// `-log softmax(f)[y]`.
pub fn cross_entropy(f: &[f64], y: usize) -> f64 {
    logsumexp(f) - f[y]
}

/// Gradient of [`cross_entropy`] with respect to `f`: `p - onehot(y)`.
pub fn cross_entropy_grad(f: &[f64], y: usize) -> Vec<f64> {
    let mut g = softmax(f);
    g[y] -= 1.0;
    g
}
