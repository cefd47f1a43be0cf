//! Helpers shared by the in-crate test modules: seeded RNG, random tensors,
//! tolerance assertions, and a central-difference oracle.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect())
}

/// Asserts `|a - b| <= tol * max(1, |a|, |b|)` — relative with a unit floor,
/// so comparisons of near-zero values degrade to an absolute check.
pub(crate) fn assert_close(a: f64, b: f64, tol: f64) {
    let gap = (a - b).abs();
    let scale = 1.0_f64.max(a.abs()).max(b.abs());
    assert!(gap <= tol * scale, "{a} vs {b}: gap {gap:.3e} > tol {tol:.1e}");
}

/// Worst elementwise gap `|a - b| / max(1, |a|, |b|)` over two slices.
pub(crate) fn grad_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "grad_gap: length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1.0_f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

/// Worst elementwise relative error with a tiny absolute floor in the
/// denominator; for comparisons where both sides are expected nonzero.
pub(crate) fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_err: length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function of a flat f64 vector.
pub(crate) fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            hi[i] += h;
            let mut lo = x.to_vec();
            lo[i] -= h;
            (f(&hi) - f(&lo)) / (2.0 * h)
        })
        .collect()
}
