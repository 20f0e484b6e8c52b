//! Shared helpers for unit tests.  Compiled only under `cfg(test)`.

use ndarray::Array2;

/// Scaling-and-squaring Taylor matrix exponential, used purely as an
/// independent oracle on dense-sized problems.
pub(crate) fn dense_expm(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let norm = a
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let k = norm.log2().ceil().max(0.0) as u32 + 1;
    let scaled = a.mapv(|x| x / f64::powi(2.0, k as i32));
    let mut result = Array2::eye(n);
    let mut term = Array2::eye(n);
    for j in 1..=24 {
        term = term.dot(&scaled).mapv(|x| x / j as f64);
        result = result + &term;
    }
    for _ in 0..k {
        result = result.dot(&result);
    }
    result
}
