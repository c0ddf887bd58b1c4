//! Row-wise primitives with hand-written derivatives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const LN_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub fn layer_norm(
    x: ArrayView2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &gain + &bias;
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `dx` and accumulates `dgain`, `dbias`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    gain: ArrayView1<f64>,
    cache: &LayerNormCache,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = &dy * &gain;
    for ((mut row, xh), &r) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(&cache.rstd)
    {
        let mean_dxhat = row.sum() / d;
        let mean_dxhat_xhat = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|g, &xv| *g = r * (*g - mean_dxhat - xv * mean_dxhat_xhat));
    }
    dx
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// In-place numerically stable softmax over each row. Rows whose entries are
/// all `-inf` are left as zeros.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|e| (e - max).exp());
        let inv = 1.0 / row.sum();
        row.mapv_inplace(|e| e * inv);
    }
}

/// `log Σ exp(row)`.
pub fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let x = array![[0.3, -1.2, 2.0, 0.5], [1.0, 1.1, -0.4, 0.0]];
        let g = array![1.5, 0.5, -1.0, 2.0];
        let b = array![0.1, 0.2, 0.3, 0.4];
        let w = array![[0.7, -0.2, 0.9, 1.3], [-0.5, 0.8, 0.1, -1.1]];
        let f = |x: &Array2<f64>| (&layer_norm(x.view(), g.view(), b.view()).0 * &w).sum();
        let (_, cache) = layer_norm(x.view(), g.view(), b.view());
        let mut dg = Array1::zeros(4);
        let mut db = Array1::zeros(4);
        let dx = layer_norm_backward(w.view(), g.view(), &cache, &mut dg, &mut db);
        for i in 0..2 {
            for j in 0..4 {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(array![1.0, 3.0, 3.0, 0.0].view()), 1);
        assert_eq!(argmax(array![2.0, 2.0].view()), 0);
    }

    #[test]
    fn softmax_handles_masked_rows() {
        let mut s = array![[0.0, f64::NEG_INFINITY], [1.0, 1.0]];
        softmax_rows(&mut s);
        assert_eq!(s, array![[1.0, 0.0], [0.5, 0.5]]);
    }
}
