//! Forward kernels shared by the eager API and the tape.

use super::{KernelError, Mode, Tensor};

/// Default momentum of the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;
/// Default normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;

/// `C = op(A) * op(B)` where `op` optionally transposes; `A` is stored as
/// `a_rows x a_cols` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
) -> (Vec<f64>, usize, usize) {
    let (m, k, rsa, csa) = if trans_a {
        (a_cols, a_rows, 1isize, a_cols as isize)
    } else {
        (a_rows, a_cols, a_cols as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (b_cols, b_rows, 1isize, b_cols as isize)
    } else {
        (b_rows, b_cols, b_cols as isize, 1isize)
    };
    debug_assert_eq!(k, k2);
    let mut c = vec![0.0; m * n];
    // SAFETY: the strides describe exactly the row-major buffers above, all
    // indices stay within `a`, `b` and `c` by construction of (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (c, m, n)
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), KernelError> {
    if t.shape().len() != 2 {
        return Err(KernelError::NotAMatrix {
            op,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Matrix product of an `m x k` and a `k x n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(KernelError::DimensionMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (c, _, _) = gemm(a.data(), m, k, false, b.data(), k, n, false);
    Tensor::matrix(m, n, c)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Exponential moving averages of per-feature batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: BN_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    /// Folds in one batch; `batch_var` is the biased variance over `n` rows and
    /// is converted to the unbiased estimate before averaging.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], n: usize) {
        let correction = n as f64 / (n as f64 - 1.0);
        let mom = self.momentum;
        for j in 0..self.mean.len() {
            self.mean[j] = (1.0 - mom) * self.mean[j] + mom * batch_mean[j];
            self.var[j] = (1.0 - mom) * self.var[j] + mom * batch_var[j] * correction;
        }
    }
}

pub(crate) struct NormForward {
    pub y: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_affine(op: &'static str, x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<(usize, usize), KernelError> {
    let (b, f) = require_matrix(op, x)?;
    for p in [scale, shift] {
        if p.len() != f {
            return Err(KernelError::DimensionMismatch {
                op,
                left: x.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    Ok((b, f))
}

fn check_eps(eps: f64) -> Result<(), KernelError> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidArgument(format!("eps must be positive, got {eps}")))
    }
}

pub(crate) fn batch_norm_train_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<NormForward, KernelError> {
    let (b, f) = check_affine("batch_norm", x, scale, shift)?;
    check_eps(eps)?;
    if b < 2 {
        return Err(KernelError::DegenerateBatch { rows: b });
    }
    let xs = x.data();
    let mut mean = vec![0.0; f];
    for row in xs.chunks_exact(f) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv_b = 1.0 / b as f64;
    mean.iter_mut().for_each(|m| *m *= inv_b);
    let mut var = vec![0.0; f];
    for row in xs.chunks_exact(f) {
        for j in 0..f {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_b);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (xhat, y) = standardize_columns(xs, f, &mean, &inv_std, scale.data(), shift.data());
    Ok(NormForward {
        y: Tensor::matrix(b, f, y)?,
        xhat,
        inv_std,
        mean,
        var,
    })
}

fn standardize_columns(
    xs: &[f64],
    f: usize,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    shift: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; xs.len()];
    let mut y = vec![0.0; xs.len()];
    for ((row, hrow), yrow) in xs
        .chunks_exact(f)
        .zip(xhat.chunks_exact_mut(f))
        .zip(y.chunks_exact_mut(f))
    {
        for j in 0..f {
            let h = (row[j] - mean[j]) * inv_std[j];
            hrow[j] = h;
            yrow[j] = scale[j] * h + shift[j];
        }
    }
    (xhat, y)
}

pub(crate) fn batch_norm_eval_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    stats: &RunningStats,
    eps: f64,
) -> Result<NormForward, KernelError> {
    let (b, f) = check_affine("batch_norm", x, scale, shift)?;
    if stats.features() != f {
        return Err(KernelError::DimensionMismatch {
            op: "batch_norm",
            left: x.shape().to_vec(),
            right: vec![stats.features()],
        });
    }
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (xhat, y) = standardize_columns(x.data(), f, &stats.mean, &inv_std, scale.data(), shift.data());
    Ok(NormForward {
        y: Tensor::matrix(b, f, y)?,
        xhat,
        inv_std,
        mean: stats.mean.clone(),
        var: stats.var.clone(),
    })
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<NormForward, KernelError> {
    let (b, f) = check_affine("layer_norm", x, scale, shift)?;
    check_eps(eps)?;
    let (sc, sh) = (scale.data(), shift.data());
    let mut xhat = vec![0.0; b * f];
    let mut y = vec![0.0; b * f];
    let mut mean = vec![0.0; b];
    let mut var = vec![0.0; b];
    let mut inv_std = vec![0.0; b];
    for (i, row) in x.data().chunks_exact(f).enumerate() {
        let m = row.iter().sum::<f64>() / f as f64;
        let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / f as f64;
        let is = 1.0 / (v + eps).sqrt();
        for j in 0..f {
            let h = (row[j] - m) * is;
            xhat[i * f + j] = h;
            y[i * f + j] = sc[j] * h + sh[j];
        }
        mean[i] = m;
        var[i] = v;
        inv_std[i] = is;
    }
    Ok(NormForward {
        y: Tensor::matrix(b, f, y)?,
        xhat,
        inv_std,
        mean,
        var,
    })
}

/// Batch normalization over the rows of `x`.
///
/// Train mode standardizes with the batch mean and biased variance and folds
/// the batch statistics into `state`; eval mode uses `state` and leaves it
/// untouched.
pub fn batch_norm(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    state: &mut RunningStats,
    mode: Mode,
    eps: f64,
) -> Result<Tensor, KernelError> {
    match mode {
        Mode::Train => {
            let out = batch_norm_train_forward(x, scale, shift, eps)?;
            state.update(&out.mean, &out.var, x.rows());
            Ok(out.y)
        }
        Mode::Eval => Ok(batch_norm_eval_forward(x, scale, shift, state, eps)?.y),
    }
}

/// Layer normalization across the features of each row.
pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor, KernelError> {
    Ok(layer_norm_forward(x, scale, shift, eps)?.y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for r in 0..k {
                    s += a.at(i, r) * b.at(r, j);
                }
                c[i * n + j] = s;
            }
        }
        Tensor::matrix(m, n, c).unwrap()
    }

    fn lcg_matrix(rows: usize, cols: usize, seed: &mut u64) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let a = Tensor::matrix(2, 2, vec![1.5, -2.0, 0.25, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn one_by_one_product() {
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut seed = 7;
        let a = lcg_matrix(3, 3, &mut seed);
        let b = lcg_matrix(3, 3, &mut seed);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-14);
        }
    }

    #[test]
    fn transposed_gemm_variants() {
        let mut seed = 11;
        let a = lcg_matrix(5, 3, &mut seed);
        let b = lcg_matrix(5, 4, &mut seed);
        let (c, m, n) = gemm(a.data(), 5, 3, true, b.data(), 5, 4, false);
        let expect = naive_matmul(&a.transpose(), &b);
        assert_eq!((m, n), (3, 4));
        for (x, y) in c.iter().zip(expect.data()) {
            assert!((x - y).abs() <= 1e-14);
        }
        let d = lcg_matrix(6, 4, &mut seed);
        let (c, m, n) = gemm(b.data(), 5, 4, false, d.data(), 6, 4, true);
        let expect = naive_matmul(&b, &d.transpose());
        assert_eq!((m, n), (5, 6));
        for (x, y) in c.iter().zip(expect.data()) {
            assert!((x - y).abs() <= 1e-14);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(KernelError::DimensionMismatch { .. })));
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn batch_norm_two_rows() {
        let x = Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        let one = Tensor::full(&[1], 1.0);
        let zero = Tensor::zeros(&[1]);
        let mut st = RunningStats::new(1);
        let y = batch_norm(&x, &one, &zero, &mut st, Mode::Train, 1e-5).unwrap();
        let z = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - z).abs() < 1e-15);
        assert!((y.data()[1] + z).abs() < 1e-15);
        // running var uses the unbiased estimate 2.0
        assert!((st.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
        assert_eq!(st.mean[0], 0.0);
    }

    #[test]
    fn batch_norm_constant_column_yields_shift() {
        let x = Tensor::matrix(3, 1, vec![4.2; 3]).unwrap();
        let mut st = RunningStats::new(1);
        let y = batch_norm(
            &x,
            &Tensor::full(&[1], 2.0),
            &Tensor::full(&[1], 0.7),
            &mut st,
            Mode::Train,
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn batch_norm_eval_identity() {
        let x = Tensor::matrix(2, 2, vec![0.3, -1.2, 5.0, 0.0]).unwrap();
        let mut st = RunningStats::new(2);
        let y = batch_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), &mut st, Mode::Eval, 0.0).unwrap();
        assert_eq!(y, x);
        assert_eq!(st, RunningStats::new(2));
    }

    #[test]
    fn batch_norm_rejects_single_row() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let mut st = RunningStats::new(2);
        let r = batch_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), &mut st, Mode::Train, 1e-5);
        assert!(matches!(r, Err(KernelError::DegenerateBatch { rows: 1 })));
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::full(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(), &one, &zero, 1e-5).unwrap();
        let z = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - z).abs() < 1e-15 && (y.data()[1] + z).abs() < 1e-15);

        let shift = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let y = layer_norm(&Tensor::matrix(1, 2, vec![3.0, 3.0]).unwrap(), &one, &shift, 1e-5).unwrap();
        assert_eq!(y.data(), shift.data());

        let y = layer_norm(
            &Tensor::matrix(3, 1, vec![1.0, -7.0, 2.5]).unwrap(),
            &Tensor::full(&[1], 3.0),
            &Tensor::full(&[1], 0.125),
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.125));
    }

    #[test]
    fn batch_norm_standardizes_columns() {
        let mut seed = 99;
        let x = lcg_matrix(64, 5, &mut seed).map(|v| 3.0 * v + 1.0);
        let eps = 1e-5;
        let mut st = RunningStats::new(5);
        let y = batch_norm(&x, &Tensor::full(&[5], 1.0), &Tensor::zeros(&[5]), &mut st, Mode::Train, eps).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = (0..64).map(|i| x.at(i, j)).collect();
            let m = col.iter().sum::<f64>() / 64.0;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 64.0;
            let out: Vec<f64> = (0..64).map(|i| y.at(i, j)).collect();
            let om = out.iter().sum::<f64>() / 64.0;
            let ov = out.iter().map(|c| (c - om) * (c - om)).sum::<f64>() / 64.0;
            assert!(om.abs() <= 1e-10);
            assert!((ov - v / (v + eps)).abs() <= 1e-8);
        }
    }
}
