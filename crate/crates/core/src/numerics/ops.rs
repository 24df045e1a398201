//! Forward kernels shared by the pure tensor API and the autodiff graph.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Mask, Real, Tensor};

/// `c (m×n) = alpha * op(a) · op(b) + beta * c`, where `op(a)` is `m×k` and
/// `op(b)` is `k×n`. With `ta` the buffer `a` holds a `k×m` matrix; with
/// `tb` the buffer `b` holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    alpha: F,
    beta: F,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and `c` is a distinct &mut.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product of `a [m×k]` and `b [k×n]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        a.data(),
        b.data(),
        out.data_mut(),
        m,
        k,
        n,
        false,
        false,
        F::one(),
        F::zero(),
    );
    Ok(out)
}

/// Numerically stable softmax of one row in place. Entries that are `-inf`
/// or flagged in `mask` come out as exactly zero.
pub(crate) fn softmax_row<F: Real>(row: &mut [F], mask: Option<&[bool]>, row_idx: usize) -> Result<()> {
    let live = |j: usize, x: F| x != F::neg_infinity() && !mask.is_some_and(|m| m[j]);
    let mut max = F::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if live(j, x) && x > max {
            max = x;
        }
    }
    if max == F::neg_infinity() {
        return Err(Error::EmptySupport { row: row_idx });
    }
    let mut sum = F::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if live(j, *x) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = F::zero();
        }
    }
    let inv = sum.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

/// Row-wise softmax over the last dimension with optional boolean mask
/// (`true` = excluded). Masked entries are exactly zero in the output.
pub fn softmax_rows<F: Real>(scores: &Tensor<F>, mask: Option<&Mask>) -> Result<Tensor<F>> {
    if let Some(m) = mask {
        if m.shape() != scores.shape() {
            return Err(Error::shape("softmax_rows", scores.shape(), m.shape()));
        }
    }
    let mut out = scores.clone();
    let n = out.last_dim();
    for r in 0..out.rows() {
        let mrow = mask.map(|m| &m.data()[r * n..(r + 1) * n]);
        softmax_row(out.row_mut(r), mrow, r)?;
    }
    Ok(out)
}

/// Normalized rows plus the per-row statistics the backward pass needs.
pub(crate) struct LayerNormOut<F> {
    pub y: Tensor<F>,
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn layer_norm_forward<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<LayerNormOut<F>> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let rows = x.rows();
    let mut y = x.clone();
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd.push(rs);
        let yr = y.row_mut(r);
        let hr = &mut xhat[r * d..(r + 1) * d];
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            hr[j] = h;
            yr[j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNormOut { y, xhat, rstd })
}

/// Layer normalization over the last dimension followed by the affine
/// `gain * xhat + bias`.
pub fn layer_norm<F: Real>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    Ok(layer_norm_forward(x, gain, bias, eps)?.y)
}

pub(crate) fn check_targets<F: Real>(logits: &Tensor<F>, targets: &[usize], ignore: &[bool]) -> Result<usize> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() || targets.len() != ignore.len() {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[targets.len(), ignore.len()],
        ));
    }
    let v = logits.shape()[1];
    if let Some(&t) = targets.iter().zip(ignore).find(|(&t, &ig)| !ig && t >= v).map(|(t, _)| t) {
        return Err(Error::InvalidArgument(format!("target id {t} outside vocabulary of {v}")));
    }
    let kept = ignore.iter().filter(|&&ig| !ig).count();
    if kept == 0 {
        return Err(Error::InvalidArgument("cross_entropy: every position is ignored".into()));
    }
    Ok(kept)
}

/// Mean negative log-likelihood (natural log) over non-ignored rows.
pub fn cross_entropy<F: Real>(logits: &Tensor<F>, targets: &[usize], ignore: &[bool]) -> Result<F> {
    let kept = check_targets(logits, targets, ignore)?;
    let mut total = F::zero();
    for (r, (&t, &ig)) in targets.iter().zip(ignore).enumerate() {
        if ig {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
        total += lse - row[t];
    }
    Ok(total / F::of(kept as f64))
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        Tensor::new(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 3], &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[3, 2])).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn gemm_transposed_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[4, 3], &mut rng); // used as aᵀ: 3×4
        let b = random(&[5, 4], &mut rng); // used as bᵀ: 4×5
        let mut c = vec![0.0; 15];
        gemm(a.data(), b.data(), &mut c, 3, 4, 5, true, true, 1.0, 0.0);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|l| a.data()[l * 3 + i] * b.data()[j * 4 + l]).sum();
                assert!((c[i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let s = Tensor::new(&[1, 3], vec![0.0f64; 3]).unwrap();
        let p = softmax_rows(&s, None).unwrap();
        for &x in p.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::new(&[1, 2], vec![0.7f64, f64::NEG_INFINITY]).unwrap();
        assert_eq!(softmax_rows(&s, None).unwrap().data(), &[1.0, 0.0]);
        let mask = Tensor::new(&[1, 2], vec![false, true]).unwrap();
        let s = Tensor::new(&[1, 2], vec![0.7f64, 3.0]).unwrap();
        assert_eq!(softmax_rows(&s, Some(&mask)).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let s = Tensor::new(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let p = softmax_rows(&s, None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p.data()[i] - x.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let s = Tensor::new(&[2, 2], vec![0.0f64, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        let err = softmax_rows(&s, None).unwrap_err();
        assert!(err.to_string().contains("empty attention support"));
        assert!(matches!(err, Error::EmptySupport { row: 1 }));
    }

    #[test]
    fn layer_norm_cases() {
        let d = 5;
        let ones = Tensor::full(&[d], 1.0f64);
        let zeros = Tensor::zeros(&[d]);
        let c = Tensor::full(&[1, d], 3.25f64);
        let y = layer_norm(&c, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, d], &mut rng);
        let bias = random(&[d], &mut rng);
        let y = layer_norm(&x, &zeros, &bias, 1e-5).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), bias.data());
        }

        let gain = random(&[d], &mut rng);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for r in 0..2 {
            let xr = x.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                let want = (xr[j] - mean) / (var + 1e-5).sqrt() * gain.data()[j] + bias.data()[j];
                assert!((y.row(r)[j] - want).abs() < 1e-10);
            }
        }
        assert!(layer_norm(&x, &Tensor::zeros(&[d + 1]), &bias, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let logits = Tensor::new(&[1, 4], vec![0.0f64; 4]).unwrap();
        let l = cross_entropy(&logits, &[2], &[false]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let confident = Tensor::new(&[1, 3], vec![-500.0f64, 500.0, -500.0]).unwrap();
        assert!(cross_entropy(&confident, &[1], &[false]).unwrap() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random(&[2, 3], &mut rng);
        let t = [2usize, 0];
        let got = cross_entropy(&z, &t, &[false, false]).unwrap();
        let mut want = 0.0;
        for r in 0..2 {
            let row = z.row(r);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[t[r]];
        }
        assert!((got - want / 2.0).abs() < 1e-10);

        let ig = cross_entropy(&z, &t, &[true, false]).unwrap();
        let row = z.row(1);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((ig - (lse - row[0])).abs() < 1e-12);

        assert!(cross_entropy(&z, &t, &[true, true]).is_err());
        assert!(cross_entropy(&z, &[3, 0], &[false, false]).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(800.0f64) == 1.0);
        assert!(sigmoid(-800.0f64) >= 0.0);
        let x = 0.37f64;
        assert!((sigmoid(x) - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
    }
}
