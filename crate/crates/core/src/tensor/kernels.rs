//! Slice-level forward and backward kernels. The tape calls these; tests and
//! oracles may call them directly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 1e-1;

fn check_finite<T: Scalar>(x: &[T], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericDomain(format!("non-finite value in {what}")))
    }
}

/// Standard normal CDF.
fn phi_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    check_finite(x, "gelu input")?;
    Ok(x.iter().map(|&v| v * phi_cdf(v)).collect())
}

/// GELU values together with the `Φ(x)` factors reused by the backward pass.
pub fn gelu_with_cdf<T: Scalar>(x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_finite(x, "gelu input")?;
    let cdf: Vec<T> = x.iter().map(|&v| phi_cdf(v)).collect();
    Ok((x.iter().zip(&cdf).map(|(&v, &c)| v * c).collect(), cdf))
}

pub fn gelu_backward<T: Scalar>(x: &[T], grad_out: &[T]) -> Vec<T> {
    let cdf: Vec<T> = x.iter().map(|&v| phi_cdf(v)).collect();
    gelu_backward_with_cdf(x, &cdf, grad_out)
}

/// `d/dx x·Φ(x) = Φ(x) + x·φ(x)`, given the forward pass's `Φ(x)`.
pub fn gelu_backward_with_cdf<T: Scalar>(x: &[T], cdf: &[T], grad_out: &[T]) -> Vec<T> {
    let inv_sqrt_2pi =
        T::from_f64(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
    x.iter()
        .zip(cdf)
        .zip(grad_out)
        .map(|((&v, &c), &g)| {
            let pdf = inv_sqrt_2pi * (-(v * v) * T::from_f64(0.5)).exp();
            g * (c + v * pdf)
        })
        .collect()
}

/// `(batch, channels, inner)` decomposition with the channel axis at index 1.
pub fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "expected at least 2 axes (batch, channel), got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel statistics and normalized values saved for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch normalization over every axis except axis 1.
///
/// With `stats = None` the batch statistics are used (training); otherwise the
/// supplied `(mean, var)` pair is used (evaluation).
pub fn batch_norm<T: Scalar>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
) -> Result<(Vec<T>, BatchNormSaved<T>)> {
    let (b, c, inner) = channel_layout(shape)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batch norm over {c} channels given gamma/beta of length {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput("batch norm on zero-element batch".into()));
    }
    check_finite(x, "batch norm input")?;
    let count = T::from_f64((b * inner) as f64);
    let (mean, var) = match stats {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("running statistics length mismatch"));
            }
            (m.to_vec(), v.to_vec())
        }
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for n in 0..b {
                    let base = (n * c + ch) * inner;
                    s += x[base..base + inner].iter().copied().sum::<T>();
                }
                let m = s / count;
                let mut q = T::zero();
                for n in 0..b {
                    let base = (n * c + ch) * inner;
                    q += x[base..base + inner]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
                mean[ch] = m;
                var[ch] = q / count;
            }
            (mean, var)
        }
    };
    let eps = T::from_f64(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            for i in base..base + inner {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    Ok((
        y,
        BatchNormSaved {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &[T],
    saved: &BatchNormSaved<T>,
    training: bool,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, inner) = channel_layout(shape).expect("validated in forward");
    let count = T::from_f64((b * inner) as f64);
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            for i in base..base + inner {
                g_beta[ch] += grad_out[i];
                g_gamma[ch] += grad_out[i] * saved.xhat[i];
            }
        }
    }
    let mut gx = vec![T::zero(); grad_out.len()];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * inner;
            let scale = gamma[ch] * saved.inv_std[ch];
            for i in base..base + inner {
                gx[i] = if training {
                    scale * (grad_out[i] - g_beta[ch] / count - saved.xhat[i] * g_gamma[ch] / count)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (gx, g_gamma, g_beta)
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for {shape:?}"
        )));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// `Softmax(logits / tau)` along `axis` with max subtraction.
pub fn softmax_with_temperature<T: Scalar>(
    logits: &[T],
    shape: &[usize],
    tau: f64,
    axis: usize,
) -> Result<Vec<T>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    check_finite(logits, "softmax logits")?;
    let (outer, len, inner) = axis_layout(shape, axis)?;
    let inv_tau = T::from_f64(1.0 / tau);
    let mut out = vec![T::zero(); logits.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len)
                .map(|k| logits[idx(k)])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..len {
                let e = ((logits[idx(k)] - max) * inv_tau).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    Ok(out)
}

pub fn softmax_backward<T: Scalar>(
    y: &[T],
    shape: &[usize],
    tau: f64,
    axis: usize,
    grad_out: &[T],
) -> Vec<T> {
    let (outer, len, inner) = axis_layout(shape, axis).expect("validated in forward");
    let inv_tau = T::from_f64(1.0 / tau);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| grad_out[idx(k)] * y[idx(k)]).sum();
            for k in 0..len {
                gx[idx(k)] = inv_tau * y[idx(k)] * (grad_out[idx(k)] - dot);
            }
        }
    }
    gx
}

/// Mean over every spatial position of a `B×C×D×H×W` tensor.
pub fn adaptive_avg_pool3d_to_unit<T: Scalar>(x: &[T], shape: &[usize]) -> Result<Vec<T>> {
    if shape.len() != 5 {
        return Err(Error::shape(format!(
            "adaptive pooling expects B×C×D×H×W, got {shape:?}"
        )));
    }
    let inner: usize = shape[2..].iter().product();
    let denom = T::from_f64((inner) as f64);
    Ok(x.chunks_exact(inner)
        .map(|c| c.iter().copied().sum::<T>() / denom)
        .collect())
}

pub fn adaptive_avg_pool3d_backward<T: Scalar>(shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let inner: usize = shape[2..].iter().product();
    let denom = T::from_f64((inner) as f64);
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / denom, inner))
        .collect()
}

/// Output extent of ceil-mode pooling with window and stride `f`.
pub fn pooled_extent(n: usize, f: usize) -> usize {
    n.div_ceil(f)
}

/// Average pooling with window `f` and stride `f` on D, H and W. Edge windows
/// average only the in-bounds elements.
pub fn avg_pool3d_down<T: Scalar>(
    x: &[T],
    shape: &[usize],
    f: usize,
) -> Result<(Vec<T>, Vec<usize>)> {
    if f < 1 {
        return Err(Error::param("pooling factor must be at least 1"));
    }
    if shape.len() != 5 {
        return Err(Error::shape(format!(
            "pooling expects 5 axes, got {shape:?}"
        )));
    }
    let (b, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if f == 1 {
        return Ok((x.to_vec(), shape.to_vec()));
    }
    let (od, oh, ow) = (
        pooled_extent(d, f),
        pooled_extent(h, f),
        pooled_extent(w, f),
    );
    let mut out = vec![T::zero(); b * c * od * oh * ow];
    for bc in 0..b * c {
        let src = &x[bc * d * h * w..(bc + 1) * d * h * w];
        let dst = &mut out[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        for zd in 0..od {
            let d_rng = zd * f..((zd + 1) * f).min(d);
            for zh in 0..oh {
                let h_rng = zh * f..((zh + 1) * f).min(h);
                for zw in 0..ow {
                    let w_rng = zw * f..((zw + 1) * f).min(w);
                    let mut s = T::zero();
                    for i in d_rng.clone() {
                        for j in h_rng.clone() {
                            for k in w_rng.clone() {
                                s += src[(i * h + j) * w + k];
                            }
                        }
                    }
                    let n = d_rng.len() * h_rng.len() * w_rng.len();
                    dst[(zd * oh + zh) * ow + zw] = s / T::from_f64((n) as f64);
                }
            }
        }
    }
    Ok((out, vec![b, c, od, oh, ow]))
}

pub fn avg_pool3d_down_backward<T: Scalar>(shape: &[usize], f: usize, grad_out: &[T]) -> Vec<T> {
    if f == 1 {
        return grad_out.to_vec();
    }
    let (b, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let (od, oh, ow) = (
        pooled_extent(d, f),
        pooled_extent(h, f),
        pooled_extent(w, f),
    );
    let mut gx = vec![T::zero(); b * c * d * h * w];
    for bc in 0..b * c {
        let g = &grad_out[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        let dst = &mut gx[bc * d * h * w..(bc + 1) * d * h * w];
        for i in 0..d {
            for j in 0..h {
                for k in 0..w {
                    let (zd, zh, zw) = (i / f, j / f, k / f);
                    let n = (((zd + 1) * f).min(d) - zd * f)
                        * (((zh + 1) * f).min(h) - zh * f)
                        * (((zw + 1) * f).min(w) - zw * f);
                    dst[(i * h + j) * w + k] =
                        g[(zd * oh + zh) * ow + zw] / T::from_f64((n) as f64);
                }
            }
        }
    }
    gx
}

/// Mean cross-entropy of `B×C` logits; returns the loss and the softmax probabilities.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    shape: &[usize],
    targets: &[usize],
) -> Result<(T, Vec<T>)> {
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "cross entropy expects B×C logits, got {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    if targets.len() != b {
        return Err(Error::shape(format!(
            "{} targets for a batch of {b}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Index(format!("target class {t} outside [0, {c})")));
    }
    check_finite(logits, "cross entropy logits")?;
    let probs = softmax_with_temperature(logits, shape, 1.0, 1)?;
    let mut total = T::zero();
    for (n, &t) in targets.iter().enumerate() {
        let row = &logits[n * c..(n + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[t];
    }
    Ok((total / T::from_f64((b) as f64), probs))
}

pub fn cross_entropy_backward<T: Scalar>(
    probs: &[T],
    shape: &[usize],
    targets: &[usize],
    grad_loss: T,
) -> Vec<T> {
    let (b, c) = (shape[0], shape[1]);
    let scale = grad_loss / T::from_f64((b) as f64);
    let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (n, &t) in targets.iter().enumerate() {
        g[n * c + t] -= scale;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gelu_reference_points() {
        let y = gelu(&[0.0f64, 10.0, 1.0, -1.0]).unwrap();
        assert_eq!(y[0], 0.0);
        assert_abs_diff_eq!(y[1], 10.0, epsilon = 1e-6);
        // 0.5·(1 + erf(1/√2)) evaluated with 50-digit arithmetic.
        assert_abs_diff_eq!(y[2], 0.841_344_746_068_542_9, epsilon = 1e-15);
        assert_abs_diff_eq!(y[3], 0.841_344_746_068_542_9 - 1.0, epsilon = 1e-15);
        assert!(matches!(gelu(&[f64::NAN]), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn gelu_of_one_matches_series_erf() {
        // Maclaurin series of erf, independent of libm.
        fn erf_series(z: f64) -> f64 {
            let mut term = z;
            let mut sum = z;
            for n in 1..60 {
                term *= -z * z / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            sum * std::f64::consts::FRAC_2_SQRT_PI
        }
        let expected = 0.5 * (1.0 + erf_series(std::f64::consts::FRAC_1_SQRT_2));
        assert_abs_diff_eq!(gelu(&[1.0f64]).unwrap()[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn batch_norm_constant_input_is_zero() {
        let x = vec![3.0f64; 2 * 3 * 4];
        let (y, _) = batch_norm(&x, &[2, 3, 4], &[1.0; 3], &[0.0; 3], None).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_zero_gamma_yields_beta() {
        let x: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let beta = [0.5, -1.0, 2.0];
        let (y, _) = batch_norm(&x, &[2, 3, 4], &[0.0; 3], &beta, None).unwrap();
        for (i, v) in y.iter().enumerate() {
            assert_eq!(*v, beta[(i / 4) % 3]);
        }
    }

    #[test]
    fn batch_norm_moments_are_standardized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let shape = [2usize, 4, 3, 3, 3];
        let x: Vec<f64> = (0..216).map(|_| rng.random_range(-3.0..5.0)).collect();
        let (y, _) = batch_norm(&x, &shape, &[1.0; 4], &[0.0; 4], None).unwrap();
        for ch in 0..4 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| y[(n * 4 + ch) * 27..(n * 4 + ch + 1) * 27].to_vec())
                .collect();
            let raw: Vec<f64> = (0..2)
                .flat_map(|n| x[(n * 4 + ch) * 27..(n * 4 + ch + 1) * 27].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 54.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 54.0;
            let rm = raw.iter().sum::<f64>() / 54.0;
            let rv = raw.iter().map(|a| (a - rm).powi(2)).sum::<f64>() / 54.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-5);
            // the epsilon inside the square root shrinks the variance slightly
            assert_abs_diff_eq!(v, rv / (rv + BN_EPS), epsilon = 1e-12);
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn batch_norm_errors() {
        assert!(matches!(
            batch_norm(&[1.0f64; 6], &[1, 3, 2], &[1.0; 2], &[0.0; 2], None),
            Err(Error::Shape(_))
        ));
        assert!(batch_norm::<f64>(&[], &[0, 2], &[1.0; 2], &[0.0; 2], None).is_err());
    }

    #[test]
    fn softmax_reference_values() {
        let y = softmax_with_temperature(&[1.0f64; 4], &[1, 4], 3.0, 1).unwrap();
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = softmax_with_temperature(&[1.0f64, 0.0], &[2], 1e6, 0).unwrap();
        assert_abs_diff_eq!(y[0], 0.5, epsilon = 1e-5);
        // exp-normalize of (2,1,0) with 50-digit arithmetic
        let y = softmax_with_temperature(&[2.0f64, 1.0, 0.0], &[3], 1.0, 0).unwrap();
        let expected = [
            0.665_240_955_774_821_9,
            0.244_728_471_054_797_65,
            0.090_030_573_170_380_46,
        ];
        for (a, e) in y.iter().zip(expected) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-15);
        }
        assert!(softmax_with_temperature(&[1.0f64], &[1], 0.0, 0).is_err());
        assert!(softmax_with_temperature(&[1.0f64], &[1], -1.0, 0).is_err());
    }

    #[test]
    fn adaptive_pool_means() {
        let y = adaptive_avg_pool3d_to_unit(&[1.0f64; 16], &[1, 2, 2, 2, 2]).unwrap();
        assert_eq!(y, vec![1.0, 1.0]);
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 2.0).collect();
        let y = adaptive_avg_pool3d_to_unit(&x, &[1, 2, 2, 2, 2]).unwrap();
        let mut expected = [0.0; 2];
        for c in 0..2 {
            for i in 0..8 {
                expected[c] += x[c * 8 + i];
            }
            expected[c] /= 8.0;
        }
        assert_eq!(y, expected.to_vec());
        let id = adaptive_avg_pool3d_to_unit(&[4.0f64, 5.0], &[2, 1, 1, 1, 1]).unwrap();
        assert_eq!(id, vec![4.0, 5.0]);
        assert!(adaptive_avg_pool3d_to_unit(&[1.0f64; 4], &[1, 4]).is_err());
    }

    #[test]
    fn downsample_window_means() {
        let ramp: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let (y, shape) = avg_pool3d_down(&ramp, &[1, 1, 4, 4, 4], 2).unwrap();
        assert_eq!(shape, vec![1, 1, 2, 2, 2]);
        for zd in 0..2 {
            for zh in 0..2 {
                for zw in 0..2 {
                    let mut s = 0.0;
                    for i in 0..2 {
                        for j in 0..2 {
                            for k in 0..2 {
                                s += ramp[((2 * zd + i) * 4 + 2 * zh + j) * 4 + 2 * zw + k];
                            }
                        }
                    }
                    assert_eq!(y[(zd * 2 + zh) * 2 + zw], s / 8.0);
                }
            }
        }
        // ragged edge: extent 3 → windows {0,1} and {2}
        let (y, shape) = avg_pool3d_down(&[1.0f64, 2.0, 6.0], &[1, 1, 1, 1, 3], 2).unwrap();
        assert_eq!(shape, vec![1, 1, 1, 1, 2]);
        assert_eq!(y, vec![1.5, 6.0]);
        let (c, _) = avg_pool3d_down(&[2.5f64; 27], &[1, 1, 3, 3, 3], 2).unwrap();
        assert!(c.iter().all(|&v| v == 2.5));
        assert!(avg_pool3d_down(&[1.0f64], &[1, 1, 1, 1, 1], 0).is_err());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let (l, _) = cross_entropy(&[0.3f64; 4], &[1, 4], &[2]).unwrap();
        assert_abs_diff_eq!(l, 4.0f64.ln(), epsilon = 1e-15);
        let (l, _) = cross_entropy(&[30.0f64, 0.0, 0.0], &[1, 3], &[0]).unwrap();
        assert!(l < 1e-12);
        let logits = [0.2f64, -1.3, 0.7, 1.1, 0.05, -0.4];
        let (l, _) = cross_entropy(&logits, &[2, 3], &[2, 0]).unwrap();
        // 50-digit evaluation of mean(-log softmax)
        assert_abs_diff_eq!(l, 0.503_992_357_298_908_2, epsilon = 1e-14);
        assert!(matches!(
            cross_entropy(&logits, &[2, 3], &[3, 0]),
            Err(Error::Index(_))
        ));
    }
}
