//! Value-level numeric kernels. The autodiff graph calls the row kernels
//! here for its forward passes; the tensor-level wrappers are the public
//! stand-alone forms.

use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor};

/// Classification targets: class indices, or one probability row per sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<F> {
    Hard(Vec<usize>),
    Soft(Vec<F>),
}

/// Numerically stable softmax of `row / temperature` into `out`.
pub fn softmax_row<F: Real>(row: &[F], temperature: F, out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut total = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = ((x - max) / temperature).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `log softmax(row / temperature)` into `out`.
pub fn log_softmax_row<F: Real>(row: &[F], temperature: F, out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut total = F::zero();
    for &x in row {
        total = total + ((x - max) / temperature).exp();
    }
    let log_z = total.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max) / temperature - log_z;
    }
}

fn matrix_dims<F: Real>(t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
    }
}

pub fn softmax<F: Real>(logits: &Tensor<F>, temperature: F) -> Result<Tensor<F>> {
    ensure!(temperature > F::zero(), InvalidArgument, "temperature must be positive, got {temperature}");
    let (rows, cols) = matrix_dims(logits)?;
    ensure!(logits.values().iter().all(|v| v.is_finite()), InvalidArgument, "non-finite logits");
    let mut out = vec![F::zero(); rows * cols];
    for (src, dst) in logits.values().chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_row(src, temperature, dst);
    }
    Tensor::new(logits.shape(), out)
}

/// Normalizes `row` into `out`; returns `(mean, 1/std)`.
pub fn layer_norm_row<F: Real>(row: &[F], gain: &[F], bias: &[F], eps: F, out: &mut [F]) -> (F, F) {
    let n = F::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
    let rstd = F::one() / (var + eps).sqrt();
    for (((o, &x), &g), &b) in out.iter_mut().zip(row).zip(gain).zip(bias) {
        *o = (x - mean) * rstd * g + b;
    }
    (mean, rstd)
}

pub fn layer_norm<F: Real>(x: &Tensor<F>, gain: &[F], bias: &[F], eps: F) -> Result<Tensor<F>> {
    let width = *x.shape().last().ok_or_else(|| Error::Shape("scalar input".into()))?;
    ensure!(gain.len() == width && bias.len() == width, Shape, "gain/bias length must be {width}");
    ensure!(eps > F::zero(), InvalidArgument, "eps must be positive");
    let mut out = vec![F::zero(); x.numel()];
    for (src, dst) in x.values().chunks(width).zip(out.chunks_mut(width)) {
        layer_norm_row(src, gain, bias, eps, dst);
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn check_targets<F: Real>(targets: &Targets<F>, rows: usize, cols: usize) -> Result<()> {
    match targets {
        Targets::Hard(ids) => {
            ensure!(ids.len() == rows, Shape, "{} targets for {} rows", ids.len(), rows);
            if let Some(bad) = ids.iter().find(|&&c| c >= cols) {
                return Err(Error::InvalidArgument(format!("class index {bad} out of range for {cols} classes")));
            }
        }
        Targets::Soft(p) => {
            ensure!(p.len() == rows * cols, Shape, "soft targets need {} values, got {}", rows * cols, p.len());
        }
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` against the targets.
pub fn cross_entropy<F: Real>(logits: &Tensor<F>, targets: &Targets<F>) -> Result<F> {
    let (rows, cols) = matrix_dims(logits)?;
    check_targets(targets, rows, cols)?;
    let mut logp = vec![F::zero(); cols];
    let mut total = F::zero();
    for (r, row) in logits.values().chunks(cols).enumerate() {
        log_softmax_row(row, F::one(), &mut logp);
        total = total
            - match targets {
                Targets::Hard(ids) => logp[ids[r]],
                Targets::Soft(p) => p[r * cols..(r + 1) * cols].iter().zip(&logp).map(|(&t, &l)| t * l).sum(),
            };
    }
    Ok(total / F::from_usize(rows).unwrap())
}

/// Per-row `τ²·KL(softmax(t/τ) ‖ softmax(s/τ))`.
pub fn kl_row<F: Real>(teacher: &[F], student: &[F], tau: F, logp: &mut [F], logq: &mut [F]) -> F {
    log_softmax_row(teacher, tau, logp);
    log_softmax_row(student, tau, logq);
    let kl: F = logp.iter().zip(logq.iter()).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
    kl.max(F::zero()) * tau * tau
}

/// Batch-mean of `τ²·KL(teacher ‖ student)` at temperature `τ`.
pub fn kl_divergence<F: Real>(teacher_logits: &Tensor<F>, student_logits: &Tensor<F>, tau: F) -> Result<F> {
    ensure!(
        teacher_logits.shape() == student_logits.shape(),
        Shape,
        "teacher {:?} vs student {:?}",
        teacher_logits.shape(),
        student_logits.shape()
    );
    ensure!(tau > F::zero(), InvalidArgument, "temperature must be positive, got {tau}");
    let (rows, cols) = matrix_dims(teacher_logits)?;
    let mut lp = vec![F::zero(); cols];
    let mut lq = vec![F::zero(); cols];
    let total: F = teacher_logits
        .values()
        .chunks(cols)
        .zip(student_logits.values().chunks(cols))
        .map(|(t, s)| kl_row(t, s, tau, &mut lp, &mut lq))
        .sum();
    Ok(total / F::from_usize(rows).unwrap())
}

pub(crate) fn l2_norm<F: Real>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

/// `‖a/‖a‖ − b/‖b‖‖²`, i.e. `2 − 2·cos(a, b)`.
pub fn normalized_sqdist<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    ensure!(a.len() == b.len(), Shape, "lengths {} and {}", a.len(), b.len());
    let (na, nb) = (l2_norm(a), l2_norm(b));
    ensure!(na > F::zero() && nb > F::zero(), Degenerate, "normalized distance of a zero vector");
    Ok(a.iter().zip(b).map(|(&x, &y)| (x / na - y / nb).powi(2)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&m(1, 2, &[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.values(), &[0.5, 0.5]);
        let e = std::f64::consts::E;
        let p = softmax(&m(1, 2, &[1.0, 0.0]), 1.0).unwrap();
        assert!((p.values()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.values()[0] - 0.7311).abs() < 1e-4);
        let q = softmax(&m(1, 2, &[2.0, 0.0]), 2.0).unwrap();
        assert!((q.values()[0] - p.values()[0]).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(matches!(softmax(&m(1, 2, &[0.0, 1.0]), 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax(&m(1, 2, &[0.0, 1.0]), -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&m(1, 3, &[1000.0, 999.0, -1000.0]), 1.0).unwrap();
        assert!(p.values().iter().all(|v| v.is_finite()));
        assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 4];
        let zeros = [0.0; 4];
        let y = layer_norm(&m(1, 4, &[1.0, 1.0, 1.0, 1.0]), &ones, &zeros, 1e-12).unwrap();
        assert_eq!(y.values(), &[0.0; 4]);
        let y = layer_norm(&m(1, 2, &[1.0, -1.0]), &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((y.values()[0] - 1.0).abs() < 1e-9 && (y.values()[1] + 1.0).abs() < 1e-9);
        let y = layer_norm(&m(1, 2, &[3.0, 7.0]), &[0.0, 0.0], &[0.5, -2.0], 1e-5).unwrap();
        assert_eq!(y.values(), &[0.5, -2.0]);
        assert!(matches!(layer_norm(&m(1, 2, &[3.0, 7.0]), &[1.0], &[0.0, 0.0], 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&m(1, 2, &[0.0, 0.0]), &Targets::Hard(vec![0])).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        let ce = cross_entropy(&m(1, 2, &[1.0, 0.0]), &Targets::Hard(vec![0])).unwrap();
        assert!((ce - 0.3133).abs() < 1e-4);
        let logits = m(1, 3, &[0.3, -1.2, 2.0]);
        let p = softmax(&logits, 1.0).unwrap();
        let entropy: f64 = -p.values().iter().map(|&x| x * x.ln()).sum::<f64>();
        let ce = cross_entropy(&logits, &Targets::Soft(p.values().to_vec())).unwrap();
        assert!((ce - entropy).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&logits, &Targets::Hard(vec![3])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let t = m(1, 2, &[1.0, 0.0]);
        assert_eq!(kl_divergence(&t, &t, 3.0).unwrap(), 0.0);
        let kl = kl_divergence(&t, &m(1, 2, &[0.0, 1.0]), 1.0).unwrap();
        // p = (σ(1), σ(-1)); log-ratios ±1
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((kl - (p - (1.0 - p))).abs() < 1e-12);
        assert!((kl - 0.4621).abs() < 1e-4);
        let shifted = kl_divergence(&t, &m(1, 2, &[1.0 + 5.5, 5.5]), 1.0).unwrap();
        assert!(shifted.abs() < 1e-12);
        assert!(matches!(kl_divergence(&t, &m(1, 3, &[0.0; 3]), 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn normalized_sqdist_examples() {
        assert_eq!(normalized_sqdist(&[2.0, 1.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert!((normalized_sqdist::<f64>(&[2.0, 1.0], &[-2.0, -1.0]).unwrap() - 4.0).abs() < 1e-12);
        let d = normalized_sqdist(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d - (2.0 - 2.0f64.sqrt())).abs() < 1e-12);
        assert!(matches!(normalized_sqdist(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Degenerate(_))));
    }
}
