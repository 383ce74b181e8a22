//! Pooling, normalization and pairwise loss kernels with their
//! hand-derived vector-Jacobian products.

use super::{NumericsError, Tensor};

/// Inputs below this value are clamped before `x^p`; the derivative of
/// `x^(1/p)` is unbounded at zero.
pub const GEM_FLOOR: f64 = 1e-6;

/// Smallest norm accepted by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

fn channels_of(x: &Tensor) -> Result<usize, NumericsError> {
    match x.shape() {
        [.., k] if *k > 0 && !x.is_empty() => Ok(*k),
        _ => Err(NumericsError::ShapeMismatch {
            context: "pooling input must be (…×)K with K > 0",
            expected: vec![0, 0, 0],
            got: x.shape().to_vec(),
        }),
    }
}

/// Generalized-mean pooling over all positions of a channel-last map.
///
/// `d_k = (mean_x max(x, floor)^p)^(1/p)`; returns a `K`-vector.
pub fn gem_forward(x: &Tensor, p: f64) -> Result<Tensor, NumericsError> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(NumericsError::InvalidArgument(format!(
            "GeM exponent must be finite and >= 1, got {p}"
        )));
    }
    let k = channels_of(x)?;
    if let Some(v) = x.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(NumericsError::NegativeInput { value: *v });
    }
    let positions = x.len() / k;
    let mut sums = vec![0.0; k];
    for pixel in x.data().chunks_exact(k) {
        for (s, &v) in sums.iter_mut().zip(pixel) {
            *s += v.max(GEM_FLOOR).powf(p);
        }
    }
    let inv = 1.0 / positions as f64;
    Ok(Tensor::vector(
        sums.into_iter().map(|s| (s * inv).powf(1.0 / p)).collect(),
    ))
}

/// `dL/dx` for [`gem_forward`], given its output `d` and `dL/dd`.
pub fn gem_backward(x: &Tensor, p: f64, d: &Tensor, grad: &Tensor) -> Result<Tensor, NumericsError> {
    let k = channels_of(x)?;
    if d.shape() != [k] || grad.shape() != [k] {
        return Err(NumericsError::ShapeMismatch {
            context: "GeM backward",
            expected: vec![k],
            got: grad.shape().to_vec(),
        });
    }
    let positions = (x.len() / k) as f64;
    // d d_k / d x = (1/n) d_k^(1-p) x^(p-1)
    let scale: Vec<f64> = d
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&dk, &g)| g * dk.powf(1.0 - p) / positions)
        .collect();
    let mut out = vec![0.0; x.len()];
    for (dst, pixel) in out.chunks_exact_mut(k).zip(x.data().chunks_exact(k)) {
        for ((o, &v), &s) in dst.iter_mut().zip(pixel).zip(&scale) {
            *o = if v > GEM_FLOOR { s * v.powf(p - 1.0) } else { 0.0 };
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `x / ‖x‖₂`.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor, NumericsError> {
    let n = x.norm();
    if !(n > MIN_NORM) {
        return Err(NumericsError::ZeroNorm { norm: n });
    }
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v / n).collect())
}

/// `dL/dx` for `y = x/‖x‖`: `(g - y (y·g)) / ‖x‖`.
pub fn l2_normalize_backward(x: &Tensor, y: &Tensor, grad: &Tensor) -> Result<Tensor, NumericsError> {
    if grad.shape() != x.shape() {
        return Err(NumericsError::ShapeMismatch {
            context: "l2 normalize backward",
            expected: x.shape().to_vec(),
            got: grad.shape().to_vec(),
        });
    }
    let n = x.norm();
    let dot: f64 = y.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum();
    Tensor::new(
        x.shape().to_vec(),
        y.data()
            .iter()
            .zip(grad.data())
            .map(|(yv, g)| (g - yv * dot) / n)
            .collect(),
    )
}

/// Whether a descriptor pair should be pulled together or pushed apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PairLabel {
    Negative = 0,
    Positive = 1,
}

impl TryFrom<u8> for PairLabel {
    type Error = NumericsError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Self::Negative),
            1 => Ok(Self::Positive),
            other => Err(NumericsError::InvalidArgument(format!(
                "pair label must be 0 or 1, got {other}"
            ))),
        }
    }
}

/// Contrastive pair loss: `‖a−b‖²` for positives and
/// `max(0, m − ‖a−b‖)²` for negatives.
pub fn pair_loss(a: &[f64], b: &[f64], label: PairLabel, margin: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match label {
        PairLabel::Positive => sq,
        PairLabel::Negative => {
            let hinge = (margin - sq.sqrt()).max(0.0);
            hinge * hinge
        }
    }
}

/// Gradient of [`pair_loss`] with respect to `a`; the gradient with
/// respect to `b` is its negation.
pub fn pair_loss_grad_a(a: &[f64], b: &[f64], label: PairLabel, margin: f64) -> Vec<f64> {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    match label {
        PairLabel::Positive => diff.iter().map(|d| 2.0 * d).collect(),
        PairLabel::Negative => {
            let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            if dist >= margin || dist == 0.0 {
                // At dist == 0 the direction is undefined; use the zero subgradient.
                return vec![0.0; diff.len()];
            }
            let coef = -2.0 * (margin - dist) / dist;
            diff.iter().map(|d| coef * d).collect()
        }
    }
}
