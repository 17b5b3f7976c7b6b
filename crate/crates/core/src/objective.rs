//! Training objective: batch-all triplet loss and cross-entropy, both per
//! strip, summed with equal weight.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{GaitError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TripletReduction {
    /// mean over every valid triplet
    #[default]
    MeanAll,
    /// mean over triplets with a positive term; zero if there are none
    MeanNonzero,
}

/// Operand order inside the hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TripletOrder {
    /// `[D(a, p) - D(a, n) + m]_+`
    #[default]
    Corrected,
    /// `[D(a, n) - D(a, p) + m]_+`
    Printed,
}

impl FromStr for TripletReduction {
    type Err = GaitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-all" => Ok(Self::MeanAll),
            "mean-nonzero" => Ok(Self::MeanNonzero),
            _ => Err(GaitError::Config(format!("unknown triplet reduction '{s}'"))),
        }
    }
}

impl fmt::Display for TripletReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanAll => "mean-all",
            Self::MeanNonzero => "mean-nonzero",
        })
    }
}

impl FromStr for TripletOrder {
    type Err = GaitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(Self::Corrected),
            "printed" => Ok(Self::Printed),
            _ => Err(GaitError::Config(format!("unknown triplet order '{s}'"))),
        }
    }
}

impl fmt::Display for TripletOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Corrected => "corrected",
            Self::Printed => "printed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub num_classes: usize,
    pub reduction: TripletReduction,
    pub order: TripletOrder,
}

impl LossConfig {
    pub fn new(margin: f64, num_classes: usize) -> Result<Self> {
        let cfg = LossConfig {
            margin,
            num_classes,
            reduction: TripletReduction::default(),
            order: TripletOrder::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(GaitError::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.num_classes == 0 {
            return Err(GaitError::Config("need at least one class".into()));
        }
        Ok(())
    }
}

fn dims3(t: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match *t {
        [n, h, b] => Ok([n, h, b]),
        _ => Err(GaitError::dim(op, format!("expected [N, strips, features], got {t:?}"))),
    }
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(GaitError::Input(format!("{} labels for {n} samples", labels.len())));
    }
    Ok(())
}

/// Loss value and, on request, its gradient with respect to `emb`.
fn triplet_core(
    emb: &[f64],
    [n, h, b]: [usize; 3],
    labels: &[usize],
    margin: f64,
    reduction: TripletReduction,
    order: TripletOrder,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_labels(labels, n)?;
    let valid: usize = (0..n)
        .map(|a| {
            let pos = (0..n).filter(|&j| j != a && labels[j] == labels[a]).count();
            let neg = (0..n).filter(|&j| labels[j] != labels[a]).count();
            pos * neg
        })
        .sum();
    if valid == 0 {
        return Err(GaitError::DegenerateBatch(format!(
            "no valid triplet among {n} samples (need two classes and a repeated label)"
        )));
    }
    let at = |i: usize, s: usize| &emb[(i * h + s) * b..(i * h + s + 1) * b];
    let mut grad = want_grad.then(|| vec![0.0; emb.len()]);
    let mut total = 0.0;
    let mut dist = vec![0.0; n * n];
    // per-pair weight on dD_ij accumulated from active triplets
    let mut coef = vec![0.0; n * n];
    for s in 0..h {
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] = at(i, s)
                    .iter()
                    .zip(at(j, s))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let mut sum = 0.0;
        let mut active = 0usize;
        coef.iter_mut().for_each(|c| *c = 0.0);
        for a in 0..n {
            for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
                for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                    let (dap, dan) = (dist[a * n + p], dist[a * n + q]);
                    let term = match order {
                        TripletOrder::Corrected => dap - dan + margin,
                        TripletOrder::Printed => dan - dap + margin,
                    };
                    if term > 0.0 {
                        sum += term;
                        active += 1;
                        let sign = if order == TripletOrder::Corrected { 1.0 } else { -1.0 };
                        coef[a * n + p] += sign;
                        coef[a * n + q] -= sign;
                    }
                }
            }
        }
        let denom = match reduction {
            TripletReduction::MeanAll => valid as f64,
            TripletReduction::MeanNonzero => active.max(1) as f64,
        };
        total += sum / denom;
        if let Some(g) = grad.as_mut() {
            let scale = 1.0 / (denom * h as f64);
            for i in 0..n {
                for j in 0..n {
                    let c = coef[i * n + j];
                    let d = dist[i * n + j];
                    if c == 0.0 || d == 0.0 {
                        continue;
                    }
                    let k = c * scale / d;
                    for f in 0..b {
                        let diff = emb[(i * h + s) * b + f] - emb[(j * h + s) * b + f];
                        g[(i * h + s) * b + f] += k * diff;
                        g[(j * h + s) * b + f] -= k * diff;
                    }
                }
            }
        }
    }
    Ok((total / h as f64, grad))
}

/// Batch-all triplet loss of `[N, strips, features]` embeddings with
/// Euclidean distances, averaged over strips.
pub fn triplet_ba<F: Real>(emb: &Tensor<F>, labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    let d = dims3(emb.shape(), "triplet_ba")?;
    triplet_core(&emb.to_f64_vec(), d, labels, cfg.margin, cfg.reduction, cfg.order, false).map(|r| r.0)
}

fn ce_core(logits: &[f64], [n, h, c]: [usize; 3], labels: &[usize], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let mut grad = want_grad.then(|| vec![0.0; logits.len()]);
    let count = (n * h) as f64;
    let mut total = 0.0;
    for i in 0..n {
        for s in 0..h {
            let row = &logits[(i * h + s) * c..(i * h + s + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[labels[i]];
            if let Some(g) = grad.as_mut() {
                for (k, v) in row.iter().enumerate() {
                    let soft = (v - lse).exp();
                    let target = if k == labels[i] { 1.0 } else { 0.0 };
                    g[(i * h + s) * c + k] = (soft - target) / count;
                }
            }
        }
    }
    (total / count, grad)
}

fn check_ce(shape: &[usize], labels: &[usize]) -> Result<[usize; 3]> {
    let d = dims3(shape, "cross_entropy")?;
    check_labels(labels, d[0])?;
    if let Some(bad) = labels.iter().find(|&&l| l >= d[2]) {
        return Err(GaitError::Input(format!("label {bad} outside 0..{}", d[2])));
    }
    Ok(d)
}

/// Softmax cross-entropy of `[N, strips, classes]` logits, averaged over
/// strips and samples.
pub fn cross_entropy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<f64> {
    let d = check_ce(logits.shape(), labels)?;
    Ok(ce_core(&logits.to_f64_vec(), d, labels, false).0)
}

pub fn combined(tri: f64, cse: f64) -> f64 {
    tri + cse
}

fn grad_to<F: Real>(shape: &[usize], g: Vec<f64>, upstream: F) -> Result<Tensor<F>> {
    let u = upstream.as_f64();
    Tensor::from_vec(shape, g.into_iter().map(|v| F::of(v * u)).collect())
}

/// Tape version of [`triplet_ba`].
pub fn triplet_loss<F: Real>(tape: &mut Tape<F>, emb: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let d = dims3(tape.shape(emb), "triplet_ba")?;
    let (value, grad) = triplet_core(
        &tape.value(emb).to_f64_vec(),
        d,
        labels,
        cfg.margin,
        cfg.reduction,
        cfg.order,
        true,
    )?;
    let grad = grad.expect("gradient requested");
    Ok(tape.record(
        "triplet_ba",
        Tensor::scalar(F::of(value)),
        &[emb],
        Box::new(move |c| Ok(vec![Some(grad_to(c.inputs[0].shape(), grad, c.grad.data()[0])?)])),
    ))
}

/// Tape version of [`cross_entropy`].
pub fn cross_entropy_loss<F: Real>(tape: &mut Tape<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let d = check_ce(tape.shape(logits), labels)?;
    let (value, grad) = ce_core(&tape.value(logits).to_f64_vec(), d, labels, true);
    let grad = grad.expect("gradient requested");
    Ok(tape.record(
        "cross_entropy",
        Tensor::scalar(F::of(value)),
        &[logits],
        Box::new(move |c| Ok(vec![Some(grad_to(c.inputs[0].shape(), grad, c.grad.data()[0])?)])),
    ))
}

/// `L_tri + L_cse` on the tape.
pub fn combined_loss<F: Real>(tape: &mut Tape<F>, tri: Var, cse: Var) -> Result<Var> {
    tape.add(tri, cse)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let cfg = LossConfig::new(0.2, 2).unwrap();
        let e = t(&[4, 1, 3], &[0.5; 12]);
        let l = triplet_ba(&e, &[0, 0, 1, 1], &cfg).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
    }

    #[test]
    fn separated_classes_give_zero() {
        let cfg = LossConfig::new(0.2, 2).unwrap();
        let e = t(&[4, 1, 1], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(triplet_ba(&e, &[0, 0, 1, 1], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_batches() {
        let cfg = LossConfig::new(0.2, 4).unwrap();
        let e = t(&[3, 1, 1], &[0.0, 1.0, 2.0]);
        let err = triplet_ba(&e, &[0, 1, 2], &cfg).unwrap_err();
        assert!(matches!(err, GaitError::DegenerateBatch(_)));
        let err = triplet_ba(&e, &[1, 1, 1], &cfg).unwrap_err();
        assert!(matches!(err, GaitError::DegenerateBatch(_)));
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let l = cross_entropy(&t(&[2, 3, 5], &[0.7; 30]), &[1, 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let mut v = vec![0.0; 4];
        v[2] = 50.0;
        let l = cross_entropy(&t(&[1, 1, 4], &v), &[2]).unwrap();
        assert!(l >= 0.0 && l < 1e-20);
    }

    #[test]
    fn label_out_of_range() {
        let err = cross_entropy(&t(&[1, 1, 3], &[0.0; 3]), &[3]).unwrap_err();
        assert!(matches!(err, GaitError::Input(_)));
    }

    #[test]
    fn combined_sums() {
        assert!((combined(0.2, 0.7) - 0.9).abs() < 1e-15);
        assert_eq!(combined(0.0, 0.0), 0.0);
    }

    #[test]
    fn margin_must_be_positive() {
        assert!(LossConfig::new(0.0, 2).is_err());
        assert!(LossConfig::new(-0.2, 2).is_err());
    }
}
