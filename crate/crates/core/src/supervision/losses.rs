//! Multi-task loss: flow regression, class-balanced motion segmentation and
//! association cross-entropy, each with its gradient.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static EMPTY_LOSS_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Number of loss evaluations so far that had nothing to average over.
pub fn empty_loss_warnings() -> usize {
    EMPTY_LOSS_WARNINGS.load(Ordering::Relaxed)
}

fn warn_empty(what: &str) {
    EMPTY_LOSS_WARNINGS.fetch_add(1, Ordering::Relaxed);
    log::debug!("{what}: nothing to average, loss set to 0");
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// Weight of the static class in the segmentation loss.
    pub beta: f64,
    pub log_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha1: 0.5,
            alpha2: 0.5,
            alpha3: 1.0,
            beta: 0.4,
            log_epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha1, self.alpha2, self.alpha3].iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("loss weights alpha1..3 must be ≥ 0".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config("beta must lie in (0, 1)".into()));
        }
        if !(self.log_epsilon > 0.0 && self.log_epsilon < 0.5) {
            return Err(Error::Config("log_epsilon must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// The three loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub flow: f64,
    pub seg: f64,
    pub aff: f64,
}

/// `α1·L_flow + α2·L_seg + α3·L_aff`.
pub fn loss_total(parts: &LossParts, cfg: &LossConfig) -> f64 {
    cfg.alpha1 * parts.flow + cfg.alpha2 * parts.seg + cfg.alpha3 * parts.aff
}

/// Mean squared Euclidean error per point and its gradient.
pub fn loss_flow<T: Scalar>(pred: ArrayView2<'_, T>, gt: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Contract(format!("flow shapes differ: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let n = pred.nrows();
    if n == 0 {
        warn_empty("loss_flow");
        return Ok((T::zero(), Array2::zeros(pred.raw_dim())));
    }
    let diff = &pred - &gt;
    let nn = T::from_usize_lossy(n);
    let loss = diff.iter().map(|d| *d * *d).sum::<T>() / nn;
    let grad = diff.mapv(|d| T::of(2.0) * d / nn);
    Ok((loss, grad))
}

/// Class-balanced negative log-likelihood of the motion scores and its gradient.
/// A class absent from `mask` contributes 0.
pub fn loss_seg<T: Scalar>(scores: &[T], mask: &[u8], beta: f64, eps: f64) -> Result<(T, Vec<T>)> {
    if scores.len() != mask.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} mask entries",
            scores.len(),
            mask.len()
        )));
    }
    let n_mov = mask.iter().filter(|m| **m != 0).count();
    let n_sta = mask.len() - n_mov;
    if mask.is_empty() {
        warn_empty("loss_seg");
        return Ok((T::zero(), Vec::new()));
    }
    let (lo, hi) = (T::of(eps), T::of(1.0 - eps));
    let (b, one) = (T::of(beta), T::one());
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); scores.len()];
    for (i, (&c, &m)) in scores.iter().zip(mask).enumerate() {
        let cc = c.max(lo).min(hi);
        let inside = c > lo && c < hi;
        if m != 0 {
            let w = (one - b) / T::from_usize_lossy(n_mov);
            loss -= w * cc.ln();
            if inside {
                grad[i] = -w / cc;
            }
        } else {
            let w = b / T::from_usize_lossy(n_sta);
            loss -= w * (one - cc).ln();
            if inside {
                grad[i] = w / (one - cc);
            }
        }
    }
    Ok((loss, grad))
}

/// Mean binary cross-entropy over all `K·M` association entries and its gradient.
pub fn loss_aff<T: Scalar>(pred: ArrayView2<'_, T>, gt: ArrayView2<'_, u8>, eps: f64) -> Result<(T, Array2<T>)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Contract(format!(
            "affinity shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.is_empty() {
        warn_empty("loss_aff");
        return Ok((T::zero(), Array2::zeros(pred.raw_dim())));
    }
    let (lo, hi, one) = (T::of(eps), T::of(1.0 - eps), T::one());
    let km = T::from_usize_lossy(pred.len());
    let mut loss = T::zero();
    let mut grad = Array2::zeros(pred.raw_dim());
    for ((idx, &a), &t) in pred.indexed_iter().zip(gt.iter()) {
        let aa = a.max(lo).min(hi);
        let inside = a > lo && a < hi;
        if t != 0 {
            loss -= aa.ln();
            if inside {
                grad[idx] = -one / (aa * km);
            }
        } else {
            loss -= (one - aa).ln();
            if inside {
                grad[idx] = one / ((one - aa) * km);
            }
        }
    }
    Ok((loss / km, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn flow_examples() {
        let z = Array2::<f64>::zeros((1, 3));
        assert_eq!(loss_flow(array![[1.0, 0.0, 0.0]].view(), z.view()).unwrap().0, 1.0);
        let p = array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let (l, g) = loss_flow(p.view(), Array2::zeros((2, 3)).view()).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g, array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        assert_eq!(loss_flow(p.view(), p.view()).unwrap().0, 0.0);
    }

    #[test]
    fn empty_flow_is_zero_and_counted() {
        let before = empty_loss_warnings();
        let e = Array2::<f64>::zeros((0, 3));
        assert_eq!(loss_flow(e.view(), e.view()).unwrap().0, 0.0);
        assert!(empty_loss_warnings() > before);
    }

    #[test]
    fn seg_examples() {
        let (l, _) = loss_seg(&[0.5, 0.5, 0.5], &[1, 0, 0], 0.4, 1e-7).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = loss_seg(&[0.9, 0.1], &[1, 0], 0.4, 1e-7).unwrap();
        assert!((l - -(0.9f64.ln())).abs() < 1e-12);
        let (l, g) = loss_seg(&[1.0, 0.0], &[1, 0], 0.4, 1e-7).unwrap();
        assert!(l <= -(1.0 - 1e-7f64).ln() + 1e-15);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn seg_single_class_frame() {
        let (l, _) = loss_seg(&[0.2, 0.2], &[0, 0], 0.4, 1e-7).unwrap();
        assert!((l - 0.4 * -(0.8f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn aff_examples() {
        let (l, _) = loss_aff(array![[0.5]].view(), array![[1u8]].view(), 1e-7).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = loss_aff(array![[0.9], [0.2]].view(), array![[1u8], [0]].view(), 1e-7).unwrap();
        assert!((l - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-12);
        let (l, _) = loss_aff(array![[1.0, 0.0]].view(), array![[1u8, 0]].view(), 1e-7).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn total_weights() {
        let p = LossParts {
            flow: 2.0,
            seg: 1.0,
            aff: 1.0,
        };
        assert_eq!(loss_total(&p, &LossConfig::default()), 2.5);
        assert_eq!(loss_total(&LossParts::default(), &LossConfig::default()), 0.0);
        let no_aff = LossConfig {
            alpha3: 0.0,
            ..Default::default()
        };
        let q = LossParts { aff: 100.0, ..p };
        assert_eq!(loss_total(&q, &no_aff), loss_total(&p, &no_aff));
    }

    #[test]
    fn gradients_match_differences() {
        let s: [f64; 4] = [0.3, 0.8, 0.6, 0.1];
        let m = [1u8, 0, 1, 0];
        let (_, g) = loss_seg(&s, &m, 0.4, 1e-7).unwrap();
        for i in 0..4 {
            let mut a = s;
            let mut b = s;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (loss_seg(&a, &m, 0.4, 1e-7).unwrap().0 - loss_seg(&b, &m, 0.4, 1e-7).unwrap().0) / 2e-6;
            assert!((num - g[i]).abs() < 1e-6);
        }
        let p: Array2<f64> = array![[0.3, 0.6], [0.7, 0.2]];
        let t = array![[1u8, 0], [0, 1]];
        let (_, g) = loss_aff(p.view(), t.view(), 1e-7).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut a = p.clone();
                let mut b = p.clone();
                a[[i, j]] += 1e-6;
                b[[i, j]] -= 1e-6;
                let num = (loss_aff(a.view(), t.view(), 1e-7).unwrap().0 - loss_aff(b.view(), t.view(), 1e-7).unwrap().0) / 2e-6;
                assert!((num - g[[i, j]]).abs() < 1e-6);
            }
        }
    }
}
