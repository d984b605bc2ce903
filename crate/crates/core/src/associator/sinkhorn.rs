//! Entropic normalization of an affinity matrix by alternating row and column scaling.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub(crate) struct SinkhornCache<T> {
    temperature: T,
    start: Array2<T>,
    /// Output of every normalization step, in order; even entries are row steps.
    steps: Vec<Array2<T>>,
    /// Row or column sums used by each step.
    sums: Vec<Vec<T>>,
}

fn check<T: Scalar>(raw: ArrayView2<'_, T>, iterations: usize, temperature: f64) -> Result<()> {
    if iterations == 0 {
        return Err(Error::Validation("sinkhorn needs at least one iteration".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Validation(format!("sinkhorn temperature must be > 0, got {temperature}")));
    }
    if let Some(((k, m), v)) = raw.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite affinity logit {v} at ({k}, {m})")));
    }
    Ok(())
}

fn normalize<T: Scalar>(x: &Array2<T>, axis: Axis) -> (Array2<T>, Vec<T>) {
    let sums = x.sum_axis(axis).to_vec();
    let mut y = x.clone();
    for (idx, v) in y.indexed_iter_mut() {
        let s = if axis == Axis(1) { sums[idx.0] } else { sums[idx.1] };
        *v /= s;
    }
    (y, sums)
}

pub(crate) fn sinkhorn_with_cache<T: Scalar>(
    raw: ArrayView2<'_, T>,
    iterations: usize,
    temperature: f64,
) -> Result<(Array2<T>, SinkhornCache<T>)> {
    check(raw, iterations, temperature)?;
    let t = T::of(temperature);
    let mut start = raw.to_owned();
    for mut row in start.rows_mut() {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| ((v - mx) / t).exp());
    }
    let mut cache = SinkhornCache {
        temperature: t,
        start: start.clone(),
        steps: Vec::with_capacity(2 * iterations),
        sums: Vec::with_capacity(2 * iterations),
    };
    if raw.is_empty() {
        return Ok((start, cache));
    }
    let mut cur = start;
    for _ in 0..iterations {
        for axis in [Axis(1), Axis(0)] {
            let (y, s) = normalize(&cur, axis);
            cache.steps.push(y.clone());
            cache.sums.push(s);
            cur = y;
        }
    }
    Ok((cur, cache))
}

/// Starts from `exp((raw − rowmax) / temperature)` and alternates row then
/// column normalization for `iterations` rounds. Empty input gives empty output.
pub fn sinkhorn<T: Scalar>(raw: ArrayView2<'_, T>, iterations: usize, temperature: f64) -> Result<Array2<T>> {
    sinkhorn_with_cache(raw, iterations, temperature).map(|(p, _)| p)
}

/// Gradient with respect to the raw logits.
pub(crate) fn sinkhorn_backward<T: Scalar>(cache: &SinkhornCache<T>, dout: ArrayView2<'_, T>) -> Array2<T> {
    let mut d = dout.to_owned();
    for step in (0..cache.steps.len()).rev() {
        let y = &cache.steps[step];
        let sums = &cache.sums[step];
        let row_step = step % 2 == 0;
        let dot = if row_step {
            (&d * y).sum_axis(Axis(1))
        } else {
            (&d * y).sum_axis(Axis(0))
        };
        for ((i, j), g) in d.indexed_iter_mut() {
            let (c, s) = if row_step { (dot[i], sums[i]) } else { (dot[j], sums[j]) };
            *g = (*g - c) / s;
        }
    }
    ndarray::Zip::from(&mut d)
        .and(&cache.start)
        .for_each(|g, &p| *g = *g * p / cache.temperature);
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_by_one_is_one() {
        let p = sinkhorn(array![[-3.7]].view(), 30, 1.0).unwrap();
        assert_eq!(p, array![[1.0]]);
    }

    #[test]
    fn equal_logits_give_half() {
        let p: Array2<f64> = sinkhorn(array![[2.0, 2.0], [2.0, 2.0]].view(), 30, 1.0).unwrap();
        for v in p.iter() {
            assert!((*v - 0.5f64).abs() < 1e-12);
        }
    }

    #[test]
    fn strong_diagonal() {
        let p = sinkhorn(array![[5.0, 0.0], [0.0, 5.0]].view(), 50, 1.0).unwrap();
        assert!(p[[0, 0]] > 0.99 && p[[1, 1]] > 0.99);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(sinkhorn(array![[f64::NAN]].view(), 30, 1.0).is_err());
        assert!(sinkhorn(array![[1.0]].view(), 0, 1.0).is_err());
        assert!(sinkhorn(array![[1.0]].view(), 3, 0.0).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let raw = array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.4]];
        let w = array![[0.7, -0.3, 1.9], [0.4, 1.3, -0.8]];
        let f = |r: &Array2<f64>| (sinkhorn(r.view(), 7, 0.8).unwrap() * &w).sum();
        let (_, cache) = sinkhorn_with_cache(raw.view(), 7, 0.8).unwrap();
        let g = sinkhorn_backward(&cache, w.view());
        for i in 0..2 {
            for j in 0..3 {
                let mut a = raw.clone();
                let mut b = raw.clone();
                a[[i, j]] += 1e-6;
                b[[i, j]] -= 1e-6;
                let num = (f(&a) - f(&b)) / 2e-6;
                assert!((num - g[[i, j]]).abs() < 1e-7, "{num} vs {}", g[[i, j]]);
            }
        }
    }
}
