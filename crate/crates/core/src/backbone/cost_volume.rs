//! Patch-to-point cost volume: each current point correlates with its `k`
//! nearest previous-frame points.
//!
//! For neighbor `j` of point `i` the pair vector is
//! `[g_i − g'_j, x'_j − x_i]`, passed through a shared two-layer MLP and
//! aggregated with normalized inverse-distance weights. The output layer is
//! linear, so it is applied after aggregation.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::geometry::{sub, Vec3};
use crate::network::WeightStore;
use crate::nn::{self, leaky_relu, leaky_relu_grad, neighbors, TensorMap};
use crate::scalar::Scalar;

const INVERSE_DISTANCE_OFFSET: f64 = 1e-6;

/// Per-point motion features `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume<T> {
    pub per_point: Array2<T>,
}

/// Positions and backbone features of one frame.
#[derive(Debug, Clone, Copy)]
pub struct CostVolumeInput<'a, T> {
    pub positions: &'a [Vec3<T>],
    pub features: ArrayView2<'a, T>,
}

#[derive(Debug, Clone)]
pub struct CostVolumeCache<T> {
    cur_features: Array2<T>,
    prev_features: Array2<T>,
    pairs: Vec<Vec<(usize, T, Vec3<T>)>>,
    pre: Vec<Array2<T>>,
    agg: Array2<T>,
}

pub(crate) fn cost_volume_with_cache<T: Scalar>(
    cur: CostVolumeInput<'_, T>,
    prev: Option<CostVolumeInput<'_, T>>,
    k: usize,
    weights: &TensorMap<T>,
) -> Result<(CostVolume<T>, Option<CostVolumeCache<T>>)> {
    let n = cur.positions.len();
    if cur.features.nrows() != n {
        return Err(Error::Contract(format!(
            "cost volume: {} feature rows for {n} points",
            cur.features.nrows()
        )));
    }
    let w_feat = weights.mat("cost_volume.w_feat")?;
    let w_pos = weights.mat("cost_volume.w_pos")?;
    let b = weights.vector("cost_volume.b")?;
    let w_out = weights.mat("cost_volume.w_out")?;
    let b_out = weights.vector("cost_volume.b_out")?;
    let width = w_out.ncols();
    let prev = match prev {
        Some(p) if !p.positions.is_empty() => p,
        _ => {
            return Ok((
                CostVolume {
                    per_point: Array2::zeros((n, width)),
                },
                None,
            ))
        }
    };
    if cur.features.ncols() != w_feat.nrows() || prev.features.ncols() != w_feat.nrows() {
        return Err(Error::Contract(format!(
            "cost volume: feature widths {} / {} do not match weights {}",
            cur.features.ncols(),
            prev.features.ncols(),
            w_feat.nrows()
        )));
    }
    let a = cur.features.dot(&w_feat);
    let bp = prev.features.dot(&w_feat);
    let c = w_feat.ncols();
    let nn_lists = neighbors::knn(cur.positions, prev.positions, k.max(1));

    let mut pairs = Vec::with_capacity(n);
    let mut pre_all = Vec::with_capacity(n);
    let mut agg = Array2::<T>::zeros((n, c));
    for (i, nb) in nn_lists.into_iter().enumerate() {
        let inv: Vec<T> = nb
            .iter()
            .map(|(_, d)| T::one() / (*d + T::of(INVERSE_DISTANCE_OFFSET)))
            .collect();
        let total: T = inv.iter().copied().sum();
        let mut pre = Array2::<T>::zeros((nb.len(), c));
        let mut pi = Vec::with_capacity(nb.len());
        for (slot, ((j, _), w)) in nb.iter().zip(&inv).enumerate() {
            let rel = sub(prev.positions[*j], cur.positions[i]);
            let wn = *w / total;
            for ch in 0..c {
                let v = a[[i, ch]] - bp[[*j, ch]]
                    + rel[0] * w_pos[[0, ch]]
                    + rel[1] * w_pos[[1, ch]]
                    + rel[2] * w_pos[[2, ch]]
                    + b[ch];
                pre[[slot, ch]] = v;
                agg[[i, ch]] += wn * leaky_relu(v);
            }
            pi.push((*j, wn, rel));
        }
        pairs.push(pi);
        pre_all.push(pre);
    }
    let per_point = nn::dense(agg.view(), w_out, b_out)?;
    Ok((
        CostVolume { per_point },
        Some(CostVolumeCache {
            cur_features: cur.features.to_owned(),
            prev_features: prev.features.to_owned(),
            pairs,
            pre: pre_all,
            agg,
        }),
    ))
}

/// Backward pass; returns the gradient with respect to the current-frame features.
/// Previous-frame features are treated as constants.
pub(crate) fn cost_volume_backward<T: Scalar>(
    cache: &CostVolumeCache<T>,
    dh: ArrayView2<'_, T>,
    weights: &TensorMap<T>,
    grads: &mut TensorMap<T>,
) -> Result<Array2<T>> {
    let w_out = weights.mat("cost_volume.w_out")?;
    let (dagg, dw_out, db_out) = nn::dense_backward(cache.agg.view(), w_out, dh);
    grads.accumulate("cost_volume.w_out", dw_out.into_dyn().view());
    grads.accumulate("cost_volume.b_out", db_out.into_dyn().view());

    let c = cache.agg.ncols();
    let n = cache.agg.nrows();
    let mut da = Array2::<T>::zeros((n, c));
    let mut dbp = Array2::<T>::zeros((cache.prev_features.nrows(), c));
    let mut dw_pos = Array2::<T>::zeros((3, c));
    let mut db = Array1::<T>::zeros(c);
    for i in 0..n {
        for (slot, (j, wn, rel)) in cache.pairs[i].iter().enumerate() {
            for ch in 0..c {
                let g = dagg[[i, ch]] * *wn * leaky_relu_grad(cache.pre[i][[slot, ch]]);
                da[[i, ch]] += g;
                dbp[[*j, ch]] -= g;
                for k in 0..3 {
                    dw_pos[[k, ch]] += rel[k] * g;
                }
                db[ch] += g;
            }
        }
    }
    let w_feat = weights.mat("cost_volume.w_feat")?;
    let dw_feat = cache.cur_features.t().dot(&da) + cache.prev_features.t().dot(&dbp);
    grads.accumulate("cost_volume.w_feat", dw_feat.into_dyn().view());
    grads.accumulate("cost_volume.w_pos", dw_pos.into_dyn().view());
    grads.accumulate("cost_volume.b", db.into_dyn().view());
    Ok(da.dot(&w_feat.t()))
}

/// Cost volume `H` for the current frame against the cached previous frame.
/// Without a previous frame the result is all zeros.
pub fn cost_volume<T: Scalar>(
    cur: CostVolumeInput<'_, T>,
    prev: Option<CostVolumeInput<'_, T>>,
    k_neighbors: usize,
    weights: &WeightStore<T>,
) -> Result<CostVolume<T>> {
    cost_volume_with_cache(cur, prev, k_neighbors, weights.tensors()).map(|(h, _)| h)
}
