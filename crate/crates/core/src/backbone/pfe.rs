use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::PfeConfig;
use crate::error::{Error, Result};
use crate::geometry::{sub, Vec3};
use crate::network::WeightStore;
use crate::nn::{self, leaky_relu, leaky_relu_grad, neighbors, TensorMap};
use crate::radar::RadarFrame;
use crate::scalar::Scalar;

/// Per-point local-global features and the pooled global vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneFeatures<T> {
    pub per_point: Array2<T>,
    pub global_vec: Array1<T>,
}

impl<T: Scalar> BackboneFeatures<T> {
    pub fn len(&self) -> usize {
        self.per_point.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.per_point.nrows() == 0
    }
}

/// Encoder output before the global vector is attached.
#[derive(Debug, Clone)]
pub struct PfeOutput<T> {
    /// Concatenated propagated features, `N × Σ fp_channels`.
    pub local: Array2<T>,
    pub global_vec: Array1<T>,
}

#[derive(Debug, Clone)]
struct ScaleCache<T> {
    neighbors: Vec<Vec<usize>>,
    max_pre: Array2<T>,
    argmax: Array2<usize>,
    fp_in: Array2<T>,
    fp_pre: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct PfeCache<T> {
    positions: Vec<Vec3<T>>,
    features: Array2<T>,
    scales: Vec<ScaleCache<T>>,
    local: Array2<T>,
    global_pre: Array2<T>,
    global_arg: Vec<usize>,
}

impl<T> PfeCache<T> {
    pub(crate) fn len(&self) -> usize {
        self.positions.len()
    }
}

/// Encoder over `positions` with per-point input `features`, tensors under `prefix`.
pub(crate) fn pfe_core<T: Scalar>(
    prefix: &str,
    positions: &[Vec3<T>],
    features: ArrayView2<'_, T>,
    cfg: &PfeConfig,
    weights: &TensorMap<T>,
) -> Result<(PfeOutput<T>, PfeCache<T>)> {
    let n = positions.len();
    if features.nrows() != n {
        return Err(Error::Contract(format!(
            "{prefix}: {} feature rows for {n} points",
            features.nrows()
        )));
    }
    let mut scales = Vec::with_capacity(3);
    let mut local = Array2::zeros((n, cfg.local_width()));
    let mut col = 0;
    for s in 0..3 {
        let w_feat = weights.mat(&format!("{prefix}.sa{s}.w_feat"))?;
        let w_pos = weights.mat(&format!("{prefix}.sa{s}.w_pos"))?;
        let b = weights.vector(&format!("{prefix}.sa{s}.b"))?;
        if w_feat.nrows() != features.ncols() {
            return Err(Error::Contract(format!(
                "{prefix}.sa{s}: {} input channels, weights expect {}",
                features.ncols(),
                w_feat.nrows()
            )));
        }
        let c = w_feat.ncols();
        let fw = features.dot(&w_feat);
        let nbrs = neighbors::ball_query(positions, T::of(cfg.sa_radii[s]), cfg.sa_neighbors[s]);
        let mut max_pre = Array2::from_elem((n, c), T::neg_infinity());
        let mut argmax = Array2::zeros((n, c));
        for (i, nb) in nbrs.iter().enumerate() {
            for &j in nb {
                let rel = sub(positions[j], positions[i]);
                for ch in 0..c {
                    let v = fw[[j, ch]]
                        + rel[0] * w_pos[[0, ch]]
                        + rel[1] * w_pos[[1, ch]]
                        + rel[2] * w_pos[[2, ch]]
                        + b[ch];
                    if v > max_pre[[i, ch]] {
                        max_pre[[i, ch]] = v;
                        argmax[[i, ch]] = j;
                    }
                }
            }
        }
        let fp_in = max_pre.mapv(leaky_relu);
        let fp_pre = nn::dense(
            fp_in.view(),
            weights.mat(&format!("{prefix}.fp{s}.w"))?,
            weights.vector(&format!("{prefix}.fp{s}.b"))?,
        )?;
        let width = fp_pre.ncols();
        local
            .slice_mut(s![.., col..col + width])
            .assign(&fp_pre.mapv(leaky_relu));
        col += width;
        scales.push(ScaleCache {
            neighbors: nbrs,
            max_pre,
            argmax,
            fp_in,
            fp_pre,
        });
    }
    let global_pre = nn::dense(
        local.view(),
        weights.mat(&format!("{prefix}.global.w"))?,
        weights.vector(&format!("{prefix}.global.b"))?,
    )?;
    let gd = global_pre.ncols();
    let mut global_vec = Array1::zeros(gd);
    let mut global_arg = vec![0; gd];
    if n > 0 {
        for ch in 0..gd {
            let mut best = 0;
            for i in 1..n {
                if global_pre[[i, ch]] > global_pre[[best, ch]] {
                    best = i;
                }
            }
            global_arg[ch] = best;
            global_vec[ch] = leaky_relu(global_pre[[best, ch]]);
        }
    }
    Ok((
        PfeOutput {
            local: local.clone(),
            global_vec,
        },
        PfeCache {
            positions: positions.to_vec(),
            features: features.to_owned(),
            scales,
            local,
            global_pre,
            global_arg,
        },
    ))
}

/// Backward pass of [`pfe_core`]; returns the gradient with respect to the input features.
pub(crate) fn pfe_core_backward<T: Scalar>(
    prefix: &str,
    cache: &PfeCache<T>,
    dlocal: ArrayView2<'_, T>,
    dglobal: ArrayView1<'_, T>,
    weights: &TensorMap<T>,
    grads: &mut TensorMap<T>,
) -> Result<Array2<T>> {
    let n = cache.positions.len();
    let mut dlocal = dlocal.to_owned();
    if n > 0 {
        let gd = dglobal.len();
        let mut dpre = Array2::zeros((n, gd));
        for ch in 0..gd {
            let i = cache.global_arg[ch];
            dpre[[i, ch]] = dglobal[ch] * leaky_relu_grad(cache.global_pre[[i, ch]]);
        }
        let wn = format!("{prefix}.global.w");
        let (dx, dw, db) = nn::dense_backward(cache.local.view(), weights.mat(&wn)?, dpre.view());
        grads.accumulate(&wn, dw.into_dyn().view());
        grads.accumulate(&format!("{prefix}.global.b"), db.into_dyn().view());
        dlocal += &dx;
    }

    let mut dfeatures = Array2::zeros(cache.features.raw_dim());
    let mut col = 0;
    for (s, sc) in cache.scales.iter().enumerate() {
        let width = sc.fp_pre.ncols();
        let mut dfp = dlocal.slice(s![.., col..col + width]).to_owned();
        col += width;
        ndarray::Zip::from(&mut dfp)
            .and(&sc.fp_pre)
            .for_each(|g, &x| *g = *g * leaky_relu_grad(x));
        let wn = format!("{prefix}.fp{s}.w");
        let (dfp_in, dw, db) = nn::dense_backward(sc.fp_in.view(), weights.mat(&wn)?, dfp.view());
        grads.accumulate(&wn, dw.into_dyn().view());
        grads.accumulate(&format!("{prefix}.fp{s}.b"), db.into_dyn().view());

        let c = sc.max_pre.ncols();
        let mut dfw = Array2::<T>::zeros((n, c));
        let mut dw_pos = Array2::<T>::zeros((3, c));
        let mut db = Array1::<T>::zeros(c);
        for i in 0..n {
            for ch in 0..c {
                let g = dfp_in[[i, ch]] * leaky_relu_grad(sc.max_pre[[i, ch]]);
                if g == T::zero() {
                    continue;
                }
                let j = sc.argmax[[i, ch]];
                let rel = sub(cache.positions[j], cache.positions[i]);
                dfw[[j, ch]] += g;
                for k in 0..3 {
                    dw_pos[[k, ch]] += rel[k] * g;
                }
                db[ch] += g;
            }
        }
        let wf = format!("{prefix}.sa{s}.w_feat");
        let w_feat = weights.mat(&wf)?;
        grads.accumulate(&wf, cache.features.t().dot(&dfw).into_dyn().view());
        grads.accumulate(&format!("{prefix}.sa{s}.w_pos"), dw_pos.into_dyn().view());
        grads.accumulate(&format!("{prefix}.sa{s}.b"), db.into_dyn().view());
        dfeatures += &dfw.dot(&w_feat.t());
        debug_assert_eq!(sc.neighbors.len(), n);
    }
    Ok(dfeatures)
}

/// Concatenates `local` with `global` broadcast to every row.
pub(crate) fn attach_global<T: Scalar>(local: &Array2<T>, global: &Array1<T>) -> Array2<T> {
    let n = local.nrows();
    let mut out = Array2::zeros((n, local.ncols() + global.len()));
    out.slice_mut(s![.., ..local.ncols()]).assign(local);
    out.slice_mut(s![.., local.ncols()..])
        .assign(&global.view().insert_axis(Axis(0)).broadcast((n, global.len())).expect("broadcast"));
    out
}

/// Velocity input columns `(v_r, v_c)` of a frame.
pub(crate) fn velocity_features<T: Scalar>(frame: &RadarFrame<T>) -> Array2<T> {
    Array2::from_shape_fn((frame.len(), 2), |(i, k)| {
        let p = &frame.points[i];
        if k == 0 {
            p.rrv
        } else {
            p.rrv_compensated
        }
    })
}

/// Backbone encoder: per-point features `G` for one frame.
///
/// `extra_features` defaults to the frame's `(v_r, v_c)` columns. An empty frame
/// yields zero rows and a zero global vector.
pub fn pfe_forward<T: Scalar>(
    frame: &RadarFrame<T>,
    extra_features: Option<ArrayView2<'_, T>>,
    cfg: &PfeConfig,
    weights: &WeightStore<T>,
) -> Result<BackboneFeatures<T>> {
    let positions = frame.positions();
    let owned;
    let features = match extra_features {
        Some(f) => f,
        None => {
            owned = velocity_features(frame);
            owned.view()
        }
    };
    let (out, _) = pfe_core("pfe", &positions, features, cfg, weights.tensors())?;
    let per_point = attach_global(&out.local, &out.global_vec);
    debug_assert_eq!(per_point.ncols(), cfg.output_width());
    Ok(BackboneFeatures {
        per_point,
        global_vec: out.global_vec,
    })
}
