//! Backward scene flow: mixed-feature aggregation, a second encoder whose
//! pooled vector runs through a recurrent cell, and a row-wise flow decoder.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::backbone::{pfe_core, pfe_core_backward, BackboneFeatures, CostVolume, PfeCache, PfeConfig};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::network::WeightStore;
use crate::nn::{self, gru_backward, gru_forward, leaky_relu, leaky_relu_grad, Activation, GruCache, MlpCache, TensorMap};
use crate::radar::RadarFrame;
use crate::scalar::Scalar;

pub const FLOW_HEAD_LAYERS: usize = 3;

/// Latent per-point flow embedding `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEmbedding<T> {
    pub per_point: Array2<T>,
}

/// Per-point backward motion vectors, meters per frame interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlow<T> {
    pub vectors: Array2<T>,
}

impl<T: Scalar> SceneFlow<T> {
    pub fn zeros(n: usize) -> Self {
        SceneFlow {
            vectors: Array2::zeros((n, 3)),
        }
    }

    pub fn from_rows(rows: &[Vec3<T>]) -> Self {
        SceneFlow {
            vectors: Array2::from_shape_fn((rows.len(), 3), |(i, k)| rows[i][k]),
        }
    }

    pub fn row(&self, i: usize) -> Vec3<T> {
        [self.vectors[[i, 0]], self.vectors[[i, 1]], self.vectors[[i, 2]]]
    }
}

/// Recurrent state carried across the frames of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GruState<T> {
    pub hidden: Array1<T>,
    pub initialized: bool,
}

impl<T: Scalar> GruState<T> {
    pub fn new(dim: usize) -> Self {
        GruState {
            hidden: Array1::zeros(dim),
            initialized: false,
        }
    }

    pub fn reset(&mut self) {
        self.hidden.fill(T::zero());
        self.initialized = false;
    }

    fn effective(&self) -> Array1<T> {
        if self.initialized {
            self.hidden.clone()
        } else {
            Array1::zeros(self.hidden.len())
        }
    }
}

/// Row `i` is `[position_i, v_r, v_c, g_i, h_i]`.
pub fn build_mixed_features<T: Scalar>(
    frame: &RadarFrame<T>,
    g: &BackboneFeatures<T>,
    h: &CostVolume<T>,
) -> Result<Array2<T>> {
    let vel = crate::backbone::velocity_features(frame);
    mixed_from_parts(&frame.positions(), vel.view(), g.per_point.view(), h.per_point.view())
}

pub(crate) fn mixed_from_parts<T: Scalar>(
    positions: &[Vec3<T>],
    velocities: ArrayView2<'_, T>,
    g: ArrayView2<'_, T>,
    h: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    let n = positions.len();
    if velocities.nrows() != n || g.nrows() != n || h.nrows() != n {
        return Err(Error::Contract(format!(
            "mixed features: row counts differ (points {n}, velocity {}, G {}, H {})",
            velocities.nrows(),
            g.nrows(),
            h.nrows()
        )));
    }
    let (fg, fh) = (g.ncols(), h.ncols());
    let mut out = Array2::zeros((n, 5 + fg + fh));
    for (i, p) in positions.iter().enumerate() {
        for k in 0..3 {
            out[[i, k]] = p[k];
        }
    }
    out.slice_mut(s![.., 3..5]).assign(&velocities);
    out.slice_mut(s![.., 5..5 + fg]).assign(&g);
    out.slice_mut(s![.., 5 + fg..]).assign(&h);
    Ok(out)
}

#[derive(Debug, Clone)]
pub(crate) struct FlowEmbedCache<T> {
    pfe: PfeCache<T>,
    out_in: Array2<T>,
    out_pre: Array2<T>,
    gru: GruCache<T>,
}

pub(crate) fn flow_embed_with_cache<T: Scalar>(
    mixed: ArrayView2<'_, T>,
    cfg: &PfeConfig,
    gru: &GruState<T>,
    weights: &TensorMap<T>,
) -> Result<(FlowEmbedding<T>, GruState<T>, Option<FlowEmbedCache<T>>)> {
    let n = mixed.nrows();
    let f_e = weights.mat("flow_pfe.out.w")?.ncols();
    if n == 0 {
        return Ok((
            FlowEmbedding {
                per_point: Array2::zeros((0, f_e + gru.hidden.len())),
            },
            gru.clone(),
            None,
        ));
    }
    if mixed.ncols() < 3 {
        return Err(Error::Contract("mixed features must start with positions".into()));
    }
    let positions: Vec<Vec3<T>> = mixed
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2]])
        .collect();
    let (out, pfe_cache) = pfe_core("flow_pfe", &positions, mixed, cfg, weights)?;
    let out_pre = nn::dense(
        out.local.view(),
        weights.mat("flow_pfe.out.w")?,
        weights.vector("flow_pfe.out.b")?,
    )?;
    let h_prev = gru.effective();
    let (h_new, gru_cache) = gru_forward("gru", out.global_vec.view(), h_prev.view(), weights)?;
    let e_local = out_pre.mapv(leaky_relu);
    let per_point = crate::backbone::attach_global(&e_local, &h_new);
    Ok((
        FlowEmbedding { per_point },
        GruState {
            hidden: h_new,
            initialized: true,
        },
        Some(FlowEmbedCache {
            pfe: pfe_cache,
            out_in: out.local,
            out_pre,
            gru: gru_cache,
        }),
    ))
}

/// Returns the gradient with respect to the mixed features.
pub(crate) fn flow_embed_backward<T: Scalar>(
    cache: &FlowEmbedCache<T>,
    de: ArrayView2<'_, T>,
    weights: &TensorMap<T>,
    grads: &mut TensorMap<T>,
) -> Result<Array2<T>> {
    let f_e = cache.out_pre.ncols();
    let mut de_local = de.slice(s![.., ..f_e]).to_owned();
    let dh = de.slice(s![.., f_e..]).sum_axis(Axis(0));
    let (dglobal, _dh_prev) = gru_backward("gru", &cache.gru, dh.view(), weights, grads)?;
    ndarray::Zip::from(&mut de_local)
        .and(&cache.out_pre)
        .for_each(|g, &x| *g = *g * leaky_relu_grad(x));
    let (dlocal, dw, db) = nn::dense_backward(cache.out_in.view(), weights.mat("flow_pfe.out.w")?, de_local.view());
    grads.accumulate("flow_pfe.out.w", dw.into_dyn().view());
    grads.accumulate("flow_pfe.out.b", db.into_dyn().view());
    pfe_core_backward("flow_pfe", &cache.pfe, dlocal.view(), dglobal.view(), weights, grads)
}

/// Flow embedding for one frame; advances the recurrent state.
/// An uninitialized state is treated as a zero hidden vector.
pub fn flow_embed<T: Scalar>(
    mixed: ArrayView2<'_, T>,
    cfg: &PfeConfig,
    gru: &GruState<T>,
    weights: &WeightStore<T>,
) -> Result<(FlowEmbedding<T>, GruState<T>)> {
    let (e, g, _) = flow_embed_with_cache(mixed, cfg, gru, weights.tensors())?;
    Ok((e, g))
}

pub(crate) fn predict_flow_with_cache<T: Scalar>(
    embedding: &FlowEmbedding<T>,
    weights: &TensorMap<T>,
) -> Result<(SceneFlow<T>, MlpCache<T>)> {
    let (v, cache) = nn::mlp_forward(
        "flow_head",
        FLOW_HEAD_LAYERS,
        Activation::Identity,
        embedding.per_point.view(),
        weights,
    )?;
    if v.ncols() != 3 {
        return Err(Error::Contract(format!("flow head emits {} values per point", v.ncols())));
    }
    Ok((SceneFlow { vectors: v }, cache))
}

/// Row-wise decoder from flow embedding to 3D backward flow; linear output layer.
pub fn predict_flow<T: Scalar>(embedding: &FlowEmbedding<T>, weights: &WeightStore<T>) -> Result<SceneFlow<T>> {
    predict_flow_with_cache(embedding, weights.tensors()).map(|(f, _)| f)
}

pub(crate) fn predict_flow_backward<T: Scalar>(
    cache: &MlpCache<T>,
    dflow: ArrayView2<'_, T>,
    weights: &TensorMap<T>,
    grads: &mut TensorMap<T>,
) -> Result<Array2<T>> {
    nn::mlp_backward("flow_head", Activation::Identity, cache, dflow, weights, grads)
}
