//! Network architecture, weight storage and the per-frame forward/backward pass
//! shared by tracking and training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    attach_global, cost_volume_backward, cost_volume_with_cache, pfe_core, pfe_core_backward, velocity_features,
    BackboneFeatures, CostVolume, CostVolumeCache, CostVolumeInput, PfeCache, PfeConfig,
};
use crate::detector::{classify_backward, classify_with_cache, MotionScores};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::motion::{
    flow_embed_backward, flow_embed_with_cache, mixed_from_parts, predict_flow_backward, predict_flow_with_cache,
    FlowEmbedCache, FlowEmbedding, GruState, SceneFlow,
};
use crate::nn::{MlpCache, TensorMap};
use crate::radar::RadarFrame;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"RMOTW001";

/// Every shape-determining hyperparameter of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub backbone: PfeConfig,
    /// Neighbors gathered from the previous frame.
    pub cost_volume_k: usize,
    pub cost_volume_hidden: usize,
    /// Width of `H`.
    pub cost_volume_dim: usize,
    pub classifier_hidden: usize,
    /// Without the motion module the flow is zero and the embedding is `G`.
    pub motion_module: bool,
    /// When off, the `(v_r, v_c)` input columns are zeroed.
    pub velocity_features: bool,
    pub flow: PfeConfig,
    /// Width of the per-point part of the flow embedding.
    pub flow_embed_dim: usize,
    pub flow_head_hidden: [usize; 2],
    pub affinity_hidden: [usize; 2],
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            backbone: PfeConfig::default(),
            cost_volume_k: 8,
            cost_volume_hidden: 128,
            cost_volume_dim: 128,
            classifier_hidden: 64,
            motion_module: true,
            velocity_features: true,
            flow: PfeConfig::default(),
            flow_embed_dim: 64,
            flow_head_hidden: [128, 64],
            affinity_hidden: [64, 64],
        }
    }
}

impl Architecture {
    /// A narrow variant for tests and quick experiments.
    pub fn compact() -> Self {
        let pfe = PfeConfig {
            sa_radii: [0.5, 1.0, 2.0],
            sa_neighbors: [4, 8, 8],
            sa_channels: [8, 8, 8],
            fp_channels: [8, 8, 8],
            global_dim: 16,
        };
        Architecture {
            backbone: pfe.clone(),
            cost_volume_k: 4,
            cost_volume_hidden: 16,
            cost_volume_dim: 16,
            classifier_hidden: 16,
            motion_module: true,
            velocity_features: true,
            flow: pfe,
            flow_embed_dim: 16,
            flow_head_hidden: [32, 16],
            affinity_hidden: [16, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.motion_module {
            self.flow.validate()?;
        }
        let dims = [
            self.cost_volume_k,
            self.cost_volume_hidden,
            self.cost_volume_dim,
            self.classifier_hidden,
            self.flow_embed_dim,
            self.flow_head_hidden[0],
            self.flow_head_hidden[1],
            self.affinity_hidden[0],
            self.affinity_hidden[1],
        ];
        if dims.contains(&0) {
            return Err(Error::Config("architecture widths and cost_volume_k must be > 0".into()));
        }
        Ok(())
    }

    /// Width of `G`.
    pub fn backbone_width(&self) -> usize {
        self.backbone.output_width()
    }

    pub fn gru_dim(&self) -> usize {
        self.flow.global_dim
    }

    /// Width of the flow embedding used downstream (`G` when the motion module is off).
    pub fn embedding_width(&self) -> usize {
        if self.motion_module {
            self.flow_embed_dim + self.gru_dim()
        } else {
            self.backbone_width()
        }
    }

    /// Width of a cluster descriptor.
    pub fn descriptor_width(&self) -> usize {
        6 + 3 + self.embedding_width()
    }

    pub fn mixed_width(&self) -> usize {
        5 + self.backbone_width() + self.cost_volume_dim
    }

    /// `(name, shape)` of every learnable tensor, in a fixed order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = self.backbone.tensor_shapes("pfe", 2);
        let (fg, cvh, fh) = (self.backbone_width(), self.cost_volume_hidden, self.cost_volume_dim);
        let mut push = |n: &str, s: &[usize]| v.push((n.to_string(), s.to_vec()));
        push("cost_volume.w_feat", &[fg, cvh]);
        push("cost_volume.w_pos", &[3, cvh]);
        push("cost_volume.b", &[cvh]);
        push("cost_volume.w_out", &[cvh, fh]);
        push("cost_volume.b_out", &[fh]);
        mlp_shapes(&mut v, "classifier", &[fh, self.classifier_hidden, 1]);
        if self.motion_module {
            v.extend(self.flow.tensor_shapes("flow_pfe", self.mixed_width()));
            let (fl, fe, hd) = (self.flow.local_width(), self.flow_embed_dim, self.gru_dim());
            v.push(("flow_pfe.out.w".into(), vec![fl, fe]));
            v.push(("flow_pfe.out.b".into(), vec![fe]));
            for g in ["z", "r", "h"] {
                v.push((format!("gru.w_{g}"), vec![self.flow.global_dim, hd]));
                v.push((format!("gru.u_{g}"), vec![hd, hd]));
                v.push((format!("gru.b_{g}"), vec![hd]));
            }
            let [h0, h1] = self.flow_head_hidden;
            mlp_shapes(&mut v, "flow_head", &[self.embedding_width(), h0, h1, 3]);
        }
        let [a0, a1] = self.affinity_hidden;
        mlp_shapes(&mut v, "affinity", &[self.descriptor_width(), a0, a1, 1]);
        v
    }
}

fn mlp_shapes(v: &mut Vec<(String, Vec<usize>)>, prefix: &str, dims: &[usize]) {
    for (l, w) in dims.windows(2).enumerate() {
        v.push((format!("{prefix}.layer{l}.w"), vec![w[0], w[1]]));
        v.push((format!("{prefix}.layer{l}.b"), vec![w[1]]));
    }
}

/// Tensors updated in the first training stage: encoder, cost volume and motion classifier.
pub fn is_stage1_tensor(name: &str) -> bool {
    name.starts_with("pfe.") || name.starts_with("cost_volume.") || name.starts_with("classifier.")
}

/// Named tensors of a network together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore<T> {
    arch: Architecture,
    tensors: TensorMap<T>,
}

impl<T: Scalar> WeightStore<T> {
    /// Seeded Xavier-uniform matrices and zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = TensorMap::new();
        for (name, shape) in arch.tensor_shapes() {
            let t = if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || T::of(rng.random_range(-bound..bound)))
            } else {
                ArrayD::zeros(IxDyn(&shape))
            };
            tensors.insert(name, t);
        }
        Ok(WeightStore {
            arch: arch.clone(),
            tensors,
        })
    }

    /// All tensors zero.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut tensors = TensorMap::new();
        for (name, shape) in arch.tensor_shapes() {
            tensors.insert(name, ArrayD::zeros(IxDyn(&shape)));
        }
        Ok(WeightStore {
            arch: arch.clone(),
            tensors,
        })
    }

    /// Wraps existing tensors after checking them against the architecture.
    pub fn from_parts(arch: Architecture, tensors: TensorMap<T>) -> Result<Self> {
        arch.validate()?;
        let store = WeightStore { arch, tensors };
        store.verify()?;
        Ok(store)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &TensorMap<T> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut TensorMap<T> {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> TensorMap<T> {
        self.tensors
    }

    /// Every expected tensor is present with its exact shape and nothing else is stored.
    pub fn verify(&self) -> Result<()> {
        let expected = self.arch.tensor_shapes();
        for (name, shape) in &expected {
            let t = self
                .tensors
                .get(name)
                .map_err(|_| Error::Weights(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Weights(format!(
                    "tensor {name} has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        if self.tensors.len() != expected.len() {
            let extra: Vec<&str> = self
                .tensors
                .names()
                .filter(|n| !expected.iter().any(|(e, _)| e == n))
                .collect();
            return Err(Error::Weights(format!("unexpected tensors: {}", extra.join(", "))));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            arch: self.arch.clone(),
            tensors: self.tensors.cast(),
        }
    }

    /// Writes the binary weight file: magic, JSON manifest, then named `f32` tensors.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let manifest = serde_json::to_vec(&self.arch).map_err(|e| Error::Weights(e.to_string()))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(manifest.len() as u32).map_err(io)?;
        w.write_all(&manifest).map_err(io)?;
        let shapes = self.arch.tensor_shapes();
        w.write_u32::<LittleEndian>(shapes.len() as u32).map_err(io)?;
        for (name, _) in &shapes {
            let t = self.tensors.get(name)?;
            w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_u32::<LittleEndian>(t.ndim() as u32).map_err(io)?;
            for d in t.shape() {
                w.write_u64::<LittleEndian>(*d as u64).map_err(io)?;
            }
            for v in t.iter() {
                w.write_f32::<LittleEndian>(v.to_f32().unwrap_or(f32::NAN)).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads a weight file and verifies every tensor against the stored manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let bad = |m: String| Error::Weights(format!("{}: {m}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a weight file".into()));
        }
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest).map_err(io)?;
        let arch: Architecture = serde_json::from_slice(&manifest).map_err(|e| bad(format!("manifest: {e}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut tensors = TensorMap::new();
        for _ in 0..count {
            let nlen = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(T::of(r.read_f32::<LittleEndian>().map_err(io)? as f64));
            }
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad(e.to_string()))?;
            if tensors.contains(&name) {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            tensors.insert(name, t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after the last tensor".into()));
        }
        WeightStore::from_parts(arch, tensors).map_err(|e| bad(e.to_string()))
    }
}

/// What the next frame needs from the current one.
#[derive(Debug, Clone, PartialEq)]
pub struct PrevFrame<T> {
    pub positions: Vec<Vec3<T>>,
    pub features: Array2<T>,
}

/// All per-frame network outputs.
#[derive(Debug, Clone)]
pub struct NetworkOutput<T> {
    pub backbone: BackboneFeatures<T>,
    pub cost_volume: CostVolume<T>,
    pub scores: MotionScores<T>,
    pub embedding: FlowEmbedding<T>,
    pub flow: SceneFlow<T>,
    pub gru: GruState<T>,
}

impl<T: Scalar> NetworkOutput<T> {
    pub fn prev_frame(&self, frame: &RadarFrame<T>) -> PrevFrame<T> {
        PrevFrame {
            positions: frame.positions(),
            features: self.backbone.per_point.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NetworkCache<T> {
    pfe: PfeCache<T>,
    local_width: usize,
    cost_volume: Option<CostVolumeCache<T>>,
    classifier: MlpCache<T>,
    motion: Option<(FlowEmbedCache<T>, MlpCache<T>)>,
}

fn input_velocities<T: Scalar>(arch: &Architecture, frame: &RadarFrame<T>) -> Array2<T> {
    if arch.velocity_features {
        velocity_features(frame)
    } else {
        Array2::zeros((frame.len(), 2))
    }
}

pub(crate) fn forward_with_cache<T: Scalar>(
    arch: &Architecture,
    weights: &TensorMap<T>,
    frame: &RadarFrame<T>,
    prev: Option<&PrevFrame<T>>,
    gru: &GruState<T>,
) -> Result<(NetworkOutput<T>, NetworkCache<T>)> {
    let n = frame.len();
    let positions = frame.positions();
    let vel = input_velocities(arch, frame);
    let (pfe_out, pfe_cache) = pfe_core("pfe", &positions, vel.view(), &arch.backbone, weights)?;
    let g = attach_global(&pfe_out.local, &pfe_out.global_vec);
    let prev_input = prev.filter(|p| !p.positions.is_empty()).map(|p| CostVolumeInput {
        positions: &p.positions,
        features: p.features.view(),
    });
    let (h, cv_cache) = cost_volume_with_cache(
        CostVolumeInput {
            positions: &positions,
            features: g.view(),
        },
        prev_input,
        arch.cost_volume_k,
        weights,
    )?;
    let (scores, cls_cache) = classify_with_cache(h.per_point.view(), weights)?;

    let (embedding, flow, gru_new, motion) = if arch.motion_module && n > 0 {
        let mixed = mixed_from_parts(&positions, vel.view(), g.view(), h.per_point.view())?;
        let (e, gru_new, fcache) = flow_embed_with_cache(mixed.view(), &arch.flow, gru, weights)?;
        let (flow, head_cache) = predict_flow_with_cache(&e, weights)?;
        let fcache = fcache.ok_or_else(|| Error::Contract("flow embedding cache missing".into()))?;
        (e, flow, gru_new, Some((fcache, head_cache)))
    } else {
        let width = arch.embedding_width();
        let per_point = if arch.motion_module { Array2::zeros((0, width)) } else { g.clone() };
        (FlowEmbedding { per_point }, SceneFlow::zeros(n), gru.clone(), None)
    };
    Ok((
        NetworkOutput {
            backbone: BackboneFeatures {
                per_point: g,
                global_vec: pfe_out.global_vec,
            },
            cost_volume: h,
            scores,
            embedding,
            flow,
            gru: gru_new,
        },
        NetworkCache {
            pfe: pfe_cache,
            local_width: arch.backbone.local_width(),
            cost_volume: cv_cache,
            classifier: cls_cache,
            motion,
        },
    ))
}

/// Runs the full per-frame network: encoder, cost volume, classifier, flow embedding and flow.
pub fn forward<T: Scalar>(
    weights: &WeightStore<T>,
    frame: &RadarFrame<T>,
    prev: Option<&PrevFrame<T>>,
    gru: &GruState<T>,
) -> Result<NetworkOutput<T>> {
    forward_with_cache(weights.architecture(), weights.tensors(), frame, prev, gru).map(|(o, _)| o)
}

/// Upstream gradients of one frame's outputs. `None` means zero.
#[derive(Debug, Clone, Default)]
pub(crate) struct OutputGrads<T> {
    pub scores: Option<Vec<T>>,
    pub flow: Option<Array2<T>>,
    pub embedding: Option<Array2<T>>,
}

pub(crate) fn backward<T: Scalar>(
    cache: &NetworkCache<T>,
    upstream: &OutputGrads<T>,
    weights: &TensorMap<T>,
    grads: &mut TensorMap<T>,
) -> Result<()> {
    let n = cache.pfe.len();
    let g_width = weights.mat("cost_volume.w_feat")?.nrows();
    let h_width = weights.mat("cost_volume.w_out")?.ncols();
    let mut dg = Array2::<T>::zeros((n, g_width));
    let mut dh = Array2::<T>::zeros((n, h_width));

    if let Some(ds) = &upstream.scores {
        dh += &classify_backward(&cache.classifier, ds, weights, grads)?;
    }
    match &cache.motion {
        Some((fcache, head_cache)) => {
            let emb_width = weights.mat("flow_head.layer0.w")?.nrows();
            let mut de = upstream.embedding.clone().unwrap_or_else(|| Array2::zeros((n, emb_width)));
            if let Some(df) = &upstream.flow {
                de += &predict_flow_backward(head_cache, df.view(), weights, grads)?;
            }
            let dmixed = flow_embed_backward(fcache, de.view(), weights, grads)?;
            dg += &dmixed.slice(s![.., 5..5 + g_width]);
            dh += &dmixed.slice(s![.., 5 + g_width..]);
        }
        None => {
            if let Some(de) = &upstream.embedding {
                if de.nrows() == n && de.ncols() == g_width {
                    dg += de;
                }
            }
        }
    }
    if let Some(cv) = &cache.cost_volume {
        dg += &cost_volume_backward(cv, dh.view(), weights, grads)?;
    }
    let lw = cache.local_width;
    let dlocal = dg.slice(s![.., ..lw]);
    let dglobal = dg.slice(s![.., lw..]).sum_axis(Axis(0));
    pfe_core_backward("pfe", &cache.pfe, dlocal, dglobal.view(), weights, grads)?;
    Ok(())
}
