//! Point feature encoder (multi-scale set abstraction, feature propagation,
//! global max-pool) and the inter-frame cost volume.

mod cost_volume;
mod pfe;

pub use cost_volume::{cost_volume, CostVolume, CostVolumeCache, CostVolumeInput};
pub(crate) use cost_volume::{cost_volume_backward, cost_volume_with_cache};
pub use pfe::{pfe_forward, BackboneFeatures, PfeCache, PfeOutput};
pub(crate) use pfe::{attach_global, pfe_core, pfe_core_backward, velocity_features};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder hyperparameters: three parallel grouping scales, one propagation MLP each, and a pooled global vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfeConfig {
    pub sa_radii: [f64; 3],
    pub sa_neighbors: [usize; 3],
    pub sa_channels: [usize; 3],
    pub fp_channels: [usize; 3],
    pub global_dim: usize,
}

impl Default for PfeConfig {
    fn default() -> Self {
        PfeConfig {
            sa_radii: [0.5, 1.0, 2.0],
            sa_neighbors: [8, 16, 32],
            sa_channels: [32, 64, 128],
            fp_channels: [64, 64, 64],
            global_dim: 256,
        }
    }
}

impl PfeConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.sa_radii;
        if !(r[0] > 0.0 && r[0] < r[1] && r[1] < r[2]) {
            return Err(Error::Config("sa_radii must be positive and strictly increasing".into()));
        }
        let counts = self
            .sa_neighbors
            .iter()
            .chain(&self.sa_channels)
            .chain(&self.fp_channels)
            .chain(std::iter::once(&self.global_dim));
        if counts.into_iter().any(|c| *c == 0) {
            return Err(Error::Config("PFE neighbor and channel counts must be > 0".into()));
        }
        Ok(())
    }

    /// Width of the concatenated propagated local features.
    pub fn local_width(&self) -> usize {
        self.fp_channels.iter().sum()
    }

    /// Width of the per-point output: local features plus the broadcast global vector.
    pub fn output_width(&self) -> usize {
        self.local_width() + self.global_dim
    }

    /// `(name, shape)` of every tensor under `prefix` for `in_features` input channels.
    pub fn tensor_shapes(&self, prefix: &str, in_features: usize) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for s in 0..3 {
            let c = self.sa_channels[s];
            v.push((format!("{prefix}.sa{s}.w_feat"), vec![in_features, c]));
            v.push((format!("{prefix}.sa{s}.w_pos"), vec![3, c]));
            v.push((format!("{prefix}.sa{s}.b"), vec![c]));
            v.push((format!("{prefix}.fp{s}.w"), vec![c, self.fp_channels[s]]));
            v.push((format!("{prefix}.fp{s}.b"), vec![self.fp_channels[s]]));
        }
        v.push((format!("{prefix}.global.w"), vec![self.local_width(), self.global_dim]));
        v.push((format!("{prefix}.global.b"), vec![self.global_dim]));
        v
    }
}
