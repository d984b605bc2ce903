//! Single gated recurrent cell over one vector:
//!
//! ```text
//! z  = σ(x W_z + h U_z + b_z)
//! r  = σ(x W_r + h U_r + b_r)
//! n  = tanh(x W_h + (r ⊙ h) U_h + b_h)
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use ndarray::{Array1, ArrayView1, Axis};

use super::layers::sigmoid;
use super::TensorMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    x: Array1<T>,
    h: Array1<T>,
    z: Array1<T>,
    r: Array1<T>,
    n: Array1<T>,
}

fn affine2<T: Scalar>(
    x: ArrayView1<'_, T>,
    h: ArrayView1<'_, T>,
    w: &str,
    u: &str,
    b: &str,
    weights: &TensorMap<T>,
) -> Result<Array1<T>> {
    let w = weights.mat(w)?;
    let u = weights.mat(u)?;
    let b = weights.vector(b)?;
    if w.nrows() != x.len() || u.nrows() != h.len() {
        return Err(Error::Contract(format!(
            "gru input {} / hidden {} do not match weights {:?} / {:?}",
            x.len(),
            h.len(),
            w.shape(),
            u.shape()
        )));
    }
    Ok(x.dot(&w) + h.dot(&u) + b)
}

pub fn gru_forward<T: Scalar>(
    prefix: &str,
    x: ArrayView1<'_, T>,
    h: ArrayView1<'_, T>,
    weights: &TensorMap<T>,
) -> Result<(Array1<T>, GruCache<T>)> {
    let n = |s: &str| format!("{prefix}.{s}");
    let z = affine2(x, h, &n("w_z"), &n("u_z"), &n("b_z"), weights)?.mapv(sigmoid);
    let r = affine2(x, h, &n("w_r"), &n("u_r"), &n("b_r"), weights)?.mapv(sigmoid);
    let rh = &r * &h;
    let cand = affine2(x, rh.view(), &n("w_h"), &n("u_h"), &n("b_h"), weights)?.mapv(|v| v.tanh());
    let one = T::one();
    let h_new = ndarray::Zip::from(&z)
        .and(&cand)
        .and(&h)
        .map_collect(|&z, &c, &h| (one - z) * c + z * h);
    Ok((
        h_new,
        GruCache {
            x: x.to_owned(),
            h: h.to_owned(),
            z,
            r,
            n: cand,
        },
    ))
}

fn outer<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> ndarray::Array2<T> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Accumulates gradients and returns `(dx, dh_prev)`.
pub fn gru_backward<T: Scalar>(
    prefix: &str,
    cache: &GruCache<T>,
    dh_new: ArrayView1<'_, T>,
    weights: &TensorMap<T>,
    grads: &mut TensorMap<T>,
) -> Result<(Array1<T>, Array1<T>)> {
    let n = |s: &str| format!("{prefix}.{s}");
    let one = T::one();
    let GruCache { x, h, z, r, n: cand } = cache;

    let dz = &dh_new * &(h - cand);
    let dcand = &dh_new * &z.mapv(|v| one - v);
    let mut dh = &dh_new * z;

    let dcand_pre = &dcand * &cand.mapv(|v| one - v * v);
    let rh = r * h;
    let u_h = weights.mat(&n("u_h"))?;
    let d_rh = dcand_pre.dot(&u_h.t());
    let dr = &d_rh * h;
    dh += &(&d_rh * r);

    let dr_pre = &dr * &r.mapv(|v| v * (one - v));
    let dz_pre = &dz * &z.mapv(|v| v * (one - v));

    let u_z = weights.mat(&n("u_z"))?;
    let u_r = weights.mat(&n("u_r"))?;
    dh += &dz_pre.dot(&u_z.t());
    dh += &dr_pre.dot(&u_r.t());

    let w_z = weights.mat(&n("w_z"))?;
    let w_r = weights.mat(&n("w_r"))?;
    let w_h = weights.mat(&n("w_h"))?;
    let dx = dz_pre.dot(&w_z.t()) + dr_pre.dot(&w_r.t()) + dcand_pre.dot(&w_h.t());

    grads.accumulate(&n("w_z"), outer(x, &dz_pre).into_dyn().view());
    grads.accumulate(&n("w_r"), outer(x, &dr_pre).into_dyn().view());
    grads.accumulate(&n("w_h"), outer(x, &dcand_pre).into_dyn().view());
    grads.accumulate(&n("u_z"), outer(h, &dz_pre).into_dyn().view());
    grads.accumulate(&n("u_r"), outer(h, &dr_pre).into_dyn().view());
    grads.accumulate(&n("u_h"), outer(&rh, &dcand_pre).into_dyn().view());
    grads.accumulate(&n("b_z"), dz_pre.into_dyn().view());
    grads.accumulate(&n("b_r"), dr_pre.into_dyn().view());
    grads.accumulate(&n("b_h"), dcand_pre.into_dyn().view());
    Ok((dx, dh))
}
