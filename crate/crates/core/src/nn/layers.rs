use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::TensorMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Negative-side slope of every leaky rectifier in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Leaky,
    Sigmoid,
}

#[inline]
pub fn leaky_relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::of(LEAKY_SLOPE)
    }
}

#[inline]
pub fn leaky_relu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::of(LEAKY_SLOPE)
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Leaky => leaky_relu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    fn grad<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Leaky => leaky_relu_grad(x),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// `x W + b` for row-major batches `x: N×in`, `W: in×out`.
pub fn dense<T: Scalar>(x: ArrayView2<'_, T>, w: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Result<Array2<T>> {
    if x.ncols() != w.nrows() || w.ncols() != b.len() {
        return Err(Error::Contract(format!(
            "dense layer shape mismatch: x {:?}, w {:?}, b {}",
            x.shape(),
            w.shape(),
            b.len()
        )));
    }
    Ok(x.dot(&w) + &b)
}

/// Returns `(dx, dW, db)` for `y = x W + b`.
pub fn dense_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(&dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Cached activations of a multi-layer perceptron.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    out: Vec<Array2<T>>,
}

fn layer_names(prefix: &str, l: usize) -> (String, String) {
    (format!("{prefix}.layer{l}.w"), format!("{prefix}.layer{l}.b"))
}

/// Row-wise MLP `{prefix}.layer{0..}` with leaky hidden layers and the given output activation.
pub fn mlp_forward<T: Scalar>(
    prefix: &str,
    n_layers: usize,
    output: Activation,
    x: ArrayView2<'_, T>,
    weights: &TensorMap<T>,
) -> Result<(Array2<T>, MlpCache<T>)> {
    let mut cache = MlpCache {
        inputs: Vec::with_capacity(n_layers),
        pre: Vec::with_capacity(n_layers),
        out: Vec::with_capacity(n_layers),
    };
    let mut cur = x.to_owned();
    for l in 0..n_layers {
        let (wn, bn) = layer_names(prefix, l);
        let pre = dense(cur.view(), weights.mat(&wn)?, weights.vector(&bn)?)?;
        let act = if l + 1 == n_layers { output } else { Activation::Leaky };
        let out = pre.mapv(|v| act.apply(v));
        cache.inputs.push(std::mem::replace(&mut cur, out.clone()));
        cache.pre.push(pre);
        cache.out.push(out);
    }
    Ok((cur, cache))
}

/// Accumulates parameter gradients into `grads` and returns `d/dx`.
pub fn mlp_backward<T: Scalar>(
    prefix: &str,
    output: Activation,
    cache: &MlpCache<T>,
    dout: ArrayView2<'_, T>,
    weights: &TensorMap<T>,
    grads: &mut TensorMap<T>,
) -> Result<Array2<T>> {
    let n_layers = cache.pre.len();
    let mut d = dout.to_owned();
    for l in (0..n_layers).rev() {
        let act = if l + 1 == n_layers { output } else { Activation::Leaky };
        let mut dpre = d;
        ndarray::Zip::from(&mut dpre)
            .and(&cache.pre[l])
            .and(&cache.out[l])
            .for_each(|g, &x, &y| *g = *g * act.grad(x, y));
        let (wn, bn) = layer_names(prefix, l);
        let (dx, dw, db) = dense_backward(cache.inputs[l].view(), weights.mat(&wn)?, dpre.view());
        grads.accumulate(&wn, dw.into_dyn().view());
        grads.accumulate(&bn, db.into_dyn().view());
        d = dx;
    }
    Ok(d)
}
