//! Energy-based truncated-SVD compression of weight matrices.
//!
//! A matrix `W` with singular values `s_1 >= s_2 >= ...` is replaced by its
//! best rank-`r` approximation, where `r` is the smallest rank whose squared
//! singular values hold at least a fraction `e` of the total energy. The
//! approximation travels as a factor pair `U (m x r)`, `V (r x n)` with the
//! singular values folded into `U`.
//!
//! A layer only travels factored when `r (m + n) < m n`. Otherwise the same
//! rank-`r` approximation is sent as a dense `m x n` matrix, so compression
//! never costs more than the uncompressed weights. Biases always travel dense.

pub mod wire;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{matmul, svd, Matrix};
use crate::nn::{Layer, Mlp};

/// Smallest `r` with `sum_{i<=r} s_i^2 >= e * sum_i s_i^2`.
///
/// `sigma` must be non-empty, non-increasing and non-negative; an all-zero
/// spectrum is rejected.
pub fn energy_rank(sigma: &[f64], e: f64) -> Result<usize> {
    check_threshold(e)?;
    if sigma.is_empty() {
        return Err(Error::InvalidArgument("empty singular value list".into()));
    }
    if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || sigma.windows(2).any(|w| w[0] < w[1])
    {
        return Err(Error::InvalidArgument(
            "singular values must be finite, non-negative and non-increasing".into(),
        ));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::ZeroMatrix {
            rows: sigma.len(),
            cols: sigma.len(),
        });
    }
    let target = e * total;
    let mut kept = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        kept += s * s;
        if kept >= target {
            return Ok(i + 1);
        }
    }
    Ok(sigma.len())
}

pub(crate) fn check_threshold(e: f64) -> Result<()> {
    if e > 0.0 && e <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "threshold e must lie in (0, 1], got {e}"
        )))
    }
}

/// Rank-`r` factors: `u` is `m x r` with columns `s_i u_i`, `v` is `r x n`
/// with rows `v_i^T`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FactorPair {
    u: Matrix,
    v: Matrix,
}

impl FactorPair {
    pub fn new(u: Matrix, v: Matrix) -> Result<Self> {
        if u.cols() != v.rows() || u.cols() > u.rows().min(v.cols()) {
            return Err(Error::ShapeMismatch {
                op: "FactorPair::new",
                left: u.shape(),
                right: v.shape(),
            });
        }
        Ok(Self { u, v })
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// Shape of the matrix the pair approximates.
    pub fn orig_shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.cols())
    }

    /// `U V`
    pub fn reconstruct(&self) -> Matrix {
        matmul(&self.u, &self.v).expect("factor pair shapes chain")
    }

    pub fn num_values(&self) -> usize {
        self.u.len() + self.v.len()
    }
}

/// Energy-thresholded truncated SVD of `w`.
pub fn lr_compress(w: &Matrix, e: f64) -> Result<FactorPair> {
    check_threshold(e)?;
    if w.is_zero() {
        return Err(Error::ZeroMatrix {
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let dec = svd(w)?;
    let r = energy_rank(&dec.sigma, e)?;
    let (m, n) = w.shape();
    let u = Matrix::from_fn(m, r, |i, j| dec.u[(i, j)] * dec.sigma[j]);
    let v = Matrix::from_fn(r, n, |i, j| dec.v[(j, i)]);
    FactorPair::new(u, v)
}

pub fn reconstruct(fp: &FactorPair) -> Matrix {
    fp.reconstruct()
}

/// `r (m + n) < m n`: the factored form is strictly smaller than dense.
pub fn factored_is_smaller(m: usize, n: usize, r: usize) -> bool {
    r * (m + n) < m * n
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Payload {
    Factored(FactorPair),
    Dense(Matrix),
}

/// One layer as it travels over the wire.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompressedLayer {
    payload: Payload,
    /// Truncation rank; `None` for uncompressed weights.
    rank: Option<usize>,
    bias: Vec<f64>,
}

impl CompressedLayer {
    /// Weights sent as-is, no truncation.
    pub fn uncompressed(layer: &Layer) -> Self {
        Self {
            payload: Payload::Dense(layer.weight.clone()),
            rank: None,
            bias: layer.bias.clone(),
        }
    }

    /// Truncates `layer.weight` at threshold `e`. With `dense_fallback` the
    /// truncated matrix is sent dense unless factors are strictly smaller.
    pub fn compress(layer: &Layer, e: f64, dense_fallback: bool) -> Result<Self> {
        let fp = lr_compress(&layer.weight, e)?;
        let (m, n) = fp.orig_shape();
        let rank = fp.rank();
        let payload = if !dense_fallback || factored_is_smaller(m, n, rank) {
            Payload::Factored(fp)
        } else {
            Payload::Dense(fp.reconstruct())
        };
        Ok(Self {
            payload,
            rank: Some(rank),
            bias: layer.bias.clone(),
        })
    }

    pub(crate) fn from_parts(
        payload: Payload,
        rank: Option<usize>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let (m, _) = payload_shape(&payload);
        if !bias.is_empty() && bias.len() != m {
            return Err(Error::Wire(format!(
                "bias length {} for {m} output rows",
                bias.len()
            )));
        }
        Ok(Self {
            payload,
            rank,
            bias,
        })
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn rank(&self) -> Option<usize> {
        self.rank
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.payload, Payload::Factored(_))
    }

    /// `(m, n)` of the weight matrix.
    pub fn shape(&self) -> (usize, usize) {
        payload_shape(&self.payload)
    }

    pub fn weight(&self) -> Matrix {
        match &self.payload {
            Payload::Factored(fp) => fp.reconstruct(),
            Payload::Dense(w) => w.clone(),
        }
    }

    pub fn to_layer(&self) -> Layer {
        Layer {
            weight: self.weight(),
            bias: self.bias.clone(),
        }
    }

    /// Real values on the wire: `r (m + n)` or `m n`, plus the bias.
    pub fn transmitted_params(&self) -> usize {
        let weights = match &self.payload {
            Payload::Factored(fp) => fp.num_values(),
            Payload::Dense(w) => w.len(),
        };
        weights + self.bias.len()
    }
}

fn payload_shape(p: &Payload) -> (usize, usize) {
    match p {
        Payload::Factored(fp) => fp.orig_shape(),
        Payload::Dense(w) => w.shape(),
    }
}

pub fn transmitted_params(layer: &CompressedLayer) -> usize {
    layer.transmitted_params()
}

/// Every layer of a model in transmitted form.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompressedModel {
    layers: Vec<CompressedLayer>,
}

impl CompressedModel {
    pub fn new(layers: Vec<CompressedLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "compressed model has no layers".into(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].shape().1 != pair[0].shape().0 {
                return Err(Error::ShapeMismatch {
                    op: "CompressedModel::new",
                    left: pair[0].shape(),
                    right: pair[1].shape(),
                }
                .in_layer(i + 1));
            }
        }
        Ok(Self { layers })
    }

    pub fn uncompressed(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(CompressedLayer::uncompressed)
                .collect(),
        }
    }

    pub fn layers(&self) -> &[CompressedLayer] {
        &self.layers
    }

    pub fn ranks(&self) -> Vec<Option<usize>> {
        self.layers.iter().map(CompressedLayer::rank).collect()
    }

    pub fn transmitted_params(&self) -> usize {
        self.layers
            .iter()
            .map(CompressedLayer::transmitted_params)
            .sum()
    }

    pub fn reconstruct(&self) -> Mlp {
        Mlp::new(self.layers.iter().map(CompressedLayer::to_layer).collect())
            .expect("compressed layers chain")
    }

    pub fn same_shape(&self, other: &CompressedModel) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape() == b.shape() && a.bias.len() == b.bias.len())
    }
}

/// Compresses every weight matrix of `model` at threshold `e` with dense
/// fallback; biases pass through untouched.
pub fn compress_model(model: &Mlp, e: f64) -> Result<CompressedModel> {
    compress_model_with(model, e, true)
}

pub fn compress_model_with(model: &Mlp, e: f64, dense_fallback: bool) -> Result<CompressedModel> {
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            CompressedLayer::compress(l, e, dense_fallback).map_err(|err| err.in_layer(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedModel { layers })
}
