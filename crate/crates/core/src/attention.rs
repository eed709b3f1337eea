//! Channel-spatial attention over a `[C, rows, cols]` feature-map stack `A`.
//!
//! Channel branch: `S = softmax(fc2 · relu(fc1 · gap(A)))`, then each map is
//! rescaled, `b_c = s_c · a_c`. Spatial branch: the channel-summed `B` is
//! normalized into a map `T` over locations, and `D = A ⊙ T` with `T`
//! broadcast across channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ReduceKind, Tensor, Var};

/// How the channel-summed map of `B` is turned into `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpatialMode {
    /// `T = Σ_c b_c / Σ_{c,i,j} b_{c,i,j}`.
    #[default]
    SumNormalized,
    /// Softmax over all locations of `Σ_c b_c`.
    ExpNormalized,
}

impl SpatialMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SpatialMode::SumNormalized => "sum",
            SpatialMode::ExpNormalized => "exp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(SpatialMode::SumNormalized),
            "exp" | "softmax" => Ok(SpatialMode::ExpNormalized),
            other => Err(Error::Config(format!("unknown spatial mode {other:?} (expected sum or exp)"))),
        }
    }
}

/// Weights of the two bias-free fully connected layers producing `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[C, C/r]`
    pub fc1: Tensor,
    /// `[C/r, C]`
    pub fc2: Tensor,
    pub reduction: usize,
}

impl AttentionParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(AttentionParams {
            fc1: Tensor::zeros(&[channels, hidden]),
            fc2: Tensor::zeros(&[hidden, channels]),
            reduction,
        })
    }

    /// Uniform fan-in scaled initialization, `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        let mut draw = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let v = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(&[rows, cols], v, true).expect("sized")
        };
        let fc1 = draw(channels, hidden);
        let fc2 = draw(hidden, channels);
        Ok(AttentionParams { fc1, fc2, reduction })
    }

    pub fn channels(&self) -> usize {
        self.fc1.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let h = hidden_width(c, self.reduction)?;
        if self.fc1.shape() != [c, h] || self.fc2.shape() != [h, c] {
            return Err(Error::shape(format!(
                "attention weights {:?} / {:?} inconsistent with C={c}, r={}",
                self.fc1.shape(),
                self.fc2.shape(),
                self.reduction
            )));
        }
        Ok(())
    }
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Config(format!("reduction ratio {reduction} does not divide {channels} channels")));
    }
    Ok(channels / reduction)
}

/// Channel attention weights `S`: positive entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights(Vec<f64>);

impl ChannelWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::contract("channel weights must be strictly positive"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("channel weights sum to {total}, not 1")));
        }
        Ok(ChannelWeights(values))
    }

    pub fn uniform(channels: usize) -> Self {
        ChannelWeights(vec![1.0 / channels as f64; channels])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Spatial attention map `T`, `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SpatialMap {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[rows, cols] => Ok(SpatialMap { rows, cols, values: t.data().to_vec() }),
            s => Err(Error::shape(format!("spatial map must be rank 2, got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.rows, self.cols], self.values.clone()).expect("sized")
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn check_fmap(a: &Var<'_>) -> Result<[usize; 3]> {
    match a.shape()[..] {
        [c, r, k] => Ok([c, r, k]),
        ref s => Err(Error::shape(format!("feature maps must be [C, rows, cols], got {s:?}"))),
    }
}

/// Global average pooling over the spatial axes: `[C, rows, cols] → [C]`.
pub fn global_avg_pool<'g>(a: Var<'g>) -> Result<Var<'g>> {
    check_fmap(&a)?;
    a.reduce(ReduceKind::Mean, &[1, 2])
}

/// `S = softmax(fc2 · relu(fc1 · gap(A)))`, shape `[C]`.
pub fn channel_weights<'g>(a: Var<'g>, fc1: Var<'g>, fc2: Var<'g>) -> Result<Var<'g>> {
    let [c, _, _] = check_fmap(&a)?;
    if fc1.shape().first() != Some(&c) || fc2.shape().get(1) != Some(&c) {
        return Err(Error::shape(format!(
            "attention weights {:?} / {:?} do not match {c} channels",
            fc1.shape(),
            fc2.shape()
        )));
    }
    let pooled = global_avg_pool(a)?.reshape(&[1, c])?;
    let hidden = pooled.matmul(fc1)?.relu();
    hidden.matmul(fc2)?.reshape(&[c])?.softmax(0)
}

/// `b_c = s_c · a_c`.
pub fn apply_channel<'g>(a: Var<'g>, s: Var<'g>) -> Result<Var<'g>> {
    let [c, _, _] = check_fmap(&a)?;
    if s.shape() != [c] {
        return Err(Error::shape(format!("{:?} channel weights for {c} channels", s.shape())));
    }
    a.mul(s.reshape(&[c, 1, 1])?)
}

/// Collapses `B` over channels and normalizes over locations.
pub fn spatial_map<'g>(b: Var<'g>, mode: SpatialMode) -> Result<Var<'g>> {
    let [_, rows, cols] = check_fmap(&b)?;
    let summed = b.reduce(ReduceKind::Sum, &[0])?;
    match mode {
        SpatialMode::SumNormalized => {
            let total = summed.sum();
            let tv = total.item()?;
            if tv == 0.0 || !tv.is_finite() {
                return Err(Error::Degenerate(format!(
                    "channel-summed feature maps total {tv}; spatial map undefined"
                )));
            }
            summed.div(total)
        }
        SpatialMode::ExpNormalized => summed.reshape(&[rows * cols])?.softmax(0)?.reshape(&[rows, cols]),
    }
}

/// `d_c = a_c ⊙ T`.
pub fn apply_spatial<'g>(a: Var<'g>, t: Var<'g>) -> Result<Var<'g>> {
    let [_, rows, cols] = check_fmap(&a)?;
    if t.shape() != [rows, cols] {
        return Err(Error::shape(format!("spatial map {:?} for {rows}x{cols} feature maps", t.shape())));
    }
    a.mul(t)
}

/// Every intermediate of one attention pass, graph-attached.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput<'g> {
    pub s: Var<'g>,
    pub b: Var<'g>,
    pub t: Var<'g>,
    pub d: Var<'g>,
}

pub fn attention_forward<'g>(
    a: Var<'g>,
    fc1: Var<'g>,
    fc2: Var<'g>,
    mode: SpatialMode,
) -> Result<AttentionOutput<'g>> {
    let s = channel_weights(a, fc1, fc2)?;
    let b = apply_channel(a, s)?;
    let t = spatial_map(b, mode)?;
    let d = apply_spatial(a, t)?;
    Ok(AttentionOutput { s, b, t, d })
}
