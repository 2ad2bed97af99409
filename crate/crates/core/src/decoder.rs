//! Plain transformer decoder mapping (perturbed) features back to clean
//! features, with a hand-written backward pass.
//!
//! ```text
//! x0  = F + PE                      (fixed 2-D sin-cos, optional)
//! x_k = Block_k(x_{k-1})            (pre-norm attention + MLP)
//! F̂   = F + LN(x_K) · W_head + b_head
//! ```
//!
//! `W_head` starts at zero, so a freshly initialised decoder returns its
//! input unchanged.

use ndarray::{Array2, Array3, ArrayD, ArrayView3, ArrayView4, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::encoder::{reduce_attention, AttentionReduction};
use crate::error::{Error, Result};
use crate::nn::{self, BlockCache, BlockNames, LnCache};
use crate::params::{trunc_normal, ParamSet};
use crate::rng::{rng_for, Stream};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub depth: usize,
    /// Token width; must equal the encoder feature width.
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
    pub use_pos_encoding: bool,
    pub attention_reduction: AttentionReduction,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 384,
            heads: 6,
            mlp_ratio: 4.0,
            seed: 0,
            use_pos_encoding: true,
            attention_reduction: AttentionReduction::MeanReceived,
        }
    }
}

impl DecoderConfig {
    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("decoder depth must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "decoder dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.hidden() == 0 {
            return Err(Error::config("decoder MLP width must be positive"));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for b in 0..self.depth {
            let names = BlockNames::new(&format!("blocks.{b}"));
            for (n, s) in names.shapes(self.dim, self.hidden()) {
                out.push((n.to_string(), s));
            }
        }
        out.push(("norm.weight".into(), vec![self.dim]));
        out.push(("norm.bias".into(), vec![self.dim]));
        out.push(("head.weight".into(), vec![self.dim, self.dim]));
        out.push(("head.bias".into(), vec![self.dim]));
        out
    }
}

/// Seeded initial parameters: truncated-normal matrices, unit norm
/// scales, zero biases and a zero output projection.
pub fn init_params(config: &DecoderConfig) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = rng_for(config.seed, Stream::Init, &[0xDEC0]);
    let mut p = ParamSet::new();
    for (name, shape) in config.param_shapes() {
        let a = if name.ends_with("norm1.weight")
            || name.ends_with("norm2.weight")
            || name == "norm.weight"
        {
            ArrayD::ones(IxDyn(&shape))
        } else if name.ends_with(".bias") || name == "head.weight" {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            trunc_normal(&mut rng, &shape, INIT_STD)
        };
        p.insert(name, a);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// Same shape as the input, `H_f × W_f × C_f`.
    pub reconstructed: Array3<f64>,
    /// One nonnegative `H_f × W_f` map per block.
    pub attention: Vec<Array2<f64>>,
}

/// Saved activations for [`Decoder::backward`].
#[derive(Debug, Clone)]
pub struct DecoderCache {
    grid: (usize, usize),
    blocks: Vec<BlockCache>,
    ln: LnCache,
    z: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    names: Vec<BlockNames>,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let names = (0..config.depth)
            .map(|b| BlockNames::new(&format!("blocks.{b}")))
            .collect();
        Ok(Self { config, names })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Check that `params` has exactly this decoder's names and shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let mut bad = Vec::new();
        for (name, shape) in self.config.param_shapes() {
            match params.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                _ => bad.push(name),
            }
        }
        if bad.is_empty() && params.len() == self.config.param_shapes().len() {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "decoder parameters do not match config: {}",
                bad.join(", ")
            )))
        }
    }

    /// Forward one sample. Parameters are assumed checked.
    pub fn forward(
        &self,
        params: &ParamSet,
        features: ArrayView3<f64>,
    ) -> (DecoderOutput, DecoderCache) {
        let (h, w, c) = features.dim();
        let input = features
            .to_owned()
            .into_shape_with_order((h * w, c))
            .expect("contiguous");
        let mut x = input.clone();
        if self.config.use_pos_encoding {
            x += &nn::sincos_2d(h, w, c);
        }
        let mut blocks = Vec::with_capacity(self.config.depth);
        let mut attention = Vec::with_capacity(self.config.depth);
        for names in &self.names {
            let (out, cache) = nn::block_forward(params, names, x.view(), self.config.heads);
            attention.push(
                reduce_attention(&cache.probs, self.config.attention_reduction, false)
                    .into_shape_with_order((h, w))
                    .expect("grid"),
            );
            blocks.push(cache);
            x = out;
        }
        let (z, ln) = nn::layer_norm(
            x.view(),
            Some((params.vec("norm.weight"), params.vec("norm.bias"))),
            nn::LN_EPS,
        );
        let delta = nn::linear(z.view(), params.mat("head.weight"), params.vec("head.bias"));
        let recon = (input + delta)
            .into_shape_with_order((h, w, c))
            .expect("contiguous");
        (
            DecoderOutput {
                reconstructed: recon,
                attention,
            },
            DecoderCache {
                grid: (h, w),
                blocks,
                ln,
                z,
            },
        )
    }

    /// Attention maps only, for the teacher pass.
    pub fn attention_only(&self, params: &ParamSet, features: ArrayView3<f64>) -> Vec<Array2<f64>> {
        self.forward(params, features).0.attention
    }

    /// Accumulate `∂L/∂θ` into `grads` given `∂L/∂F̂`.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &DecoderCache,
        d_recon: ArrayView3<f64>,
        grads: &mut ParamSet,
    ) {
        let (h, w) = cache.grid;
        let c = self.config.dim;
        let dy = d_recon
            .to_owned()
            .into_shape_with_order((h * w, c))
            .expect("contiguous");
        {
            let mut gw = grads.mat_mut("head.weight");
            ndarray::linalg::general_mat_mul(1.0, &cache.z.t(), &dy, 1.0, &mut gw);
        }
        {
            let mut gb = grads.vec_mut("head.bias");
            gb += &dy.sum_axis(Axis(0));
        }
        let dz = dy.dot(&params.mat("head.weight").t());
        let mut dg = ndarray::Array1::zeros(c);
        let mut db = ndarray::Array1::zeros(c);
        let mut dx = nn::layer_norm_backward(
            dz.view(),
            &cache.ln,
            Some((params.vec("norm.weight"), &mut dg, &mut db)),
        );
        {
            let mut g = grads.vec_mut("norm.weight");
            g += &dg;
        }
        {
            let mut g = grads.vec_mut("norm.bias");
            g += &db;
        }
        for (names, bc) in self.names.iter().zip(&cache.blocks).rev() {
            dx = nn::block_backward(params, names, self.config.heads, bc, dx.view(), grads);
        }
    }
}

/// Decode a `B × H_f × W_f × C_f` batch.
pub fn decode(
    features: ArrayView4<f64>,
    params: &ParamSet,
    config: &DecoderConfig,
) -> Result<Vec<DecoderOutput>> {
    let dec = Decoder::new(config.clone())?;
    dec.check_params(params)?;
    let c = features.dim().3;
    if c != config.dim {
        return Err(Error::shape(format!(
            "feature width {c} does not match decoder dim {}",
            config.dim
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("decoder input is not finite".into()));
    }
    Ok(features
        .outer_iter()
        .map(|f| dec.forward(params, f).0)
        .collect())
}

/// Mean-squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> (f64, Array3<f64>) {
    let n = pred.len() as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Parameter count, e.g. for reporting.
pub fn param_count(params: &ParamSet) -> usize {
    params.numel()
}
