//! Frozen ViT feature extractor: per-layer patch features, per-layer
//! spatial attention maps, and multi-layer fusion into the clean target.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayD, ArrayView3, ArrayView4, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Dtype};
use crate::data::imageops::resize_bilinear;
use crate::error::{Error, Result};
use crate::nn::{self, BlockNames};
use crate::params::{trunc_normal, ParamSet};
use crate::rng::{rng_for, Stream};

/// Per-channel statistics the pretrained backbone expects.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    ToyVit,
    ExternalPretrained,
}

/// How a layer's `heads × (N+1) × (N+1)` attention collapses to `H_f × W_f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionReduction {
    /// Class-token query row, averaged over heads.
    #[default]
    ClsToPatch,
    /// Attention received per key token, averaged over heads and queries.
    MeanReceived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub patch_size: usize,
    pub layer_ids: Vec<usize>,
    pub weights_path: Option<PathBuf>,
    pub attention_reduction: AttentionReduction,
    /// Toy encoder construction parameters.
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::ExternalPretrained,
            patch_size: 16,
            layer_ids: vec![2, 5, 8, 11],
            weights_path: None,
            attention_reduction: AttentionReduction::ClsToPatch,
            depth: 12,
            dim: 384,
            heads: 6,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Small encoder used for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            variant: EncoderVariant::ToyVit,
            patch_size: 8,
            layer_ids: vec![0, 1, 2, 3],
            weights_path: None,
            attention_reduction: AttentionReduction::ClsToPatch,
            depth: 4,
            dim: 32,
            heads: 4,
            init_seed: 0,
        }
    }

    pub fn validate_layers(&self, depth: usize) -> Result<()> {
        if self.layer_ids.is_empty() {
            return Err(Error::config("layer_ids must not be empty"));
        }
        if self.layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "layer_ids must be strictly increasing: {:?}",
                self.layer_ids
            )));
        }
        if let Some(&bad) = self.layer_ids.iter().find(|&&l| l >= depth) {
            return Err(Error::config(format!(
                "layer id {bad} out of range for encoder depth {depth}"
            )));
        }
        Ok(())
    }
}

/// Architecture constants recorded in every encoder archive header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitArch {
    pub variant: EncoderVariant,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    /// Grid side of the stored learned position embedding, 0 = fixed sin-cos.
    pub pos_grid: usize,
}

impl VitArch {
    pub fn vit_small_16() -> Self {
        Self {
            variant: EncoderVariant::ExternalPretrained,
            depth: 12,
            dim: 384,
            heads: 6,
            patch_size: 16,
            mlp_ratio: 4,
            pos_grid: 14,
        }
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let patch_in = self.patch_size * self.patch_size * 3;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![patch_in, self.dim]),
            ("patch_embed.bias".to_string(), vec![self.dim]),
            ("cls_token".to_string(), vec![1, self.dim]),
        ];
        if self.pos_grid > 0 {
            out.push((
                "pos_embed".to_string(),
                vec![self.pos_grid * self.pos_grid + 1, self.dim],
            ));
        }
        for b in 0..self.depth {
            let names = BlockNames::new(&format!("blocks.{b}"));
            for (n, shape) in names.shapes(self.dim, self.dim * self.mlp_ratio) {
                out.push((n.to_string(), shape));
            }
        }
        out
    }
}

/// Per-image outputs of the selected encoder layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layer_ids: Vec<usize>,
    /// Each `H_f × W_f × C_f`.
    pub layer_features: Vec<Array3<f64>>,
    /// Each `H_f × W_f`, nonnegative.
    pub layer_attention: Vec<Array2<f64>>,
}

impl FeatureStack {
    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = self.layer_features[0].dim();
        (h, w)
    }
}

/// Fused reconstruction target, `H_f × W_f × C_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanFeatures {
    pub values: Array3<f64>,
}

impl CleanFeatures {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Sum of per-position, affine-free layer-normalized layer features.
pub fn fuse_features(stack: &FeatureStack) -> Result<CleanFeatures> {
    let first = stack
        .layer_features
        .first()
        .ok_or_else(|| Error::config("cannot fuse an empty feature stack"))?;
    let (h, w, c) = first.dim();
    let mut acc = Array2::<f64>::zeros((h * w, c));
    for f in &stack.layer_features {
        if f.dim() != (h, w, c) {
            return Err(Error::shape(format!(
                "layer features differ in shape: {:?} vs {:?}",
                f.dim(),
                (h, w, c)
            )));
        }
        let tokens = f.view().into_shape_with_order((h * w, c)).expect("contiguous");
        let (normed, _) = nn::layer_norm(tokens, None, nn::LN_EPS);
        acc += &normed;
    }
    Ok(CleanFeatures {
        values: acc.into_shape_with_order((h, w, c)).expect("contiguous"),
    })
}

/// A frozen ViT. Parameters are fixed at construction; nothing in the
/// crate mutates them afterwards.
#[derive(Debug, Clone)]
pub struct Encoder {
    arch: VitArch,
    params: ParamSet,
    config: EncoderConfig,
}

impl Encoder {
    fn from_parts(arch: VitArch, params: ParamSet, config: EncoderConfig) -> Result<Self> {
        config.validate_layers(arch.depth)?;
        if config.patch_size != arch.patch_size {
            return Err(Error::config(format!(
                "config patch_size {} does not match encoder patch_size {}",
                config.patch_size, arch.patch_size
            )));
        }
        Ok(Self {
            arch,
            params,
            config,
        })
    }

    /// Randomly initialised encoder of the given architecture.
    pub fn random(arch: VitArch, seed: u64, config: EncoderConfig) -> Result<Self> {
        if arch.dim % arch.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by heads {}",
                arch.dim, arch.heads
            )));
        }
        let mut rng = rng_for(seed, Stream::Init, &[0xE4C0]);
        let mut params = ParamSet::new();
        for (name, shape) in arch.param_shapes() {
            let a = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") {
                ArrayD::ones(IxDyn(&shape))
            } else if name.ends_with(".bias") {
                ArrayD::zeros(IxDyn(&shape))
            } else if name == "cls_token" || name == "pos_embed" {
                trunc_normal(&mut rng, &shape, 0.5)
            } else {
                let fan_in = shape[0] as f64;
                trunc_normal(&mut rng, &shape, 1.0 / fan_in.sqrt())
            };
            params.insert(name, a);
        }
        Self::from_parts(arch, params, config)
    }

    pub fn arch(&self) -> &VitArch {
        &self.arch
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn depth(&self) -> usize {
        self.arch.depth
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn param_hash(&self) -> String {
        self.params.hash_hex()
    }

    /// Same weights, different layer selection / reduction.
    pub fn with_config(&self, config: EncoderConfig) -> Result<Self> {
        Self::from_parts(self.arch, self.params.clone(), config)
    }

    fn pos_embed(&self, rows: usize, cols: usize) -> Array2<f64> {
        let d = self.arch.dim;
        match self.params.get("pos_embed") {
            None => nn::sincos_2d(rows, cols, d),
            Some(pe) => {
                let pe = pe.view().into_dimensionality::<ndarray::Ix2>().expect("2-D");
                let g = self.arch.pos_grid;
                let grid = pe.slice(s![1.., ..]);
                if rows == g && cols == g {
                    return grid.to_owned();
                }
                let mut out = Array2::<f64>::zeros((rows * cols, d));
                for c in 0..d {
                    let plane = grid
                        .column(c)
                        .to_owned()
                        .into_shape_with_order((g, g))
                        .expect("square grid");
                    let up = resize_bilinear(plane.view(), rows, cols);
                    out.column_mut(c)
                        .assign(&up.into_shape_with_order(rows * cols).expect("flat"));
                }
                out
            }
        }
    }

    fn cls_pos(&self) -> Option<ndarray::Array1<f64>> {
        self.params
            .get("pos_embed")
            .map(|pe| pe.index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("1-D"))
    }

    /// Patchify `H × W × 3` into `N × (P·P·3)` rows ordered (py, px, c).
    fn patchify(&self, image: ArrayView3<f64>) -> Result<(Array2<f64>, usize, usize)> {
        let (h, w, c) = image.dim();
        let p = self.arch.patch_size;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "image {h}×{w} not divisible by patch size {p}"
            )));
        }
        let (rows, cols) = (h / p, w / p);
        let normalize = self.arch.variant == EncoderVariant::ExternalPretrained;
        let mut out = Array2::<f64>::zeros((rows * cols, p * p * 3));
        for r in 0..rows {
            for cc in 0..cols {
                let t = r * cols + cc;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..3 {
                            let mut v = image[[r * p + py, cc * p + px, ch]];
                            if normalize {
                                v = (v - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch];
                            }
                            out[[t, (py * p + px) * 3 + ch]] = v;
                        }
                    }
                }
            }
        }
        Ok((out, rows, cols))
    }

    /// Run the encoder on one `H × W × 3` image.
    pub fn extract_one(&self, image: ArrayView3<f64>) -> Result<FeatureStack> {
        let (patches, rows, cols) = self.patchify(image)?;
        let n = rows * cols;
        let d = self.arch.dim;
        let tokens = nn::linear(
            patches.view(),
            self.params.mat("patch_embed.weight"),
            self.params.vec("patch_embed.bias"),
        ) + self.pos_embed(rows, cols);
        let mut x = Array2::<f64>::zeros((n + 1, d));
        let mut cls = self.params.mat("cls_token").row(0).to_owned();
        if let Some(cp) = self.cls_pos() {
            cls += &cp;
        }
        x.row_mut(0).assign(&cls);
        x.slice_mut(s![1.., ..]).assign(&tokens);

        let last = *self.config.layer_ids.last().expect("validated non-empty");
        let mut stack = FeatureStack {
            layer_ids: self.config.layer_ids.clone(),
            layer_features: Vec::with_capacity(self.config.layer_ids.len()),
            layer_attention: Vec::with_capacity(self.config.layer_ids.len()),
        };
        for b in 0..=last {
            let names = BlockNames::new(&format!("blocks.{b}"));
            let (out, cache) = nn::block_forward(&self.params, &names, x.view(), self.arch.heads);
            x = out;
            if self.config.layer_ids.contains(&b) {
                let feat = x
                    .slice(s![1.., ..])
                    .to_owned()
                    .into_shape_with_order((rows, cols, d))
                    .expect("contiguous");
                let attn = reduce_attention(&cache.probs, self.config.attention_reduction, true)
                    .into_shape_with_order((rows, cols))
                    .expect("grid");
                stack.layer_features.push(feat);
                stack.layer_attention.push(attn);
            }
        }
        Ok(stack)
    }

    /// Run the encoder on a `B × H × W × 3` batch.
    pub fn extract(&self, batch: ArrayView4<f64>) -> Result<Vec<FeatureStack>> {
        batch
            .outer_iter()
            .map(|img| self.extract_one(img))
            .collect()
    }

    pub fn to_archive(&self, dtype: Dtype) -> Result<Archive> {
        let mut a = Archive::new();
        a.set_meta("encoder", self.arch)?;
        a.put_params("encoder", &self.params, dtype);
        Ok(a)
    }

    /// Save as a standalone encoder archive.
    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        self.to_archive(dtype)?.write(path)
    }

    /// Rebuild from the `encoder/` namespace of an archive, checking every
    /// declared array. Nothing is returned unless all arrays match.
    pub fn from_archive(archive: &Archive, config: EncoderConfig) -> Result<Self> {
        let arch: VitArch = archive.meta_as("encoder")?;
        if arch.dim % arch.heads != 0 {
            return Err(Error::load(
                format!("dim {} not divisible by heads {}", arch.dim, arch.heads),
                vec![],
            ));
        }
        let stored = archive.params("encoder");
        let mut params = ParamSet::new();
        let mut bad = Vec::new();
        for (name, shape) in arch.param_shapes() {
            match stored.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => params.insert(name, a.clone()),
                _ => bad.push(name),
            }
        }
        if !bad.is_empty() {
            return Err(Error::load(
                "arrays missing or shaped differently from the declared architecture",
                bad,
            ));
        }
        let config = EncoderConfig {
            patch_size: arch.patch_size,
            variant: arch.variant,
            ..config
        };
        Self::from_parts(arch, params, config)
    }
}

/// Collapse per-head attention to one value per patch token.
/// With `has_cls`, token 0 is the class token and is dropped from the map.
pub fn reduce_attention(
    probs: &[Array2<f64>],
    reduction: AttentionReduction,
    has_cls: bool,
) -> ndarray::Array1<f64> {
    let start = usize::from(has_cls);
    match reduction {
        AttentionReduction::ClsToPatch if has_cls => {
            let n = probs[0].ncols();
            let mut acc = ndarray::Array1::<f64>::zeros(n - 1);
            for p in probs {
                acc += &p.slice(s![0, 1..]);
            }
            acc / probs.len() as f64
        }
        _ => nn::mean_received(probs).slice(s![start..]).to_owned(),
    }
}

/// Seeded toy ViT (sin-cos positions, no learned position table).
pub fn build_toy_encoder(
    seed: u64,
    depth: usize,
    dim: usize,
    heads: usize,
    patch_size: usize,
) -> Result<Encoder> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::config(format!(
            "dim {dim} not divisible by heads {heads}"
        )));
    }
    let arch = VitArch {
        variant: EncoderVariant::ToyVit,
        depth,
        dim,
        heads,
        patch_size,
        mlp_ratio: 4,
        pos_grid: 0,
    };
    let config = EncoderConfig {
        variant: EncoderVariant::ToyVit,
        patch_size,
        layer_ids: (0..depth).collect(),
        depth,
        dim,
        heads,
        init_seed: seed,
        ..EncoderConfig::toy()
    };
    Encoder::random(arch, seed, config)
}

/// Build the encoder an `EncoderConfig` describes: a seeded toy ViT or
/// pretrained weights from `weights_path`.
pub fn encoder_from_config(config: &EncoderConfig) -> Result<Encoder> {
    match config.variant {
        EncoderVariant::ToyVit => build_toy_encoder(
            config.init_seed,
            config.depth,
            config.dim,
            config.heads,
            config.patch_size,
        )?
        .with_config(config.clone()),
        EncoderVariant::ExternalPretrained => {
            let path = config.weights_path.as_deref().ok_or_else(|| {
                Error::config("external_pretrained encoder requires weights_path")
            })?;
            load_external_weights(path, config)
        }
    }
}

/// Load a frozen encoder from an archive file.
pub fn load_external_weights(weights_path: &Path, config: &EncoderConfig) -> Result<Encoder> {
    let archive = Archive::read(weights_path)?;
    Encoder::from_archive(&archive, config.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn toy_image(size: usize, salt: f64) -> Array3<f64> {
        Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
            0.5 + 0.4 * ((y as f64 * 0.37 + x as f64 * 0.21 + c as f64 + salt).sin())
        })
    }

    #[test]
    fn toy_grid_shape_and_layers() {
        let enc = build_toy_encoder(1, 4, 64, 4, 8).unwrap();
        let st = enc.extract_one(toy_image(64, 0.0).view()).unwrap();
        assert_eq!(st.layer_ids, vec![0, 1, 2, 3]);
        for f in &st.layer_features {
            assert_eq!(f.dim(), (8, 8, 64));
        }
        for a in &st.layer_attention {
            assert_eq!(a.dim(), (8, 8));
            assert!(a.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(build_toy_encoder(1, 4, 30, 4, 8).is_err());
        let enc = build_toy_encoder(1, 4, 32, 4, 8).unwrap();
        let cfg = EncoderConfig {
            layer_ids: vec![1, 4],
            ..enc.config().clone()
        };
        assert!(matches!(enc.with_config(cfg), Err(Error::Config(_))));
        let cfg = EncoderConfig {
            layer_ids: vec![2, 1],
            ..enc.config().clone()
        };
        assert!(enc.with_config(cfg).is_err());
        let err = enc.extract_one(toy_image(60, 0.0).view()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn identical_images_give_identical_features() {
        let enc = build_toy_encoder(3, 2, 32, 4, 8).unwrap();
        let img = toy_image(32, 0.3);
        let mut batch = Array4::<f64>::zeros((2, 32, 32, 3));
        batch.index_axis_mut(Axis(0), 0).assign(&img);
        batch.index_axis_mut(Axis(0), 1).assign(&img);
        let out = enc.extract(batch.view()).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_toy_encoder(9, 2, 32, 4, 8).unwrap();
        let b = build_toy_encoder(9, 2, 32, 4, 8).unwrap();
        let c = build_toy_encoder(10, 2, 32, 4, 8).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let enc = build_toy_encoder(2, 2, 32, 4, 8).unwrap();
        let (patches, rows, cols) = enc.patchify(toy_image(32, 1.0).view()).unwrap();
        let n = rows * cols;
        let mut x = Array2::<f64>::zeros((n + 1, 32));
        x.slice_mut(s![1.., ..]).assign(&nn::linear(
            patches.view(),
            enc.params.mat("patch_embed.weight"),
            enc.params.vec("patch_embed.bias"),
        ));
        let (_, cache) = nn::block_forward(&enc.params, &BlockNames::new("blocks.0"), x.view(), 4);
        for p in &cache.probs {
            for row in p.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_fixed_point_and_sum_of_equal_layers() {
        // rows already zero-mean / unit-variance
        let f = Array3::from_shape_fn((2, 2, 4), |(y, x, c)| {
            let s = if (y + x) % 2 == 0 { 1.0 } else { -1.0 };
            [1.0, -1.0, 1.0, -1.0][c] * s
        });
        let single = FeatureStack {
            layer_ids: vec![0],
            layer_features: vec![f.clone()],
            layer_attention: vec![Array2::zeros((2, 2))],
        };
        let fused = fuse_features(&single).unwrap();
        for (a, b) in fused.values.iter().zip(f.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        let g = Array3::from_shape_fn((2, 3, 5), |(y, x, c)| (y * 15 + x * 5 + c * c) as f64);
        let one = fuse_features(&FeatureStack {
            layer_ids: vec![0],
            layer_features: vec![g.clone()],
            layer_attention: vec![],
        })
        .unwrap();
        let three = fuse_features(&FeatureStack {
            layer_ids: vec![0, 1, 2],
            layer_features: vec![g.clone(), g.clone(), g],
            layer_attention: vec![],
        })
        .unwrap();
        for (a, b) in three.values.iter().zip(one.values.iter()) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
        let empty = FeatureStack {
            layer_ids: vec![],
            layer_features: vec![],
            layer_attention: vec![],
        };
        assert!(matches!(fuse_features(&empty), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let enc = build_toy_encoder(5, 3, 32, 4, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.agp");
        enc.save(&p, Dtype::F64).unwrap();
        let cfg = EncoderConfig {
            variant: EncoderVariant::ToyVit,
            ..enc.config().clone()
        };
        let back = load_external_weights(&p, &cfg).unwrap();
        assert_eq!(back.param_hash(), enc.param_hash());
        let img = toy_image(32, 2.0);
        assert_eq!(
            enc.extract_one(img.view()).unwrap(),
            back.extract_one(img.view()).unwrap()
        );
    }

    #[test]
    fn truncated_or_mismatched_archives_fail() {
        let enc = build_toy_encoder(5, 2, 32, 4, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.agp");
        enc.save(&p, Dtype::F32).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_external_weights(&p, enc.config()),
            Err(Error::Load { .. })
        ));

        let mut a = enc.to_archive(Dtype::F64).unwrap();
        a.insert("encoder/blocks.1.attn.proj.weight", Dtype::F64, ArrayD::zeros(IxDyn(&[3, 3])));
        let err = Encoder::from_archive(&a, enc.config().clone()).unwrap_err();
        match err {
            Error::Load { names, .. } => {
                assert_eq!(names, vec!["blocks.1.attn.proj.weight".to_string()])
            }
            other => panic!("unexpected {other}"),
        }
    }
}
