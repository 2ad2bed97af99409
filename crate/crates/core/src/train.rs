//! Two-view training loop: feature-perturbed and image+feature-perturbed
//! reconstructions of the clean target, AdamW on the decoder only, EMA
//! teacher updates, logging and atomic checkpoints.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Dtype};
use crate::config::ExperimentConfig;
use crate::data::DatasetManifest;
use crate::decoder::{init_params, mse_with_grad, Decoder};
use crate::encoder::{fuse_features, CleanFeatures, Encoder};
use crate::error::{Error, Result};
use crate::mask::{final_mask, learnable_mask, prior_mask, AttentionMask, MaskSource, TeacherState};
use crate::params::ParamSet;
use crate::perturb::{
    alpha_at, image_mask_ratio_at, perturb_features, perturb_image, perturb_image_random,
    random_feature_noise, NoiseSchedule,
};
use crate::rng::{derive_seed, Stream};
use crate::score::TrainedModel;

/// Perturbation strategy for one level (image or feature).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseArm {
    Off,
    Random,
    #[default]
    Attention,
}

impl NoiseArm {
    /// Single-letter code used in ablation tables: `-`, `R`, `A`.
    pub fn code(self) -> &'static str {
        match self {
            NoiseArm::Off => "-",
            NoiseArm::Random => "R",
            NoiseArm::Attention => "A",
        }
    }
}

impl std::str::FromStr for NoiseArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "-" | "off" | "none" => Ok(NoiseArm::Off),
            "r" | "random" => Ok(NoiseArm::Random),
            "a" | "attention" => Ok(NoiseArm::Attention),
            _ => Err(Error::Usage(format!("unknown noise arm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    #[default]
    MultiClass,
    OneClass,
    FewShot,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "multi_class" | "multiclass" => Ok(Setting::MultiClass),
            "one_class" | "oneclass" => Ok(Setting::OneClass),
            "few_shot" | "fewshot" => Ok(Setting::FewShot),
            _ => Err(Error::Usage(format!("unknown setting {s:?}"))),
        }
    }
}

/// Input of the teacher pass that produces the learnable mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherInput {
    #[default]
    Clean,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub setting: Setting,
    pub few_shot_k: usize,
    pub image_size: usize,
    pub image_noise: NoiseArm,
    pub feature_noise: NoiseArm,
    pub mask_source: MaskSource,
    pub mean_teacher: bool,
    pub ema_eta: f64,
    pub ema_interval: usize,
    pub teacher_input: TeacherInput,
    /// Draw one noise realization for both views instead of one each.
    pub shared_view_noise: bool,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Upper bound for the in-memory clean-feature cache.
    pub feature_cache_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 32,
            lr: 1e-3,
            lr_drop_epoch: 200,
            lr_drop_factor: 0.1,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            setting: Setting::MultiClass,
            few_shot_k: 1,
            image_size: 224,
            image_noise: NoiseArm::Attention,
            feature_noise: NoiseArm::Attention,
            mask_source: MaskSource::B,
            mean_teacher: true,
            ema_eta: 0.9999,
            ema_interval: 10,
            teacher_input: TeacherInput::Clean,
            shared_view_noise: false,
            checkpoint_every: 0,
            feature_cache_mb: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        Ok(())
    }

    /// Step-decay learning rate at a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    fn needs_learnable_mask(&self) -> bool {
        self.mask_source != MaskSource::L
            && (self.image_noise == NoiseArm::Attention || self.feature_noise == NoiseArm::Attention)
    }
}

/// AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Decoupled-weight-decay Adam update.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let m = self.m.get_mut(name).expect("moment");
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.get_mut(name).expect("moment");
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = self.m.get(name).unwrap();
            let v = self.v.get(name).unwrap();
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + cfg.adam_eps) + cfg.weight_decay * *p;
                *p -= lr * update;
            });
        }
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: AdamState,
    pub teacher: TeacherState,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn init(decoder: &Decoder, cfg: &TrainConfig) -> Result<Self> {
        let params = init_params(decoder.config())?;
        Ok(Self {
            optimizer: AdamState::new(&params),
            teacher: TeacherState::new(&params, cfg.ema_eta, cfg.ema_interval)?,
            params,
            epoch: 0,
            global_step: 0,
            seed: cfg.seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub l_feat: f64,
    pub l_imgfeat: f64,
    pub l_total: f64,
}

/// Mean-squared reconstruction error of both views and their average.
pub fn loss_terms(
    clean: &CleanFeatures,
    recon_feat: ArrayView3<f64>,
    recon_imgfeat: ArrayView3<f64>,
) -> Result<LossTerms> {
    let d = clean.dim();
    if recon_feat.dim() != d || recon_imgfeat.dim() != d {
        return Err(Error::shape(format!(
            "loss inputs differ in shape: clean {:?}, feat {:?}, imgfeat {:?}",
            d,
            recon_feat.dim(),
            recon_imgfeat.dim()
        )));
    }
    let (l_feat, _) = mse_with_grad(recon_feat, clean.values.view());
    let (l_imgfeat, _) = mse_with_grad(recon_imgfeat, clean.values.view());
    Ok(LossTerms {
        l_feat,
        l_imgfeat,
        l_total: 0.5 * (l_feat + l_imgfeat),
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub l_feat: f64,
    pub l_imgfeat: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub img_ratio: f64,
    pub lr: f64,
}

/// A training image with its cached clean features and prior mask.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// Stable identity used to derive per-sample noise seeds.
    pub key: u64,
    pub image: Array3<f64>,
    pub clean: CleanFeatures,
    pub prior: AttentionMask,
}

/// Frozen encoder, decoder definition and configuration for one run.
pub struct Trainer<'a> {
    pub encoder: &'a Encoder,
    pub decoder: Decoder,
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
}

const VIEW_FEAT: u64 = 0;
const VIEW_IMGFEAT: u64 = 1;
const VIEW_TEACHER: u64 = 2;

impl<'a> Trainer<'a> {
    pub fn new(encoder: &'a Encoder, decoder: Decoder, cfg: TrainConfig, sched: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        sched.validate()?;
        if decoder.config().dim != encoder.dim() {
            return Err(Error::config(format!(
                "decoder dim {} must equal encoder feature width {}",
                decoder.config().dim,
                encoder.dim()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            cfg,
            sched,
        })
    }

    pub fn prepare(&self, key: u64, image: Array3<f64>) -> Result<PreparedSample> {
        let stack = self.encoder.extract_one(image.view())?;
        let clean = fuse_features(&stack)?;
        let prior = prior_mask(&stack)?;
        Ok(PreparedSample {
            key,
            image,
            clean,
            prior,
        })
    }

    fn features_of(&self, image: ArrayView3<f64>) -> Result<CleanFeatures> {
        fuse_features(&self.encoder.extract_one(image)?)
    }

    fn noise_seed(&self, stream: Stream, epoch: usize, key: u64, view: u64) -> u64 {
        let view = if self.cfg.shared_view_noise && view != VIEW_TEACHER {
            VIEW_FEAT
        } else {
            view
        };
        derive_seed(self.cfg.seed, stream, &[epoch as u64, key, view])
    }

    /// Guidance mask for one sample given the current teacher.
    pub fn guidance_mask(
        &self,
        sample: &PreparedSample,
        state: &TrainState,
        epoch: usize,
    ) -> Result<AttentionMask> {
        if !self.cfg.needs_learnable_mask() {
            let dummy = AttentionMask {
                values: ndarray::Array2::zeros(sample.prior.dim()),
                role: crate::mask::MaskRole::Learnable,
            };
            return final_mask(&sample.prior, &dummy, MaskSource::L);
        }
        let teacher_params = if self.cfg.mean_teacher {
            &state.teacher.shadow_params
        } else {
            &state.params
        };
        let attn = match self.cfg.teacher_input {
            TeacherInput::Clean => self
                .decoder
                .attention_only(teacher_params, sample.clean.values.view()),
            TeacherInput::Perturbed => {
                let seed = self.noise_seed(Stream::FeatureNoise, epoch, sample.key, VIEW_TEACHER);
                let f = random_feature_noise(&sample.clean, epoch, &self.sched, seed)?;
                self.decoder.attention_only(teacher_params, f.features.view())
            }
        };
        let learn = learnable_mask(&attn)?;
        final_mask(&sample.prior, &learn, self.cfg.mask_source)
    }

    fn feature_view(
        &self,
        base: &CleanFeatures,
        mask: &AttentionMask,
        epoch: usize,
        seed: u64,
    ) -> Result<Array3<f64>> {
        Ok(match self.cfg.feature_noise {
            NoiseArm::Off => base.values.clone(),
            NoiseArm::Random => random_feature_noise(base, epoch, &self.sched, seed)?.features,
            NoiseArm::Attention => perturb_features(base, mask, epoch, &self.sched, seed)?.features,
        })
    }

    /// The two decoder inputs for one sample: feature-perturbed clean
    /// features, and features of the noised image perturbed again.
    pub fn views(
        &self,
        sample: &PreparedSample,
        mask: &AttentionMask,
        epoch: usize,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        let s1 = self.noise_seed(Stream::FeatureNoise, epoch, sample.key, VIEW_FEAT);
        let s2 = self.noise_seed(Stream::FeatureNoise, epoch, sample.key, VIEW_IMGFEAT);
        let view1 = self.feature_view(&sample.clean, mask, epoch, s1)?;
        let ratio = image_mask_ratio_at(epoch, &self.sched);
        let img_seed = self.noise_seed(Stream::ImageNoise, epoch, sample.key, VIEW_IMGFEAT);
        let img_feats = match self.cfg.image_noise {
            NoiseArm::Off => sample.clean.clone(),
            NoiseArm::Random => {
                let img = perturb_image_random(sample.image.view(), ratio, &self.sched, img_seed)?;
                self.features_of(img.image.view())?
            }
            NoiseArm::Attention => {
                let img = perturb_image(sample.image.view(), mask, ratio, &self.sched, img_seed)?;
                self.features_of(img.image.view())?
            }
        };
        let view2 = self.feature_view(&img_feats, mask, epoch, s2)?;
        Ok((view1, view2))
    }

    /// Losses and decoder gradients for a batch without touching state.
    pub fn batch_gradients(
        &self,
        batch: &[&PreparedSample],
        state: &TrainState,
        epoch: usize,
    ) -> Result<(LossTerms, ParamSet)> {
        let mut grads = state.params.zeros_like();
        let (mut l1, mut l2) = (0.0, 0.0);
        let inv_b = 1.0 / batch.len() as f64;
        for sample in batch {
            let mask = self.guidance_mask(sample, state, epoch)?;
            let (v1, v2) = self.views(sample, &mask, epoch)?;
            for (view, acc) in [(v1, &mut l1), (v2, &mut l2)] {
                let (out, cache) = self.decoder.forward(&state.params, view.view());
                let (loss, mut d) = mse_with_grad(out.reconstructed.view(), sample.clean.values.view());
                *acc += loss * inv_b;
                d *= 0.5 * inv_b;
                self.decoder.backward(&state.params, &cache, d.view(), &mut grads);
            }
        }
        Ok((
            LossTerms {
                l_feat: l1,
                l_imgfeat: l2,
                l_total: 0.5 * (l1 + l2),
            },
            grads,
        ))
    }

    /// One optimizer step on `L_total` followed by the EMA cadence tick.
    pub fn train_step(
        &self,
        batch: &[&PreparedSample],
        state: &mut TrainState,
        epoch: usize,
    ) -> Result<LogRow> {
        let (loss, grads) = self.batch_gradients(batch, state, epoch)?;
        if !loss.l_total.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: state.global_step as usize,
                l_feat: loss.l_feat,
                l_imgfeat: loss.l_imgfeat,
            });
        }
        let lr = self.cfg.lr_at(epoch);
        state.optimizer.step(&mut state.params, &grads, lr, &self.cfg);
        state.teacher.ema_update(&state.params)?;
        let row = LogRow {
            epoch,
            step: state.global_step,
            l_feat: loss.l_feat,
            l_imgfeat: loss.l_imgfeat,
            l_total: loss.l_total,
            alpha: alpha_at(epoch, &self.sched),
            img_ratio: image_mask_ratio_at(epoch, &self.sched),
            lr,
        };
        state.global_step += 1;
        Ok(row)
    }

    /// Train on the manifest's training split until `cfg.epochs`, starting
    /// from `state` (fresh or resumed). Writes the log and checkpoints into
    /// `out_dir` when given.
    pub fn fit(
        &self,
        manifest: &DatasetManifest,
        mut state: TrainState,
        out: Option<&CheckpointSink<'_>>,
    ) -> Result<(TrainState, Vec<LogRow>)> {
        let train_idx = manifest.train_indices();
        if train_idx.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        let mut cache: HashMap<usize, PreparedSample> = HashMap::new();
        let per_sample_bytes = {
            let s = self.cfg.image_size;
            let grid = s / self.encoder.arch().patch_size;
            8 * (s * s * 3 + grid * grid * (self.encoder.dim() + 1))
        };
        let cache_limit = (self.cfg.feature_cache_mb << 20) / per_sample_bytes.max(1);
        let mut log = Vec::new();
        let mut writer = match out {
            Some(sink) => Some(LogWriter::open(&sink.dir.join("train_log.csv"))?),
            None => None,
        };
        while state.epoch < self.cfg.epochs {
            let epoch = state.epoch;
            let order = manifest.epoch_order(epoch);
            for chunk in order.chunks(self.cfg.batch_size) {
                let mut transient = Vec::new();
                for &i in chunk {
                    if !cache.contains_key(&i) {
                        let img = manifest.samples[i].load_resized(self.cfg.image_size)?;
                        let prepared = self.prepare(i as u64, img.pixels)?;
                        if cache.len() < cache_limit {
                            cache.insert(i, prepared);
                        } else {
                            transient.push((i, prepared));
                        }
                    }
                }
                let batch: Vec<&PreparedSample> = chunk
                    .iter()
                    .map(|i| {
                        cache.get(i).unwrap_or_else(|| {
                            &transient.iter().find(|(j, _)| j == i).expect("prepared").1
                        })
                    })
                    .collect();
                let row = match self.train_step(&batch, &mut state, epoch) {
                    Ok(r) => r,
                    Err(e) => {
                        if let Some(sink) = out {
                            let _ = sink.write(&state, "diagnostic.agp");
                        }
                        return Err(e);
                    }
                };
                if let Some(w) = writer.as_mut() {
                    w.write(&row)?;
                }
                log.push(row);
            }
            state.epoch += 1;
            if let Some(sink) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && state.epoch % every == 0 && state.epoch < self.cfg.epochs {
                    sink.write(&state, &format!("checkpoint_epoch{:04}.agp", state.epoch))?;
                }
            }
        }
        if let Some(sink) = out {
            sink.write(&state, "model.agp")?;
        }
        Ok((state, log))
    }
}

/// Append-only CSV training log.
struct LogWriter {
    inner: csv::Writer<std::fs::File>,
}

impl LogWriter {
    fn open(path: &Path) -> Result<Self> {
        let exists = path.is_file() && std::fs::metadata(path)?.len() > 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            inner.write_record(["epoch", "step", "l_feat", "l_imgfeat", "l_total", "alpha", "img_ratio", "lr"])?;
            inner.flush()?;
        }
        Ok(Self { inner })
    }

    fn write(&mut self, r: &LogRow) -> Result<()> {
        self.inner.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{:.10e}", r.l_feat),
            format!("{:.10e}", r.l_imgfeat),
            format!("{:.10e}", r.l_total),
            format!("{}", r.alpha),
            format!("{}", r.img_ratio),
            format!("{:e}", r.lr),
        ])?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Where and how checkpoints are written during `fit`.
pub struct CheckpointSink<'a> {
    pub dir: PathBuf,
    pub encoder: &'a Encoder,
    pub config: &'a ExperimentConfig,
}

impl CheckpointSink<'_> {
    pub fn write(&self, state: &TrainState, file: &str) -> Result<PathBuf> {
        let path = self.dir.join(file);
        build_checkpoint(self.encoder, state, self.config)?.write(&path)?;
        Ok(path)
    }
}

/// Checkpoint archive with `encoder/`, `decoder/`, `teacher/`,
/// `optimizer/` arrays and `rng`, `config`, `state` metadata.
pub fn build_checkpoint(encoder: &Encoder, state: &TrainState, config: &ExperimentConfig) -> Result<Archive> {
    let mut a = encoder.to_archive(Dtype::F64)?;
    a.put_params("decoder", &state.params, Dtype::F64);
    a.put_params("teacher", &state.teacher.shadow_params, Dtype::F64);
    a.put_params("optimizer/m", &state.optimizer.m, Dtype::F64);
    a.put_params("optimizer/v", &state.optimizer.v, Dtype::F64);
    a.set_meta("config", config)?;
    a.set_meta(
        "state",
        StateMeta {
            epoch: state.epoch,
            global_step: state.global_step,
            adam_t: state.optimizer.t,
            teacher_eta: state.teacher.eta,
            teacher_interval: state.teacher.update_interval,
            teacher_counter: state.teacher.step_counter,
        },
    )?;
    a.set_meta(
        "rng",
        RngMeta {
            seed: state.seed,
            scheme: "chacha8/splitmix-derived per (epoch, sample, view)".into(),
        },
    )?;
    Ok(a)
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    global_step: u64,
    adam_t: u64,
    teacher_eta: f64,
    teacher_interval: usize,
    teacher_counter: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngMeta {
    seed: u64,
    scheme: String,
}

/// Restore the training state stored by [`build_checkpoint`].
pub fn state_from_checkpoint(archive: &Archive) -> Result<TrainState> {
    if !archive.has_namespace("decoder") {
        return Err(Error::Usage("checkpoint has no decoder parameters".into()));
    }
    let meta: StateMeta = archive.meta_as("state")?;
    let rng: RngMeta = archive.meta_as("rng")?;
    let params = archive.params("decoder");
    let teacher = archive.params("teacher");
    params.check_compatible(&teacher)?;
    let m = archive.params("optimizer/m");
    let v = archive.params("optimizer/v");
    params.check_compatible(&m)?;
    params.check_compatible(&v)?;
    Ok(TrainState {
        params,
        optimizer: AdamState { m, v, t: meta.adam_t },
        teacher: TeacherState {
            shadow_params: teacher,
            eta: meta.teacher_eta,
            update_interval: meta.teacher_interval,
            step_counter: meta.teacher_counter,
        },
        epoch: meta.epoch,
        global_step: meta.global_step,
        seed: rng.seed,
    })
}

/// Scoring model and run configuration stored in a checkpoint.
pub fn model_from_checkpoint(archive: &Archive) -> Result<(TrainedModel, ExperimentConfig)> {
    let config: ExperimentConfig = archive.meta_as("config")?;
    let encoder = Encoder::from_archive(archive, config.encoder.clone())?;
    let decoder = Decoder::new(config.decoder.clone())?;
    let params = archive.params("decoder");
    let model = TrainedModel::new(encoder, decoder, params, config.train.image_size)?;
    Ok((model, config))
}
