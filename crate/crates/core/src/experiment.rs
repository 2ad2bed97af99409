//! Whole-run helpers: train a configuration, score its test split and
//! compute metrics. The CLI and the examples are thin wrappers over these.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::data::{few_shot_expand, few_shot_subset, DatasetManifest};
use crate::decoder::Decoder;
use crate::encoder::{encoder_from_config, Encoder};
use crate::error::Result;
use crate::metrics::{evaluate, EvalResult, DEFAULT_FPR_LIMIT};
use crate::score::{score_dataset, AnomalyMap, ScoreConfig, TrainedModel};
use crate::train::{CheckpointSink, LogRow, Setting, TrainState, Trainer};

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Resolved configuration the run used.
    pub config: ExperimentConfig,
    pub encoder: Encoder,
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

impl RunOutput {
    pub fn model(&self) -> Result<TrainedModel> {
        TrainedModel::new(
            self.encoder.clone(),
            Decoder::new(self.config.decoder.clone())?,
            self.state.params.clone(),
            self.config.train.image_size,
        )
    }
}

/// Training manifest for the configured setting: few-shot keeps a seeded
/// subset of `k` images per category and expands each, the other settings
/// use `manifest` as given.
pub fn training_manifest(config: &ExperimentConfig, manifest: &DatasetManifest) -> Result<DatasetManifest> {
    match config.train.setting {
        Setting::FewShot => {
            let k = config.train.few_shot_k;
            few_shot_expand(&few_shot_subset(manifest, k)?, k)
        }
        Setting::MultiClass | Setting::OneClass => Ok(manifest.clone()),
    }
}

/// Train `config` (resolved first) on the training split of `manifest`.
/// With `out_dir`, the log and checkpoints are written there; with
/// `resume`, training continues from that state.
pub fn train_run(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
    resume: Option<TrainState>,
) -> Result<RunOutput> {
    let config = config.resolved()?;
    let encoder = encoder_from_config(&config.encoder)?;
    let decoder = Decoder::new(config.decoder.clone())?;
    let trainer = Trainer::new(&encoder, decoder, config.train.clone(), config.noise.clone())?;
    let state = match resume {
        Some(s) => s,
        None => TrainState::init(&trainer.decoder, &config.train)?,
    };
    let train_manifest = training_manifest(&config, manifest)?;
    let sink = out_dir.map(|dir| CheckpointSink {
        dir: dir.to_path_buf(),
        encoder: &encoder,
        config: &config,
    });
    let (state, log) = trainer.fit(&train_manifest, state, sink.as_ref())?;
    Ok(RunOutput {
        config,
        encoder,
        state,
        log,
    })
}

/// Score every test image of `manifest` and compute per-category metrics.
pub fn evaluate_model(
    model: &TrainedModel,
    manifest: &DatasetManifest,
    cfg: &ScoreConfig,
) -> Result<(EvalResult, Vec<AnomalyMap>)> {
    let maps = score_dataset(manifest, model, cfg)?;
    let items: Vec<_> = maps.iter().map(AnomalyMap::eval_item).collect();
    let result = evaluate(&items, DEFAULT_FPR_LIMIT)?;
    Ok((result, maps))
}

/// Train and evaluate in memory, without writing files.
pub fn train_and_evaluate(config: &ExperimentConfig) -> Result<(EvalResult, RunOutput)> {
    let manifest = config.resolved()?.manifest()?;
    let run = train_run(config, &manifest, None, None)?;
    let (result, _) = evaluate_model(&run.model()?, &manifest, &run.config.score)?;
    Ok((result, run))
}
