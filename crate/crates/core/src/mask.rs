//! Perturbation-guidance masks and the EMA (mean) teacher.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureStack;
use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRole {
    Prior,
    Learnable,
    Final,
}

/// Which masks feed the final guidance map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MaskSource {
    /// Encoder prior only.
    L,
    /// Teacher-decoder mask only.
    D,
    /// Sum of both.
    #[default]
    B,
}

impl std::str::FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L" => Ok(MaskSource::L),
            "D" => Ok(MaskSource::D),
            "B" => Ok(MaskSource::B),
            _ => Err(Error::Usage(format!("unknown mask source {s:?} (use L, D or B)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub values: Array2<f64>,
    pub role: MaskRole,
}

impl AttentionMask {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Min-max normalization to `[0, 1]`. A constant map becomes all zeros.
pub fn normalize(values: ArrayView2<f64>) -> Result<Array2<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("attention map contains NaN or Inf".into()));
    }
    let min = values.fold(f64::INFINITY, |a, &b| a.min(b));
    let max = values.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let range = max - min;
    if !(range > 0.0) {
        return Ok(Array2::zeros(values.raw_dim()));
    }
    Ok(values.mapv(|v| (v - min) / range))
}

/// Elementwise mean of equally shaped maps.
pub fn aggregate(maps: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::config("cannot aggregate an empty list of attention maps"))?;
    let mut acc = Array2::<f64>::zeros(first.raw_dim());
    for m in maps {
        if m.dim() != first.dim() {
            return Err(Error::shape(format!(
                "attention maps differ in shape: {:?} vs {:?}",
                m.dim(),
                first.dim()
            )));
        }
        acc += m;
    }
    Ok(acc / maps.len() as f64)
}

/// Prior mask from the encoder's per-layer attention.
pub fn prior_mask(stack: &FeatureStack) -> Result<AttentionMask> {
    Ok(AttentionMask {
        values: normalize(aggregate(&stack.layer_attention)?.view())?,
        role: MaskRole::Prior,
    })
}

/// Learnable mask from the teacher decoder's per-block attention.
pub fn learnable_mask(teacher_attention: &[Array2<f64>]) -> Result<AttentionMask> {
    Ok(AttentionMask {
        values: normalize(aggregate(teacher_attention)?.view())?,
        role: MaskRole::Learnable,
    })
}

/// Fuse the two guidance masks. Inputs are already normalized, so the
/// `B` arm is a plain sum with range `[0, 2]`.
pub fn final_mask(
    prior: &AttentionMask,
    learn: &AttentionMask,
    source: MaskSource,
) -> Result<AttentionMask> {
    if prior.dim() != learn.dim() {
        return Err(Error::shape(format!(
            "prior mask {:?} vs learnable mask {:?}",
            prior.dim(),
            learn.dim()
        )));
    }
    let values = match source {
        MaskSource::L => prior.values.clone(),
        MaskSource::D => learn.values.clone(),
        MaskSource::B => &prior.values + &learn.values,
    };
    Ok(AttentionMask {
        values,
        role: MaskRole::Final,
    })
}

/// Exponential-moving-average shadow of the decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub shadow_params: ParamSet,
    pub eta: f64,
    pub update_interval: usize,
    pub step_counter: u64,
}

impl TeacherState {
    /// Start the teacher as an exact copy of the student.
    pub fn new(student: &ParamSet, eta: f64, update_interval: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::config(format!("EMA eta must lie in [0, 1), got {eta}")));
        }
        if update_interval == 0 {
            return Err(Error::config("EMA update interval must be positive"));
        }
        Ok(Self {
            shadow_params: student.clone(),
            eta,
            update_interval,
            step_counter: 0,
        })
    }

    /// Count one training step; on every `update_interval`-th call blend
    /// `shadow = eta * shadow + (1 - eta) * student`. Returns whether the
    /// blend was applied. Non-applying calls leave the shadow untouched.
    pub fn ema_update(&mut self, student: &ParamSet) -> Result<bool> {
        self.shadow_params.check_compatible(student)?;
        self.step_counter += 1;
        if self.step_counter % self.update_interval as u64 != 0 {
            return Ok(false);
        }
        let eta = self.eta;
        for (name, shadow) in self.shadow_params.iter_mut() {
            let s = student.get(name).expect("checked compatible");
            Zip::from(shadow)
                .and(s)
                .for_each(|t, &v| *t = eta * *t + (1.0 - eta) * v);
        }
        Ok(true)
    }
}
