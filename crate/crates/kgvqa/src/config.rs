//! Run configuration.
//!
//! Every field has a documented default; a JSON config file may set any
//! subset, and `--set key=value` overrides individual fields on top of
//! the file. Defaults follow the reference operating point (loss weights,
//! block counts, query count, batch size) with desk-scale choices for
//! model width and learning rate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::ClassLossMode;

/// The synthetic rule family driving sample generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// Label is a function of one image token only.
    VisualOnly,
    /// Label is a function of one question token only.
    TextOnly,
    /// Label needs the graph neighborhood of a named finding.
    KgDependent,
    /// Open-ended: classification label plus an answer-token target.
    OpenEnded,
}

fn d_d() -> usize { 64 }
fn d_l_q() -> usize { 32 }
fn d_ssm_state() -> usize { 16 }
fn d_num_blocks() -> usize { 2 }
fn d_one() -> usize { 1 }
fn d_tau() -> f64 { 0.07 }
fn d_alpha() -> f64 { 0.2 }
fn d_beta() -> f64 { 0.3 }
fn d_eta() -> f64 { 0.1 }
fn d_theta() -> f64 { 0.1 }
fn d_lr() -> f64 { 1e-3 }
fn d_weight_decay() -> f64 { 0.01 }
fn d_batch() -> usize { 8 }
fn d_epochs() -> usize { 5 }
fn d_seed() -> u64 { 0 }
fn d_task() -> TaskFamily { TaskFamily::VisualOnly }
fn d_train_samples() -> usize { 256 }
fn d_eval_samples() -> usize { 64 }
fn d_image_vocab() -> usize { 64 }
fn d_text_vocab() -> usize { 256 }
fn d_answer_vocab() -> usize { 16 }
fn d_num_answers() -> usize { 2 }
fn d_image_len() -> usize { 4 }
fn d_question_len() -> usize { 6 }
fn d_class_loss() -> ClassLossMode { ClassLossMode::Bce }
fn d_true() -> bool { true }

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model width.
    #[serde(default = "d_d")]
    pub d: usize,
    /// Number of learnable queries.
    #[serde(default = "d_l_q")]
    pub l_q: usize,
    /// State size of the selective scan.
    #[serde(default = "d_ssm_state")]
    pub ssm_state: usize,
    /// Number of stacked cross-modal blocks.
    #[serde(default = "d_num_blocks")]
    pub num_blocks: usize,
    /// Alignment transformer depth.
    #[serde(default = "d_one")]
    pub qqformer_layers: usize,
    /// Graph attention depth.
    #[serde(default = "d_one")]
    pub gat_layers: usize,
    /// Contrastive temperature.
    #[serde(default = "d_tau")]
    pub temperature: f64,
    /// Contrastive loss weight.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Auxiliary loss weight.
    #[serde(default = "d_beta")]
    pub beta: f64,
    /// Knowledge-text fusion weight.
    #[serde(default = "d_eta")]
    pub eta: f64,
    /// Pooled-knowledge fusion weight.
    #[serde(default = "d_theta")]
    pub theta: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_task")]
    pub task: TaskFamily,
    #[serde(default = "d_train_samples")]
    pub train_samples: usize,
    #[serde(default = "d_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "d_image_vocab")]
    pub image_vocab: usize,
    #[serde(default = "d_text_vocab")]
    pub text_vocab: usize,
    /// Decoder token alphabet (id 0 is the start symbol).
    #[serde(default = "d_answer_vocab")]
    pub answer_vocab: usize,
    /// Answer-set size of the classifier.
    #[serde(default = "d_num_answers")]
    pub num_answers: usize,
    #[serde(default = "d_image_len")]
    pub image_len: usize,
    #[serde(default = "d_question_len")]
    pub question_len: usize,
    #[serde(default = "d_class_loss")]
    pub class_loss: ClassLossMode,
    /// Wrap alignment sub-layers with pre-norm residuals.
    #[serde(default = "d_true")]
    pub residual_norm: bool,
    /// Ablation: zero the retrieved knowledge and the eta/theta paths.
    #[serde(default)]
    pub disable_kge: bool,
    /// Write real wall-clock times into the metrics file. Off by default
    /// so identical runs produce byte-identical output.
    #[serde(default)]
    pub record_walltime: bool,
    /// Metrics CSV destination; required by `train`.
    #[serde(default)]
    pub metrics_path: Option<String>,
    /// Checkpoint destination (binary container; a `.json` manifest is
    /// written alongside).
    #[serde(default)]
    pub checkpoint_path: Option<String>,
    /// External knowledge graph JSON; the bundled graph is used when unset.
    #[serde(default)]
    pub kg_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides on top of the current values. Values
    /// parse as JSON when possible and fall back to strings.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let map = value
            .as_object_mut()
            .expect("RunConfig serializes to an object");
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{item}' is not key=value"))
            })?;
            if !map.contains_key(key) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
            let parsed = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert(key.to_string(), parsed);
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config("model width must be at least 2".into()));
        }
        if self.l_q == 0 || self.ssm_state == 0 || self.num_blocks == 0 {
            return Err(Error::Config(
                "query count, state size, and block count must be positive".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.eta < 0.0 || self.theta < 0.0 {
            return Err(Error::Config(
                "loss and fusion weights must be nonnegative".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.answer_vocab < 2 {
            return Err(Error::Config(
                "answer vocabulary needs the start symbol plus at least one token".into(),
            ));
        }
        if self.image_len == 0 || self.question_len == 0 {
            return Err(Error::Config("sequence lengths must be positive".into()));
        }
        Ok(())
    }

    /// Longest sequence any encoder must support.
    pub fn max_len(&self) -> usize {
        self.image_len.max(self.question_len).max(16)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_operating_point() {
        let c = RunConfig::default();
        assert_eq!(c.alpha, 0.2);
        assert_eq!(c.beta, 0.3);
        assert_eq!(c.eta, 0.1);
        assert_eq!(c.theta, 0.1);
        assert_eq!(c.num_blocks, 2);
        assert_eq!(c.gat_layers, 1);
        assert_eq!(c.qqformer_layers, 1);
        assert_eq!(c.l_q, 32);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.d, 64);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.temperature, 0.07);
        assert!(!c.record_walltime);
        assert!(!c.disable_kge);
    }

    #[test]
    fn overrides_parse_numbers_and_enums() {
        let c = RunConfig::default();
        let c = c
            .apply_overrides(&[
                "d=16".into(),
                "beta=0".into(),
                "task=\"kg_dependent\"".into(),
                "metrics_path=out.csv".into(),
            ])
            .unwrap();
        assert_eq!(c.d, 16);
        assert_eq!(c.beta, 0.0);
        assert_eq!(c.task, TaskFamily::KgDependent);
        assert_eq!(c.metrics_path.as_deref(), Some("out.csv"));
    }

    #[test]
    fn unknown_override_key_is_a_config_error() {
        assert!(RunConfig::default().apply_overrides(&["dd=16".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::default().apply_overrides(&["temperature=0".into()]).is_err());
        assert!(RunConfig::default().apply_overrides(&["eta=-0.1".into()]).is_err());
        assert!(RunConfig::default().apply_overrides(&["batch_size=0".into()]).is_err());
    }
}
