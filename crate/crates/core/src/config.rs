//! Pipeline configuration: one human-readable TOML tree covering every
//! tunable in the system. Unknown keys are rejected; missing keys take the
//! documented defaults; the canonical dump round-trips through the parser
//! bit-identically and its hash is stored in checkpoints.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::armodel::ArConfig;
use crate::conditioning::ConditioningConfig;
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::eval::NormalizerConfig;
use crate::sampler::SamplingConfig;
use crate::speaker::SpeakerConfig;
use crate::vocoder::VocoderConfig;
use crate::vqvae::VqVaeConfig;

/// Environment variable naming a default config file for the CLI.
pub const CONFIG_ENV_VAR: &str = "POLYVOX_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Target vocabulary size (6681 at full scale).
    pub target_size: usize,
    /// Single-character marker substituted for untransliterable characters.
    pub fallback_marker: String,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            target_size: 6681,
            fallback_marker: "?".to_string(),
        }
    }
}

impl TokenizerConfig {
    pub fn romanize_config(&self) -> Result<crate::text::RomanizeConfig> {
        let mut chars = self.fallback_marker.chars();
        let marker = chars
            .next()
            .ok_or_else(|| Error::config("fallback_marker must not be empty"))?;
        if chars.next().is_some() {
            return Err(Error::config("fallback_marker must be a single character"));
        }
        Ok(crate::text::RomanizeConfig {
            fallback_marker: marker,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Initial learning rate.
    pub lr: f64,
    pub betas: (f64, f64),
    /// Decoupled weight decay, applied to weight matrices only.
    pub weight_decay: f64,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    /// Utterances per micro-batch.
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// MultiStep decay milestones (optimizer steps).
    pub milestones: Vec<u64>,
    pub gamma: f64,
    /// Optimizer steps for one `train` invocation (toy default).
    pub steps: u64,
    /// Periodic checkpoint interval in optimizer steps; 0 = final only.
    pub checkpoint_every: u64,
    /// Fine-tuning uses `lr * finetune_lr_scale`.
    pub finetune_lr_scale: f64,
    /// Whether `finetune` also updates the vocoder.
    pub finetune_include_vocoder: bool,
    /// Balancer weights per language code; absent = uniform over present.
    pub language_weights: Option<std::collections::BTreeMap<String, f64>>,
    /// Vocoder training crop length in output-grid latent frames.
    pub vocoder_crop_latents: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 5e-5,
            betas: (0.9, 0.96),
            weight_decay: 0.01,
            grad_accum: 16,
            batch_size: 4,
            clip_norm: 1.0,
            milestones: vec![5000, 150_000, 300_000],
            gamma: 0.5,
            steps: 300,
            checkpoint_every: 0,
            finetune_lr_scale: 0.1,
            finetune_include_vocoder: false,
            language_weights: None,
            vocoder_crop_latents: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dsp: MelConfig,
    pub tokenizer: TokenizerConfig,
    pub vqvae: VqVaeConfig,
    pub conditioning: ConditioningConfig,
    pub armodel: ArConfig,
    pub sampler: SamplingConfig,
    pub vocoder: VocoderConfig,
    pub speaker: SpeakerConfig,
    pub training: TrainingConfig,
    pub eval: NormalizerConfig,
}

impl PipelineConfig {
    /// Canonical TOML dump; `parse(dump(c)) == c` bit-identically.
    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn parse(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// SHA-256 of the canonical dump, hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.dump().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.dsp.sample_rate_hz, 22050);
        assert_eq!(cfg.dsp.n_fft, 1024);
        assert_eq!(cfg.dsp.hop_length, 256);
        assert_eq!(cfg.dsp.n_mels, 80);
        assert_eq!(cfg.tokenizer.target_size, 6681);
        assert_eq!(cfg.vqvae.commitment_beta, 0.25);
        assert_eq!(cfg.sampler.temperature, 0.75);
        assert_eq!(cfg.sampler.top_k, 50);
        assert_eq!(cfg.sampler.top_p, 0.85);
        assert_eq!(cfg.sampler.repetition_penalty, 10.0);
        assert_eq!(cfg.sampler.length_penalty, 1.0);
        assert_eq!(cfg.training.lr, 5e-5);
        assert_eq!(cfg.training.betas, (0.9, 0.96));
        assert_eq!(cfg.training.weight_decay, 0.01);
        assert_eq!(cfg.training.grad_accum, 16);
        assert_eq!(cfg.training.batch_size, 4);
        assert_eq!(cfg.training.milestones, vec![5000, 150_000, 300_000]);
        assert_eq!(cfg.training.gamma, 0.5);
        assert_eq!(cfg.vocoder.mel_weight, 45.0);
        assert_eq!(cfg.vocoder.fm_weight, 2.0);
        assert_eq!(cfg.vocoder.adv_weight, 1.0);
        assert_eq!(cfg.vocoder.scl_weight, 9.0);
        assert_eq!(cfg.vocoder.upsample_factors.iter().product::<usize>(), 1024);
        assert_eq!(cfg.armodel.w_text, 0.25);
        assert_eq!(cfg.armodel.w_audio, 1.0);
        assert_eq!(cfg.training.finetune_lr_scale, 0.1);
    }

    #[test]
    fn dump_roundtrips_bit_identically() {
        let cfg = PipelineConfig::default();
        let dumped = cfg.dump();
        let parsed = PipelineConfig::parse(&dumped).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.dump(), dumped);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[dsp]\nnot_a_real_key = 3\n";
        assert!(PipelineConfig::parse(text).is_err());
        let text = "mystery_top_level = true\n";
        assert!(PipelineConfig::parse(text).is_err());
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = PipelineConfig::parse("[sampler]\ntemperature = 0.5\n").unwrap();
        assert_eq!(cfg.sampler.temperature, 0.5);
        assert_eq!(cfg.sampler.top_k, 50); // default preserved
        assert_eq!(cfg.training.lr, 5e-5);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 99;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn fallback_marker_must_be_single_char() {
        let mut cfg = TokenizerConfig::default();
        cfg.fallback_marker = "too long".into();
        assert!(cfg.romanize_config().is_err());
        cfg.fallback_marker = String::new();
        assert!(cfg.romanize_config().is_err());
        cfg.fallback_marker = "#".into();
        assert_eq!(cfg.romanize_config().unwrap().fallback_marker, '#');
    }
}
