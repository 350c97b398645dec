//! Conditioning encoder: summarizes reference mel-spectrograms into a fixed
//! number of latent embeddings, independent of reference length.
//!
//! A stack of self-attention blocks runs over the (time-concatenated)
//! reference frames; a resampler block with learned latent queries then
//! cross-attends into them, so the output is always `[L x D]`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{
    normal_init, Attention, AttentionVars, Binder, FeedForward, FeedForwardVars,
    LayerNorm, LayerNormVars, Linear, LinearVars, TransformerBlock, TransformerBlockVars,
};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    /// Fixed number of output latents L (32 at full scale).
    pub latent_count: usize,
    /// Model width D (1024 at full scale).
    pub d_model: usize,
    /// Self-attention layers before the resampler (6 at full scale).
    pub layers: usize,
    /// Heads per attention layer (16 at full scale).
    pub heads: usize,
    pub ff_mult: usize,
    pub n_mels: usize,
    pub seed: u64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig {
            latent_count: 4,
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            n_mels: 80,
            seed: 1,
        }
    }
}

/// Fixed-cardinality summary embeddings, `[L x D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningLatents {
    pub latents: Array2<f64>,
}

impl ConditioningLatents {
    pub fn count(&self) -> usize {
        self.latents.nrows()
    }

    pub fn dim(&self) -> usize {
        self.latents.ncols()
    }
}

/// Cross-attention resampler with learned queries, pre-layer normalization
/// and a feed-forward tail.
#[derive(Debug, Clone)]
pub struct PerceiverResampler {
    /// Learned latent queries `[L x D]`.
    pub query_embed: Array2<f64>,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl PerceiverResampler {
    pub fn init(cfg: &ConditioningConfig, rng: &mut ChaCha8Rng) -> Self {
        PerceiverResampler {
            query_embed: normal_init(cfg.latent_count, cfg.d_model, 0.02, rng),
            ln_q: LayerNorm::init(cfg.d_model),
            ln_kv: LayerNorm::init(cfg.d_model),
            attn: Attention::init(cfg.d_model, cfg.heads, rng),
            ln_ff: LayerNorm::init(cfg.d_model),
            ff: FeedForward::init(cfg.d_model, cfg.d_model * cfg.ff_mult, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> PerceiverResamplerVars {
        PerceiverResamplerVars {
            query_embed: b.bind(&format!("{name}.query_embed"), &self.query_embed),
            ln_q: self.ln_q.bind(b, &format!("{name}.ln_q")),
            ln_kv: self.ln_kv.bind(b, &format!("{name}.ln_kv")),
            attn: self.attn.bind(b, &format!("{name}.attn")),
            ln_ff: self.ln_ff.bind(b, &format!("{name}.ln_ff")),
            ff: self.ff.bind(b, &format!("{name}.ff")),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.query_embed"), &self.query_embed);
        self.ln_q.visit(&format!("{prefix}.ln_q"), f);
        self.ln_kv.visit(&format!("{prefix}.ln_kv"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln_ff.visit(&format!("{prefix}.ln_ff"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.query_embed"), &mut self.query_embed);
        self.ln_q.visit_mut(&format!("{prefix}.ln_q"), f);
        self.ln_kv.visit_mut(&format!("{prefix}.ln_kv"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln_ff.visit_mut(&format!("{prefix}.ln_ff"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

pub struct PerceiverResamplerVars {
    pub query_embed: Var,
    pub ln_q: LayerNormVars,
    pub ln_kv: LayerNormVars,
    pub attn: AttentionVars,
    pub ln_ff: LayerNormVars,
    pub ff: FeedForwardVars,
}

pub struct ResamplerOut {
    pub out: Var,
    /// Per-head attention probabilities, each `[L x T]`.
    pub probs: Vec<Var>,
}

impl PerceiverResamplerVars {
    /// Cross-attention of `queries` (usually the learned latents) into
    /// `keys`: `softmax(QK^T / sqrt(d)) V` with residual and feed-forward.
    pub fn forward_with(&self, t: &mut Tape, keys: Var, queries: Var) -> ResamplerOut {
        let q_norm = self.ln_q.forward(t, queries);
        let kv_norm = self.ln_kv.forward(t, keys);
        let attn = self.attn.forward(t, q_norm, kv_norm, None);
        let x = t.add(queries, attn.out);
        let normed = self.ln_ff.forward(t, x);
        let ff = self.ff.forward(t, normed);
        let out = t.add(x, ff);
        ResamplerOut {
            out,
            probs: attn.probs,
        }
    }

    /// Resample with the learned queries.
    pub fn forward(&self, t: &mut Tape, keys: Var) -> ResamplerOut {
        self.forward_with(t, keys, self.query_embed)
    }
}

#[derive(Debug, Clone)]
pub struct ConditioningEncoder {
    pub config: ConditioningConfig,
    pub input_proj: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub resampler: PerceiverResampler,
}

impl ConditioningEncoder {
    pub fn init(config: ConditioningConfig) -> Self {
        assert!(
            config.d_model % config.heads == 0,
            "head count must divide model width"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input_proj = Linear::init(config.n_mels, config.d_model, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| {
                TransformerBlock::init(
                    config.d_model,
                    config.heads,
                    config.d_model * config.ff_mult,
                    &mut rng,
                )
            })
            .collect();
        let resampler = PerceiverResampler::init(&config, &mut rng);
        ConditioningEncoder {
            config,
            input_proj,
            blocks,
            resampler,
        }
    }

    pub fn bind(&self, b: &mut Binder) -> ConditioningVars {
        ConditioningVars {
            input_proj: self.input_proj.bind(b, "cond.input_proj"),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &format!("cond.block{i}")))
                .collect(),
            resampler: self.resampler.bind(b, "cond.resampler"),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.input_proj.visit("cond.input_proj", f);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&format!("cond.block{i}"), f);
        }
        self.resampler.visit("cond.resampler", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.input_proj.visit_mut("cond.input_proj", f);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&format!("cond.block{i}"), f);
        }
        self.resampler.visit_mut("cond.resampler", f);
    }

    /// Time-concatenation of reference mels, validated.
    fn stack_references(&self, mels: &[&MelSpectrogram]) -> Result<Array2<f64>> {
        if mels.is_empty() {
            return Err(Error::invalid("conditioning needs at least one reference"));
        }
        for m in mels {
            if m.n_mels != self.config.n_mels {
                return Err(Error::invalid(format!(
                    "reference has {} mel bins, encoder expects {}",
                    m.n_mels, self.config.n_mels
                )));
            }
            if m.frames.nrows() == 0 {
                return Err(Error::invalid("reference mel has zero frames"));
            }
        }
        let total: usize = mels.iter().map(|m| m.frames.nrows()).sum();
        let mut stacked = Array2::zeros((total, self.config.n_mels));
        let mut at = 0;
        for m in mels {
            stacked
                .slice_mut(ndarray::s![at..at + m.frames.nrows(), ..])
                .assign(&m.frames);
            at += m.frames.nrows();
        }
        Ok(stacked)
    }
}

pub struct ConditioningVars {
    pub input_proj: LinearVars,
    pub blocks: Vec<TransformerBlockVars>,
    pub resampler: PerceiverResamplerVars,
}

impl ConditioningVars {
    /// Full tape forward from stacked mel frames (`[T x n_mels]` constant or
    /// var) to latents `[L x D]`.
    pub fn forward(&self, t: &mut Tape, frames: Var) -> ResamplerOut {
        let mut h = self.input_proj.forward(t, frames);
        for blk in &self.blocks {
            h = blk.forward(t, h, None);
        }
        self.resampler.forward(t, h)
    }
}

/// Encodes one or more reference mels (concatenated along time) into the
/// fixed `[L x D]` latent set.
pub fn condition(mels: &[&MelSpectrogram], enc: &ConditioningEncoder) -> Result<ConditioningLatents> {
    let stacked = enc.stack_references(mels)?;
    let mut tape = Tape::new();
    let frames = tape.constant(stacked);
    let mut b = Binder::new(&mut tape);
    let vars = enc.bind(&mut b);
    let out = vars.forward(b.tape, frames);
    drop(b);
    Ok(ConditioningLatents {
        latents: tape.value(out.out).clone(),
    })
}

/// Standalone resampler evaluation used by tests and diagnostics: returns the
/// output and stacked per-head attention rows.
pub fn resampler_forward(
    enc: &ConditioningEncoder,
    keys: &Array2<f64>,
    queries: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    if keys.nrows() == 0 {
        return Err(Error::invalid("resampler needs at least one key frame"));
    }
    if keys.ncols() != enc.config.d_model || queries.ncols() != enc.config.d_model {
        return Err(Error::invalid(format!(
            "resampler dims: keys {}x{}, queries {}x{}, model width {}",
            keys.nrows(),
            keys.ncols(),
            queries.nrows(),
            queries.ncols(),
            enc.config.d_model
        )));
    }
    let mut tape = Tape::new();
    let k = tape.constant(keys.clone());
    let q = tape.constant(queries.clone());
    let mut b = Binder::new(&mut tape);
    let vars = enc.resampler.bind(&mut b, "cond.resampler");
    let out = vars.forward_with(b.tape, k, q);
    drop(b);
    let probs = out.probs.iter().map(|&p| tape.value(p).clone()).collect();
    Ok((tape.value(out.out).clone(), probs))
}
