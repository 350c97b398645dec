//! Decoder-only transformer that autoregressively predicts audio codes from
//! conditioning latents and text tokens.
//!
//! Sequence layout: `[conditioning (L rows) | BOS text... EOS | START codes...]`.
//! Conditioning rows are prefix embeddings and receive no loss; text positions
//! are scored by the text head, audio positions by the audio head. The audio
//! vocabulary is the retained code set plus START/STOP specials, addressed in
//! dense (remapped) ids.
//!
//! Training and gradient checks run on the autodiff tape; generation uses a
//! [`DecodingSession`] with per-layer KV caches that is tested for exact
//! agreement with the tape forward.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    normal_init, Binder, Bound, LayerNorm, LayerNormVars, Linear, LinearVars, TransformerBlock,
    TransformerBlockVars,
};
use crate::tensor::{Tape, Var};
use crate::text::bpe::{BOS_TEXT_ID, EOS_TEXT_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// BPE vocabulary size (text head width).
    pub text_vocab: usize,
    /// Retained audio codes; the audio head adds START/STOP on top.
    pub audio_codes: usize,
    /// Conditioning latent width (projected to `d_model`).
    pub cond_dim: usize,
    /// Conditioning latent count L.
    pub cond_count: usize,
    /// Maximum text segment length (BOS + tokens + EOS).
    pub max_text: usize,
    /// Maximum audio segment length (START + codes).
    pub max_audio: usize,
    pub w_text: f64,
    pub w_audio: f64,
    pub seed: u64,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            ff_mult: 4,
            text_vocab: 256,
            audio_codes: 64,
            cond_dim: 64,
            cond_count: 4,
            max_text: 128,
            max_audio: 384,
            w_text: 0.25,
            w_audio: 1.0,
            seed: 2,
        }
    }
}

impl ArConfig {
    /// Audio head width: retained codes + START + STOP.
    pub fn audio_vocab(&self) -> usize {
        self.audio_codes + 2
    }

    pub fn start_audio_id(&self) -> usize {
        self.audio_codes
    }

    pub fn stop_audio_id(&self) -> usize {
        self.audio_codes + 1
    }
}

/// One training/inference sequence: conditioning latents, text ids (leading
/// language tag included), and dense audio codes.
#[derive(Debug, Clone)]
pub struct SequenceLayout {
    /// `[L x cond_dim]` conditioning latents.
    pub cond: Array2<f64>,
    /// BPE ids, tag first, no BOS/EOS (the layout adds them).
    pub text_ids: Vec<u32>,
    /// Dense code ids, no START/STOP.
    pub audio_dense: Vec<usize>,
}

impl SequenceLayout {
    /// Embedded sequence length: L + (text + BOS/EOS) + (START + codes).
    pub fn embedded_len(&self) -> usize {
        self.cond.nrows() + self.text_ids.len() + 2 + self.audio_dense.len() + 1
    }
}

#[derive(Debug, Clone)]
pub struct ArModel {
    pub config: ArConfig,
    pub cond_proj: Linear,
    pub text_embed: Array2<f64>,
    pub audio_embed: Array2<f64>,
    pub pos_embed_cond: Array2<f64>,
    pub pos_embed_text: Array2<f64>,
    pub pos_embed_audio: Array2<f64>,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub text_head: Linear,
    pub audio_head: Linear,
}

impl ArModel {
    pub fn init(config: ArConfig) -> Self {
        assert!(config.d_model % config.heads == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        ArModel {
            cond_proj: Linear::init(config.cond_dim, d, &mut rng),
            text_embed: normal_init(config.text_vocab, d, 0.02, &mut rng),
            audio_embed: normal_init(config.audio_vocab(), d, 0.02, &mut rng),
            pos_embed_cond: normal_init(config.cond_count, d, 0.02, &mut rng),
            pos_embed_text: normal_init(config.max_text, d, 0.02, &mut rng),
            pos_embed_audio: normal_init(config.max_audio, d, 0.02, &mut rng),
            blocks: (0..config.layers)
                .map(|_| TransformerBlock::init(d, config.heads, d * config.ff_mult, &mut rng))
                .collect(),
            final_ln: LayerNorm::init(d),
            text_head: Linear::init(d, config.text_vocab, &mut rng),
            audio_head: Linear::init(d, config.audio_vocab(), &mut rng),
            config,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.cond_proj.visit("armodel.cond_proj", f);
        f("armodel.text_embed".into(), &self.text_embed);
        f("armodel.audio_embed".into(), &self.audio_embed);
        f("armodel.pos_embed_cond".into(), &self.pos_embed_cond);
        f("armodel.pos_embed_text".into(), &self.pos_embed_text);
        f("armodel.pos_embed_audio".into(), &self.pos_embed_audio);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&format!("armodel.block{i}"), f);
        }
        self.final_ln.visit("armodel.final_ln", f);
        self.text_head.visit("armodel.text_head", f);
        self.audio_head.visit("armodel.audio_head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.cond_proj.visit_mut("armodel.cond_proj", f);
        f("armodel.text_embed".into(), &mut self.text_embed);
        f("armodel.audio_embed".into(), &mut self.audio_embed);
        f("armodel.pos_embed_cond".into(), &mut self.pos_embed_cond);
        f("armodel.pos_embed_text".into(), &mut self.pos_embed_text);
        f("armodel.pos_embed_audio".into(), &mut self.pos_embed_audio);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&format!("armodel.block{i}"), f);
        }
        self.final_ln.visit_mut("armodel.final_ln", f);
        self.text_head.visit_mut("armodel.text_head", f);
        self.audio_head.visit_mut("armodel.audio_head", f);
    }

    fn validate_layout(&self, layout: &SequenceLayout) -> Result<(usize, usize)> {
        let cfg = &self.config;
        if layout.cond.nrows() != cfg.cond_count || layout.cond.ncols() != cfg.cond_dim {
            return Err(Error::invalid(format!(
                "conditioning shape {:?} does not match config [{} x {}]",
                layout.cond.dim(),
                cfg.cond_count,
                cfg.cond_dim
            )));
        }
        let n_text = layout.text_ids.len() + 2;
        let n_audio = layout.audio_dense.len() + 1;
        if n_text > cfg.max_text {
            return Err(Error::invalid(format!(
                "text segment {n_text} exceeds maximum {}",
                cfg.max_text
            )));
        }
        if n_audio > cfg.max_audio {
            return Err(Error::invalid(format!(
                "audio segment {n_audio} exceeds maximum {}",
                cfg.max_audio
            )));
        }
        if let Some(&bad) = layout
            .text_ids
            .iter()
            .find(|&&id| id as usize >= cfg.text_vocab)
        {
            return Err(Error::invalid(format!("text id {bad} out of vocab")));
        }
        if let Some(&bad) = layout
            .audio_dense
            .iter()
            .find(|&&c| c >= cfg.audio_codes)
        {
            return Err(Error::invalid(format!("dense audio code {bad} out of range")));
        }
        Ok((n_text, n_audio))
    }
}

pub struct ArVars {
    pub cond_proj: LinearVars,
    pub text_embed: Var,
    pub audio_embed: Var,
    pub pos_embed_cond: Var,
    pub pos_embed_text: Var,
    pub pos_embed_audio: Var,
    pub blocks: Vec<TransformerBlockVars>,
    pub final_ln: LayerNormVars,
    pub text_head: LinearVars,
    pub audio_head: LinearVars,
}

impl ArModel {
    pub fn bind(&self, b: &mut Binder) -> ArVars {
        ArVars {
            cond_proj: self.cond_proj.bind(b, "armodel.cond_proj"),
            text_embed: b.bind("armodel.text_embed", &self.text_embed),
            audio_embed: b.bind("armodel.audio_embed", &self.audio_embed),
            pos_embed_cond: b.bind("armodel.pos_embed_cond", &self.pos_embed_cond),
            pos_embed_text: b.bind("armodel.pos_embed_text", &self.pos_embed_text),
            pos_embed_audio: b.bind("armodel.pos_embed_audio", &self.pos_embed_audio),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &format!("armodel.block{i}")))
                .collect(),
            final_ln: self.final_ln.bind(b, "armodel.final_ln"),
            text_head: self.text_head.bind(b, "armodel.text_head"),
            audio_head: self.audio_head.bind(b, "armodel.audio_head"),
        }
    }
}

/// Tape forward result: hidden states and per-segment logits.
pub struct ArForward {
    /// Post-final-norm hidden states for the whole sequence, `[S x D]`.
    pub hidden: Var,
    /// Text-head logits at positions BOS..last-text (`[n_text-1 x vocab]`).
    pub text_logits: Var,
    /// Audio-head logits at positions START..last-code (`[m+1 x audio_vocab]`).
    pub audio_logits: Var,
    /// Row range of the embedded audio codes within `hidden` (START excluded).
    pub code_rows: (usize, usize),
}

/// Full teacher-forced forward on the tape. `cond` may be a constant (frozen
/// latents) or the output of the conditioning encoder (joint training).
pub fn ar_forward(
    t: &mut Tape,
    model: &ArModel,
    vars: &ArVars,
    cond: Var,
    layout: &SequenceLayout,
) -> Result<ArForward> {
    let (n_text, n_audio) = model.validate_layout(layout)?;
    let cfg = &model.config;
    let total = cfg.cond_count + n_text + n_audio;

    // segment embeddings + positional tables
    let cond_emb = vars.cond_proj.forward(t, cond);
    let cond_emb = t.add(cond_emb, vars.pos_embed_cond);

    let mut text_tokens: Vec<usize> = Vec::with_capacity(n_text);
    text_tokens.push(BOS_TEXT_ID as usize);
    text_tokens.extend(layout.text_ids.iter().map(|&i| i as usize));
    text_tokens.push(EOS_TEXT_ID as usize);
    let text_emb = t.embed(vars.text_embed, &text_tokens);
    let text_pos = t.slice_rows(vars.pos_embed_text, 0, n_text);
    let text_emb = t.add(text_emb, text_pos);

    let mut audio_tokens: Vec<usize> = Vec::with_capacity(n_audio);
    audio_tokens.push(cfg.start_audio_id());
    audio_tokens.extend(layout.audio_dense.iter().copied());
    let audio_emb = t.embed(vars.audio_embed, &audio_tokens);
    let audio_pos = t.slice_rows(vars.pos_embed_audio, 0, n_audio);
    let audio_emb = t.add(audio_emb, audio_pos);

    let mut x = t.concat_rows(&[cond_emb, text_emb, audio_emb]);
    let mask = crate::nn::causal_mask(t, total);
    for blk in &vars.blocks {
        x = blk.forward(t, x, Some(mask));
    }
    let hidden = vars.final_ln.forward(t, x);

    // text positions BOS..last text token predict the next text token
    let text_span = t.slice_rows(hidden, cfg.cond_count, n_text - 1);
    let text_logits = vars.text_head.forward(t, text_span);

    // audio positions START..last code predict the next code / STOP
    let audio_start = cfg.cond_count + n_text;
    let audio_span = t.slice_rows(hidden, audio_start, n_audio);
    let audio_logits = vars.audio_head.forward(t, audio_span);

    Ok(ArForward {
        hidden,
        text_logits,
        audio_logits,
        code_rows: (audio_start + 1, layout.audio_dense.len()),
    })
}

/// Cross-entropy components of the dual objective.
pub struct ArLoss {
    pub text_ce: Var,
    pub audio_ce: Var,
    pub total: Var,
}

/// Teacher-forced loss: `w_text * text_ce + w_audio * audio_ce`, mean
/// cross-entropy over each segment's positions.
pub fn ar_loss(
    t: &mut Tape,
    model: &ArModel,
    fwd: &ArForward,
    layout: &SequenceLayout,
) -> Result<ArLoss> {
    if layout.audio_dense.is_empty() {
        return Err(Error::invalid("layout has no audio codes to score"));
    }
    let cfg = &model.config;

    // targets: text[0..n], EOS
    let mut text_targets: Vec<Option<usize>> =
        layout.text_ids.iter().map(|&i| Some(i as usize)).collect();
    text_targets.push(Some(EOS_TEXT_ID as usize));
    let text_ce = t.cross_entropy_rows(fwd.text_logits, &text_targets);

    // targets: codes[0..m], STOP
    let mut audio_targets: Vec<Option<usize>> =
        layout.audio_dense.iter().map(|&c| Some(c)).collect();
    audio_targets.push(Some(cfg.stop_audio_id()));
    let audio_ce = t.cross_entropy_rows(fwd.audio_logits, &audio_targets);

    let wt = t.scale(text_ce, cfg.w_text);
    let wa = t.scale(audio_ce, cfg.w_audio);
    let total = t.add(wt, wa);

    for (name, v) in [("text", text_ce), ("audio", audio_ce)] {
        let val = t.scalar(v);
        if !val.is_finite() {
            return Err(Error::Numeric(format!("non-finite {name} cross-entropy")));
        }
    }
    Ok(ArLoss {
        text_ce,
        audio_ce,
        total,
    })
}

/// Final-layer hidden states at the audio-code positions (START/STOP
/// excluded), in order: the vocoder's input representation.
pub fn latents_for_vocoder(
    model: &ArModel,
    cond: &Array2<f64>,
    layout: &SequenceLayout,
) -> Result<Array2<f64>> {
    if layout.audio_dense.is_empty() {
        return Err(Error::invalid("layout has an empty audio segment"));
    }
    let mut session = DecodingSession::new(model, cond, &layout.text_ids)?;
    let mut latents = Array2::zeros((layout.audio_dense.len(), model.config.d_model));
    for (i, &code) in layout.audio_dense.iter().enumerate() {
        let step = session.step(code)?;
        latents.row_mut(i).assign(&step.hidden);
    }
    Ok(latents)
}

/// Output of one incremental decode step: logits for the next audio token
/// and the hidden state at the just-embedded position.
pub struct StepOutput {
    pub audio_logits: Array1<f64>,
    pub hidden: Array1<f64>,
}

/// Incremental decoder with per-layer KV caches. Single-owner; feed it the
/// prompt via [`DecodingSession::new`], then one dense code per step.
pub struct DecodingSession<'m> {
    model: &'m ArModel,
    k_cache: Vec<Array2<f64>>,
    v_cache: Vec<Array2<f64>>,
    /// Next position to embed within the full sequence.
    pos: usize,
    /// Audio positions consumed so far (START counts).
    audio_pos: usize,
    prompt_logits: Array1<f64>,
}

impl<'m> DecodingSession<'m> {
    /// Prefills conditioning, text and START; afterwards
    /// [`DecodingSession::prompt_logits`] scores the first code.
    pub fn new(model: &'m ArModel, cond: &Array2<f64>, text_ids: &[u32]) -> Result<Self> {
        let cfg = &model.config;
        if cond.nrows() != cfg.cond_count || cond.ncols() != cfg.cond_dim {
            return Err(Error::invalid(format!(
                "conditioning shape {:?} does not match config",
                cond.dim()
            )));
        }
        let n_text = text_ids.len() + 2;
        if n_text > cfg.max_text {
            return Err(Error::invalid("text too long for model"));
        }
        let mut session = DecodingSession {
            model,
            k_cache: vec![Array2::zeros((0, cfg.d_model)); cfg.layers],
            v_cache: vec![Array2::zeros((0, cfg.d_model)); cfg.layers],
            pos: 0,
            audio_pos: 0,
            prompt_logits: Array1::zeros(cfg.audio_vocab()),
        };

        // conditioning prefix
        let projected = model.cond_proj.apply(cond) + &model.pos_embed_cond;
        for row in projected.rows() {
            session.feed(row.to_owned());
        }
        // text segment
        let mut text_tokens: Vec<usize> = Vec::with_capacity(n_text);
        text_tokens.push(BOS_TEXT_ID as usize);
        text_tokens.extend(text_ids.iter().map(|&i| i as usize));
        text_tokens.push(EOS_TEXT_ID as usize);
        for (i, &tok) in text_tokens.iter().enumerate() {
            let emb = &model.text_embed.row(tok) + &model.pos_embed_text.row(i);
            session.feed(emb);
        }
        // START; its hidden state scores the first code
        let start = &model.audio_embed.row(cfg.start_audio_id()) + &model.pos_embed_audio.row(0);
        let last = session.feed(start);
        session.audio_pos = 1;
        session.prompt_logits = session.audio_logits_of(&last);
        Ok(session)
    }

    /// Audio logits at the START position (score the first code).
    pub fn prompt_logits(&self) -> &Array1<f64> {
        &self.prompt_logits
    }

    pub fn codes_consumed(&self) -> usize {
        self.audio_pos - 1
    }

    /// Embeds one dense code; returns logits for the next token and the
    /// hidden state at this code's position.
    pub fn step(&mut self, dense_code: usize) -> Result<StepOutput> {
        let cfg = &self.model.config;
        if dense_code >= cfg.audio_codes {
            return Err(Error::invalid(format!(
                "dense code {dense_code} out of range {}",
                cfg.audio_codes
            )));
        }
        if self.audio_pos + 1 > cfg.max_audio {
            return Err(Error::invalid("audio segment exceeds model maximum"));
        }
        let emb =
            &self.model.audio_embed.row(dense_code) + &self.model.pos_embed_audio.row(self.audio_pos);
        self.audio_pos += 1;
        let hidden = self.feed(emb);
        let audio_logits = self.audio_logits_of(&hidden);
        Ok(StepOutput {
            audio_logits,
            hidden,
        })
    }

    fn audio_logits_of(&self, hidden: &Array1<f64>) -> Array1<f64> {
        let h = hidden.clone().insert_axis(ndarray::Axis(0));
        self.model.audio_head.apply(&h).row(0).to_owned()
    }

    /// Runs one embedding row through all layers, updating the KV caches.
    /// Returns the post-final-norm hidden state at this position.
    fn feed(&mut self, emb: Array1<f64>) -> Array1<f64> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = emb.insert_axis(ndarray::Axis(0)); // [1 x d]
        for (l, blk) in self.model.blocks.iter().enumerate() {
            let normed = blk.ln1.apply(&x);
            let q = blk.attn.wq.apply(&normed);
            let k = blk.attn.wk.apply(&normed);
            let v = blk.attn.wv.apply(&normed);

            // append to cache
            let t_prev = self.k_cache[l].nrows();
            let mut new_k = Array2::zeros((t_prev + 1, d));
            new_k.slice_mut(s![..t_prev, ..]).assign(&self.k_cache[l]);
            new_k.row_mut(t_prev).assign(&k.row(0));
            let mut new_v = Array2::zeros((t_prev + 1, d));
            new_v.slice_mut(s![..t_prev, ..]).assign(&self.v_cache[l]);
            new_v.row_mut(t_prev).assign(&v.row(0));
            self.k_cache[l] = new_k;
            self.v_cache[l] = new_v;

            let keys = &self.k_cache[l];
            let vals = &self.v_cache[l];
            let t_now = keys.nrows();
            let mut ctx = Array2::zeros((1, d));
            for h in 0..heads {
                let qh = q.slice(s![0, h * dh..(h + 1) * dh]);
                let kh = keys.slice(s![.., h * dh..(h + 1) * dh]);
                let vh = vals.slice(s![.., h * dh..(h + 1) * dh]);
                // scores over all cached positions (causal by construction)
                let mut scores = Array1::zeros(t_now);
                for ti in 0..t_now {
                    let dot: f64 = qh.iter().zip(kh.row(ti).iter()).map(|(a, b)| a * b).sum();
                    scores[ti] = dot * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut probs = scores.mapv(|v| (v - max).exp());
                let sum = probs.sum();
                probs.mapv_inplace(|v| v / sum);
                let mut ctx_h = Array1::zeros(dh);
                for ti in 0..t_now {
                    let w = probs[ti];
                    for j in 0..dh {
                        ctx_h[j] += w * vh[[ti, j]];
                    }
                }
                ctx.slice_mut(s![0, h * dh..(h + 1) * dh]).assign(&ctx_h);
            }
            let attn_out = blk.attn.wo.apply(&ctx);
            x = &x + &attn_out;
            let normed = blk.ln2.apply(&x);
            let up = blk.ff.up.apply(&normed).mapv(|v| v.max(0.0));
            let ff_out = blk.ff.down.apply(&up);
            x = &x + &ff_out;
        }
        self.pos += 1;
        self.model.final_ln.apply(&x).row(0).to_owned()
    }
}
