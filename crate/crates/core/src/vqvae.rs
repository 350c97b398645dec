//! Mel-spectrogram vector-quantized autoencoder.
//!
//! A two-layer strided conv stack compresses mel frames 4x in time, a single
//! codebook quantizes each latent frame, and a mirrored transposed-conv stack
//! reconstructs the mel. At the default hop of 256 this puts codes at
//! 22050 / 1024 = 21.533 Hz. After training, the codebook can be filtered to
//! the most frequently used codes; encoding is then restricted to that set.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{normal_init, Binder, Bound, Conv1d, Conv1dVars, ConvT1d};
use crate::tensor::{Tape, Var};

/// Time compression factor of the encoder (two stride-2 convolutions).
pub const TIME_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqVaeConfig {
    /// Codebook size K (8192 at full scale).
    pub codebook_size: usize,
    /// Code embedding dimension D.
    pub code_dim: usize,
    /// Hidden channels between the two conv layers.
    pub hidden_channels: usize,
    pub n_mels: usize,
    /// Commitment loss weight (beta).
    pub commitment_beta: f64,
    /// Codes kept by `filter --keep`; kept here so the full-scale
    /// 8192 -> 1024 setting is expressible in config.
    pub filter_keep: usize,
    pub seed: u64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        VqVaeConfig {
            codebook_size: 64,
            code_dim: 32,
            hidden_channels: 48,
            n_mels: 80,
            commitment_beta: 0.25,
            filter_keep: 64,
            seed: 0,
        }
    }
}

/// Single learned codebook, plus the optional retained set installed by
/// [`filter_codebook`]. `retained` is ordered by descending corpus frequency,
/// ties broken by ascending original index.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// `[K x D]` code embeddings.
    pub vectors: Array2<f64>,
    pub retained: Option<Vec<usize>>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    /// Codes the quantizer may currently emit, in retained order (or all
    /// original indices when unfiltered).
    pub fn allowed(&self) -> Vec<usize> {
        match &self.retained {
            Some(r) => r.clone(),
            None => (0..self.size()).collect(),
        }
    }

    /// Number of distinct codes the quantizer can emit.
    pub fn effective_size(&self) -> usize {
        self.retained.as_ref().map_or(self.size(), Vec::len)
    }

    /// Dense remap: position of an original code index within the retained
    /// ordering. Identity-like when unfiltered.
    pub fn dense_of(&self, code: usize) -> Option<usize> {
        match &self.retained {
            Some(r) => r.iter().position(|&c| c == code),
            None => (code < self.size()).then_some(code),
        }
    }

    /// Inverse of [`Codebook::dense_of`].
    pub fn original_of(&self, dense: usize) -> Option<usize> {
        match &self.retained {
            Some(r) => r.get(dense).copied(),
            None => (dense < self.size()).then_some(dense),
        }
    }
}

/// Discrete code indices at the 21.533 Hz frame rate. Codes are original
/// codebook indices even after filtering; use the model's dense remap when a
/// contiguous id space is needed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSequence {
    pub codes: Vec<usize>,
}

impl CodeSequence {
    pub const FRAME_RATE_HZ: f64 = 22050.0 / 1024.0;

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.codes.len() as f64 / Self::FRAME_RATE_HZ
    }
}

/// Number of codes produced from `num_samples` of audio: mel framing
/// followed by the stride-4 encoder.
pub fn codes_for_samples(num_samples: usize, hop: usize) -> usize {
    (num_samples / hop + 1) / TIME_STRIDE
}

#[derive(Debug, Clone)]
pub struct VqVaeModel {
    pub config: VqVaeConfig,
    pub enc1: Conv1d,
    pub enc2: Conv1d,
    pub dec1: ConvT1d,
    pub dec2: ConvT1d,
    pub codebook: Codebook,
}

struct EncoderVars {
    enc1: Conv1dVars,
    enc2: Conv1dVars,
}

impl EncoderVars {
    fn forward(&self, t: &mut Tape, mel_ct: Var) -> Var {
        let h = self.enc1.forward(t, mel_ct);
        let h = t.relu(h);
        self.enc2.forward(t, h)
    }
}

impl VqVaeModel {
    pub fn init(config: VqVaeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc1 = Conv1d::init(config.n_mels, config.hidden_channels, 4, 2, 1, 1, &mut rng);
        let enc2 = Conv1d::init(config.hidden_channels, config.code_dim, 4, 2, 1, 1, &mut rng);
        let dec1 = ConvT1d::init(config.code_dim, config.hidden_channels, 4, 2, 1, &mut rng);
        let dec2 = ConvT1d::init(config.hidden_channels, config.n_mels, 4, 2, 1, &mut rng);
        let vectors = normal_init(config.codebook_size, config.code_dim, 1.0, &mut rng);
        VqVaeModel {
            config,
            enc1,
            enc2,
            dec1,
            dec2,
            codebook: Codebook {
                vectors,
                retained: None,
            },
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.enc1.visit("vqvae.enc1", f);
        self.enc2.visit("vqvae.enc2", f);
        self.dec1.visit("vqvae.dec1", f);
        self.dec2.visit("vqvae.dec2", f);
        f("vqvae.codebook_embed".to_string(), &self.codebook.vectors);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.enc1.visit_mut("vqvae.enc1", f);
        self.enc2.visit_mut("vqvae.enc2", f);
        self.dec1.visit_mut("vqvae.dec1", f);
        self.dec2.visit_mut("vqvae.dec2", f);
        f(
            "vqvae.codebook_embed".to_string(),
            &mut self.codebook.vectors,
        );
    }

    /// Mel `[T x n_mels]` truncated to a multiple of the time stride and
    /// transposed to conv layout `[n_mels x T]`.
    fn mel_to_conv_layout(&self, mel: &MelSpectrogram) -> Result<Array2<f64>> {
        if mel.n_mels != self.config.n_mels {
            return Err(Error::invalid(format!(
                "mel has {} bins, model expects {}",
                mel.n_mels, self.config.n_mels
            )));
        }
        let t = mel.frames.nrows();
        if t < TIME_STRIDE {
            return Err(Error::invalid(format!(
                "input too short: {t} mel frames, need at least {TIME_STRIDE}"
            )));
        }
        let t4 = t - t % TIME_STRIDE;
        Ok(mel.frames.slice(ndarray::s![..t4, ..]).t().to_owned())
    }

    /// Encoder forward without a tape (inference path).
    fn encode_latents(&self, mel_ct: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(mel_ct.clone());
        let mut b = Binder::new(&mut tape);
        let vars = EncoderVars {
            enc1: self.enc1.bind(&mut b, "enc1"),
            enc2: self.enc2.bind(&mut b, "enc2"),
        };
        let z = vars.forward(b.tape, x);
        drop(b);
        tape.value(z).clone()
    }

    /// Nearest allowed code (squared Euclidean) for each latent column.
    fn quantize_columns(&self, latents: &Array2<f64>) -> Vec<usize> {
        let allowed = self.codebook.allowed();
        let mut codes = Vec::with_capacity(latents.ncols());
        for col in latents.columns() {
            let mut best = allowed[0];
            let mut best_d = f64::INFINITY;
            for &k in &allowed {
                let row = self.codebook.vectors.row(k);
                let d: f64 = row
                    .iter()
                    .zip(col.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            codes.push(best);
        }
        codes
    }
}

/// Quantizes a mel-spectrogram to codes; length is `floor(T_mel / 4)`.
pub fn vq_encode(mel: &MelSpectrogram, model: &VqVaeModel) -> Result<CodeSequence> {
    let mel_ct = model.mel_to_conv_layout(mel)?;
    let latents = model.encode_latents(&mel_ct);
    Ok(CodeSequence {
        codes: model.quantize_columns(&latents),
    })
}

/// Reconstructs a mel-spectrogram (`4 x len(codes)` frames) from codes.
pub fn vq_decode(codes: &CodeSequence, model: &VqVaeModel) -> Result<MelSpectrogram> {
    if codes.is_empty() {
        return Err(Error::invalid("cannot decode an empty code sequence"));
    }
    let k = model.codebook.size();
    if let Some(&bad) = codes.codes.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!(
            "code {bad} out of range for codebook of size {k}"
        )));
    }
    // embed codes as latent columns
    let d = model.config.code_dim;
    let mut latents = Array2::zeros((d, codes.len()));
    for (t, &c) in codes.codes.iter().enumerate() {
        latents
            .column_mut(t)
            .assign(&model.codebook.vectors.row(c));
    }
    let mut tape = Tape::new();
    let z = tape.constant(latents);
    let mut b = Binder::new(&mut tape);
    let dec1 = model.dec1.bind(&mut b, "dec1");
    let dec2 = model.dec2.bind(&mut b, "dec2");
    let h = dec1.forward(b.tape, z);
    let h = b.tape.relu(h);
    let out = dec2.forward(b.tape, h);
    drop(b);
    let frames = tape.value(out).t().to_owned();
    Ok(MelSpectrogram {
        frames,
        n_mels: model.config.n_mels,
        hop_length: 256,
        sample_rate_hz: 22050,
    })
}

/// Loss components returned by [`vq_train_forward`] and the trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqVaeLosses {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl VqVaeLosses {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }

    pub fn all_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.codebook.is_finite() && self.commitment.is_finite()
    }
}

/// Builds the full VQ-VAE training graph for one batch on `tape`:
/// reconstruction + codebook + beta * commitment, with a straight-through
/// estimator across the quantization. Returns (total loss var, components,
/// bound params).
pub fn vq_train_forward(
    tape: &mut Tape,
    model: &VqVaeModel,
    batch: &[&MelSpectrogram],
) -> Result<(Var, VqVaeLosses, Bound)> {
    vq_train_forward_with_codes(tape, model, batch, None)
}

/// Like [`vq_train_forward`] but optionally pinning the code assignment per
/// batch item. The quantizer's argmin is piecewise constant, so gradient
/// checks must hold assignments fixed while parameters are perturbed.
pub fn vq_train_forward_with_codes(
    tape: &mut Tape,
    model: &VqVaeModel,
    batch: &[&MelSpectrogram],
    fixed_codes: Option<&[Vec<usize>]>,
) -> Result<(Var, VqVaeLosses, Bound)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    if let Some(fc) = fixed_codes {
        if fc.len() != batch.len() {
            return Err(Error::invalid("fixed_codes length mismatch"));
        }
    }

    let mut b = Binder::new(tape);
    let enc = EncoderVars {
        enc1: model.enc1.bind(&mut b, "vqvae.enc1"),
        enc2: model.enc2.bind(&mut b, "vqvae.enc2"),
    };
    let dec1 = model.dec1.bind(&mut b, "vqvae.dec1");
    let dec2 = model.dec2.bind(&mut b, "vqvae.dec2");
    let codebook_var = b.bind("vqvae.codebook_embed", &model.codebook.vectors);
    let Binder { tape: t, bound } = b;

    let mut recon_terms = Vec::new();
    let mut codebook_terms = Vec::new();
    let mut commit_terms = Vec::new();

    for (i, mel) in batch.iter().enumerate() {
        let mel_ct = model.mel_to_conv_layout(mel)?;
        let target = t.constant(mel_ct.clone());
        let x = t.constant(mel_ct);
        let z_e = enc.forward(t, x); // [D x T']

        // nearest codes from current values (no grad through the argmin)
        let codes = match fixed_codes {
            Some(fc) => fc[i].clone(),
            None => {
                let z_vals = t.value(z_e).clone();
                model.quantize_columns(&z_vals)
            }
        };

        // selected code rows [T' x D]
        let e_rows = t.embed(codebook_var, &codes);
        let e_cols = t.transpose(e_rows); // [D x T']

        // straight-through: z_q = z_e + const(e - z_e)
        let delta_vals = t.value(e_cols) - t.value(z_e);
        let delta = t.constant(delta_vals);
        let z_q = t.add(z_e, delta);

        // decoder
        let h = dec1.forward(t, z_q);
        let h = t.relu(h);
        let recon = dec2.forward(t, h);

        let diff = t.sub(recon, target);
        let sq = t.mul(diff, diff);
        recon_terms.push(t.mean_all(sq));

        // codebook loss: ||e - sg(z_e)||^2, grads flow into the codebook
        let z_detached = t.constant(t.value(z_e).clone());
        let cb_diff = t.sub(e_cols, z_detached);
        let cb_sq = t.mul(cb_diff, cb_diff);
        codebook_terms.push(t.mean_all(cb_sq));

        // commitment loss: beta * ||z_e - sg(e)||^2, grads into the encoder
        let e_detached = t.constant(t.value(e_cols).clone());
        let cm_diff = t.sub(z_e, e_detached);
        let cm_sq = t.mul(cm_diff, cm_diff);
        commit_terms.push(t.mean_all(cm_sq));
    }

    let n = batch.len() as f64;
    let mean = |terms: Vec<Var>, t: &mut Tape| {
        let s = terms
            .into_iter()
            .reduce(|a, v| t.add(a, v))
            .expect("non-empty");
        t.scale(s, 1.0 / n)
    };
    let recon = mean(recon_terms, t);
    let codebook = mean(codebook_terms, t);
    let commit_raw = mean(commit_terms, t);
    let commit = t.scale(commit_raw, model.config.commitment_beta);

    let partial = t.add(recon, codebook);
    let total = t.add(partial, commit);

    let losses = VqVaeLosses {
        reconstruction: t.scalar(recon),
        codebook: t.scalar(codebook),
        commitment: t.scalar(commit),
    };
    if !losses.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite vq-vae loss: {losses:?}"
        )));
    }
    Ok((total, losses, bound))
}

/// Counts code usage over `corpus` with the unrestricted codebook and keeps
/// the `keep` most frequent codes (descending count, ties by ascending
/// index; dead codes rank last).
pub fn filter_codebook(
    model: &VqVaeModel,
    corpus: &[MelSpectrogram],
    keep: usize,
) -> Result<VqVaeModel> {
    if keep == 0 {
        return Err(Error::invalid("filter keep count must be positive"));
    }
    if keep > model.codebook.size() {
        return Err(Error::invalid(format!(
            "keep {keep} exceeds codebook size {}",
            model.codebook.size()
        )));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("counting corpus is empty"));
    }

    let unrestricted = VqVaeModel {
        codebook: Codebook {
            vectors: model.codebook.vectors.clone(),
            retained: None,
        },
        ..model.clone()
    };
    let mut counts: Array1<u64> = Array1::zeros(model.codebook.size());
    for mel in corpus {
        let codes = vq_encode(mel, &unrestricted)?;
        for c in codes.codes {
            counts[c] += 1;
        }
    }

    let mut order: Vec<usize> = (0..model.codebook.size()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(counts[i]), i));
    order.truncate(keep);

    let mut filtered = model.clone();
    filtered.codebook.retained = Some(order);
    Ok(filtered)
}

/// Usage counts per code over a corpus, exposed for inspection and tests.
pub fn count_code_usage(model: &VqVaeModel, corpus: &[MelSpectrogram]) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; model.codebook.size()];
    for mel in corpus {
        let codes = vq_encode(mel, model)?;
        for c in codes.codes {
            counts[c] += 1;
        }
    }
    Ok(counts)
}
