//! Latent-conditioned vocoder: an upsampling generator in the HiFi-GAN
//! family, trained adversarially with multi-period and multi-scale
//! discriminators, a mel reconstruction loss, feature matching, and a
//! speaker consistency loss (SCL).
//!
//! The generator consumes the AR model's hidden states (linearly
//! interpolated from the 21.533 Hz code grid onto the 24 kHz output grid)
//! and a speaker embedding added at every upsampling stage through a linear
//! projection. Zeroing those projections reproduces the unconditioned
//! generator bit-exactly.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::nn::{normal_init, time_interp_matrix, Binder, Bound, Conv1d, Conv1dVars, ConvT1d,
    ConvT1dVars, MelBasis};
use crate::speaker::{SpeakerEmbedding, ToyBackend};
use crate::tensor::{Tape, Var};
use crate::vqvae::CodeSequence;

/// Output sample rate of the vocoder.
pub const OUTPUT_RATE_HZ: u32 = 24000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocoderConfig {
    /// Width of the AR latents this vocoder consumes.
    pub latent_dim: usize,
    /// Per-stage upsampling factors; the product is the samples-per-latent
    /// (1024 mirrors the code rate contract).
    pub upsample_factors: Vec<usize>,
    /// Channel widths: `channels[0]` after the input conv, then one entry per
    /// stage output.
    pub channels: Vec<usize>,
    pub speaker_dim: usize,
    pub resblock_kernel: usize,
    pub resblock_dilations: [usize; 2],
    pub mel_weight: f64,
    pub fm_weight: f64,
    pub adv_weight: f64,
    pub scl_weight: f64,
    /// Periods of the multi-period discriminators.
    pub disc_periods: Vec<usize>,
    /// Average-pool factors of the multi-scale discriminators.
    pub disc_scales: Vec<usize>,
    pub seed: u64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        VocoderConfig {
            latent_dim: 128,
            upsample_factors: vec![8, 8, 4, 4],
            channels: vec![32, 16, 8, 4, 4],
            speaker_dim: 32,
            resblock_kernel: 3,
            resblock_dilations: [1, 3],
            mel_weight: 45.0,
            fm_weight: 2.0,
            adv_weight: 1.0,
            scl_weight: 9.0,
            disc_periods: vec![2, 3],
            disc_scales: vec![1, 2],
            seed: 4,
        }
    }
}

impl VocoderConfig {
    pub fn samples_per_latent(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.channels.len() != self.upsample_factors.len() + 1 {
            return Err(Error::config(
                "vocoder channels must have one more entry than upsample factors",
            ));
        }
        if self.upsample_factors.iter().any(|&f| f < 2 || f % 2 != 0) {
            return Err(Error::config("upsample factors must be even and >= 2"));
        }
        Ok(())
    }
}

/// One upsampling stage: transposed conv, additive speaker projection, and a
/// two-conv dilated residual block.
#[derive(Debug, Clone)]
pub struct UpStage {
    pub up: ConvT1d,
    /// `[speaker_dim x ch]`, bias-free so zero weights disable conditioning.
    pub spk_proj: Array2<f64>,
    pub res1: Conv1d,
    pub res2: Conv1d,
}

#[derive(Debug, Clone)]
pub struct VocoderModel {
    pub config: VocoderConfig,
    pub pre: Conv1d,
    pub stages: Vec<UpStage>,
    pub post: Conv1d,
}

impl VocoderModel {
    pub fn init(config: VocoderConfig) -> Self {
        config.validate().expect("invalid vocoder config");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pre = Conv1d::init(config.latent_dim, config.channels[0], 7, 1, 3, 1, &mut rng);
        let k = config.resblock_kernel;
        let [d1, d2] = config.resblock_dilations;
        let stages = config
            .upsample_factors
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let (cin, cout) = (config.channels[i], config.channels[i + 1]);
                UpStage {
                    up: ConvT1d::init(cin, cout, 2 * f, f, f / 2, &mut rng),
                    spk_proj: Array2::zeros((config.speaker_dim, cout)),
                    res1: Conv1d::init(cout, cout, k, 1, d1 * (k - 1) / 2, d1, &mut rng),
                    res2: Conv1d::init(cout, cout, k, 1, d2 * (k - 1) / 2, d2, &mut rng),
                }
            })
            .collect();
        let post = Conv1d::init(*config.channels.last().unwrap(), 1, 7, 1, 3, 1, &mut rng);
        VocoderModel {
            config,
            pre,
            stages,
            post,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.pre.visit("vocoder.pre", f);
        for (i, s) in self.stages.iter().enumerate() {
            s.up.visit(&format!("vocoder.stage{i}.up"), f);
            f(format!("vocoder.stage{i}.spk_proj.weight"), &s.spk_proj);
            s.res1.visit(&format!("vocoder.stage{i}.res1"), f);
            s.res2.visit(&format!("vocoder.stage{i}.res2"), f);
        }
        self.post.visit("vocoder.post", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.pre.visit_mut("vocoder.pre", f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.up.visit_mut(&format!("vocoder.stage{i}.up"), f);
            f(format!("vocoder.stage{i}.spk_proj.weight"), &mut s.spk_proj);
            s.res1.visit_mut(&format!("vocoder.stage{i}.res1"), f);
            s.res2.visit_mut(&format!("vocoder.stage{i}.res2"), f);
        }
        self.post.visit_mut("vocoder.post", f);
    }

    pub fn bind(&self, b: &mut Binder) -> GeneratorVars {
        GeneratorVars {
            pre: self.pre.bind(b, "vocoder.pre"),
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| UpStageVars {
                    up: s.up.bind(b, &format!("vocoder.stage{i}.up")),
                    spk_proj: b.bind(&format!("vocoder.stage{i}.spk_proj.weight"), &s.spk_proj),
                    res1: s.res1.bind(b, &format!("vocoder.stage{i}.res1")),
                    res2: s.res2.bind(b, &format!("vocoder.stage{i}.res2")),
                })
                .collect(),
            post: self.post.bind(b, "vocoder.post"),
        }
    }
}

pub struct UpStageVars {
    pub up: ConvT1dVars,
    pub spk_proj: Var,
    pub res1: Conv1dVars,
    pub res2: Conv1dVars,
}

pub struct GeneratorVars {
    pub pre: Conv1dVars,
    pub stages: Vec<UpStageVars>,
    pub post: Conv1dVars,
}

const LRELU_SLOPE: f64 = 0.1;

impl GeneratorVars {
    /// `latents_t` is `[D x T']` (conv layout), `spk` is `[1 x speaker_dim]`.
    /// Output is a `[1 x T' * prod(factors)]` waveform in (-1, 1).
    pub fn forward(&self, t: &mut Tape, latents_t: Var, spk: Var) -> Var {
        let mut x = self.pre.forward(t, latents_t);
        for stage in &self.stages {
            let a = t.leaky_relu(x, LRELU_SLOPE);
            let up = stage.up.forward(t, a);
            // speaker conditioning: [1 x spk_dim] @ [spk_dim x ch] -> column
            let proj = t.matmul(spk, stage.spk_proj);
            let col = t.transpose(proj);
            let conditioned = t.add_col(up, col);
            // residual block with two dilated convs
            let h = t.leaky_relu(conditioned, LRELU_SLOPE);
            let h = stage.res1.forward(t, h);
            let h = t.leaky_relu(h, LRELU_SLOPE);
            let h = stage.res2.forward(t, h);
            x = t.add(conditioned, h);
        }
        let a = t.leaky_relu(x, LRELU_SLOPE);
        let out = self.post.forward(t, a);
        t.tanh(out)
    }
}

/// Linear time interpolation of latent rows from the code rate onto the
/// output rate: `[T x D]` -> `[round(T * dst/src) x D]`.
pub fn interpolate_latents(latents: &Array2<f64>, src_hz: f64, dst_hz: f64) -> Result<Array2<f64>> {
    if latents.nrows() == 0 {
        return Err(Error::invalid("cannot interpolate zero latent frames"));
    }
    let m = time_interp_matrix(latents.nrows(), src_hz, dst_hz);
    Ok(m.dot(latents))
}

/// Interpolation from the code frame rate to the vocoder grid (one latent
/// per `samples_per_latent` output samples).
pub fn interpolate_to_output_grid(
    latents: &Array2<f64>,
    cfg: &VocoderConfig,
) -> Result<Array2<f64>> {
    let dst_hz = f64::from(OUTPUT_RATE_HZ) / cfg.samples_per_latent() as f64;
    interpolate_latents(latents, CodeSequence::FRAME_RATE_HZ, dst_hz)
}

/// Plain inference: latents `[T' x D]` (already on the output grid) plus a
/// speaker embedding to a 24 kHz waveform of exactly `T' * prod(factors)`
/// samples.
pub fn vocode(
    latents: &Array2<f64>,
    spk: &SpeakerEmbedding,
    model: &VocoderModel,
) -> Result<Waveform> {
    if latents.ncols() != model.config.latent_dim {
        return Err(Error::invalid(format!(
            "latent dim {} does not match vocoder input dim {}",
            latents.ncols(),
            model.config.latent_dim
        )));
    }
    if spk.dim() != model.config.speaker_dim {
        return Err(Error::invalid(format!(
            "speaker dim {} does not match vocoder speaker dim {}",
            spk.dim(),
            model.config.speaker_dim
        )));
    }
    let mut tape = Tape::new();
    let lat = tape.constant(latents.t().to_owned());
    let spk_row = tape.constant(
        Array2::from_shape_vec((1, spk.dim()), spk.vector.to_vec()).unwrap(),
    );
    let mut b = Binder::new(&mut tape);
    let vars = model.bind(&mut b);
    let out = vars.forward(b.tape, lat, spk_row);
    drop(b);
    let samples = tape.value(out).row(0).to_vec();
    Ok(Waveform::new(samples, OUTPUT_RATE_HZ))
}

// ---- discriminators ----

/// A conv stack over either a period-reshaped or average-pooled waveform.
#[derive(Debug, Clone)]
pub struct DiscStack {
    pub convs: Vec<Conv1d>,
    /// Period-p phase reshape when set; otherwise raw/pooled waveform input.
    pub period: Option<usize>,
    /// Average-pool factor applied before the stack (scale branch).
    pub pool: usize,
}

impl DiscStack {
    fn input_channels(period: Option<usize>) -> usize {
        period.unwrap_or(1)
    }

    fn init(period: Option<usize>, pool: usize, rng: &mut ChaCha8Rng) -> Self {
        let cin = Self::input_channels(period);
        let convs = vec![
            Conv1d::init(cin, 8, 5, 2, 2, 1, rng),
            Conv1d::init(8, 16, 5, 2, 2, 1, rng),
            Conv1d::init(16, 1, 3, 1, 1, 1, rng),
        ];
        DiscStack { convs, period, pool }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.conv{i}"), f);
        }
    }

    fn bind(&self, b: &mut Binder, prefix: &str) -> DiscStackVars {
        DiscStackVars {
            convs: self
                .convs
                .iter()
                .enumerate()
                .map(|(i, c)| c.bind(b, &format!("{prefix}.conv{i}")))
                .collect(),
            period: self.period,
            pool: self.pool,
        }
    }

    fn bind_const(&self, t: &mut Tape, _prefix: &str) -> DiscStackVars {
        DiscStackVars {
            convs: self
                .convs
                .iter()
                .map(|c| Conv1dVars {
                    weight: t.constant(c.weight.clone()),
                    bias: t.constant(c.bias.clone()),
                    in_ch: c.in_ch,
                    kernel: c.kernel,
                    stride: c.stride,
                    pad: c.pad,
                    dilation: c.dilation,
                })
                .collect(),
            period: self.period,
            pool: self.pool,
        }
    }
}

pub struct DiscStackVars {
    convs: Vec<Conv1dVars>,
    period: Option<usize>,
    pool: usize,
}

impl DiscStackVars {
    /// Returns the score map and intermediate features for feature matching.
    fn forward(&self, t: &mut Tape, wav: Var) -> (Var, Vec<Var>) {
        let mut x = wav;
        if self.pool > 1 {
            let n = t.value(x).ncols();
            let out_len = n / self.pool;
            let mut map = Array2::from_elem((self.pool, out_len), -1i64);
            for j in 0..self.pool {
                for ti in 0..out_len {
                    map[[j, ti]] = (ti * self.pool + j) as i64;
                }
            }
            let cols = t.gather(x, map);
            x = t.mean_rows(cols);
        }
        if let Some(p) = self.period {
            let n = t.value(x).ncols();
            let frames = n / p;
            let mut map = Array2::from_elem((p, frames), -1i64);
            for c in 0..p {
                for ti in 0..frames {
                    map[[c, ti]] = (ti * p + c) as i64;
                }
            }
            x = t.gather(x, map);
        }
        let mut features = Vec::new();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(t, x);
            if i < last {
                x = t.leaky_relu(x, LRELU_SLOPE);
                features.push(x);
            }
        }
        (x, features)
    }
}

/// One multi-period set plus one multi-scale set.
#[derive(Debug, Clone)]
pub struct Discriminators {
    pub stacks: Vec<DiscStack>,
}

impl Discriminators {
    pub fn init(cfg: &VocoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut stacks = Vec::new();
        for &p in &cfg.disc_periods {
            stacks.push(DiscStack::init(Some(p), 1, &mut rng));
        }
        for &s in &cfg.disc_scales {
            stacks.push(DiscStack::init(None, s, &mut rng));
        }
        Discriminators { stacks }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Array2<f64>)) {
        for (i, s) in self.stacks.iter().enumerate() {
            s.visit(&format!("disc.stack{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        for (i, s) in self.stacks.iter_mut().enumerate() {
            s.visit_mut(&format!("disc.stack{i}"), f);
        }
    }
}

// ---- losses ----

/// 1 - cosine similarity of speaker embeddings, in [0, 2].
pub fn scl_loss(
    generated: &Waveform,
    reference: &Waveform,
    backend: &dyn crate::speaker::SpeakerBackend,
) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("scl needs non-empty waveforms"));
    }
    let eg = backend.embed(generated)?;
    let er = backend.embed(reference)?;
    Ok(1.0 - eg.cosine(&er))
}

/// Scalar values of the generator loss terms (weights already applied in
/// `total`).
#[derive(Debug, Clone, Copy)]
pub struct GenLossParts {
    pub adv: f64,
    pub feature_matching: f64,
    pub mel: f64,
    pub scl: f64,
    pub total: f64,
}

impl GenLossParts {
    pub fn all_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Builds the generator training graph on `tape`: LSGAN adversarial term
/// against frozen discriminators, feature matching, mel reconstruction
/// through the differentiable mel basis, and SCL through the frozen toy
/// speaker backend. Returns the total-loss var, scalar parts, and the bound
/// generator parameters.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss_forward(
    tape: &mut Tape,
    model: &VocoderModel,
    disc: &Discriminators,
    latents_grid: &Array2<f64>,
    spk: &SpeakerEmbedding,
    real: &Waveform,
    basis: &MelBasis,
    scl_backend: Option<(&ToyBackend, &SpeakerEmbedding)>,
) -> Result<(Var, GenLossParts, Bound)> {
    let cfg = &model.config;
    let expected = latents_grid.nrows() * cfg.samples_per_latent();
    if real.len() != expected {
        return Err(Error::invalid(format!(
            "real segment has {} samples, generator will produce {expected}",
            real.len()
        )));
    }

    let lat = tape.constant(latents_grid.t().to_owned());
    let spk_row =
        tape.constant(Array2::from_shape_vec((1, spk.dim()), spk.vector.to_vec()).unwrap());
    let real_row =
        tape.constant(Array2::from_shape_vec((1, real.len()), real.samples.clone()).unwrap());

    let mut b = Binder::new(tape);
    let gen_vars = model.bind(&mut b);
    let Binder { tape: t, bound } = b;

    let fake = gen_vars.forward(t, lat, spk_row);

    // adversarial + feature matching against frozen discriminators
    let mut adv_terms = Vec::new();
    let mut fm_terms = Vec::new();
    for (i, stack) in disc.stacks.iter().enumerate() {
        let vars = stack.bind_const(t, &format!("disc.stack{i}"));
        let (score_f, feats_f) = vars.forward(t, fake);
        let (_, feats_r) = vars.forward(t, real_row);
        // (D(fake) - 1)^2
        let shifted = t.add_scalar(score_f, -1.0);
        let sq = t.mul(shifted, shifted);
        adv_terms.push(t.mean_all(sq));
        for (ff, fr) in feats_f.iter().zip(feats_r.iter()) {
            let fr_const = t.constant(t.value(*fr).clone());
            let diff = t.sub(*ff, fr_const);
            let a = t.abs(diff);
            fm_terms.push(t.mean_all(a));
        }
    }
    let sum_of = |terms: Vec<Var>, t: &mut Tape| {
        terms
            .into_iter()
            .reduce(|a, v| t.add(a, v))
            .expect("non-empty loss terms")
    };
    let adv = sum_of(adv_terms, t);
    let fm = sum_of(fm_terms, t);

    // mel reconstruction (L1 in log-mel space)
    let mel_fake = basis.forward(t, fake);
    let mel_real = basis.forward(t, real_row);
    let mel_real_const = t.constant(t.value(mel_real).clone());
    let mel_diff = t.sub(mel_fake, mel_real_const);
    let mel_abs = t.abs(mel_diff);
    let mel = t.mean_all(mel_abs);

    // SCL through the differentiable toy backend (frozen projection)
    let scl = match scl_backend {
        Some((backend, ref_emb)) => {
            let gen_emb = backend.embed_on_tape(t, basis, fake);
            let ref_const = t.constant(
                Array2::from_shape_vec((ref_emb.dim(), 1), ref_emb.vector.to_vec()).unwrap(),
            );
            let cos = t.matmul(gen_emb, ref_const); // [1 x 1]
            let neg = t.scale(cos, -1.0);
            Some(t.add_scalar(neg, 1.0))
        }
        None => None,
    };

    let adv_w = t.scale(adv, cfg.adv_weight);
    let fm_w = t.scale(fm, cfg.fm_weight);
    let mel_w = t.scale(mel, cfg.mel_weight);
    let mut total = t.add(adv_w, fm_w);
    total = t.add(total, mel_w);
    let scl_val = match scl {
        Some(s) => {
            let s_w = t.scale(s, cfg.scl_weight);
            total = t.add(total, s_w);
            t.scalar(s)
        }
        None => 0.0,
    };

    let parts = GenLossParts {
        adv: t.scalar(adv),
        feature_matching: t.scalar(fm),
        mel: t.scalar(mel),
        scl: scl_val,
        total: t.scalar(total),
    };
    if !parts.all_finite() {
        return Err(Error::Numeric(format!("non-finite generator loss: {parts:?}")));
    }
    Ok((total, parts, bound))
}

/// Discriminator loss graph: `(D(real) - 1)^2 + D(fake)^2` with the fake
/// waveform detached (passed by value).
pub fn discriminator_loss_forward(
    tape: &mut Tape,
    disc: &Discriminators,
    fake: &Array2<f64>,
    real: &Waveform,
) -> Result<(Var, f64, Bound)> {
    let fake_const = tape.constant(fake.clone());
    let real_const =
        tape.constant(Array2::from_shape_vec((1, real.len()), real.samples.clone()).unwrap());
    let mut b = Binder::new(tape);
    let stacks: Vec<DiscStackVars> = disc
        .stacks
        .iter()
        .enumerate()
        .map(|(i, s)| s.bind(&mut b, &format!("disc.stack{i}")))
        .collect();
    let Binder { tape: t, bound } = b;

    let mut terms = Vec::new();
    for vars in &stacks {
        let (score_r, _) = vars.forward(t, real_const);
        let (score_f, _) = vars.forward(t, fake_const);
        let r_shift = t.add_scalar(score_r, -1.0);
        let r_sq = t.mul(r_shift, r_shift);
        terms.push(t.mean_all(r_sq));
        let f_sq = t.mul(score_f, score_f);
        terms.push(t.mean_all(f_sq));
    }
    let total = terms
        .into_iter()
        .reduce(|a, v| t.add(a, v))
        .expect("non-empty");
    let val = t.scalar(total);
    if !val.is_finite() {
        return Err(Error::Numeric("non-finite discriminator loss".into()));
    }
    Ok((total, val, bound))
}

/// Mel config used for the vocoder's reconstruction loss (24 kHz analysis).
pub fn loss_mel_config() -> MelConfig {
    MelConfig::default().at_rate(OUTPUT_RATE_HZ)
}
