//! Neural building blocks on top of the autodiff tape: parameter binding,
//! initializers, linear/attention/convolution layers, and a differentiable
//! mel-spectrogram basis shared by the vocoder losses.
//!
//! Parameter naming convention (relied on by the optimizer's weight-decay
//! exemption and by checkpoints): weights end in `.weight`, biases in
//! `.bias`, layer-norm scales in `.gain`, and embedding-like tables contain
//! `embed` in their name.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{mel_filterbank, stft_window, MelConfig};
use crate::tensor::{im2col_map, col2im_map, Grads, Tape, Var};

/// Records which tape leaf each named parameter was bound to, so gradients
/// can be pulled back out by name after `backward`.
#[derive(Default)]
pub struct Bound {
    pairs: Vec<(String, Var)>,
}

impl Bound {
    pub fn push(&mut self, name: String, var: Var) {
        self.pairs.push((name, var));
    }

    pub fn pairs(&self) -> &[(String, Var)] {
        &self.pairs
    }

    /// Gradient for every bound parameter; parameters unused by the loss get
    /// zero gradients of the right shape.
    pub fn grads(&self, tape: &Tape, grads: &Grads) -> Vec<(String, Array2<f64>)> {
        self.pairs
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(tape.value(*var).dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Binds parameter arrays into a tape as trainable leaves.
pub struct Binder<'a> {
    pub tape: &'a mut Tape,
    pub bound: Bound,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape) -> Self {
        Binder {
            tape,
            bound: Bound::default(),
        }
    }

    pub fn bind(&mut self, name: &str, value: &Array2<f64>) -> Var {
        let var = self.tape.leaf(value.clone());
        self.bound.push(name.to_string(), var);
        var
    }

    pub fn finish(self) -> Bound {
        self.bound
    }
}

// ---- initializers ----

pub fn normal_init(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // Box-Muller keeps us off rand_distr for one distribution
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    })
}

pub fn fan_in_init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    normal_init(in_dim, out_dim, 1.0 / (in_dim as f64).sqrt(), rng)
}

// ---- linear ----

/// Dense layer; `weight` is `[in x out]`, applied as `x @ weight + bias`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: fan_in_init(in_dim, out_dim, rng),
            bias: Array2::zeros((1, out_dim)),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> LinearVars {
        LinearVars {
            weight: b.bind(&format!("{name}.weight"), &self.weight),
            bias: b.bind(&format!("{name}.bias"), &self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    /// Plain (tape-free) forward for inference paths.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let xw = t.matmul(x, self.weight);
        t.add_row(xw, self.bias)
    }
}

// ---- layer norm ----

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Array2<f64>,
    pub bias: Array2<f64>,
}

impl LayerNorm {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gain: Array2::ones((1, dim)),
            bias: Array2::zeros((1, dim)),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> LayerNormVars {
        LayerNormVars {
            gain: b.bind(&format!("{name}.gain"), &self.gain),
            bias: b.bind(&format!("{name}.bias"), &self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    pub const EPS: f64 = 1e-5;

    /// Plain forward for inference paths.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = x.ncols() as f64;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + Self::EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gain[[0, j]] + self.bias[[0, j]];
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNormVars {
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        t.layer_norm(x, self.gain, self.bias, LayerNorm::EPS)
    }
}

// ---- attention ----

/// Multi-head scaled dot-product attention projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn init(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "head count must divide model width");
        Attention {
            wq: Linear::init(dim, dim, rng),
            wk: Linear::init(dim, dim, rng),
            wv: Linear::init(dim, dim, rng),
            wo: Linear::init(dim, dim, rng),
            heads,
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> AttentionVars {
        AttentionVars {
            wq: self.wq.bind(b, &format!("{name}.wq")),
            wk: self.wk.bind(b, &format!("{name}.wk")),
            wv: self.wv.bind(b, &format!("{name}.wv")),
            wo: self.wo.bind(b, &format!("{name}.wo")),
            heads: self.heads,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

pub struct AttentionVars {
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
    pub heads: usize,
}

pub struct AttentionOut {
    pub out: Var,
    /// Per-head attention probabilities, each `[Tq x Tkv]`.
    pub probs: Vec<Var>,
}

impl AttentionVars {
    /// `queries_from` is `[Tq x D]`, `keys_from` is `[Tkv x D]`; `mask` (if
    /// given) is added to every head's score matrix before the softmax.
    pub fn forward(
        &self,
        t: &mut Tape,
        queries_from: Var,
        keys_from: Var,
        mask: Option<Var>,
    ) -> AttentionOut {
        let q = self.wq.forward(t, queries_from);
        let k = self.wk.forward(t, keys_from);
        let v = self.wv.forward(t, keys_from);
        let dim = t.value(q).ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut ctxs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let kht = t.transpose(kh);
            let scores = t.matmul(qh, kht);
            let scores = t.scale(scores, scale);
            let scores = match mask {
                Some(m) => t.add(scores, m),
                None => scores,
            };
            let p = t.softmax_rows(scores);
            probs.push(p);
            ctxs.push(t.matmul(p, vh));
        }
        // reassemble head outputs side by side: transpose-concat-transpose
        let parts: Vec<Var> = ctxs.iter().map(|&c| t.transpose(c)).collect();
        let stacked = t.concat_rows(&parts);
        let ctx = t.transpose(stacked);
        let out = self.wo.forward(t, ctx);
        AttentionOut { out, probs }
    }
}

/// Causal additive mask: 0 on and below the diagonal, -inf above.
pub fn causal_mask(t: &mut Tape, len: usize) -> Var {
    let mut m = Array2::zeros((len, len));
    for i in 0..len {
        for j in i + 1..len {
            m[[i, j]] = f64::NEG_INFINITY;
        }
    }
    t.constant(m)
}

// ---- feed-forward and transformer block ----

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn init(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::init(dim, hidden, rng),
            down: Linear::init(hidden, dim, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> FeedForwardVars {
        FeedForwardVars {
            up: self.up.bind(b, &format!("{name}.up")),
            down: self.down.bind(b, &format!("{name}.down")),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.up.visit(&format!("{prefix}.up"), f);
        self.down.visit(&format!("{prefix}.down"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.up.visit_mut(&format!("{prefix}.up"), f);
        self.down.visit_mut(&format!("{prefix}.down"), f);
    }
}

pub struct FeedForwardVars {
    pub up: LinearVars,
    pub down: LinearVars,
}

impl FeedForwardVars {
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(t, x);
        let h = t.relu(h);
        self.down.forward(t, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn init(dim: usize, heads: usize, ff_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::init(dim),
            attn: Attention::init(dim, heads, rng),
            ln2: LayerNorm::init(dim),
            ff: FeedForward::init(dim, ff_hidden, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> TransformerBlockVars {
        TransformerBlockVars {
            ln1: self.ln1.bind(b, &format!("{name}.ln1")),
            attn: self.attn.bind(b, &format!("{name}.attn")),
            ln2: self.ln2.bind(b, &format!("{name}.ln2")),
            ff: self.ff.bind(b, &format!("{name}.ff")),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

pub struct TransformerBlockVars {
    pub ln1: LayerNormVars,
    pub attn: AttentionVars,
    pub ln2: LayerNormVars,
    pub ff: FeedForwardVars,
}

impl TransformerBlockVars {
    pub fn forward(&self, t: &mut Tape, x: Var, mask: Option<Var>) -> Var {
        let normed = self.ln1.forward(t, x);
        let attn = self.attn.forward(t, normed, normed, mask);
        let x = t.add(x, attn.out);
        let normed = self.ln2.forward(t, x);
        let ff = self.ff.forward(t, normed);
        t.add(x, ff)
    }
}

// ---- convolutions ----

/// 1-D convolution over `[in_ch x T]` activations via im2col.
#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `[out_ch x (in_ch * kernel)]`
    pub weight: Array2<f64>,
    /// `[out_ch x 1]`
    pub bias: Array2<f64>,
    pub in_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Conv1d {
            weight: normal_init(out_ch, in_ch * kernel, std, rng),
            bias: Array2::zeros((out_ch, 1)),
            in_ch,
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    pub fn out_len(&self, t: usize) -> usize {
        (t + 2 * self.pad - (self.dilation * (self.kernel - 1) + 1)) / self.stride + 1
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> Conv1dVars {
        Conv1dVars {
            weight: b.bind(&format!("{name}.weight"), &self.weight),
            bias: b.bind(&format!("{name}.bias"), &self.bias),
            in_ch: self.in_ch,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            dilation: self.dilation,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct Conv1dVars {
    pub weight: Var,
    pub bias: Var,
    pub in_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv1dVars {
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let time = t.value(x).ncols();
        debug_assert_eq!(t.value(x).nrows(), self.in_ch);
        let map = im2col_map(
            self.in_ch,
            time,
            self.kernel,
            self.stride,
            self.pad,
            self.dilation,
        );
        let cols = t.gather(x, map);
        let y = t.matmul(self.weight, cols);
        t.add_col(y, self.bias)
    }
}

/// 1-D transposed convolution; output length is `(T-1)*stride + kernel - 2*pad`.
#[derive(Debug, Clone)]
pub struct ConvT1d {
    /// `[(out_ch * kernel) x in_ch]`
    pub weight: Array2<f64>,
    /// `[out_ch x 1]`
    pub bias: Array2<f64>,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT1d {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / ((in_ch * kernel) as f64 / stride as f64).sqrt();
        ConvT1d {
            weight: normal_init(out_ch * kernel, in_ch, std, rng),
            bias: Array2::zeros((out_ch, 1)),
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, t: usize) -> usize {
        (t - 1) * self.stride + self.kernel - 2 * self.pad
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> ConvT1dVars {
        ConvT1dVars {
            weight: b.bind(&format!("{name}.weight"), &self.weight),
            bias: b.bind(&format!("{name}.bias"), &self.bias),
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct ConvT1dVars {
    pub weight: Var,
    pub bias: Var,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT1dVars {
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let time = t.value(x).ncols();
        let cols = t.matmul(self.weight, x); // [(out_ch*kernel) x T]
        let (map, shape) = col2im_map(self.out_ch, time, self.kernel, self.stride, self.pad);
        let y = t.scatter(cols, map, shape);
        t.add_col(y, self.bias)
    }
}

// ---- time interpolation ----

/// Linear time-interpolation matrix mapping `src_len` frames sampled at
/// `src_hz` onto `round(src_len * dst_hz / src_hz)` frames at `dst_hz`.
/// Every row sums to 1, so constant signals are preserved exactly.
pub fn time_interp_matrix(src_len: usize, src_hz: f64, dst_hz: f64) -> Array2<f64> {
    assert!(src_len >= 1);
    let dst_len = ((src_len as f64) * dst_hz / src_hz).round() as usize;
    let dst_len = dst_len.max(1);
    let ratio = src_hz / dst_hz;
    let mut m = Array2::zeros((dst_len, src_len));
    for i in 0..dst_len {
        let pos = i as f64 * ratio;
        let i0 = (pos.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        let frac = pos - i0 as f64;
        if i0 == i1 {
            m[[i, i0]] = 1.0;
        } else {
            m[[i, i0]] = 1.0 - frac;
            m[[i, i1]] = frac;
        }
    }
    m
}

// ---- differentiable mel ----

/// Precomputed DFT/mel basis for computing log-mel spectrograms on the tape.
/// Matches [`crate::dsp::mel_spectrogram`] (which uses an FFT) to rounding
/// error, so losses through it see the same features the pipeline uses.
pub struct MelBasis {
    pub cfg: MelConfig,
    window_row: Array2<f64>,
    cos: Array2<f64>,
    sin: Array2<f64>,
    fb_t: Array2<f64>,
}

impl MelBasis {
    pub fn new(cfg: MelConfig) -> Self {
        let n = cfg.n_fft;
        let n_bins = n / 2 + 1;
        let window = stft_window(&cfg);
        let window_row = Array2::from_shape_vec((1, n), window).unwrap();
        let mut cos = Array2::zeros((n, n_bins));
        let mut sin = Array2::zeros((n, n_bins));
        for j in 0..n {
            for k in 0..n_bins {
                let angle = 2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64;
                cos[[j, k]] = angle.cos();
                sin[[j, k]] = -angle.sin();
            }
        }
        let fb_t = mel_filterbank(&cfg).t().to_owned();
        MelBasis {
            cfg,
            window_row,
            cos,
            sin,
            fb_t,
        }
    }

    /// Log-mel of a `[1 x N]` waveform on the tape; output `[T_mel x n_mels]`.
    pub fn forward(&self, t: &mut Tape, wav: Var) -> Var {
        let n = t.value(wav).ncols();
        assert!(n >= 1);
        let map = im2col_map(1, n, self.cfg.n_fft, self.cfg.hop_length, self.cfg.n_fft / 2, 1);
        let cols = t.gather(wav, map); // [n_fft x F]
        let frames = t.transpose(cols); // [F x n_fft]
        let win = t.constant(self.window_row.clone());
        let framed = t.mul_row(frames, win);
        let cosb = t.constant(self.cos.clone());
        let sinb = t.constant(self.sin.clone());
        let re = t.matmul(framed, cosb);
        let im = t.matmul(framed, sinb);
        let re2 = t.mul(re, re);
        let im2 = t.mul(im, im);
        let power = t.add(re2, im2);
        let fb = t.constant(self.fb_t.clone());
        let mel = t.matmul(power, fb);
        t.log_clamped(mel, self.cfg.log_floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_spectrogram, Waveform};
    use crate::tensor::check::{assert_grad_close, central_difference};
    use rand::SeedableRng;

    #[test]
    fn attention_probs_are_probability_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let attn = Attention::init(16, 4, &mut rng);
        let x = normal_init(7, 16, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut b = Binder::new(&mut tape);
        let vars = attn.bind(&mut b, "attn");
        let out = vars.forward(b.tape, xv, xv, None);
        drop(b);
        for p in &out.probs {
            for row in tape.value(*p).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        assert_eq!(tape.value(out.out).dim(), (7, 16));
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let attn = Attention::init(8, 2, &mut rng);
        let x = normal_init(5, 8, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut b = Binder::new(&mut tape);
        let vars = attn.bind(&mut b, "attn");
        let mask = causal_mask(b.tape, 5);
        let out = vars.forward(b.tape, xv, xv, Some(mask));
        drop(b);
        for p in &out.probs {
            let pv = tape.value(*p);
            for i in 0..5 {
                for j in i + 1..5 {
                    assert_eq!(pv[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn transformer_block_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let block = TransformerBlock::init(8, 2, 16, &mut rng);
        let x0 = normal_init(4, 8, 0.7, &mut rng);

        // check gradient wrt one attention weight and one ff weight
        let eval = |block: &TransformerBlock| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let mut b = Binder::new(&mut tape);
            let vars = block.bind(&mut b, "blk");
            let mask = causal_mask(b.tape, 4);
            let y = vars.forward(b.tape, x, Some(mask));
            let bound = b.finish();
            let y2 = tape.mul(y, y);
            let loss = tape.mean_all(y2);
            (tape, bound, loss)
        };

        let (mut tape, bound, loss) = eval(&block);
        let loss_var = loss;
        let grads = tape.backward(loss_var);
        let named = bound.grads(&tape, &grads);

        for target in ["blk.attn.wq.weight", "blk.ff.up.weight", "blk.ln1.gain"] {
            let analytic = &named.iter().find(|(n, _)| n == target).unwrap().1;
            let base = {
                let mut found = None;
                block.visit("blk", &mut |n, v| {
                    if n == target {
                        found = Some(v.clone());
                    }
                });
                found.unwrap()
            };
            let numeric = central_difference(
                |probe: &Array2<f64>| {
                    let mut perturbed = block.clone();
                    perturbed.visit_mut("blk", &mut |n, v| {
                        if n == target {
                            v.assign(probe);
                        }
                    });
                    let (tape, _, loss) = eval(&perturbed);
                    tape.scalar(loss)
                },
                &base,
                1e-5,
            );
            assert_grad_close(target, analytic, &numeric, 1e-4, 1e-7);
        }
    }

    #[test]
    fn conv1d_matches_hand_computation() {
        // x = [1 2 3 4], kernel [1 0 -1], stride 1, pad 1
        let mut conv = Conv1d::init(1, 1, 3, 1, 1, 1, &mut ChaCha8Rng::seed_from_u64(1));
        conv.weight = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, -1.0]).unwrap();
        conv.bias = Array2::zeros((1, 1));
        let x = Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut b = Binder::new(&mut tape);
        let vars = conv.bind(&mut b, "c");
        let y = vars.forward(b.tape, xv);
        drop(b);
        // out[t] = x[t-1] - x[t+1] with zero pad: [-2, -2, -2, 3]
        let yv = tape.value(y);
        assert_eq!(yv.dim(), (1, 4));
        assert_eq!(yv[[0, 0]], -2.0);
        assert_eq!(yv[[0, 1]], -2.0);
        assert_eq!(yv[[0, 2]], -2.0);
        assert_eq!(yv[[0, 3]], 3.0);
    }

    #[test]
    fn conv_transpose_length_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let convt = ConvT1d::init(3, 2, 8, 4, 2, &mut rng);
        let x0 = normal_init(3, 5, 1.0, &mut rng);
        assert_eq!(convt.out_len(5), 20);

        let eval = |convt: &ConvT1d, x: &Array2<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let mut b = Binder::new(&mut tape);
            let vars = convt.bind(&mut b, "ct");
            let y = vars.forward(b.tape, xv);
            let bound = b.finish();
            let y2 = tape.mul(y, y);
            let loss = tape.mean_all(y2);
            (tape, xv, bound, loss)
        };
        let (mut tape, xv, bound, loss) = eval(&convt, &x0);
        assert_eq!(tape.value(loss).dim(), (1, 1));
        let grads = tape.backward(loss);

        // input gradient
        let numeric = central_difference(
            |probe: &Array2<f64>| {
                let (tape, _, _, loss) = eval(&convt, probe);
                tape.scalar(loss)
            },
            &x0,
            1e-5,
        );
        assert_grad_close("convT input", grads.get(xv).unwrap(), &numeric, 1e-5, 1e-8);

        // weight gradient
        let named = bound.grads(&tape, &grads);
        let analytic = &named.iter().find(|(n, _)| n == "ct.weight").unwrap().1;
        let numeric = central_difference(
            |probe: &Array2<f64>| {
                let mut p = convt.clone();
                p.weight.assign(probe);
                let (tape, _, _, loss) = eval(&p, &x0);
                tape.scalar(loss)
            },
            &convt.weight,
            1e-5,
        );
        assert_grad_close("convT weight", analytic, &numeric, 1e-5, 1e-8);
    }

    #[test]
    fn stride_two_conv_halves_even_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let conv = Conv1d::init(4, 6, 4, 2, 1, 1, &mut rng);
        for t in [4usize, 8, 40] {
            assert_eq!(conv.out_len(t), t / 2);
        }
    }

    #[test]
    fn time_interp_rows_sum_to_one_and_preserve_dc() {
        let m = time_interp_matrix(100, 22050.0, 24000.0);
        assert_eq!(m.nrows(), 109);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let m = time_interp_matrix(50, 22050.0, 22050.0);
        assert_eq!(m.nrows(), 50);
        let x = Array2::from_elem((50, 3), 0.7);
        let y = m.dot(&x);
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn tape_mel_matches_fft_mel() {
        let cfg = MelConfig {
            n_fft: 128,
            hop_length: 32,
            win_length: 128,
            n_mels: 12,
            ..MelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let samples: Vec<f64> = (0..400).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let w = Waveform::new(samples.clone(), 22050);
        let reference = mel_spectrogram(&w, &cfg).unwrap();

        let basis = MelBasis::new(cfg);
        let mut tape = Tape::new();
        let wav = tape.constant(Array2::from_shape_vec((1, 400), samples).unwrap());
        let mel = basis.forward(&mut tape, wav);
        let got = tape.value(mel);
        assert_eq!(got.dim(), reference.frames.dim());
        for (a, b) in got.iter().zip(reference.frames.iter()) {
            assert!((a - b).abs() < 1e-8, "tape mel {a} vs fft mel {b}");
        }
    }

    #[test]
    fn tape_mel_gradient_matches_finite_differences() {
        let cfg = MelConfig {
            n_fft: 32,
            hop_length: 8,
            win_length: 32,
            n_mels: 6,
            fmax_hz: 8000.0,
            ..MelConfig::default()
        };
        let basis = MelBasis::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = normal_init(1, 40, 0.5, &mut rng);
        let f = |probe: &Array2<f64>| {
            let mut tape = Tape::new();
            let wav = tape.leaf(probe.clone());
            let mel = basis.forward(&mut tape, wav);
            let loss = tape.mean_all(mel);
            tape.scalar(loss)
        };
        let numeric = central_difference(f, &x0, 1e-6);
        let mut tape = Tape::new();
        let wav = tape.leaf(x0.clone());
        let mel = basis.forward(&mut tape, wav);
        let loss = tape.mean_all(mel);
        let grads = tape.backward(loss);
        assert_grad_close("tape_mel", grads.get(wav).unwrap(), &numeric, 1e-4, 1e-7);
    }
}
