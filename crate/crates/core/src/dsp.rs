//! Audio I/O and mel-spectrogram feature extraction.
//!
//! The codec side of the pipeline runs at 22050 Hz and the vocoder emits
//! 24000 Hz; both rates meet here. All operations are pure functions over
//! immutable inputs.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Waveform {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Log-mel feature matrix, `[T_mel x n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub n_mels: usize,
    pub hop_length: usize,
    pub sample_rate_hz: u32,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// STFT/mel parameters. The defaults give a 21.533 Hz code rate once the
/// codec's time-stride of 4 is applied: 22050 / (256 * 4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate_hz: 22050,
            n_fft: 1024,
            hop_length: 256,
            win_length: 1024,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    /// Same analysis parameters at a different sample rate.
    pub fn at_rate(mut self, sample_rate_hz: u32) -> Self {
        self.sample_rate_hz = sample_rate_hz;
        self
    }

    /// Number of mel frames for a signal of `num_samples` under centering.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples / self.hop_length + 1
    }
}

/// Reads a PCM16 or float32 WAV file, averaging channels to mono and
/// normalizing into `[-1, 1]`.
pub fn load_wav(path: &std::path::Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::format("wav declares zero channels"));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("bad sample data: {e}")))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| f64::from(v).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("bad sample data: {e}")))?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "wav encoding {fmt:?}/{bits}-bit (expected PCM16 or float32)"
            )))
        }
    };

    let frames = interleaved.len() / channels;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let sum: f64 = interleaved[f * channels..(f + 1) * channels].iter().sum();
        samples.push(sum / channels as f64);
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes mono PCM16. Samples are clamped to `[-1, 1]` first.
pub fn write_wav(path: &std::path::Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::format(format!("write failed: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::format(format!("finalize failed: {e}")))?;
    Ok(())
}

/// Linear resampling. Output length is `round(len * target / source)`;
/// constant signals pass through unchanged at any rate.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if target_hz == 0 {
        return Err(Error::invalid("resample target rate must be positive"));
    }
    if target_hz == w.sample_rate_hz || w.samples.is_empty() {
        return Ok(Waveform::new(w.samples.clone(), target_hz));
    }
    let src = &w.samples;
    let out_len =
        ((src.len() as f64) * f64::from(target_hz) / f64::from(w.sample_rate_hz)).round() as usize;
    let ratio = f64::from(w.sample_rate_hz) / f64::from(target_hz);
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let i0 = (pos.floor() as usize).min(src.len() - 1);
        let i1 = (i0 + 1).min(src.len() - 1);
        let frac = pos - i0 as f64;
        out.push(src[i0] * (1.0 - frac) + src[i1] * frac);
    }
    Ok(Waveform::new(out, target_hz))
}

/// Periodic Hann window of length `win`, zero-padded/centered to `n_fft`.
pub fn stft_window(cfg: &MelConfig) -> Vec<f64> {
    assert!(cfg.win_length <= cfg.n_fft, "window longer than n_fft");
    let mut w = vec![0.0; cfg.n_fft];
    let off = (cfg.n_fft - cfg.win_length) / 2;
    for n in 0..cfg.win_length {
        w[off + n] =
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.win_length as f64).cos();
    }
    w
}

fn hz_to_mel_slaney(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / logstep
    }
}

fn mel_to_hz_slaney(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * logstep).exp()
    }
}

/// Center frequencies (Hz) of the `n_mels + 2` mel grid points spanning
/// `[fmin, fmax]`; points `1..=n_mels` are the filter centers.
pub fn mel_grid_hz(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel_slaney(cfg.fmin_hz);
    let hi = hz_to_mel_slaney(cfg.fmax_hz);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz_slaney(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular mel filterbank `[n_mels x (n_fft/2 + 1)]` with Slaney-style
/// area normalization (each filter scaled by 2 / bandwidth).
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let grid = mel_grid_hz(cfg);
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * f64::from(cfg.sample_rate_hz) / cfg.n_fft as f64)
        .collect();
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (grid[m], grid[m + 1], grid[m + 2]);
        let norm = 2.0 / (right - left);
        for (k, &f) in bin_hz.iter().enumerate() {
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            let w = up.min(down).max(0.0);
            fb[[m, k]] = w * norm;
        }
    }
    fb
}

/// Log-mel spectrogram with center (zero) padding.
///
/// Frame count is exactly `floor(num_samples / hop) + 1`; entries are
/// `ln(max(mel_energy, log_floor))` so the output is always finite.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if w.is_empty() {
        return Err(Error::invalid("mel_spectrogram of empty waveform"));
    }
    if w.sample_rate_hz != cfg.sample_rate_hz {
        return Err(Error::invalid(format!(
            "waveform rate {} does not match mel config rate {}",
            w.sample_rate_hz, cfg.sample_rate_hz
        )));
    }

    let n_frames = cfg.num_frames(w.len());
    let window = stft_window(cfg);
    let fb = mel_filterbank(cfg);
    let n_bins = cfg.n_fft / 2 + 1;
    let half = (cfg.n_fft / 2) as isize;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0f64; n_bins];
    let mut frames = Array2::zeros((n_frames, cfg.n_mels));

    for f in 0..n_frames {
        let start = f as isize * cfg.hop_length as isize - half;
        for (j, slot) in buf.iter_mut().enumerate() {
            let idx = start + j as isize;
            let s = if idx >= 0 && (idx as usize) < w.len() {
                w.samples[idx as usize]
            } else {
                0.0
            };
            *slot = Complex::new(s * window[j], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(power.iter()).map(|(a, b)| a * b).sum();
            frames[[f, m]] = e.max(cfg.log_floor).ln();
        }
    }

    Ok(MelSpectrogram {
        frames,
        n_mels: cfg.n_mels,
        hop_length: cfg.hop_length,
        sample_rate_hz: cfg.sample_rate_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, rate: u32, n: usize) -> Waveform {
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(rate)).sin() * 0.8)
            .collect();
        Waveform::new(samples, rate)
    }

    #[test]
    fn silence_produces_log_floor_frames() {
        let w = Waveform::new(vec![0.0; 1024], 22050);
        let cfg = MelConfig::default();
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(mel.num_frames(), 5);
        let floor = cfg.log_floor.ln();
        assert!(mel.frames.iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn one_second_gives_87_frames() {
        let w = tone(440.0, 22050, 22050);
        let mel = mel_spectrogram(&w, &MelConfig::default()).unwrap();
        assert_eq!(mel.num_frames(), 87);
    }

    #[test]
    fn tone_peaks_in_filter_containing_440hz() {
        let cfg = MelConfig::default();
        let w = tone(440.0, 22050, 22050);
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        // mid-signal frame, away from edge padding
        let row = mel.frames.row(40);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;

        // independent oracle: recompute the Slaney mel grid here and find the
        // filter whose triangular support contains 440 Hz with max weight
        let f_sp = 200.0 / 3.0;
        let to_mel = |hz: f64| {
            if hz < 1000.0 {
                hz / f_sp
            } else {
                1000.0 / f_sp + (hz / 1000.0).ln() / ((6.4f64).ln() / 27.0)
            }
        };
        let from_mel = |mel: f64| {
            if mel < 1000.0 / f_sp {
                mel * f_sp
            } else {
                1000.0 * ((mel - 1000.0 / f_sp) * ((6.4f64).ln() / 27.0)).exp()
            }
        };
        let lo = to_mel(cfg.fmin_hz);
        let hi = to_mel(cfg.fmax_hz);
        let grid: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| from_mel(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        // support of argmax filter must contain 440 Hz
        assert!(
            grid[argmax] <= 440.0 && 440.0 <= grid[argmax + 2],
            "argmax filter [{:.1}, {:.1}] does not contain 440 Hz",
            grid[argmax],
            grid[argmax + 2]
        );
        // and its center is the closest one to 440 Hz
        let closest = (0..cfg.n_mels)
            .min_by(|&a, &b| {
                (grid[a + 1] - 440.0)
                    .abs()
                    .partial_cmp(&(grid[b + 1] - 440.0).abs())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(argmax, closest);
    }

    #[test]
    fn mel_is_deterministic() {
        let w = tone(523.0, 22050, 4000);
        let cfg = MelConfig::default();
        let a = mel_spectrogram(&w, &cfg).unwrap();
        let b = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn empty_waveform_is_an_error() {
        let w = Waveform::new(vec![], 22050);
        assert!(mel_spectrogram(&w, &MelConfig::default()).is_err());
    }

    #[test]
    fn frame_count_formula_exhaustive_small_config() {
        let cfg = MelConfig {
            sample_rate_hz: 22050,
            n_fft: 64,
            hop_length: 16,
            win_length: 64,
            n_mels: 8,
            fmax_hz: 8000.0,
            ..MelConfig::default()
        };
        for n in 1..=10 * cfg.hop_length {
            let w = Waveform::new(vec![0.1; n], 22050);
            let mel = mel_spectrogram(&w, &cfg).unwrap();
            assert_eq!(mel.num_frames(), n / cfg.hop_length + 1, "len {n}");
        }
    }

    proptest! {
        #[test]
        fn frame_count_formula_default_config(n in 1usize..=2560) {
            let cfg = MelConfig::default();
            let w = Waveform::new(vec![0.05; n], 22050);
            let mel = mel_spectrogram(&w, &cfg).unwrap();
            prop_assert_eq!(mel.num_frames(), n / 256 + 1);
        }

        #[test]
        fn resample_preserves_duration_within_one_sample(
            n in 32usize..4000, target in 8000u32..48000
        ) {
            let w = tone(200.0, 22050, n);
            let r = resample(&w, target).unwrap();
            let expect = (n as f64) * f64::from(target) / 22050.0;
            prop_assert!((r.len() as f64 - expect).abs() <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn resample_identity_when_rates_match() {
        let w = tone(100.0, 22050, 1000);
        let r = resample(&w, 22050).unwrap();
        assert_eq!(r.samples, w.samples);
    }

    #[test]
    fn resample_22050_to_24000_length() {
        let w = Waveform::new(vec![0.25; 22050], 22050);
        let r = resample(&w, 24000).unwrap();
        assert_eq!(r.len(), 24000);
        assert_eq!(r.sample_rate_hz, 24000);
    }

    #[test]
    fn resample_dc_invariance() {
        let w = Waveform::new(vec![0.5; 1234], 22050);
        for rate in [8000u32, 16000, 24000, 44100] {
            let r = resample(&w, rate).unwrap();
            assert!(r.samples.iter().all(|&s| (s - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn resample_zero_rate_is_an_error() {
        let w = Waveform::new(vec![0.0; 10], 22050);
        assert!(resample(&w, 0).is_err());
    }

    #[test]
    fn wav_roundtrip_pcm16_fullscale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        wr.write_sample(i16::MIN).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(i16::MAX).unwrap();
        wr.finalize().unwrap();

        let w = load_wav(&path).unwrap();
        assert_eq!(w.sample_rate_hz, 22050);
        assert_eq!(w.samples[0], -1.0);
        assert_eq!(w.samples[1], 0.0);
        assert!((w.samples[2] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!(w.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn stereo_channels_average_to_mono() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..4 {
            wr.write_sample(1.0f32).unwrap();
            wr.write_sample(0.0f32).unwrap();
        }
        wr.finalize().unwrap();

        let w = load_wav(&path).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.samples.iter().all(|&s| (s - 0.5).abs() < 1e-12));
    }

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        write_wav(&path, &Waveform::new(vec![0.0; 22050], 22050)).unwrap();
        let w = load_wav(&path).unwrap();
        assert_eq!(w.len(), 22050);
        assert_eq!(w.sample_rate_hz, 22050);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn malformed_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.wav");
        std::fs::write(&path, b"not a riff file at all").unwrap();
        match load_wav(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_bit_depth_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eight.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        wr.write_sample(1i8).unwrap();
        wr.finalize().unwrap();
        match load_wav(&path) {
            Err(Error::Unsupported(_)) => {}
            other => panic!("expected unsupported error, got {other:?}"),
        }
    }
}
