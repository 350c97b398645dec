//! Speaker-embedding backends and the SECS metric.
//!
//! Real speaker encoders are external models; they integrate out-of-process
//! through embedding files (versioned header + little-endian f32 vector). A
//! deterministic toy backend ships in-repo: unit-normalized random projection
//! of per-bin mel statistics. [`ToyBackend::embed_on_tape`] is the
//! differentiable twin used by the vocoder's speaker consistency loss.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dsp::{mel_spectrogram, MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::nn::{normal_init, MelBasis};
use crate::tensor::{Tape, Var};

/// Unit-norm speaker vector with its producing backend's name.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Array1<f64>,
    pub source: String,
}

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        self.vector
            .iter()
            .zip(other.vector.iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// A speaker-embedding backend: deterministic, unit-norm output of a stated
/// dimension. Implementations must be safe for concurrent read-only use.
pub trait SpeakerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, w: &Waveform) -> Result<SpeakerEmbedding>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        SpeakerConfig { dim: 32, seed: 3 }
    }
}

/// Seed-fixed random projection of mel statistics (per-bin mean and standard
/// deviation), unit-normalized.
pub struct ToyBackend {
    projection: Array2<f64>,
    n_mels: usize,
    dim: usize,
}

const NORM_EPS: f64 = 1e-12;
const STD_EPS: f64 = 1e-8;

impl ToyBackend {
    pub fn new(cfg: &SpeakerConfig) -> Self {
        let n_mels = MelConfig::default().n_mels;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let stats_dim = 2 * n_mels;
        ToyBackend {
            projection: normal_init(stats_dim, cfg.dim, 1.0 / (stats_dim as f64).sqrt(), &mut rng),
            n_mels,
            dim: cfg.dim,
        }
    }

    fn mel_config_for(&self, rate: u32) -> MelConfig {
        MelConfig::default().at_rate(rate)
    }

    /// Differentiable twin of [`SpeakerBackend::embed`]: waveform var
    /// `[1 x N]` -> unit-norm embedding `[1 x dim]` on the tape. `basis` must
    /// share this backend's mel settings at the waveform's rate.
    pub fn embed_on_tape(&self, t: &mut Tape, basis: &MelBasis, wav: Var) -> Var {
        let mel = basis.forward(t, wav); // [F x n_mels]
        let mean = t.mean_rows(mel); // [1 x n_mels]
        let centered = {
            let neg = t.scale(mean, -1.0);
            t.add_row(mel, neg)
        };
        let sq = t.mul(centered, centered);
        let var = t.mean_rows(sq);
        let var_eps = t.add_scalar(var, STD_EPS);
        let std = t.sqrt(var_eps);
        // stats row [1 x 2*n_mels] -> project -> normalize
        let stats_t = {
            let mean_t = t.transpose(mean);
            let std_t = t.transpose(std);
            t.concat_rows(&[mean_t, std_t])
        };
        let stats = t.transpose(stats_t);
        let proj = t.constant(self.projection.clone());
        let raw = t.matmul(stats, proj);
        t.normalize_rows(raw, NORM_EPS)
    }
}

impl SpeakerBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        if w.is_empty() {
            return Err(Error::invalid("cannot embed an empty waveform"));
        }
        let cfg = self.mel_config_for(w.sample_rate_hz);
        let mel = mel_spectrogram(w, &cfg)?;
        debug_assert_eq!(mel.n_mels, self.n_mels);

        let frames = &mel.frames;
        let f = frames.nrows() as f64;
        let mut stats = Array1::zeros(2 * self.n_mels);
        for m in 0..self.n_mels {
            let col = frames.column(m);
            let mean = col.sum() / f;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f;
            stats[m] = mean;
            stats[self.n_mels + m] = (var + STD_EPS).sqrt();
        }
        let raw = stats.dot(&self.projection);
        let norm = (raw.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        Ok(SpeakerEmbedding {
            vector: raw / norm,
            source: self.name().to_string(),
        })
    }
}

/// Reads embeddings produced by an external encoder from sidecar files:
/// `<wav path>.emb` in the documented binary format.
pub struct FileBackend {
    dim: usize,
}

impl FileBackend {
    pub fn new(dim: usize) -> Self {
        FileBackend { dim }
    }

    pub fn sidecar_path(wav_path: &std::path::Path) -> std::path::PathBuf {
        let mut os = wav_path.as_os_str().to_owned();
        os.push(".emb");
        std::path::PathBuf::from(os)
    }
}

/// File format: magic `SPKEMB`, version u16 LE, dim u32 LE, then dim f32 LE.
pub fn write_embedding(path: &std::path::Path, emb: &SpeakerEmbedding) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(b"SPKEMB")?;
    f.write_all(&1u16.to_le_bytes())?;
    f.write_all(&(emb.dim() as u32).to_le_bytes())?;
    for &v in emb.vector.iter() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_embedding(path: &std::path::Path) -> Result<SpeakerEmbedding> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 6];
    f.read_exact(&mut magic)
        .map_err(|_| Error::format("embedding file too short"))?;
    if &magic != b"SPKEMB" {
        return Err(Error::format("bad embedding magic"));
    }
    let mut v16 = [0u8; 2];
    f.read_exact(&mut v16)?;
    let version = u16::from_le_bytes(v16);
    if version != 1 {
        return Err(Error::Unsupported(format!("embedding version {version}")));
    }
    let mut d32 = [0u8; 4];
    f.read_exact(&mut d32)?;
    let dim = u32::from_le_bytes(d32) as usize;
    let mut vector = Array1::zeros(dim);
    let mut buf = [0u8; 4];
    for i in 0..dim {
        f.read_exact(&mut buf)
            .map_err(|_| Error::format("embedding payload truncated"))?;
        vector[i] = f32::from_le_bytes(buf) as f64;
    }
    Ok(SpeakerEmbedding {
        vector,
        source: "file".to_string(),
    })
}

/// The file backend resolves per-utterance embeddings by sidecar path. It
/// cannot embed arbitrary waveforms; callers pass the original wav path via
/// [`FileBackend::embed_path`].
impl FileBackend {
    pub fn embed_path(&self, wav_path: &std::path::Path) -> Result<SpeakerEmbedding> {
        let sidecar = Self::sidecar_path(wav_path);
        let emb = read_embedding(&sidecar).map_err(|e| {
            Error::Dependency(format!(
                "no embedding sidecar {} ({e}); external encoders write these",
                sidecar.display()
            ))
        })?;
        if emb.dim() != self.dim {
            return Err(Error::format(format!(
                "embedding dim {} does not match configured {}",
                emb.dim(),
                self.dim
            )));
        }
        Ok(emb)
    }
}

/// Speaker Encoder Cosine Similarity between two waveforms under `backend`.
pub fn secs(a: &Waveform, b: &Waveform, backend: &dyn SpeakerBackend) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("secs needs non-empty waveforms"));
    }
    let ea = backend.embed(a)?;
    let eb = backend.embed(b)?;
    Ok(ea.cosine(&eb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise_through_filter(seed: u64, gains: &[f64], n: usize) -> Waveform {
        // crude "speaker": white noise shaped by a two-tap comb of given gains
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = vec![0.0; n];
        for i in 0..n {
            let x: f64 = rng.gen_range(-0.5..0.5);
            let echo = if i >= 32 { samples[i - 32] } else { 0.0 };
            samples[i] = (x * gains[0] + echo * gains[1]).clamp(-1.0, 1.0);
        }
        Waveform::new(samples, 22050)
    }

    #[test]
    fn toy_embed_is_deterministic_and_unit_norm() {
        let backend = ToyBackend::new(&SpeakerConfig::default());
        let w = noise_through_filter(1, &[0.9, 0.3], 8000);
        let a = backend.embed(&w).unwrap();
        let b = backend.embed(&w).unwrap();
        assert_eq!(a.vector, b.vector);
        let norm: f64 = a.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a.dim(), 32);
    }

    #[test]
    fn same_filter_clips_closer_than_different_filters() {
        let backend = ToyBackend::new(&SpeakerConfig::default());
        // same "speaker" (filter), different noise realizations
        let a1 = noise_through_filter(10, &[0.9, 0.45], 12000);
        let a2 = noise_through_filter(11, &[0.9, 0.45], 12000);
        // different speaker
        let b = noise_through_filter(12, &[0.4, -0.6], 12000);
        let same = secs(&a1, &a2, &backend).unwrap();
        let diff = secs(&a1, &b, &backend).unwrap();
        assert!(
            same > diff,
            "same-speaker SECS {same} should beat cross-speaker {diff}"
        );
    }

    #[test]
    fn secs_self_similarity_is_one_and_symmetric() {
        let backend = ToyBackend::new(&SpeakerConfig::default());
        let a = noise_through_filter(2, &[0.8, 0.2], 6000);
        let b = noise_through_filter(3, &[0.5, -0.4], 6000);
        assert!((secs(&a, &a, &backend).unwrap() - 1.0).abs() < 1e-9);
        let ab = secs(&a, &b, &backend).unwrap();
        let ba = secs(&b, &a, &backend).unwrap();
        assert_eq!(ab, ba);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn antipodal_embeddings_give_minus_one() {
        let e1 = SpeakerEmbedding {
            vector: Array1::from_vec(vec![1.0, 0.0]),
            source: "test".into(),
        };
        let e2 = SpeakerEmbedding {
            vector: Array1::from_vec(vec![-1.0, 0.0]),
            source: "test".into(),
        };
        assert_eq!(e1.cosine(&e2), -1.0);
    }

    #[test]
    fn gain_variation_stays_above_cross_speaker_distance() {
        let backend = ToyBackend::new(&SpeakerConfig::default());
        let x = noise_through_filter(20, &[0.9, 0.4], 12000);
        let other = noise_through_filter(21, &[0.3, -0.7], 12000);
        let cross = secs(&x, &other, &backend).unwrap();
        for gain in [0.5, 0.7, 1.0] {
            let scaled = Waveform::new(x.samples.iter().map(|s| s * gain).collect(), 22050);
            let same = secs(&x, &scaled, &backend).unwrap();
            assert!(
                same > cross,
                "gain {gain}: same-speaker {same} <= cross {cross}"
            );
        }
    }

    #[test]
    fn empty_waveform_is_an_error() {
        let backend = ToyBackend::new(&SpeakerConfig::default());
        let empty = Waveform::new(vec![], 22050);
        assert!(backend.embed(&empty).is_err());
        let w = noise_through_filter(4, &[0.9, 0.1], 4000);
        assert!(secs(&empty, &w, &backend).is_err());
    }

    #[test]
    fn embedding_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spk.emb");
        let backend = ToyBackend::new(&SpeakerConfig::default());
        let w = noise_through_filter(5, &[0.85, 0.3], 5000);
        let emb = backend.embed(&w).unwrap();
        write_embedding(&path, &emb).unwrap();
        let loaded = read_embedding(&path).unwrap();
        assert_eq!(loaded.dim(), emb.dim());
        for (a, b) in loaded.vector.iter().zip(emb.vector.iter()) {
            assert!((a - b).abs() < 1e-6); // f32 payload
        }
        // corrupt magic is a format error
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(read_embedding(&path).is_err());
    }

    #[test]
    fn file_backend_resolves_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let wav_path = dir.path().join("utt1.wav");
        let backend = ToyBackend::new(&SpeakerConfig::default());
        let w = noise_through_filter(6, &[0.8, 0.25], 5000);
        let emb = backend.embed(&w).unwrap();
        write_embedding(&FileBackend::sidecar_path(&wav_path), &emb).unwrap();

        let fb = FileBackend::new(32);
        let loaded = fb.embed_path(&wav_path).unwrap();
        assert_eq!(loaded.dim(), 32);

        // missing sidecar is a dependency error
        let missing = dir.path().join("utt2.wav");
        match fb.embed_path(&missing) {
            Err(Error::Dependency(_)) => {}
            other => panic!("expected dependency error, got {other:?}"),
        }
    }

    #[test]
    fn tape_embed_matches_plain_embed() {
        let backend = ToyBackend::new(&SpeakerConfig::default());
        let w = noise_through_filter(7, &[0.9, 0.35], 4096);
        let plain = backend.embed(&w).unwrap();

        let basis = MelBasis::new(MelConfig::default());
        let mut tape = Tape::new();
        let wav = tape.constant(Array2::from_shape_vec((1, w.len()), w.samples.clone()).unwrap());
        let emb_var = backend.embed_on_tape(&mut tape, &basis, wav);
        let got = tape.value(emb_var);
        assert_eq!(got.dim(), (1, 32));
        for (a, b) in got.iter().zip(plain.vector.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}
