//! Objective evaluation: character error rate, manifest statistics, and
//! report emission (CSV and Markdown, columns language / CER / SECS).
//!
//! ASR is out-of-process: transcripts arrive as a JSON-lines file keyed by
//! utterance id. When no transcripts are supplied, CER columns are omitted
//! and only SECS is reported.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::speaker::{secs, SpeakerBackend};
use crate::text::LanguageTag;

// ---- text normalization and CER ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizerConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub collapse_whitespace: bool,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        NormalizerConfig {
            lowercase: true,
            strip_punctuation: true,
            collapse_whitespace: true,
        }
    }
}

/// NFC normalization plus the configured case/punctuation/whitespace rules.
pub fn normalize_text(s: &str, cfg: &NormalizerConfig) -> String {
    let nfc: String = s.nfc().collect();
    let cased = if cfg.lowercase {
        nfc.to_lowercase()
    } else {
        nfc
    };
    let stripped: String = if cfg.strip_punctuation {
        cased
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c.is_whitespace() {
                    c
                } else {
                    ' '
                }
            })
            .collect()
    } else {
        cased
    };
    if cfg.collapse_whitespace {
        stripped.split_whitespace().collect::<Vec<_>>().join(" ")
    } else {
        stripped
    }
}

/// Unit-cost Levenshtein distance over characters.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over the normalized strings divided
/// by the normalized reference length. May exceed 1.
pub fn cer(hypothesis: &str, reference: &str, cfg: &NormalizerConfig) -> Result<f64> {
    let h: Vec<char> = normalize_text(hypothesis, cfg).chars().collect();
    let r: Vec<char> = normalize_text(reference, cfg).chars().collect();
    if r.is_empty() {
        return Err(Error::invalid("reference is empty after normalization"));
    }
    Ok(levenshtein(&h, &r) as f64 / r.len() as f64)
}

// ---- manifests ----

/// One corpus utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub audio_path: String,
    pub text: String,
    pub language: String,
    pub speaker_id: String,
    pub duration_s: f64,
}

impl ManifestRecord {
    pub fn lang(&self) -> Result<LanguageTag> {
        LanguageTag::parse(&self.language)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.audio_path.is_empty() {
                return Err(Error::format(format!("record {i}: empty audio path")));
            }
            if !(r.duration_s > 0.0) {
                return Err(Error::format(format!(
                    "record {i}: non-positive duration {}",
                    r.duration_s
                )));
            }
            r.lang()
                .map_err(|e| Error::format(format!("record {i}: {e}")))?;
        }
        Ok(())
    }

    /// JSON-lines, one record per line, UTF-8.
    pub fn load(path: &std::path::Path) -> Result<Manifest> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("manifest line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        let m = Manifest { records };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::format(format!("serialize record: {e}")))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Kahan compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestStats {
    /// Hours per language, in language-code order.
    pub per_language_hours: BTreeMap<String, f64>,
    pub total_hours: f64,
}

/// Per-language and total hours; the total is the compensated sum of the
/// per-language values, so it matches their sum to within rounding.
pub fn manifest_stats(m: &Manifest) -> Result<ManifestStats> {
    m.validate()?;
    let mut per_lang_seconds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &m.records {
        per_lang_seconds
            .entry(r.language.clone())
            .or_default()
            .push(r.duration_s);
    }
    let per_language_hours: BTreeMap<String, f64> = per_lang_seconds
        .into_iter()
        .map(|(lang, secs)| (lang, compensated_sum(secs) / 3600.0))
        .collect();
    let total_hours = compensated_sum(per_language_hours.values().copied());
    Ok(ManifestStats {
        per_language_hours,
        total_hours,
    })
}

// ---- evaluation protocol ----

/// A synthesized utterance with its references.
pub struct EvalItem {
    pub id: String,
    pub output: Waveform,
    pub reference_text: String,
    pub reference_speaker_wav: Waveform,
    pub language: LanguageTag,
}

/// Per-language aggregation in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub language: String,
    /// Absent when no transcripts were supplied.
    pub cer: Option<f64>,
    pub secs: f64,
    pub n_utts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub avg_cer: Option<f64>,
    pub avg_secs: f64,
}

impl EvalReport {
    /// Aggregates must equal the arithmetic mean of the rows.
    pub fn check_consistency(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Ok(());
        }
        let mean_secs =
            compensated_sum(self.rows.iter().map(|r| r.secs)) / self.rows.len() as f64;
        if (mean_secs - self.avg_secs).abs() > 1e-9 {
            return Err(Error::Numeric(format!(
                "avg secs {} drifted from rows mean {mean_secs}",
                self.avg_secs
            )));
        }
        if let Some(avg) = self.avg_cer {
            let cers: Vec<f64> = self.rows.iter().filter_map(|r| r.cer).collect();
            let mean = compensated_sum(cers.iter().copied()) / cers.len() as f64;
            if (mean - avg).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "avg cer {avg} drifted from rows mean {mean}"
                )));
            }
        }
        Ok(())
    }

    /// CSV with Table-3 column order: language, CER, SECS (plus count).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,cer,secs,n_utts\n");
        for r in &self.rows {
            let cer = r.cer.map_or(String::new(), |c| format!("{c:.6}"));
            out.push_str(&format!("{},{},{:.6},{}\n", r.language, cer, r.secs, r.n_utts));
        }
        let avg_cer = self.avg_cer.map_or(String::new(), |c| format!("{c:.6}"));
        out.push_str(&format!("avg,{avg_cer},{:.6},\n", self.avg_secs));
        out
    }

    /// Markdown table with the same column order.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Language | CER | SECS |\n|---|---|---|\n");
        for r in &self.rows {
            let cer = r.cer.map_or("-".to_string(), |c| format!("{c:.4}"));
            out.push_str(&format!("| {} | {} | {:.4} |\n", r.language, cer, r.secs));
        }
        let avg_cer = self.avg_cer.map_or("-".to_string(), |c| format!("{c:.4}"));
        out.push_str(&format!("| **avg** | {avg_cer} | {:.4} |\n", self.avg_secs));
        out
    }
}

/// Loads a transcripts file: JSON-lines of `{"id": ..., "text": ...}`.
pub fn load_transcripts(path: &std::path::Path) -> Result<BTreeMap<String, String>> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        text: String,
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut map = BTreeMap::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("transcript line {}: {e}", i + 1)))?;
        map.insert(l.id, l.text);
    }
    Ok(map)
}

/// Computes per-utterance SECS (and CER when transcripts are given) and
/// aggregates per language. Report assembly is a deterministic ordered
/// reduce over language codes.
pub fn evaluate(
    items: &[EvalItem],
    backend: &dyn SpeakerBackend,
    transcripts: Option<&BTreeMap<String, String>>,
    norm: &NormalizerConfig,
) -> Result<EvalReport> {
    if let Some(t) = transcripts {
        for item in items {
            if !t.contains_key(&item.id) {
                return Err(Error::invalid(format!(
                    "transcripts missing utterance id {:?}",
                    item.id
                )));
            }
        }
    }

    struct Acc {
        cer_sum: f64,
        secs_sum: f64,
        n: usize,
    }
    let mut per_lang: BTreeMap<String, Acc> = BTreeMap::new();
    for item in items {
        let secs_val = secs(&item.output, &item.reference_speaker_wav, backend)?;
        let cer_val = match transcripts {
            Some(t) => Some(cer(&t[&item.id], &item.reference_text, norm)?),
            None => None,
        };
        let acc = per_lang
            .entry(item.language.code().to_string())
            .or_insert(Acc {
                cer_sum: 0.0,
                secs_sum: 0.0,
                n: 0,
            });
        acc.secs_sum += secs_val;
        acc.cer_sum += cer_val.unwrap_or(0.0);
        acc.n += 1;
    }

    let with_cer = transcripts.is_some();
    let rows: Vec<ReportRow> = per_lang
        .into_iter()
        .map(|(language, acc)| ReportRow {
            language,
            cer: with_cer.then_some(acc.cer_sum / acc.n as f64),
            secs: acc.secs_sum / acc.n as f64,
            n_utts: acc.n,
        })
        .collect();

    let avg_secs = if rows.is_empty() {
        0.0
    } else {
        compensated_sum(rows.iter().map(|r| r.secs)) / rows.len() as f64
    };
    let avg_cer = if with_cer && !rows.is_empty() {
        Some(compensated_sum(rows.iter().filter_map(|r| r.cer)) / rows.len() as f64)
    } else {
        None
    };

    let report = EvalReport {
        rows,
        avg_cer,
        avg_secs,
    };
    report.check_consistency()?;
    Ok(report)
}

/// The 16 per-language hour figures of the corpus accounting table, used by
/// fixtures and the stats self-check.
pub const REFERENCE_HOURS: [(&str, f64); 16] = [
    ("en", 14513.1),
    ("de", 3584.4),
    ("es", 1514.3),
    ("fr", 2215.5),
    ("it", 1296.6),
    ("pt", 2386.8),
    ("ru", 147.1),
    ("nl", 74.1),
    ("cs", 52.4),
    ("ko", 539.1),
    ("hu", 62.0),
    ("ja", 57.3),
    ("tr", 165.3),
    ("ar", 240.9),
    ("zh-cn", 233.9),
    ("pl", 198.8),
];

/// Builds the reference-hours fixture manifest (one record per language).
pub fn reference_hours_manifest() -> Manifest {
    Manifest {
        records: REFERENCE_HOURS
            .iter()
            .map(|(lang, hours)| ManifestRecord {
                audio_path: format!("fixture/{lang}.wav"),
                text: String::new(),
                language: lang.to_string(),
                speaker_id: format!("spk-{lang}"),
                duration_s: hours * 3600.0,
            })
            .collect(),
    }
}
