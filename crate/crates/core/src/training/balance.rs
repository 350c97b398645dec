//! Language batch balancer: each batch slot's language is drawn from the
//! configured weights (uniform over present languages by default), and
//! utterances are sampled without replacement within a language, reshuffling
//! on exhaustion. Fully deterministic for a fixed seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Manifest;
use crate::text::LanguageTag;

struct Pool {
    indices: Vec<usize>,
    queue: Vec<usize>,
    pos: usize,
}

pub struct LanguageBalancer {
    langs: Vec<LanguageTag>,
    cumulative: Vec<f64>,
    pools: Vec<Pool>,
    rng: ChaCha8Rng,
    draws: u64,
}

impl LanguageBalancer {
    /// `weights` maps language codes to selection weights; languages absent
    /// from the map get weight 0 when the map is given, otherwise all present
    /// languages are uniform. A positive weight over an empty pool is a
    /// configuration error.
    pub fn new(
        manifest: &Manifest,
        weights: Option<&BTreeMap<String, f64>>,
        seed: u64,
    ) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::invalid("manifest is empty"));
        }
        let mut by_lang: BTreeMap<LanguageTag, Vec<usize>> = BTreeMap::new();
        for (i, rec) in manifest.records.iter().enumerate() {
            by_lang.entry(rec.lang()?).or_default().push(i);
        }

        let mut langs = Vec::new();
        let mut raw_weights = Vec::new();
        let mut pools = Vec::new();
        match weights {
            None => {
                for (lang, indices) in by_lang {
                    langs.push(lang);
                    raw_weights.push(1.0);
                    pools.push(Pool {
                        queue: indices.clone(),
                        indices,
                        pos: 0,
                    });
                }
            }
            Some(map) => {
                for (code, &w) in map {
                    if w < 0.0 {
                        return Err(Error::config(format!("negative weight for {code}")));
                    }
                    if w == 0.0 {
                        continue;
                    }
                    let lang = LanguageTag::parse(code)?;
                    let indices = by_lang.get(&lang).cloned().unwrap_or_default();
                    if indices.is_empty() {
                        return Err(Error::config(format!(
                            "language {code} has weight {w} but no utterances"
                        )));
                    }
                    langs.push(lang);
                    raw_weights.push(w);
                    pools.push(Pool {
                        queue: indices.clone(),
                        indices,
                        pos: 0,
                    });
                }
                if langs.is_empty() {
                    return Err(Error::config("all language weights are zero"));
                }
            }
        }

        let total: f64 = raw_weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = raw_weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();

        let mut balancer = LanguageBalancer {
            langs,
            cumulative,
            pools,
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        };
        for p in 0..balancer.pools.len() {
            balancer.shuffle_pool(p);
        }
        Ok(balancer)
    }

    pub fn languages(&self) -> &[LanguageTag] {
        &self.langs
    }

    /// Total utterance draws so far (used for deterministic resume).
    pub fn draws(&self) -> u64 {
        self.draws
    }

    fn shuffle_pool(&mut self, p: usize) {
        let pool = &mut self.pools[p];
        pool.queue.copy_from_slice(&pool.indices);
        // Fisher-Yates with the balancer's own rng
        for i in (1..pool.queue.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            pool.queue.swap(i, j);
        }
        pool.pos = 0;
    }

    /// Draws one manifest index: language by weight, then the next queued
    /// utterance of that language.
    pub fn next_index(&mut self) -> usize {
        let u: f64 = self.rng.gen_range(0.0..1.0);
        let lang_idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        if self.pools[lang_idx].pos >= self.pools[lang_idx].queue.len() {
            self.shuffle_pool(lang_idx);
        }
        let pool = &mut self.pools[lang_idx];
        let idx = pool.queue[pool.pos];
        pool.pos += 1;
        self.draws += 1;
        idx
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.next_index()).collect()
    }

    /// Re-plays `n` draws; used when resuming from a checkpoint.
    pub fn advance(&mut self, n: u64) {
        for _ in 0..n {
            self.next_index();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ManifestRecord;

    fn manifest(counts: &[(&str, usize)]) -> Manifest {
        let mut records = Vec::new();
        for (lang, n) in counts {
            for i in 0..*n {
                records.push(ManifestRecord {
                    audio_path: format!("{lang}-{i}.wav"),
                    text: format!("utterance {i}"),
                    language: lang.to_string(),
                    speaker_id: format!("spk-{lang}"),
                    duration_s: 1.0,
                });
            }
        }
        Manifest { records }
    }

    #[test]
    fn single_language_fills_every_batch() {
        let m = manifest(&[("en", 5)]);
        let mut b = LanguageBalancer::new(&m, None, 1).unwrap();
        for _ in 0..10 {
            let batch = b.next_batch(4);
            for idx in batch {
                assert_eq!(m.records[idx].language, "en");
            }
        }
    }

    #[test]
    fn two_languages_within_binomial_bounds() {
        let m = manifest(&[("en", 10), ("fr", 3)]);
        let mut b = LanguageBalancer::new(&m, None, 7).unwrap();
        let mut en = 0usize;
        let total = 4000usize;
        for _ in 0..1000 {
            for idx in b.next_batch(4) {
                if m.records[idx].language == "en" {
                    en += 1;
                }
            }
        }
        // +-3 sigma of Binomial(4000, 0.5)
        let sigma = (total as f64 * 0.25).sqrt();
        let lo = (total as f64 / 2.0 - 3.0 * sigma) as usize;
        let hi = (total as f64 / 2.0 + 3.0 * sigma) as usize;
        assert!(
            (lo..=hi).contains(&en),
            "en count {en} outside [{lo}, {hi}]"
        );
    }

    #[test]
    fn same_seed_gives_identical_stream() {
        let m = manifest(&[("en", 7), ("de", 4), ("ja", 2)]);
        let mut a = LanguageBalancer::new(&m, None, 42).unwrap();
        let mut b = LanguageBalancer::new(&m, None, 42).unwrap();
        let sa: Vec<usize> = (0..200).map(|_| a.next_index()).collect();
        let sb: Vec<usize> = (0..200).map(|_| b.next_index()).collect();
        assert_eq!(sa, sb);

        let mut c = LanguageBalancer::new(&m, None, 43).unwrap();
        let sc: Vec<usize> = (0..200).map(|_| c.next_index()).collect();
        assert_ne!(sa, sc);
    }

    #[test]
    fn advance_replays_draw_position() {
        let m = manifest(&[("en", 7), ("de", 4)]);
        let mut a = LanguageBalancer::new(&m, None, 9).unwrap();
        let _first: Vec<usize> = (0..50).map(|_| a.next_index()).collect();
        let tail: Vec<usize> = (0..20).map(|_| a.next_index()).collect();

        let mut b = LanguageBalancer::new(&m, None, 9).unwrap();
        b.advance(50);
        let tail_b: Vec<usize> = (0..20).map(|_| b.next_index()).collect();
        assert_eq!(tail, tail_b);
    }

    #[test]
    fn without_replacement_within_an_epoch() {
        let m = manifest(&[("en", 6)]);
        let mut b = LanguageBalancer::new(&m, None, 3).unwrap();
        let first_epoch: Vec<usize> = (0..6).map(|_| b.next_index()).collect();
        let mut sorted = first_epoch.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn weight_over_empty_pool_is_config_error() {
        let m = manifest(&[("en", 3)]);
        let mut weights = BTreeMap::new();
        weights.insert("en".to_string(), 1.0);
        weights.insert("fr".to_string(), 1.0);
        match LanguageBalancer::new(&m, Some(&weights), 1) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn configured_weights_bias_the_draw() {
        let m = manifest(&[("en", 5), ("fr", 5)]);
        let mut weights = BTreeMap::new();
        weights.insert("en".to_string(), 3.0);
        weights.insert("fr".to_string(), 1.0);
        let mut b = LanguageBalancer::new(&m, Some(&weights), 5).unwrap();
        let mut en = 0usize;
        for _ in 0..4000 {
            if m.records[b.next_index()].language == "en" {
                en += 1;
            }
        }
        // expect ~3000; allow 4 sigma of Binomial(4000, 0.75)
        let sigma = (4000.0 * 0.75 * 0.25f64).sqrt();
        assert!((en as f64 - 3000.0).abs() < 4.0 * sigma, "en count {en}");
    }
}
