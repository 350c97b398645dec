//! Byte-pair-encoding tokenizer: trainer, encoder, decoder and the
//! versioned vocabulary file format.
//!
//! BPE runs over UTF-8 characters (not bytes) after NFC normalization and
//! lowercasing; whitespace is encoded with a word-boundary marker prefix.
//! Merge selection is deterministic: highest pair frequency, ties broken by
//! lexicographic pair order.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::text::roman::{romanize, RomanizeConfig};
use crate::text::LanguageTag;

/// SentencePiece-style word-boundary marker.
pub const WORD_MARKER: char = '\u{2581}';

const FILE_MAGIC: &str = "polyvox-bpe";
const FILE_VERSION: u32 = 1;

/// Token IDs with their language tag; the tag token always leads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub language: LanguageTag,
}

/// Trained BPE vocabulary. Token IDs are dense `0..len`, with special tokens
/// (pad, bos, eos, one tag per language) occupying the lowest IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    tokens: Vec<String>,
    ids: IndexMap<String, u32>,
    merges: Vec<(String, String)>,
    pub romanize_cfg: RomanizeConfig,
}

pub const PAD_ID: u32 = 0;
pub const BOS_TEXT_ID: u32 = 1;
pub const EOS_TEXT_ID: u32 = 2;

/// pad + bos + eos + 16 language tags
pub fn num_special_tokens() -> usize {
    3 + LanguageTag::ALL.len()
}

fn special_token_strings() -> Vec<String> {
    let mut specials = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
    specials.extend(LanguageTag::ALL.iter().map(|l| format!("[{}]", l.code())));
    specials
}

impl BpeVocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn lang_tag_id(&self, lang: LanguageTag) -> u32 {
        3 + LanguageTag::ALL.iter().position(|l| *l == lang).unwrap() as u32
    }

    fn is_special(&self, id: u32) -> bool {
        (id as usize) < num_special_tokens()
    }

    fn marker_token_id(&self) -> u32 {
        let s = self.romanize_cfg.fallback_marker.to_string();
        self.ids[s.as_str()]
    }
}

/// Outcome of [`train_bpe`]; `reached_target` is false when the corpus ran
/// out of merge candidates before the requested size.
#[derive(Debug)]
pub struct BpeTrainOutcome {
    pub vocab: BpeVocab,
    pub reached_target: bool,
}

fn normalize_words(text: &str, lang: LanguageTag, cfg: &RomanizeConfig) -> Vec<String> {
    let romanized = romanize(text, lang, cfg).text.to_lowercase();
    romanized
        .split_whitespace()
        .map(|w| format!("{WORD_MARKER}{w}"))
        .collect()
}

/// Classic BPE merge loop over a romanized, lowercased corpus.
pub fn train_bpe(
    corpus: &[(String, LanguageTag)],
    target_size: usize,
    cfg: &RomanizeConfig,
) -> Result<BpeTrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("bpe training corpus is empty"));
    }

    // word type -> frequency, each word as a symbol sequence
    let mut word_freq: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    let mut alphabet: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for (text, lang) in corpus {
        for word in normalize_words(text, *lang, cfg) {
            let symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
            for s in &symbols {
                alphabet.insert(s.clone());
            }
            *word_freq.entry(symbols).or_insert(0) += 1;
        }
    }
    // the fallback marker is always encodable
    alphabet.insert(cfg.fallback_marker.to_string());

    let mut tokens = special_token_strings();
    let base = tokens.len() + alphabet.len();
    if target_size < base {
        return Err(Error::invalid(format!(
            "target vocab size {target_size} is below specials + base characters ({base})"
        )));
    }
    tokens.extend(alphabet.into_iter());

    let mut merges: Vec<(String, String)> = Vec::new();
    while tokens.len() < target_size {
        // count adjacent symbol pairs across word types, weighted by frequency
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, freq) in &word_freq {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        // max frequency; BTreeMap order makes the first hit the
        // lexicographically smallest pair
        let best = pair_counts
            .iter()
            .fold(None::<(&(String, String), u64)>, |acc, (pair, &count)| {
                match acc {
                    Some((_, c)) if c >= count => acc,
                    _ => Some((pair, count)),
                }
            });
        let Some((pair, _)) = best else {
            break; // nothing left to merge
        };
        let (a, b) = pair.clone();
        let merged = format!("{a}{b}");
        tokens.push(merged.clone());
        merges.push((a.clone(), b.clone()));

        word_freq = word_freq
            .into_iter()
            .map(|(symbols, freq)| (apply_merge(&symbols, &a, &b, &merged), freq))
            .collect();
    }

    let reached_target = tokens.len() == target_size;
    let ids = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok(BpeTrainOutcome {
        vocab: BpeVocab {
            tokens,
            ids,
            merges,
            romanize_cfg: cfg.clone(),
        },
        reached_target,
    })
}

fn apply_merge(symbols: &[String], a: &str, b: &str, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Encodes text as `[language tag] ++ BPE(romanize(text))`, applying merges
/// greedily in training order. Characters outside the vocabulary map to the
/// fallback marker token.
pub fn encode(text: &str, lang: LanguageTag, vocab: &BpeVocab) -> Result<TokenSequence> {
    let words = normalize_words(text, lang, &vocab.romanize_cfg);
    if words.is_empty() {
        return Err(Error::invalid("text is empty after normalization"));
    }
    let mut ids = vec![vocab.lang_tag_id(lang)];
    for word in words {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        for (a, b) in &vocab.merges {
            let merged = format!("{a}{b}");
            symbols = apply_merge(&symbols, a, b, &merged);
        }
        for sym in symbols {
            match vocab.id_of(&sym) {
                Some(id) => ids.push(id),
                None => ids.push(vocab.marker_token_id()),
            }
        }
    }
    Ok(TokenSequence { ids, language: lang })
}

/// Concatenates token strings, strips specials, and converts word markers
/// back to spaces.
pub fn decode(seq: &TokenSequence, vocab: &BpeVocab) -> Result<String> {
    let mut out = String::new();
    for &id in &seq.ids {
        let Some(tok) = vocab.token(id) else {
            return Err(Error::invalid(format!(
                "token id {id} out of range (vocab size {})",
                vocab.len()
            )));
        };
        if vocab.is_special(id) {
            continue;
        }
        out.push_str(tok);
    }
    let spaced: String = out
        .chars()
        .map(|c| if c == WORD_MARKER { ' ' } else { c })
        .collect();
    Ok(spaced.trim_start().to_string())
}

/// Writes the versioned UTF-8 vocabulary format: a header line with version
/// and counts, one token per line, then one merge pair per line.
pub fn save_vocab(vocab: &BpeVocab, path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "{FILE_MAGIC} {FILE_VERSION} {} {} {} {}",
        num_special_tokens(),
        vocab.tokens.len(),
        vocab.merges.len(),
        vocab.romanize_cfg.fallback_marker,
    )?;
    for t in &vocab.tokens {
        writeln!(f, "{t}")?;
    }
    for (a, b) in &vocab.merges {
        writeln!(f, "{a}\t{b}")?;
    }
    Ok(())
}

pub fn load_vocab(path: &std::path::Path) -> Result<BpeVocab> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty vocab file"))??;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 6 || fields[0] != FILE_MAGIC {
        return Err(Error::format("bad vocab header"));
    }
    let version: u32 = fields[1]
        .parse()
        .map_err(|_| Error::format("bad vocab version"))?;
    if version != FILE_VERSION {
        return Err(Error::Unsupported(format!("vocab version {version}")));
    }
    let n_specials: usize = fields[2].parse().map_err(|_| Error::format("bad count"))?;
    let n_tokens: usize = fields[3].parse().map_err(|_| Error::format("bad count"))?;
    let n_merges: usize = fields[4].parse().map_err(|_| Error::format("bad count"))?;
    let marker = fields[5]
        .chars()
        .next()
        .ok_or_else(|| Error::format("missing fallback marker"))?;
    if n_specials != num_special_tokens() {
        return Err(Error::format(format!(
            "vocab declares {n_specials} specials, expected {}",
            num_special_tokens()
        )));
    }

    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(
            lines
                .next()
                .ok_or_else(|| Error::format("vocab truncated in token table"))??,
        );
    }
    let ids: IndexMap<String, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    if ids.len() != tokens.len() {
        return Err(Error::format("duplicate token in vocab"));
    }

    let mut merges = Vec::with_capacity(n_merges);
    for _ in 0..n_merges {
        let line = lines
            .next()
            .ok_or_else(|| Error::format("vocab truncated in merge table"))??;
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("merge line missing tab"))?;
        let merged = format!("{a}{b}");
        if !ids.contains_key(merged.as_str()) {
            return Err(Error::format(format!(
                "merge output {merged:?} missing from token table"
            )));
        }
        merges.push((a.to_string(), b.to_string()));
    }

    Ok(BpeVocab {
        tokens,
        ids,
        merges,
        romanize_cfg: RomanizeConfig {
            fallback_marker: marker,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> RomanizeConfig {
        RomanizeConfig::default()
    }

    fn corpus(texts: &[&str]) -> Vec<(String, LanguageTag)> {
        texts
            .iter()
            .map(|t| (t.to_string(), LanguageTag::En))
            .collect()
    }

    #[test]
    fn single_merge_on_repeated_char() {
        // base alphabet: marker '?', word marker, 'a' -> specials + 3
        let base = num_special_tokens() + 3;
        let out = train_bpe(&corpus(&["aaaa"]), base + 1, &cfg()).unwrap();
        assert!(out.reached_target);
        assert_eq!(out.vocab.num_merges(), 1);
        // hand-simulated merge loop: pairs are (marker,a)x1 and (a,a)x3
        assert_eq!(out.vocab.token(out.vocab.len() as u32 - 1), Some("aa"));
    }

    #[test]
    fn distinct_singletons_need_no_merges() {
        // base chars: WORD_MARKER, a, b, c plus the '?' marker -> 5
        let out = train_bpe(&corpus(&["a b c"]), num_special_tokens() + 5, &cfg()).unwrap();
        assert_eq!(out.vocab.num_merges(), 0);
        assert!(out.reached_target);
    }

    #[test]
    fn unreachable_target_sets_warning_flag() {
        let out = train_bpe(&corpus(&["ab"]), 1000, &cfg()).unwrap();
        assert!(!out.reached_target);
        assert!(out.vocab.len() < 1000);
        // every adjacent pair merged: the whole word became one token
        let ids = encode("ab", LanguageTag::En, &out.vocab).unwrap();
        assert_eq!(ids.ids.len(), 2); // tag + single word token
    }

    #[test]
    fn merge_count_matches_vocab_arithmetic() {
        let out = train_bpe(&corpus(&["banana bandana"]), num_special_tokens() + 20, &cfg())
            .unwrap();
        let base_chars = out.vocab.len() - num_special_tokens() - out.vocab.num_merges();
        assert_eq!(
            out.vocab.num_merges(),
            out.vocab.len() - num_special_tokens() - base_chars
        );
    }

    #[test]
    fn encode_applies_merge_and_leads_with_tag() {
        let base = num_special_tokens() + 3;
        let out = train_bpe(&corpus(&["aaaa"]), base + 1, &cfg()).unwrap();
        let seq = encode("aa", LanguageTag::En, &out.vocab).unwrap();
        assert_eq!(seq.ids[0], out.vocab.lang_tag_id(LanguageTag::En));
        // "▁aa" -> [▁][aa] after the single merge
        assert_eq!(seq.ids.len(), 3);
        assert_eq!(out.vocab.token(seq.ids[2]), Some("aa"));
    }

    #[test]
    fn same_text_different_tags_differ_only_in_tag() {
        let out = train_bpe(&corpus(&["hello world"]), num_special_tokens() + 30, &cfg())
            .unwrap();
        let en = encode("hello", LanguageTag::En, &out.vocab).unwrap();
        let fr = encode("hello", LanguageTag::Fr, &out.vocab).unwrap();
        assert_ne!(en.ids[0], fr.ids[0]);
        assert_eq!(en.ids[1..], fr.ids[1..]);
    }

    #[test]
    fn decode_concatenates_and_restores_spaces() {
        let out = train_bpe(&corpus(&["hello world"]), num_special_tokens() + 40, &cfg())
            .unwrap();
        let seq = encode("hello world", LanguageTag::En, &out.vocab).unwrap();
        assert_eq!(decode(&seq, &out.vocab).unwrap(), "hello world");
    }

    #[test]
    fn decode_empty_sequence_is_empty_string() {
        let out = train_bpe(&corpus(&["x"]), num_special_tokens() + 3, &cfg()).unwrap();
        let seq = TokenSequence {
            ids: vec![],
            language: LanguageTag::En,
        };
        assert_eq!(decode(&seq, &out.vocab).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let out = train_bpe(&corpus(&["x"]), num_special_tokens() + 3, &cfg()).unwrap();
        let seq = TokenSequence {
            ids: vec![9999],
            language: LanguageTag::En,
        };
        assert!(decode(&seq, &out.vocab).is_err());
    }

    #[test]
    fn empty_text_is_an_error() {
        let out = train_bpe(&corpus(&["x"]), num_special_tokens() + 3, &cfg()).unwrap();
        assert!(encode("   ", LanguageTag::En, &out.vocab).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(train_bpe(&[], 100, &cfg()).is_err());
    }

    #[test]
    fn vocab_file_roundtrip_preserves_everything() {
        let out = train_bpe(
            &corpus(&["the quick brown fox", "the lazy dog"]),
            num_special_tokens() + 40,
            &cfg(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        save_vocab(&out.vocab, &path).unwrap();
        let loaded = load_vocab(&path).unwrap();
        assert_eq!(loaded, out.vocab);
        // and the file is byte-stable across saves
        let path2 = dir.path().join("vocab2.txt");
        save_vocab(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn korean_text_romanized_before_counting() {
        let corpus = vec![("안녕".to_string(), LanguageTag::Ko)];
        let out = train_bpe(&corpus, num_special_tokens() + 30, &cfg()).unwrap();
        // alphabet holds latin letters only (plus markers)
        for id in num_special_tokens()..out.vocab.len() {
            let tok = out.vocab.token(id as u32).unwrap();
            for c in tok.chars() {
                assert!(c.is_ascii_alphanumeric() || c == WORD_MARKER || c == '?');
            }
        }
    }

    proptest! {
        /// encode . decode is the identity on canonical token sequences.
        #[test]
        fn encode_decode_identity_on_canonical_sequences(
            words in proptest::collection::vec("[abcd]{1,6}", 1..5)
        ) {
            let training = corpus(&["abab cdcd abcd dcba aabb ccdd"]);
            let out = train_bpe(&training, num_special_tokens() + 30, &cfg()).unwrap();
            let text = words.join(" ");
            let seq = encode(&text, LanguageTag::En, &out.vocab).unwrap();
            let decoded = decode(&seq, &out.vocab).unwrap();
            let seq2 = encode(&decoded, LanguageTag::En, &out.vocab).unwrap();
            prop_assert_eq!(seq.ids, seq2.ids);
        }

        /// Deterministic: same input twice gives the same ids.
        #[test]
        fn encode_is_deterministic(word in "[a-z]{1,12}") {
            let training = corpus(&["the quick brown fox jumps over the lazy dog"]);
            let out = train_bpe(&training, num_special_tokens() + 40, &cfg()).unwrap();
            let a = encode(&word, LanguageTag::En, &out.vocab).unwrap();
            let b = encode(&word, LanguageTag::En, &out.vocab).unwrap();
            prop_assert_eq!(a.ids, b.ids);
        }
    }
}
