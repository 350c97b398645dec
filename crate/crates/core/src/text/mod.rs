//! Multilingual text frontend: language tags, romanization and BPE
//! tokenization.

pub mod bpe;
pub mod roman;

pub use bpe::{decode, encode, load_vocab, save_vocab, train_bpe, BpeVocab, TokenSequence};
pub use roman::{romanize, Romanized, RomanizeConfig};

use crate::error::{Error, Result};

/// The sixteen supported languages. Unknown codes are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LanguageTag {
    En,
    Es,
    Fr,
    De,
    It,
    Pt,
    Pl,
    Tr,
    Ru,
    Nl,
    Cs,
    Ar,
    ZhCn,
    Hu,
    Ko,
    Ja,
}

impl LanguageTag {
    pub const ALL: [LanguageTag; 16] = [
        LanguageTag::En,
        LanguageTag::Es,
        LanguageTag::Fr,
        LanguageTag::De,
        LanguageTag::It,
        LanguageTag::Pt,
        LanguageTag::Pl,
        LanguageTag::Tr,
        LanguageTag::Ru,
        LanguageTag::Nl,
        LanguageTag::Cs,
        LanguageTag::Ar,
        LanguageTag::ZhCn,
        LanguageTag::Hu,
        LanguageTag::Ko,
        LanguageTag::Ja,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            LanguageTag::En => "en",
            LanguageTag::Es => "es",
            LanguageTag::Fr => "fr",
            LanguageTag::De => "de",
            LanguageTag::It => "it",
            LanguageTag::Pt => "pt",
            LanguageTag::Pl => "pl",
            LanguageTag::Tr => "tr",
            LanguageTag::Ru => "ru",
            LanguageTag::Nl => "nl",
            LanguageTag::Cs => "cs",
            LanguageTag::Ar => "ar",
            LanguageTag::ZhCn => "zh-cn",
            LanguageTag::Hu => "hu",
            LanguageTag::Ko => "ko",
            LanguageTag::Ja => "ja",
        }
    }

    pub fn parse(code: &str) -> Result<LanguageTag> {
        LanguageTag::ALL
            .iter()
            .find(|l| l.code() == code)
            .copied()
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown language code {code:?} (expected one of: {})",
                    LanguageTag::ALL
                        .iter()
                        .map(|l| l.code())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }
}

impl std::fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for LanguageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LanguageTag::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_languages_roundtrip_their_codes() {
        assert_eq!(LanguageTag::ALL.len(), 16);
        for lang in LanguageTag::ALL {
            assert_eq!(LanguageTag::parse(lang.code()).unwrap(), lang);
        }
    }

    #[test]
    fn unknown_code_rejected() {
        assert!(LanguageTag::parse("xx").is_err());
        assert!(LanguageTag::parse("zh").is_err()); // the set uses zh-cn
        assert!(LanguageTag::parse("EN").is_err());
    }
}
