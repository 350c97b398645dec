//! Table-driven romanization for Korean, Japanese and Chinese.
//!
//! Hangul syllables are decomposed algorithmically and rendered with the
//! Revised Romanization jamo tables. Kana use a Hepburn table with digraphs,
//! sokuon gemination and the long-vowel mark; kanji and hanzi come from
//! curated longest-match tables with documented (incomplete) coverage.
//! Characters without a rule are replaced by the configured fallback marker
//! and counted, never dropped.

use unicode_normalization::UnicodeNormalization;

use crate::text::LanguageTag;

/// Controls fallback behavior for untransliterable characters.
#[derive(Debug, Clone, PartialEq)]
pub struct RomanizeConfig {
    pub fallback_marker: char,
}

impl Default for RomanizeConfig {
    fn default() -> Self {
        RomanizeConfig {
            fallback_marker: '?',
        }
    }
}

/// Romanization result; `fallback_count` is the number of characters that
/// had no transliteration rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Romanized {
    pub text: String,
    pub fallback_count: usize,
}

const HANGUL_BASE: u32 = 0xAC00;
const HANGUL_END: u32 = 0xD7A3;

const INITIALS: [&str; 19] = [
    "g", "kk", "n", "d", "tt", "r", "m", "b", "pp", "s", "ss", "", "j", "jj", "ch", "k", "t",
    "p", "h",
];
const MEDIALS: [&str; 21] = [
    "a", "ae", "ya", "yae", "eo", "e", "yeo", "ye", "o", "wa", "wae", "oe", "yo", "u", "wo",
    "we", "wi", "yu", "eu", "ui", "i",
];
const FINALS: [&str; 28] = [
    "", "g", "kk", "gs", "n", "nj", "nh", "d", "l", "lg", "lm", "lb", "ls", "lt", "lp", "lh",
    "m", "b", "bs", "s", "ss", "ng", "j", "ch", "k", "t", "p", "h",
];

fn hangul_syllable(c: char) -> Option<String> {
    let cp = c as u32;
    if !(HANGUL_BASE..=HANGUL_END).contains(&cp) {
        return None;
    }
    let idx = cp - HANGUL_BASE;
    let initial = (idx / (21 * 28)) as usize;
    let medial = ((idx / 28) % 21) as usize;
    let fin = (idx % 28) as usize;
    Some(format!("{}{}{}", INITIALS[initial], MEDIALS[medial], FINALS[fin]))
}

/// Hepburn table for kana: gojuon, dakuten rows, digraphs and small vowels.
/// Katakana entries are folded onto the same readings.
fn kana_lookup(s: &str) -> Option<&'static str> {
    const TABLE: &[(&str, &str)] = &[
        // digraphs first (longest match handled by caller)
        ("きゃ", "kya"), ("きゅ", "kyu"), ("きょ", "kyo"),
        ("しゃ", "sha"), ("しゅ", "shu"), ("しょ", "sho"),
        ("ちゃ", "cha"), ("ちゅ", "chu"), ("ちょ", "cho"),
        ("にゃ", "nya"), ("にゅ", "nyu"), ("にょ", "nyo"),
        ("ひゃ", "hya"), ("ひゅ", "hyu"), ("ひょ", "hyo"),
        ("みゃ", "mya"), ("みゅ", "myu"), ("みょ", "myo"),
        ("りゃ", "rya"), ("りゅ", "ryu"), ("りょ", "ryo"),
        ("ぎゃ", "gya"), ("ぎゅ", "gyu"), ("ぎょ", "gyo"),
        ("じゃ", "ja"), ("じゅ", "ju"), ("じょ", "jo"),
        ("びゃ", "bya"), ("びゅ", "byu"), ("びょ", "byo"),
        ("ぴゃ", "pya"), ("ぴゅ", "pyu"), ("ぴょ", "pyo"),
        ("キャ", "kya"), ("キュ", "kyu"), ("キョ", "kyo"),
        ("シャ", "sha"), ("シュ", "shu"), ("ショ", "sho"),
        ("チャ", "cha"), ("チュ", "chu"), ("チョ", "cho"),
        ("ニャ", "nya"), ("ニュ", "nyu"), ("ニョ", "nyo"),
        ("ヒャ", "hya"), ("ヒュ", "hyu"), ("ヒョ", "hyo"),
        ("ミャ", "mya"), ("ミュ", "myu"), ("ミョ", "myo"),
        ("リャ", "rya"), ("リュ", "ryu"), ("リョ", "ryo"),
        ("ギャ", "gya"), ("ギュ", "gyu"), ("ギョ", "gyo"),
        ("ジャ", "ja"), ("ジュ", "ju"), ("ジョ", "jo"),
        ("ビャ", "bya"), ("ビュ", "byu"), ("ビョ", "byo"),
        ("ピャ", "pya"), ("ピュ", "pyu"), ("ピョ", "pyo"),
        // monographs
        ("あ", "a"), ("い", "i"), ("う", "u"), ("え", "e"), ("お", "o"),
        ("か", "ka"), ("き", "ki"), ("く", "ku"), ("け", "ke"), ("こ", "ko"),
        ("さ", "sa"), ("し", "shi"), ("す", "su"), ("せ", "se"), ("そ", "so"),
        ("た", "ta"), ("ち", "chi"), ("つ", "tsu"), ("て", "te"), ("と", "to"),
        ("な", "na"), ("に", "ni"), ("ぬ", "nu"), ("ね", "ne"), ("の", "no"),
        ("は", "ha"), ("ひ", "hi"), ("ふ", "fu"), ("へ", "he"), ("ほ", "ho"),
        ("ま", "ma"), ("み", "mi"), ("む", "mu"), ("め", "me"), ("も", "mo"),
        ("や", "ya"), ("ゆ", "yu"), ("よ", "yo"),
        ("ら", "ra"), ("り", "ri"), ("る", "ru"), ("れ", "re"), ("ろ", "ro"),
        ("わ", "wa"), ("を", "o"), ("ん", "n"),
        ("が", "ga"), ("ぎ", "gi"), ("ぐ", "gu"), ("げ", "ge"), ("ご", "go"),
        ("ざ", "za"), ("じ", "ji"), ("ず", "zu"), ("ぜ", "ze"), ("ぞ", "zo"),
        ("だ", "da"), ("ぢ", "ji"), ("づ", "zu"), ("で", "de"), ("ど", "do"),
        ("ば", "ba"), ("び", "bi"), ("ぶ", "bu"), ("べ", "be"), ("ぼ", "bo"),
        ("ぱ", "pa"), ("ぴ", "pi"), ("ぷ", "pu"), ("ぺ", "pe"), ("ぽ", "po"),
        ("ぁ", "a"), ("ぃ", "i"), ("ぅ", "u"), ("ぇ", "e"), ("ぉ", "o"),
        ("ア", "a"), ("イ", "i"), ("ウ", "u"), ("エ", "e"), ("オ", "o"),
        ("カ", "ka"), ("キ", "ki"), ("ク", "ku"), ("ケ", "ke"), ("コ", "ko"),
        ("サ", "sa"), ("シ", "shi"), ("ス", "su"), ("セ", "se"), ("ソ", "so"),
        ("タ", "ta"), ("チ", "chi"), ("ツ", "tsu"), ("テ", "te"), ("ト", "to"),
        ("ナ", "na"), ("ニ", "ni"), ("ヌ", "nu"), ("ネ", "ne"), ("ノ", "no"),
        ("ハ", "ha"), ("ヒ", "hi"), ("フ", "fu"), ("ヘ", "he"), ("ホ", "ho"),
        ("マ", "ma"), ("ミ", "mi"), ("ム", "mu"), ("メ", "me"), ("モ", "mo"),
        ("ヤ", "ya"), ("ユ", "yu"), ("ヨ", "yo"),
        ("ラ", "ra"), ("リ", "ri"), ("ル", "ru"), ("レ", "re"), ("ロ", "ro"),
        ("ワ", "wa"), ("ヲ", "o"), ("ン", "n"),
        ("ガ", "ga"), ("ギ", "gi"), ("グ", "gu"), ("ゲ", "ge"), ("ゴ", "go"),
        ("ザ", "za"), ("ジ", "ji"), ("ズ", "zu"), ("ゼ", "ze"), ("ゾ", "zo"),
        ("ダ", "da"), ("ヂ", "ji"), ("ヅ", "zu"), ("デ", "de"), ("ド", "do"),
        ("バ", "ba"), ("ビ", "bi"), ("ブ", "bu"), ("ベ", "be"), ("ボ", "bo"),
        ("パ", "pa"), ("ピ", "pi"), ("プ", "pu"), ("ペ", "pe"), ("ポ", "po"),
        ("ァ", "a"), ("ィ", "i"), ("ゥ", "u"), ("ェ", "e"), ("ォ", "o"),
    ];
    TABLE.iter().find(|(k, _)| *k == s).map(|(_, v)| *v)
}

/// Curated kanji word/character readings, longest match first.
fn kanji_lookup(s: &str) -> Option<&'static str> {
    const TABLE: &[(&str, &str)] = &[
        ("日本語", "nihongo"), ("日本", "nihon"), ("東京", "toukyou"),
        ("音声", "onsei"), ("合成", "gousei"), ("言葉", "kotoba"),
        ("今日", "kyou"), ("明日", "ashita"), ("時間", "jikan"),
        ("学生", "gakusei"), ("先生", "sensei"), ("電話", "denwa"),
        ("水", "mizu"), ("火", "hi"), ("人", "hito"), ("山", "yama"),
        ("川", "kawa"), ("大", "dai"), ("小", "shou"), ("中", "naka"),
        ("上", "ue"), ("下", "shita"), ("本", "hon"), ("語", "go"),
        ("声", "koe"), ("音", "oto"), ("一", "ichi"), ("二", "ni"),
        ("三", "san"), ("四", "yon"), ("五", "go"), ("六", "roku"),
        ("七", "nana"), ("八", "hachi"), ("九", "kyuu"), ("十", "juu"),
    ];
    TABLE.iter().find(|(k, _)| *k == s).map(|(_, v)| *v)
}

/// Curated toneless pinyin readings for common hanzi.
fn hanzi_lookup(c: char) -> Option<&'static str> {
    const TABLE: &[(char, &str)] = &[
        ('你', "ni"), ('好', "hao"), ('我', "wo"), ('是', "shi"), ('不', "bu"),
        ('的', "de"), ('了', "le"), ('在', "zai"), ('有', "you"), ('他', "ta"),
        ('她', "ta"), ('们', "men"), ('这', "zhe"), ('那', "na"), ('什', "shen"),
        ('么', "me"), ('人', "ren"), ('大', "da"), ('小', "xiao"), ('中', "zhong"),
        ('国', "guo"), ('上', "shang"), ('下', "xia"), ('天', "tian"), ('地', "di"),
        ('一', "yi"), ('二', "er"), ('三', "san"), ('四', "si"), ('五', "wu"),
        ('六', "liu"), ('七', "qi"), ('八', "ba"), ('九', "jiu"), ('十', "shi"),
        ('说', "shuo"), ('话', "hua"), ('语', "yu"), ('音', "yin"), ('声', "sheng"),
        ('合', "he"), ('成', "cheng"), ('文', "wen"), ('字', "zi"), ('学', "xue"),
        ('生', "sheng"), ('老', "lao"), ('师', "shi"), ('水', "shui"), ('火', "huo"),
        ('山', "shan"), ('日', "ri"), ('月', "yue"), ('年', "nian"), ('时', "shi"),
        ('间', "jian"), ('今', "jin"), ('明', "ming"), ('来', "lai"), ('去', "qu"),
        ('东', "dong"), ('西', "xi"), ('南', "nan"), ('北', "bei"), ('京', "jing"),
        ('会', "hui"), ('能', "neng"), ('要', "yao"), ('看', "kan"), ('听', "ting"),
        ('读', "du"), ('写', "xie"), ('做', "zuo"), ('吃', "chi"), ('喝', "he"),
        ('爱', "ai"), ('家', "jia"), ('很', "hen"), ('多', "duo"), ('少', "shao"),
        ('谢', "xie"), ('再', "zai"), ('见', "jian"), ('朋', "peng"), ('友', "you"),
        ('和', "he"), ('也', "ye"), ('都', "dou"), ('可', "ke"), ('以', "yi"),
    ];
    TABLE.iter().find(|(k, _)| *k == c).map(|(_, v)| *v)
}

/// CJK punctuation folded to ASCII so transliterated output stays in the
/// Latin character class.
fn punct_fold(c: char) -> Option<&'static str> {
    Some(match c {
        '。' => ".",
        '、' | '，' => ",",
        '！' => "!",
        '？' => "?",
        '：' => ":",
        '；' => ";",
        '「' | '『' | '“' => "\"",
        '」' | '』' | '”' => "\"",
        '　' => " ",
        '·' | '・' => " ",
        _ => return None,
    })
}

fn is_passthrough(c: char) -> bool {
    c.is_ascii_alphanumeric() || c.is_ascii_punctuation() || c == ' '
}

fn romanize_korean(text: &str, cfg: &RomanizeConfig, fallbacks: &mut usize) -> String {
    let mut out = String::new();
    for c in text.chars() {
        if let Some(r) = hangul_syllable(c) {
            out.push_str(&r);
        } else if is_passthrough(c) {
            out.push(c);
        } else if let Some(p) = punct_fold(c) {
            out.push_str(p);
        } else {
            out.push(cfg.fallback_marker);
            *fallbacks += 1;
        }
    }
    out
}

fn romanize_japanese(text: &str, cfg: &RomanizeConfig, fallbacks: &mut usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::new();
    let mut geminate = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == 'っ' || c == 'ッ' {
            geminate = true;
            i += 1;
            continue;
        }
        if c == 'ー' {
            // long vowel: repeat the last emitted vowel
            if let Some(v) = out.chars().rev().find(|ch| "aeiou".contains(*ch)) {
                out.push(v);
            }
            i += 1;
            continue;
        }
        // longest match: try 3, 2, then 1 characters against word tables
        let mut matched = None;
        for len in (1..=3usize).rev() {
            if i + len > chars.len() {
                continue;
            }
            let slice: String = chars[i..i + len].iter().collect();
            if let Some(r) = kanji_lookup(&slice) {
                matched = Some((r.to_string(), len));
                break;
            }
            if len <= 2 {
                if let Some(r) = kana_lookup(&slice) {
                    matched = Some((r.to_string(), len));
                    break;
                }
            }
        }
        if let Some((r, len)) = matched {
            if geminate {
                if let Some(first) = r.chars().next() {
                    if first.is_ascii_alphabetic() && !"aeiou".contains(first) {
                        out.push(first);
                    }
                }
                geminate = false;
            }
            out.push_str(&r);
            i += len;
            continue;
        }
        geminate = false;
        if is_passthrough(c) {
            out.push(c);
        } else if let Some(p) = punct_fold(c) {
            out.push_str(p);
        } else {
            out.push(cfg.fallback_marker);
            *fallbacks += 1;
        }
        i += 1;
    }
    out
}

fn romanize_chinese(text: &str, cfg: &RomanizeConfig, fallbacks: &mut usize) -> String {
    let mut out = String::new();
    let mut prev_was_syllable = false;
    for c in text.chars() {
        if let Some(r) = hanzi_lookup(c) {
            if prev_was_syllable {
                out.push(' ');
            }
            out.push_str(r);
            prev_was_syllable = true;
        } else if is_passthrough(c) {
            out.push(c);
            prev_was_syllable = false;
        } else if let Some(p) = punct_fold(c) {
            out.push_str(p);
            prev_was_syllable = false;
        } else {
            out.push(cfg.fallback_marker);
            *fallbacks += 1;
            prev_was_syllable = false;
        }
    }
    out
}

/// Transliterates `ko`/`ja`/`zh-cn` text to Latin script; all other languages
/// pass through after Unicode NFC normalization.
pub fn romanize(text: &str, lang: LanguageTag, cfg: &RomanizeConfig) -> Romanized {
    let normalized: String = text.nfc().collect();
    let mut fallbacks = 0;
    let text = match lang {
        LanguageTag::Ko => romanize_korean(&normalized, cfg, &mut fallbacks),
        LanguageTag::Ja => romanize_japanese(&normalized, cfg, &mut fallbacks),
        LanguageTag::ZhCn => romanize_chinese(&normalized, cfg, &mut fallbacks),
        _ => normalized,
    };
    Romanized {
        text,
        fallback_count: fallbacks,
    }
}
