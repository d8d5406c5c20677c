//! Surface text for synthetic utterances and the numeral filter.

use rand::Rng;
use unicode_properties::{GeneralCategory, UnicodeGeneralCategory};

const ONSETS: [&str; 16] = [
    "p", "t", "k", "b", "d", "g", "m", "n", "s", "l", "r", "v", "z", "f", "h", "j",
];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Pronounceable syllable for a token id; distinct ids map to distinct
/// syllables.
pub fn syllable(token: usize) -> String {
    let base = ONSETS.len() * NUCLEI.len();
    let mut s = String::new();
    s.push_str(ONSETS[token % ONSETS.len()]);
    s.push_str(NUCLEI[(token / ONSETS.len()) % NUCLEI.len()]);
    for _ in 0..token / base {
        s.push('n');
    }
    s
}

/// Groups syllables into words of one to three syllables. With
/// probability `digit_rate` a numeral is inserted at a random word slot.
pub fn render(tokens: &[usize], digit_rate: f64, rng: &mut impl Rng) -> String {
    let mut words = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let n = rng.random_range(1..=3).min(tokens.len() - i);
        words.push(tokens[i..i + n].iter().map(|&t| syllable(t)).collect::<String>());
        i += n;
    }
    if rng.random_bool(digit_rate.clamp(0.0, 1.0)) {
        let at = rng.random_range(0..=words.len());
        words.insert(at, rng.random_range(1..1000u32).to_string());
    }
    words.join(" ")
}

/// Keep an utterance iff its text contains no decimal digit in any script.
/// Letter-like numerals such as Roman numeral code points are kept.
pub fn filter_numerals(text: &str) -> bool {
    !text
        .chars()
        .any(|c| c.general_category() == GeneralCategory::DecimalNumber)
}
