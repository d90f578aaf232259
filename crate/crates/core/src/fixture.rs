//! Seeded synthetic inputs at desk scale: an agglutinative toy language, a
//! multilingual corpus, a random teacher encoder with its vocabulary, and STS
//! pairs with graded overlap.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloner::{ModelBundle, ModelConfig};
use crate::corpus::{CorpusRecord, BOUNDARY};
use crate::error::Result;
use crate::eval::StsPair;
use crate::vocab::Vocabulary;

const STEMS: &[&str] = &[
    "ev", "kitap", "göz", "yol", "su", "gün", "deniz", "okul", "çocuk", "şehir", "ağaç", "kalem", "masa", "kapı",
    "iş", "dil", "söz", "yıl", "ışık", "kuş",
];
const SUFFIXES: &[&str] = &["ler", "lar", "imiz", "de", "da", "den", "ı", "i", "e", "a", "ın", "in", "ce", "li", "siz"];
const FOREIGN: &[&str] = &[
    "the", "house", "road", "water", "day", "sea", "school", "child", "city", "tree", "pen", "table", "door", "work",
    "and", "of", "with", "light", "bird", "year",
];

/// Two-letter codes used for the non-Turkish part of the synthetic corpus.
pub const LANGUAGES: &[&str] = &["tr", "en", "de", "fr", "es", "it", "nl", "pt"];

fn turkish_word(rng: &mut ChaCha8Rng) -> String {
    let mut w = STEMS.choose(rng).unwrap().to_string();
    for _ in 0..rng.random_range(0..3) {
        w.push_str(SUFFIXES.choose(rng).unwrap());
    }
    w
}

fn foreign_word(rng: &mut ChaCha8Rng, lang: &str) -> String {
    let base = FOREIGN.choose(rng).unwrap();
    // a per-language twist so languages do not share every surface
    match lang {
        "en" => base.to_string(),
        _ => format!("{base}{}", &lang[..1]),
    }
}

pub fn sentence(rng: &mut ChaCha8Rng, lang: &str) -> String {
    let n = rng.random_range(3..9);
    (0..n)
        .map(|_| if lang == "tr" { turkish_word(rng) } else { foreign_word(rng, lang) })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n` records in the toy Turkish language.
pub fn monolingual_corpus(n: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| CorpusRecord::new(sentence(&mut rng, "tr"), "tr").unwrap())
        .collect()
}

/// `n` records, about half Turkish, the rest spread over [`LANGUAGES`].
pub fn multilingual_corpus(n: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let lang = if rng.random_bool(0.5) { "tr" } else { LANGUAGES.choose(&mut rng).unwrap() };
            CorpusRecord::new(sentence(&mut rng, lang), lang).unwrap()
        })
        .collect()
}

/// A teacher vocabulary: characters, suffixes, stems and the most frequent
/// whole words of a large sample, all with and without the boundary marker.
pub fn teacher_vocab(size: usize, seed: u64) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |t: String, tokens: &mut Vec<String>| {
        if seen.insert(t.clone()) {
            tokens.push(t);
        }
    };
    let mut chars: Vec<char> = STEMS
        .iter()
        .chain(SUFFIXES)
        .chain(FOREIGN)
        .flat_map(|s| s.chars())
        .chain(LANGUAGES.iter().flat_map(|l| l.chars()))
        .collect();
    chars.sort_unstable();
    chars.dedup();
    for c in chars {
        push(c.to_string(), &mut tokens);
        push(format!("{BOUNDARY}{c}"), &mut tokens);
    }
    for s in SUFFIXES {
        push(s.to_string(), &mut tokens);
    }
    for s in STEMS.iter().chain(FOREIGN) {
        push(format!("{BOUNDARY}{s}"), &mut tokens);
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for r in multilingual_corpus(4000, seed) {
        for w in r.text.split_whitespace() {
            *counts.entry(format!("{BOUNDARY}{w}")).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(String, u64)> = counts.into_iter().collect();
    words.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = size.saturating_sub(crate::vocab::RESERVED);
    for (w, _) in words {
        if tokens.len() >= room {
            break;
        }
        push(w, &mut tokens);
    }
    tokens.truncate(room);
    Vocabulary::from_tokens(tokens)
}

/// A random teacher encoder sized for `vocab`.
pub fn teacher_model(vocab: &Vocabulary, d: usize, h: usize, max_len: usize, seed: u64) -> Result<ModelBundle> {
    ModelBundle::random(
        ModelConfig {
            d,
            h,
            max_len,
            vocab_size: vocab.size(),
        },
        true,
        seed,
    )
}

/// Sentence pairs where the second sentence replaces a random share of the
/// first one's words; gold falls linearly with the share replaced.
pub fn sts_pairs(n: usize, seed: u64) -> Vec<StsPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words: Vec<String> = sentence(&mut rng, "tr").split(' ').map(String::from).collect();
            let mut other = words.clone();
            let k = rng.random_range(0..=words.len());
            let mut positions: Vec<usize> = (0..words.len()).collect();
            positions.shuffle(&mut rng);
            for &p in &positions[..k] {
                other[p] = turkish_word(&mut rng);
            }
            let gold = 5.0 * (1.0 - k as f64 / words.len() as f64);
            StsPair::new(words.join(" "), other.join(" "), (gold * 100.0).round() / 100.0).unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        assert_eq!(monolingual_corpus(5, 1), monolingual_corpus(5, 1));
        assert_ne!(monolingual_corpus(5, 1), monolingual_corpus(5, 2));
        let v = teacher_vocab(600, 3).unwrap();
        assert_eq!(v.size(), 600);
        let pairs = sts_pairs(20, 4);
        assert!(pairs.iter().all(|p| (0.0..=5.0).contains(&p.gold)));
    }
}
