//! Character-level text corruptions: random key typos, QWERTY-neighbor typos,
//! and adjacent-letter swaps inside words.
//!
//! All three are driven by a caller-supplied RNG so a logged seed reproduces
//! the exact corrupted text. They guarantee at least one edit: a text that
//! happens to dodge every probabilistic draw gets one forced edit at a random
//! eligible position.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TypoError {
    #[error("no word of length >= {min_len} to swap letters in")]
    NoEligibleWord { min_len: usize },
}

/// Minimum word length (in characters) eligible for a letter swap.
const SWAP_MIN_WORD_LEN: usize = 4;

// ---------------------------------------------------------------------------
// Keyboard adjacency
// ---------------------------------------------------------------------------

/// Symmetric neighbor map over the lowercase letter keys of a staggered
/// QWERTY layout. Uppercase input is looked up via its lowercase form; the
/// substitution preserves the original case.
#[derive(Clone, Debug)]
pub struct KeyboardAdjacency {
    neighbors: BTreeMap<char, Vec<char>>,
}

/// Horizontal, upper-diagonal, and lower-diagonal key pairs of the QWERTY
/// letter block. Stored one-directional; the constructor mirrors them.
const QWERTY_PAIRS: &[(char, char)] = &[
    // in-row neighbors
    ('q', 'w'),
    ('w', 'e'),
    ('e', 'r'),
    ('r', 't'),
    ('t', 'y'),
    ('y', 'u'),
    ('u', 'i'),
    ('i', 'o'),
    ('o', 'p'),
    ('a', 's'),
    ('s', 'd'),
    ('d', 'f'),
    ('f', 'g'),
    ('g', 'h'),
    ('h', 'j'),
    ('j', 'k'),
    ('k', 'l'),
    ('z', 'x'),
    ('x', 'c'),
    ('c', 'v'),
    ('v', 'b'),
    ('b', 'n'),
    ('n', 'm'),
    // top row against home row
    ('q', 'a'),
    ('w', 'a'),
    ('w', 's'),
    ('e', 's'),
    ('e', 'd'),
    ('r', 'd'),
    ('r', 'f'),
    ('t', 'f'),
    ('t', 'g'),
    ('y', 'g'),
    ('y', 'h'),
    ('u', 'h'),
    ('u', 'j'),
    ('i', 'j'),
    ('i', 'k'),
    ('o', 'k'),
    ('o', 'l'),
    ('p', 'l'),
    // home row against bottom row
    ('a', 'z'),
    ('s', 'z'),
    ('s', 'x'),
    ('d', 'x'),
    ('d', 'c'),
    ('f', 'c'),
    ('f', 'v'),
    ('g', 'v'),
    ('g', 'b'),
    ('h', 'b'),
    ('h', 'n'),
    ('j', 'n'),
    ('j', 'm'),
    ('k', 'm'),
];

impl KeyboardAdjacency {
    /// The standard QWERTY letter-block adjacency.
    pub fn qwerty() -> Self {
        Self::from_pairs(QWERTY_PAIRS)
    }

    /// Builds a symmetric adjacency from a pair list. Each pair is inserted
    /// in both directions; self-adjacency is ignored.
    pub fn from_pairs(pairs: &[(char, char)]) -> Self {
        let mut neighbors: BTreeMap<char, Vec<char>> = BTreeMap::new();
        for &(a, b) in pairs {
            if a == b {
                continue;
            }
            neighbors.entry(a).or_default().push(b);
            neighbors.entry(b).or_default().push(a);
        }
        for list in neighbors.values_mut() {
            list.sort_unstable();
            list.dedup();
        }
        Self { neighbors }
    }

    /// Neighbors of `c`, looked up case-insensitively.
    pub fn neighbors(&self, c: char) -> Option<&[char]> {
        self.neighbors
            .get(&c.to_ascii_lowercase())
            .map(Vec::as_slice)
    }

    /// True when `a` and `b` sit on adjacent keys (case-insensitive).
    pub fn adjacent(&self, a: char, b: char) -> bool {
        self.neighbors(a)
            .is_some_and(|list| list.contains(&b.to_ascii_lowercase()))
    }

    pub fn keys(&self) -> impl Iterator<Item = char> + '_ {
        self.neighbors.keys().copied()
    }
}

impl Default for KeyboardAdjacency {
    fn default() -> Self {
        Self::qwerty()
    }
}

// ---------------------------------------------------------------------------
// Key typo
// ---------------------------------------------------------------------------

/// Replaces each ASCII-alphabetic character with probability `rate` by a
/// uniformly random lowercase letter other than the character's own lowercase
/// form. At least one replacement is forced; length is preserved; text with
/// no alphabetic characters is returned unchanged.
pub fn key_typo<R: Rng + ?Sized>(text: &str, rng: &mut R, rate: f64) -> String {
    corrupt_chars(text, rng, rate, |rng, original| {
        random_lowercase_excluding(rng, original.to_ascii_lowercase())
    })
}

/// Like [`key_typo`] but substitutes a uniformly random QWERTY-adjacent key,
/// preserving the case of the original character.
pub fn keyboard_typo<R: Rng + ?Sized>(
    text: &str,
    rng: &mut R,
    rate: f64,
    adjacency: &KeyboardAdjacency,
) -> String {
    corrupt_chars(text, rng, rate, |rng, original| {
        let neighbors = adjacency
            .neighbors(original)
            .expect("every ASCII letter has QWERTY neighbors");
        let substitute = neighbors[rng.gen_range(0..neighbors.len())];
        if original.is_ascii_uppercase() {
            substitute.to_ascii_uppercase()
        } else {
            substitute
        }
    })
}

fn corrupt_chars<R: Rng + ?Sized>(
    text: &str,
    rng: &mut R,
    rate: f64,
    mut substitute: impl FnMut(&mut R, char) -> char,
) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    let alphabetic: Vec<usize> = chars
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_ascii_alphabetic())
        .map(|(i, _)| i)
        .collect();
    if alphabetic.is_empty() {
        return text.to_string();
    }
    let mut changed = false;
    for &i in &alphabetic {
        if rng.gen::<f64>() < rate {
            chars[i] = substitute(rng, chars[i]);
            changed = true;
        }
    }
    if !changed {
        let i = alphabetic[rng.gen_range(0..alphabetic.len())];
        chars[i] = substitute(rng, chars[i]);
    }
    chars.into_iter().collect()
}

/// Uniform draw over the 25 lowercase letters that are not `excluded`.
fn random_lowercase_excluding<R: Rng + ?Sized>(rng: &mut R, excluded: char) -> char {
    debug_assert!(excluded.is_ascii_lowercase());
    let offset = rng.gen_range(0..25u8);
    let mut candidate = b'a' + offset;
    if candidate >= excluded as u8 {
        candidate += 1;
    }
    candidate as char
}

// ---------------------------------------------------------------------------
// Letter swap
// ---------------------------------------------------------------------------

/// Swaps two adjacent letters inside words.
///
/// Words are maximal alphabetic runs; only words of at least four characters
/// are eligible. Each eligible word is independently perturbed with
/// probability `rate`; if no word fires, one randomly chosen eligible word is
/// swapped anyway. By default the swapped pair stays strictly inside the word
/// (first and last characters keep their place); `allow_boundary` widens the
/// pair choice to the word edges. Case travels with the characters.
pub fn letter_swap<R: Rng + ?Sized>(
    text: &str,
    rng: &mut R,
    rate: f64,
    allow_boundary: bool,
) -> Result<String, TypoError> {
    debug_assert!(rate > 0.0 && rate <= 1.0, "swap rate must be in (0, 1]");
    let mut segments = split_words(text);
    let eligible: Vec<usize> = segments
        .iter()
        .enumerate()
        .filter(|(_, segment)| matches!(segment, Segment::Word(w) if w.len() >= SWAP_MIN_WORD_LEN))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(TypoError::NoEligibleWord {
            min_len: SWAP_MIN_WORD_LEN,
        });
    }
    let mut swapped = false;
    for &i in &eligible {
        if rng.gen::<f64>() < rate {
            if let Segment::Word(word) = &mut segments[i] {
                swap_adjacent(word, rng, allow_boundary);
                swapped = true;
            }
        }
    }
    if !swapped {
        let i = eligible[rng.gen_range(0..eligible.len())];
        if let Segment::Word(word) = &mut segments[i] {
            swap_adjacent(word, rng, allow_boundary);
        }
    }
    Ok(join_segments(&segments))
}

fn swap_adjacent<R: Rng + ?Sized>(word: &mut [char], rng: &mut R, allow_boundary: bool) {
    let len = word.len();
    debug_assert!(len >= SWAP_MIN_WORD_LEN);
    // `left` indexes the left character of the swapped pair.
    let left = if allow_boundary {
        rng.gen_range(0..=len - 2)
    } else {
        rng.gen_range(1..=len - 3)
    };
    word.swap(left, left + 1);
}

enum Segment {
    Word(Vec<char>),
    Gap(String),
}

fn split_words(text: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut word: Vec<char> = Vec::new();
    let mut gap = String::new();
    for c in text.chars() {
        if c.is_alphabetic() {
            if !gap.is_empty() {
                segments.push(Segment::Gap(std::mem::take(&mut gap)));
            }
            word.push(c);
        } else {
            if !word.is_empty() {
                segments.push(Segment::Word(std::mem::take(&mut word)));
            }
            gap.push(c);
        }
    }
    if !word.is_empty() {
        segments.push(Segment::Word(word));
    }
    if !gap.is_empty() {
        segments.push(Segment::Gap(gap));
    }
    segments
}

fn join_segments(segments: &[Segment]) -> String {
    let mut out = String::new();
    for segment in segments {
        match segment {
            Segment::Word(chars) => out.extend(chars.iter()),
            Segment::Gap(gap) => out.push_str(gap),
        }
    }
    out
}
