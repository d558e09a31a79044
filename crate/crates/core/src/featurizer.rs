//! Hashed character n-gram features.
//!
//! Text is NFC-normalized, optionally lowercased, and split into Unicode
//! scalar values. Every n-gram for `n` in `n_min..=n_max` is hashed with
//! 64-bit FNV-1a over its UTF-8 bytes (offset basis `0xcbf29ce484222325`,
//! prime `0x100000001b3`) and counted in bucket `hash % dimension`.
//! Colliding n-grams add their counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::Hasher;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::DatasetSplit;

pub const MAX_NGRAM: usize = 8;
pub const MIN_DIMENSION: usize = 1 << 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    None,
    L2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub dimension: usize,
    pub normalize: Normalize,
    pub lowercase: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            n_min: 1,
            n_max: 3,
            dimension: 1 << 18,
            normalize: Normalize::L2,
            lowercase: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeaturizerError {
    #[error("n_min must be at least 1, got {0}")]
    NMinZero(usize),
    #[error("n-gram range {n_min}..={n_max} invalid (need n_min <= n_max <= {MAX_NGRAM})")]
    BadRange { n_min: usize, n_max: usize },
    #[error("dimension {0} must be a power of two >= {MIN_DIMENSION}")]
    BadDimension(usize),
    #[error("malformed sparse vector: {0}")]
    Parse(String),
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<(), FeaturizerError> {
        if self.n_min == 0 {
            return Err(FeaturizerError::NMinZero(self.n_min));
        }
        if self.n_min > self.n_max || self.n_max > MAX_NGRAM {
            return Err(FeaturizerError::BadRange {
                n_min: self.n_min,
                n_max: self.n_max,
            });
        }
        if !self.dimension.is_power_of_two() || self.dimension < MIN_DIMENSION {
            return Err(FeaturizerError::BadDimension(self.dimension));
        }
        Ok(())
    }
}

/// Sparse vector with entries sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dimension: usize,
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn zeros(dimension: usize) -> Self {
        FeatureVector {
            dimension,
            entries: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, index: u32) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt()
    }

    /// Debug dump: space-separated `index:value` pairs.
    pub fn to_sparse_string(&self) -> String {
        let mut out = String::new();
        for (k, &(i, v)) in self.entries.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{i}:{v:?}");
        }
        out
    }

    pub fn from_sparse_string(dimension: usize, s: &str) -> Result<Self, FeaturizerError> {
        let mut entries = Vec::new();
        for tok in s.split_whitespace() {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| FeaturizerError::Parse(tok.to_string()))?;
            let i: u32 = i.parse().map_err(|_| FeaturizerError::Parse(tok.to_string()))?;
            let v: f64 = v.parse().map_err(|_| FeaturizerError::Parse(tok.to_string()))?;
            if i as usize >= dimension {
                return Err(FeaturizerError::Parse(format!("index {i} >= dimension {dimension}")));
            }
            entries.push((i, v));
        }
        entries.sort_by_key(|&(i, _)| i);
        Ok(FeatureVector { dimension, entries })
    }
}

/// FNV-1a 64 over the UTF-8 bytes of `gram`.
pub fn hash_ngram(gram: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(gram.as_bytes());
    h.finish()
}

pub fn bucket_of(gram: &str, dimension: usize) -> u32 {
    (hash_ngram(gram) % dimension as u64) as u32
}

/// Code points after NFC and optional lowercasing.
pub fn prepare_chars(text: &str, lowercase: bool) -> Vec<char> {
    let nfc = text.nfc();
    if lowercase {
        nfc.flat_map(char::to_lowercase).collect()
    } else {
        nfc.collect()
    }
}

/// Raw per-bucket counts. Does not validate `config`, so callers may pass
/// tiny dimensions to force collisions.
pub fn ngram_counts(text: &str, config: &FeaturizerConfig) -> BTreeMap<u32, f64> {
    debug_assert!(config.dimension > 0);
    let chars = prepare_chars(text, config.lowercase);
    let mut counts = BTreeMap::new();
    let mut gram = String::new();
    for n in config.n_min..=config.n_max {
        if n == 0 || n > chars.len() {
            continue;
        }
        for window in chars.windows(n) {
            gram.clear();
            gram.extend(window);
            *counts.entry(bucket_of(&gram, config.dimension)).or_insert(0.0) += 1.0;
        }
    }
    counts
}

pub fn featurize(text: &str, config: &FeaturizerConfig) -> FeatureVector {
    let counts = ngram_counts(text, config);
    let mut entries: Vec<(u32, f64)> = counts.into_iter().collect();
    if config.normalize == Normalize::L2 && !entries.is_empty() {
        let norm = entries.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
        for (_, v) in &mut entries {
            *v /= norm;
        }
    }
    FeatureVector {
        dimension: config.dimension,
        entries,
    }
}

/// Featurizes every example, preserving order.
pub fn featurize_split(split: &DatasetSplit, config: &FeaturizerConfig) -> Vec<FeatureVector> {
    featurize_texts(&split.texts().collect::<Vec<_>>(), config)
}

pub fn featurize_texts(texts: &[&str], config: &FeaturizerConfig) -> Vec<FeatureVector> {
    texts.par_iter().map(|t| featurize(t, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelSchema, LabeledExample, SplitName, TaskId};
    use proptest::prelude::*;
    use std::collections::{HashMap, HashSet};

    fn cfg(n_min: usize, n_max: usize, dimension: usize, normalize: Normalize) -> FeaturizerConfig {
        FeaturizerConfig {
            n_min,
            n_max,
            dimension,
            normalize,
            lowercase: false,
        }
    }

    // Independent oracle: enumerate n-grams into a dictionary keyed by the gram.
    fn brute_force_grams(text: &str, n_min: usize, n_max: usize) -> HashMap<String, usize> {
        let chars: Vec<char> = text.nfc().collect();
        let mut out = HashMap::new();
        for n in n_min..=n_max {
            let mut i = 0;
            while i + n <= chars.len() {
                let g: String = chars[i..i + n].iter().collect();
                *out.entry(g).or_insert(0) += 1;
                i += 1;
            }
        }
        out
    }

    #[test]
    fn fnv_reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(hash_ngram(""), 0xcbf29ce484222325);
        assert_eq!(hash_ngram("a"), 0xaf63dc4c8601ec8c);
        assert_eq!(hash_ngram("foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let c = FeaturizerConfig::default();
        let v = featurize("", &c);
        assert_eq!(v.dimension(), 1 << 18);
        assert_eq!(v.nnz(), 0);
    }

    #[test]
    fn repeated_unigram_counts_twice() {
        let v = featurize("अअ", &cfg(1, 1, 1 << 10, Normalize::None));
        assert_eq!(v.nnz(), 1);
        assert_eq!(v.entries()[0].1, 2.0);
    }

    #[test]
    fn namaste_matches_dictionary_oracle() {
        let c = cfg(1, 2, 1 << 18, Normalize::None);
        let v = featurize("नमस्ते", &c);
        let grams = brute_force_grams("नमस्ते", 1, 2);
        let buckets: HashSet<u32> = grams.keys().map(|g| bucket_of(g, c.dimension)).collect();
        assert_eq!(v.nnz(), buckets.len());
        // 6 code points: 6 unigrams, 5 bigrams, all distinct.
        assert_eq!(grams.len(), 11);
        let mut expected: HashMap<u32, f64> = HashMap::new();
        for (g, n) in &grams {
            *expected.entry(bucket_of(g, c.dimension)).or_default() += *n as f64;
        }
        for &(i, val) in v.entries() {
            assert_eq!(expected[&i], val);
        }
    }

    #[test]
    fn nfc_unifies_composed_and_decomposed() {
        // U+0929 (NNNA) vs U+0928 U+093C (NA + NUKTA). U+0929 is not a
        // composition exclusion, so NFC composes the pair.
        let c = cfg(1, 3, 1 << 12, Normalize::L2);
        assert_eq!(featurize("\u{0929}", &c), featurize("\u{0928}\u{093C}", &c));
    }

    #[test]
    fn forced_collisions_are_additive() {
        let c = cfg(1, 1, 2, Normalize::None);
        let v = featurize("कखगघङ", &c);
        let total: f64 = v.entries().iter().map(|e| e.1).sum();
        assert_eq!(total, 5.0);
        assert!(v.nnz() <= 2);
        let mut expected = [0.0; 2];
        for ch in "कखगघङ".chars() {
            expected[bucket_of(&ch.to_string(), 2) as usize] += 1.0;
        }
        assert_eq!(v.get(0), expected[0]);
        assert_eq!(v.get(1), expected[1]);
    }

    #[test]
    fn config_validation() {
        assert!(FeaturizerConfig::default().validate().is_ok());
        assert!(cfg(0, 2, 1 << 10, Normalize::L2).validate().is_err());
        assert!(cfg(3, 2, 1 << 10, Normalize::L2).validate().is_err());
        assert!(cfg(1, 9, 1 << 10, Normalize::L2).validate().is_err());
        assert!(cfg(1, 2, 1000, Normalize::L2).validate().is_err());
        assert!(cfg(1, 2, 1 << 9, Normalize::L2).validate().is_err());
    }

    #[test]
    fn split_featurization_preserves_order() {
        let c = cfg(1, 2, 1 << 12, Normalize::L2);
        let texts = ["क ख", "ग घ", "क ख", "च"];
        let ex: Vec<_> = texts
            .iter()
            .map(|t| LabeledExample {
                text: t.to_string(),
                label: None,
            })
            .collect();
        let split = DatasetSplit::new(SplitName::Test, LabelSchema::for_task(TaskId::A), ex);
        let vs = featurize_split(&split, &c);
        assert_eq!(vs.len(), 4);
        assert_eq!(vs[0], vs[2]);
        for (t, v) in texts.iter().zip(&vs) {
            assert_eq!(&featurize(t, &c), v);
        }
        // permutation oracle
        let perm = [3usize, 1, 0, 2];
        let permuted: Vec<&str> = perm.iter().map(|&i| texts[i]).collect();
        let pv = featurize_texts(&permuted, &c);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pv[k], vs[i]);
        }
    }

    #[test]
    fn sparse_dump_round_trip() {
        let c = cfg(1, 3, 1 << 12, Normalize::L2);
        let v = featurize("नमस्ते दुनिया", &c);
        let s = v.to_sparse_string();
        assert_eq!(FeatureVector::from_sparse_string(c.dimension, &s).unwrap(), v);
        assert!(FeatureVector::from_sparse_string(4, "7:1.0").is_err());
    }

    proptest! {
        #[test]
        fn l2_norm_and_bounds(text in "[\u{0900}-\u{097F} ]{1,40}") {
            let c = cfg(1, 3, 1 << 10, Normalize::L2);
            let v = featurize(&text, &c);
            prop_assert!(v.entries().iter().all(|&(i, _)| (i as usize) < c.dimension));
            if v.nnz() > 0 {
                prop_assert!((v.norm() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn l2_preserves_argmax(text in "[\u{0915}-\u{0939}]{1,30}") {
            let raw = featurize(&text, &cfg(1, 2, 1 << 10, Normalize::None));
            let l2 = featurize(&text, &cfg(1, 2, 1 << 10, Normalize::L2));
            let argmax = |v: &FeatureVector| {
                v.entries().iter().fold((u32::MAX, f64::MIN), |best, &(i, x)| if x > best.1 { (i, x) } else { best }).0
            };
            prop_assert_eq!(argmax(&raw), argmax(&l2));
        }

        #[test]
        fn deterministic(text in "\\PC{0,30}") {
            let c = FeaturizerConfig::default();
            let a = featurize(&text, &c);
            let b = featurize(&text, &c);
            prop_assert_eq!(a.entries().len(), b.entries().len());
            for (x, y) in a.entries().iter().zip(b.entries()) {
                prop_assert_eq!(x.0, y.0);
                prop_assert_eq!(x.1.to_bits(), y.1.to_bits());
            }
        }
    }
}
