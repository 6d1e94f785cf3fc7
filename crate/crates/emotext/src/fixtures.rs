//! Deterministic synthetic corpora for tests and acceptance runs.
//!
//! Texts are assembled from per-label cue lexicons so the labels are
//! learnable by construction: a label's cue words appear iff the label is
//! active. Assembly uses only integer draws from a seeded ChaCha stream,
//! so regeneration is bitwise-stable across platforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, Example, LabelSet, Provenance, NUM_LABELS};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("label {0} has an empty cue lexicon")]
    EmptyLexicon(usize),
    #[error("empty filler lexicon")]
    EmptyFiller,
    #[error("n must be at least 1")]
    EmptyRequest,
}

/// Recipe for a synthetic corpus; the corpus is a pure function of
/// (spec, n).
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    /// Words that appear iff the corresponding label is active.
    pub cue_lexicons: [Vec<&'static str>; NUM_LABELS],
    /// Label-neutral padding words.
    pub filler: Vec<&'static str>,
    /// Independent per-label activation probabilities.
    pub label_probabilities: [f64; NUM_LABELS],
    /// Uniform character-length target range (inclusive).
    pub min_chars: usize,
    pub max_chars: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            cue_lexicons: [
                vec!["furious", "outraged", "livid", "seething", "irritated"],
                vec!["terrified", "scared", "panic", "dread", "frightened"],
                vec!["delighted", "joyful", "cheerful", "grinning", "glad"],
                vec!["heartbroken", "mourning", "gloomy", "sorrow", "weeping"],
                vec!["astonished", "stunned", "startled", "unexpected", "baffled"],
            ],
            filler: vec![
                "today", "the", "whole", "thing", "felt", "really", "quite", "about", "that",
                "moment", "again", "still", "honestly", "somehow", "evening", "morning", "it",
                "kept", "going", "around", "here",
            ],
            // original-corpus skew: Fear over-represented, Anger rare
            label_probabilities: [0.120, 0.582, 0.243, 0.317, 0.303],
            min_chars: 50,
            max_chars: 106, // uniform on [50, 106] → mean 78
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), FixtureError> {
        for (l, lex) in self.cue_lexicons.iter().enumerate() {
            if lex.is_empty() {
                return Err(FixtureError::EmptyLexicon(l));
            }
        }
        if self.filler.is_empty() {
            return Err(FixtureError::EmptyFiller);
        }
        Ok(())
    }
}

/// Integer Bernoulli: compares a u32 draw against a precomputed threshold.
fn bernoulli(rng: &mut ChaCha8Rng, threshold: u32) -> bool {
    rng.next_u32() < threshold
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[(rng.next_u32() as usize) % words.len()]
}

/// Generates `n` labeled examples from the spec. Labels are sampled
/// independently per class; each active label contributes one or two cue
/// words, and filler words pad the text toward its sampled length target.
pub fn make_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Dataset, FixtureError> {
    spec.validate()?;
    if n == 0 {
        return Err(FixtureError::EmptyRequest);
    }
    let thresholds: [u32; NUM_LABELS] =
        std::array::from_fn(|l| (spec.label_probabilities[l] * u32::MAX as f64) as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span = (spec.max_chars - spec.min_chars + 1) as u32;

    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let mut labels = LabelSet::EMPTY;
        let mut words: Vec<&str> = Vec::new();
        for l in 0..NUM_LABELS {
            if bernoulli(&mut rng, thresholds[l]) {
                labels = labels.with(l);
                let cues = 1 + (rng.next_u32() % 2) as usize;
                for _ in 0..cues {
                    words.push(pick(&mut rng, &spec.cue_lexicons[l]));
                }
            }
        }
        let target = spec.min_chars + (rng.next_u32() % span) as usize;
        let mut chars: usize = words.iter().map(|w| w.len() + 1).sum();
        while chars < target {
            let w = pick(&mut rng, &spec.filler);
            chars += w.len() + 1;
            words.push(w);
        }
        // deterministic integer Fisher-Yates so cues are not always first
        for j in (1..words.len()).rev() {
            let k = (rng.next_u32() as usize) % (j + 1);
            words.swap(j, k);
        }
        examples.push(Example {
            id: format!("syn{i}"),
            text: words.join(" "),
            labels,
        });
    }
    Ok(Dataset::new(examples, Provenance::Original).expect("synthetic ids are unique"))
}

/// Fixed three-word bundles whose members only ever occur together, giving
/// the MLM objective something to learn: any masked bundle member is
/// recoverable from its two mates.
const PHRASE_BUNDLES: [[&str; 3]; 24] = [
    ["silver", "moon", "rises"],
    ["green", "apple", "falls"],
    ["old", "clock", "ticks"],
    ["black", "raven", "calls"],
    ["warm", "bread", "bakes"],
    ["cold", "river", "flows"],
    ["small", "candle", "burns"],
    ["heavy", "anchor", "sinks"],
    ["quick", "rabbit", "jumps"],
    ["quiet", "library", "waits"],
    ["bright", "lantern", "glows"],
    ["deep", "cavern", "echoes"],
    ["tall", "poplar", "sways"],
    ["rusty", "gate", "creaks"],
    ["soft", "pillow", "rests"],
    ["wild", "stallion", "gallops"],
    ["broken", "mirror", "shatters"],
    ["golden", "wheat", "ripens"],
    ["frozen", "pond", "cracks"],
    ["distant", "thunder", "rumbles"],
    ["gentle", "breeze", "drifts"],
    ["ancient", "temple", "stands"],
    ["narrow", "bridge", "bends"],
    ["hollow", "drum", "beats"],
];

/// Unlabeled corpus for MLM fixtures: each sentence concatenates four
/// bundles drawn from [`PHRASE_BUNDLES`]. Pure function of (seed, n).
pub fn make_phrase_corpus(seed: u64, n: usize) -> Result<Dataset, FixtureError> {
    if n == 0 {
        return Err(FixtureError::EmptyRequest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let mut words = Vec::with_capacity(12);
        for _ in 0..4 {
            let b = (rng.next_u32() as usize) % PHRASE_BUNDLES.len();
            words.extend_from_slice(&PHRASE_BUNDLES[b]);
        }
        examples.push(Example {
            id: format!("mlm{i}"),
            text: words.join(" "),
            labels: LabelSet::EMPTY,
        });
    }
    Ok(Dataset::new(examples, Provenance::Original).expect("ids unique"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{label_distribution, LABEL_NAMES};

    #[test]
    fn fixed_seed_reproduces_corpus() {
        let spec = SyntheticSpec::default();
        let a = make_synthetic(&spec, 100).unwrap();
        let b = make_synthetic(&spec, 100).unwrap();
        assert_eq!(a.examples, b.examples);
    }

    #[test]
    fn distribution_tracks_original_corpus_skew() {
        // n = 2768 with the default probabilities: per-label frequency
        // within ±1.5 percentage points of the published distribution
        let ds = make_synthetic(&SyntheticSpec::default(), 2768).unwrap();
        let dist = label_distribution(&ds).unwrap();
        let expected = [12.0, 58.2, 24.3, 31.7, 30.3];
        for (l, &(_, pct)) in dist.per_label.iter().enumerate() {
            assert!(
                (pct - expected[l]).abs() <= 1.5,
                "{}: {pct:.2}% vs {:.1}%",
                LABEL_NAMES[l],
                expected[l]
            );
        }
    }

    #[test]
    fn cue_words_appear_iff_label_active() {
        let spec = SyntheticSpec::default();
        let ds = make_synthetic(&spec, 300).unwrap();
        for ex in &ds.examples {
            for (l, lex) in spec.cue_lexicons.iter().enumerate() {
                let has_cue = ex.text.split(' ').any(|w| lex.contains(&w));
                assert_eq!(
                    has_cue,
                    ex.labels.contains(l),
                    "example {:?} label {l}",
                    ex.id
                );
            }
        }
    }

    #[test]
    fn anger_is_linearly_separable_by_its_cue() {
        // trainability oracle: logistic regression on bag-of-words reaches
        // 100% train accuracy for Anger
        let spec = SyntheticSpec::default();
        let ds = make_synthetic(&spec, 200).unwrap();
        let mut vocab: Vec<&str> = Vec::new();
        let mut rows: Vec<Vec<usize>> = Vec::new();
        for ex in &ds.examples {
            let mut row = Vec::new();
            for w in ex.text.split(' ') {
                let idx = match vocab.iter().position(|&v| v == w) {
                    Some(i) => i,
                    None => {
                        vocab.push(w);
                        vocab.len() - 1
                    }
                };
                row.push(idx);
            }
            rows.push(row);
        }
        let mut weights = vec![0.0f64; vocab.len()];
        let mut bias = 0.0f64;
        let lr = 0.5;
        for _ in 0..200 {
            for (row, ex) in rows.iter().zip(&ds.examples) {
                let y = if ex.labels.contains(0) { 1.0 } else { 0.0 };
                let z: f64 = bias + row.iter().map(|&i| weights[i]).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let g = p - y;
                bias -= lr * g;
                for &i in row {
                    weights[i] -= lr * g;
                }
            }
        }
        let correct = rows
            .iter()
            .zip(&ds.examples)
            .filter(|(row, ex)| {
                let z: f64 = bias + row.iter().map(|&i| weights[i]).sum::<f64>();
                (z > 0.0) == ex.labels.contains(0)
            })
            .count();
        assert_eq!(correct, rows.len(), "linear probe failed to separate Anger");
    }

    #[test]
    fn degenerate_specs_error() {
        let mut spec = SyntheticSpec::default();
        spec.cue_lexicons[2] = vec![];
        assert!(matches!(
            make_synthetic(&spec, 10),
            Err(FixtureError::EmptyLexicon(2))
        ));
        assert!(matches!(
            make_synthetic(&SyntheticSpec::default(), 0),
            Err(FixtureError::EmptyRequest)
        ));
    }

    #[test]
    fn lengths_hover_around_target_mean() {
        let ds = make_synthetic(&SyntheticSpec::default(), 500).unwrap();
        let mean: f64 = ds
            .examples
            .iter()
            .map(|ex| ex.text.len() as f64)
            .sum::<f64>()
            / ds.len() as f64;
        assert!(
            (mean - 78.0).abs() < 8.0,
            "mean text length {mean:.1} far from 78"
        );
    }
}
