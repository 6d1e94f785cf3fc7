//! Shapley-value token attribution for model predictions.
//!
//! The value function is a class probability with a chosen subset of
//! content tokens "present"; absent tokens are replaced by MASK (the model
//! has seen MASK throughout pre-training), or dropped entirely in deletion
//! mode. The exact estimator enumerates all 2ⁿ coalitions up to n = 12;
//! beyond that a permutation-sampling estimator takes over.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, TokenSequence, MASK_ID, LABEL_NAMES};
use crate::model::{Model, ModelError};

/// Above this many content tokens the exact estimator refuses and points
/// at the sampled one (2¹² = 4,096 forward passes).
pub const EXACT_TOKEN_LIMIT: usize = 12;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("unknown label {0:?}; the label universe is {LABEL_NAMES:?}")]
    UnknownLabel(String),
    #[error("{n} content tokens exceed the exact-enumeration limit of {limit}; use the sampled estimator")]
    TooManyTokens { n: usize, limit: usize },
    #[error("sampled estimator needs at least one permutation")]
    ZeroPermutations,
    #[error("subset index {index} out of range for {n} content tokens")]
    BadSubsetIndex { index: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How a token outside the evaluated subset is removed from the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AbsentMode {
    /// Replace with the MASK token (default).
    #[default]
    Mask,
    /// Delete the token and re-pad the sequence.
    Delete,
}

/// A set function over `num_players` players, addressed by bitmask.
/// Implemented by the model-backed value function and by the synthetic
/// games the estimator tests use.
pub trait CoalitionValue {
    fn num_players(&self) -> usize;
    fn value(&self, subset: u64) -> f64;

    /// Batched evaluation; implementations may override for speed.
    fn values(&self, subsets: &[u64]) -> Vec<f64> {
        subsets.iter().map(|&s| self.value(s)).collect()
    }
}

/// Class probability of `label` with only the given content tokens
/// present.
pub struct ModelValue<'a> {
    model: &'a Model,
    seq: TokenSequence,
    content_ids: Vec<usize>,
    label: usize,
    mode: AbsentMode,
}

impl<'a> ModelValue<'a> {
    pub fn new(
        model: &'a Model,
        text: &str,
        label: &str,
        mode: AbsentMode,
    ) -> Result<Self, ExplainError> {
        let label = LABEL_NAMES
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| ExplainError::UnknownLabel(label.to_string()))?;
        let seq = model.encode_text(text)?;
        let content_ids = seq.content_positions().map(|p| seq.ids()[p]).collect();
        Ok(Self {
            model,
            seq,
            content_ids,
            label,
            mode,
        })
    }

    /// Token strings in player order.
    pub fn tokens(&self) -> Vec<String> {
        self.content_ids
            .iter()
            .map(|&id| self.model.vocab.token_of(id).to_string())
            .collect()
    }

    fn sequence_for(&self, subset: u64) -> TokenSequence {
        match self.mode {
            AbsentMode::Mask => {
                let mut seq = self.seq.clone();
                for (i, pos) in self.seq.content_positions().enumerate() {
                    if subset & (1 << i) == 0 {
                        seq = seq.with_id_at(pos, MASK_ID);
                    }
                }
                seq
            }
            AbsentMode::Delete => {
                let kept: Vec<usize> = self
                    .content_ids
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &id)| (subset & (1 << i) != 0).then_some(id))
                    .collect();
                TokenSequence::from_content_ids(&kept, self.seq.len())
                    .expect("same max_len as the source sequence")
            }
        }
    }
}

impl CoalitionValue for ModelValue<'_> {
    fn num_players(&self) -> usize {
        self.content_ids.len()
    }

    fn value(&self, subset: u64) -> f64 {
        self.values(&[subset])[0]
    }

    fn values(&self, subsets: &[u64]) -> Vec<f64> {
        let seqs: Vec<TokenSequence> = subsets.iter().map(|&s| self.sequence_for(s)).collect();
        self.model
            .probabilities(&seqs)
            .expect("eval forward on well-formed sequences")
            .into_iter()
            .map(|probs| probs[self.label])
            .collect()
    }
}

/// Probability of `label` with exactly the tokens in `subset` present;
/// the empty subset is the fully-masked baseline.
pub fn value(
    model: &Model,
    text: &str,
    subset: &[usize],
    label: &str,
    mode: AbsentMode,
) -> Result<f64, ExplainError> {
    let vf = ModelValue::new(model, text, label, mode)?;
    let mut mask = 0u64;
    for &i in subset {
        if i >= vf.num_players() {
            return Err(ExplainError::BadSubsetIndex {
                index: i,
                n: vf.num_players(),
            });
        }
        mask |= 1 << i;
    }
    Ok(vf.value(mask))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Exact,
    Sampled { permutations: usize },
}

/// Per-token attributions for one prediction.
#[derive(Clone, Debug, Serialize)]
pub struct AttributionReport {
    pub tokens: Vec<String>,
    pub phi: Vec<f64>,
    pub v_empty: f64,
    pub v_full: f64,
    /// |Σφ − (v_full − v_empty)|; below 1e-9 in exact mode.
    pub efficiency_residual: f64,
    pub estimator: Estimator,
}

impl AttributionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token,phi\n");
        for (tok, phi) in self.tokens.iter().zip(&self.phi) {
            out.push_str(&format!("{tok},{phi}\n"));
        }
        out
    }
}

fn finalize(
    tokens: Vec<String>,
    phi: Vec<f64>,
    v_empty: f64,
    v_full: f64,
    estimator: Estimator,
) -> AttributionReport {
    let residual = (phi.iter().sum::<f64>() - (v_full - v_empty)).abs();
    AttributionReport {
        tokens,
        phi,
        v_empty,
        v_full,
        efficiency_residual: residual,
        estimator,
    }
}

/// Exact Shapley values by enumerating every coalition:
/// φ_i = Σ_{S ⊆ N∖{i}} |S|!(n−|S|−1)!/n! · (v(S∪{i}) − v(S)).
pub fn shapley_exact_over(v: &impl CoalitionValue) -> Result<(Vec<f64>, f64, f64), ExplainError> {
    let n = v.num_players();
    if n > EXACT_TOKEN_LIMIT {
        return Err(ExplainError::TooManyTokens {
            n,
            limit: EXACT_TOKEN_LIMIT,
        });
    }
    let full: u64 = if n == 64 { u64::MAX } else { (1 << n) - 1 };
    let subsets: Vec<u64> = (0..=full).collect();
    let values = v.values(&subsets);

    let mut factorial = vec![1.0f64; n + 1];
    for k in 1..=n {
        factorial[k] = factorial[k - 1] * k as f64;
    }
    // weight for a coalition of size s not containing i
    let weight: Vec<f64> = (0..n)
        .map(|s| factorial[s] * factorial[n - s - 1] / factorial[n])
        .collect();

    let mut phi = vec![0.0f64; n];
    for (slot, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << slot;
        let mut acc = 0.0;
        for s in 0..=full {
            if s & bit != 0 {
                continue;
            }
            let size = s.count_ones() as usize;
            acc += weight[size] * (values[(s | bit) as usize] - values[s as usize]);
        }
        *p = acc;
    }
    Ok((phi, values[0], values[full as usize]))
}

/// Exact attribution for one example and label.
pub fn shapley_exact(
    model: &Model,
    text: &str,
    label: &str,
    mode: AbsentMode,
) -> Result<AttributionReport, ExplainError> {
    let vf = ModelValue::new(model, text, label, mode)?;
    let (phi, v_empty, v_full) = shapley_exact_over(&vf)?;
    Ok(finalize(vf.tokens(), phi, v_empty, v_full, Estimator::Exact))
}

/// Permutation-sampling estimate: for each sampled ordering, a player's
/// marginal contribution is v(prefix ∪ {i}) − v(prefix). Unbiased, and
/// reproducible given the seed.
pub fn shapley_sampled_over(
    v: &impl CoalitionValue,
    n_perm: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64, f64), ExplainError> {
    if n_perm == 0 {
        return Err(ExplainError::ZeroPermutations);
    }
    let n = v.num_players();
    let full: u64 = if n >= 64 { u64::MAX } else { (1 << n) - 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = v.values(&[0, full]);
    let (v_empty, v_full) = (base[0], base[1]);

    let mut phi = vec![0.0f64; n];
    let mut players: Vec<usize> = (0..n).collect();
    // evaluate one permutation's prefixes per batch
    for _ in 0..n_perm {
        players.shuffle(&mut rng);
        let mut masks = Vec::with_capacity(n);
        let mut mask = 0u64;
        for &p in &players {
            mask |= 1 << p;
            masks.push(mask);
        }
        let vals = v.values(&masks);
        let mut prev = v_empty;
        for (&p, &val) in players.iter().zip(&vals) {
            phi[p] += val - prev;
            prev = val;
        }
    }
    for p in phi.iter_mut() {
        *p /= n_perm as f64;
    }
    Ok((phi, v_empty, v_full))
}

/// Sampled attribution for one example and label.
pub fn shapley_sampled(
    model: &Model,
    text: &str,
    label: &str,
    mode: AbsentMode,
    n_perm: usize,
    seed: u64,
) -> Result<AttributionReport, ExplainError> {
    let vf = ModelValue::new(model, text, label, mode)?;
    let (phi, v_empty, v_full) = shapley_sampled_over(&vf, n_perm, seed)?;
    Ok(finalize(
        vf.tokens(),
        phi,
        v_empty,
        v_full,
        Estimator::Sampled {
            permutations: n_perm,
        },
    ))
}

/// Mean attribution per vocabulary token over a dataset for one class.
#[derive(Clone, Debug, Serialize)]
pub struct ClassReport {
    pub label: String,
    /// (token, mean φ, occurrences), strongest positive first.
    pub positive: Vec<(String, f64, usize)>,
    /// (token, mean φ, occurrences), strongest negative first.
    pub negative: Vec<(String, f64, usize)>,
}

impl ClassReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,token,mean_phi,occurrences\n");
        for (tok, phi, n) in &self.positive {
            out.push_str(&format!("positive,{tok},{phi},{n}\n"));
        }
        for (tok, phi, n) in &self.negative {
            out.push_str(&format!("negative,{tok},{phi},{n}\n"));
        }
        out
    }

    /// Aligned text table, positive block then negative block.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .positive
            .iter()
            .chain(&self.negative)
            .map(|(t, _, _)| t.len())
            .max()
            .unwrap_or(5)
            .max(5);
        out.push_str(&format!("class: {}\n", self.label));
        out.push_str(&format!("{:<width$}  {:>12}  {:>6}\n", "token", "mean_phi", "count"));
        for (tok, phi, n) in self.positive.iter().chain(&self.negative) {
            out.push_str(&format!("{tok:<width$}  {phi:>12.6}  {n:>6}\n"));
        }
        out
    }
}

/// Attribution settings for dataset-level reports.
#[derive(Clone, Copy, Debug)]
pub struct ClassReportConfig {
    pub top_k: usize,
    /// Permutations for examples too long for exact enumeration.
    pub n_perm: usize,
    pub seed: u64,
    pub mode: AbsentMode,
}

impl Default for ClassReportConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            n_perm: 200,
            seed: 42,
            mode: AbsentMode::Mask,
        }
    }
}

/// Ranks vocabulary tokens by their mean Shapley value for `label` across
/// the dataset. Exact attribution where the example is short enough,
/// sampled otherwise.
pub fn class_report(
    model: &Model,
    dataset: &Dataset,
    label: &str,
    cfg: &ClassReportConfig,
) -> Result<ClassReport, ExplainError> {
    let mut sums: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for (i, ex) in dataset.examples.iter().enumerate() {
        let vf = ModelValue::new(model, &ex.text, label, cfg.mode)?;
        if vf.num_players() == 0 {
            continue;
        }
        let (phi, _, _) = if vf.num_players() <= EXACT_TOKEN_LIMIT {
            shapley_exact_over(&vf)?
        } else {
            shapley_sampled_over(&vf, cfg.n_perm, cfg.seed ^ i as u64)?
        };
        for (tok, p) in vf.tokens().into_iter().zip(phi) {
            let entry = sums.entry(tok).or_insert((0.0, 0));
            entry.0 += p;
            entry.1 += 1;
        }
    }
    let mut means: Vec<(String, f64, usize)> = sums
        .into_iter()
        .map(|(tok, (sum, count))| (tok, sum / count as f64, count))
        .collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1));
    let positive: Vec<_> = means
        .iter()
        .filter(|(_, phi, _)| *phi > 0.0)
        .take(cfg.top_k)
        .cloned()
        .collect();
    let mut negative: Vec<_> = means
        .iter()
        .rev()
        .filter(|(_, phi, _)| *phi < 0.0)
        .take(cfg.top_k)
        .cloned()
        .collect();
    negative.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(ClassReport {
        label: label.to_string(),
        positive,
        negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Synthetic game with explicit values for every coalition.
    struct TableGame {
        n: usize,
        values: Vec<f64>,
    }

    impl CoalitionValue for TableGame {
        fn num_players(&self) -> usize {
            self.n
        }
        fn value(&self, subset: u64) -> f64 {
            self.values[subset as usize]
        }
    }

    /// Additive game v(S) = Σ_{i∈S} w_i.
    struct AdditiveGame {
        weights: Vec<f64>,
    }

    impl CoalitionValue for AdditiveGame {
        fn num_players(&self) -> usize {
            self.weights.len()
        }
        fn value(&self, subset: u64) -> f64 {
            self.weights
                .iter()
                .enumerate()
                .filter(|(i, _)| subset & (1 << i) != 0)
                .map(|(_, w)| w)
                .sum()
        }
    }

    #[test]
    fn two_player_hand_computation() {
        // v(∅)=0.1, v({1})=0.4, v({2})=0.3, v({1,2})=0.9 → φ = (0.45, 0.35)
        let game = TableGame {
            n: 2,
            values: vec![0.1, 0.4, 0.3, 0.9],
        };
        let (phi, v0, v3) = shapley_exact_over(&game).unwrap();
        assert!((phi[0] - 0.45).abs() < 1e-12);
        assert!((phi[1] - 0.35).abs() < 1e-12);
        assert_eq!(v0, 0.1);
        assert_eq!(v3, 0.9);
    }

    #[test]
    fn additive_game_recovers_weights() {
        let game = AdditiveGame {
            weights: vec![0.2, -0.1, 0.35, 0.05],
        };
        let (phi, _, _) = shapley_exact_over(&game).unwrap();
        for (p, w) in phi.iter().zip(&game.weights) {
            assert!((p - w).abs() < 1e-12);
        }
    }

    #[test]
    fn dummy_player_gets_zero() {
        // player 2 never changes the value
        let game = AdditiveGame {
            weights: vec![0.4, 0.3, 0.0],
        };
        let (phi, _, _) = shapley_exact_over(&game).unwrap();
        assert!(phi[2].abs() < 1e-12);
    }

    #[test]
    fn efficiency_holds_on_random_games() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = rng.random_range(2..=8);
            let values: Vec<f64> = (0..1u64 << n).map(|_| rng.random::<f64>()).collect();
            let game = TableGame { n, values };
            let (phi, v0, vf) = shapley_exact_over(&game).unwrap();
            let total: f64 = phi.iter().sum();
            assert!(
                (total - (vf - v0)).abs() < 1e-9,
                "efficiency residual {}",
                (total - (vf - v0)).abs()
            );
        }
    }

    #[test]
    fn exact_refuses_large_instances() {
        let game = AdditiveGame {
            weights: vec![0.1; 13],
        };
        assert!(matches!(
            shapley_exact_over(&game),
            Err(ExplainError::TooManyTokens { n: 13, .. })
        ));
    }

    #[test]
    fn sampled_matches_exact_on_small_instance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 8;
        let values: Vec<f64> = (0..1u64 << n).map(|_| rng.random::<f64>()).collect();
        let game = TableGame { n, values };
        let (exact, _, _) = shapley_exact_over(&game).unwrap();
        let (sampled, _, _) = shapley_sampled_over(&game, 5_000, 3).unwrap();
        for (e, s) in exact.iter().zip(&sampled) {
            assert!((e - s).abs() < 0.02, "exact {e} vs sampled {s}");
        }
    }

    #[test]
    fn sampled_is_reproducible() {
        let game = AdditiveGame {
            weights: vec![0.3, 0.1, -0.2, 0.4],
        };
        let (a, _, _) = shapley_sampled_over(&game, 50, 5).unwrap();
        let (b, _, _) = shapley_sampled_over(&game, 50, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_permutations_of_tiny_instance_equal_exact() {
        // n=3: any number of sampled permutations of an additive game is
        // exact; for a general game, enough samples of all 3! orderings
        // converge. Verify the additive case exactly.
        let game = AdditiveGame {
            weights: vec![0.5, -0.25, 0.125],
        };
        let (exact, _, _) = shapley_exact_over(&game).unwrap();
        let (sampled, _, _) = shapley_sampled_over(&game, 6, 11).unwrap();
        for (e, s) in exact.iter().zip(&sampled) {
            assert!((e - s).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_permutations_rejected() {
        let game = AdditiveGame {
            weights: vec![0.5],
        };
        assert!(matches!(
            shapley_sampled_over(&game, 0, 1),
            Err(ExplainError::ZeroPermutations)
        ));
    }
}
