//! Optimizer, MLM continued pre-training, and multi-label fine-tuning.
//!
//! Training is fully deterministic: batch order comes from a per-epoch seed
//! derived from (global seed, epoch), masking from (seed, epoch, example),
//! dropout from (seed, layer, step). The same (seed, config, data) triple
//! reproduces checkpoints bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, LabelSet, TokenSequence, Vocabulary, MASK_ID, NUM_LABELS};
use crate::encoder::{encode_forward, mlm_logits_at, EncodedBatch, EncoderError, Mode};
use crate::heads::{head_forward, HeadError};
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::model::{batch_additive_mask, Model, ModelError};
use crate::tensor::{mix64, NamedTensors, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("config mode is {found:?} but this operation requires {expected:?}")]
    WrongMode {
        expected: TrainMode,
        found: TrainMode,
    },
    #[error("masking probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("non-finite gradient in parameter {0:?}; aborting")]
    NanGradient(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

/// Hyperparameters for one training run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out fraction for the pre-training eval loss.
    pub eval_fraction: f64,
    /// Masking probability for the MLM objective.
    pub mask_prob: f64,
}

impl TrainConfig {
    /// Published pre-training regime: 50 epochs, lr 2e-5, weight decay
    /// 0.01, 15% masking.
    pub fn pretrain() -> Self {
        Self {
            mode: TrainMode::Pretrain,
            epochs: 50,
            lr: 2e-5,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 42,
            eval_fraction: 0.1,
            mask_prob: 0.15,
        }
    }

    /// Published fine-tuning regime: 30 epochs, lr 2e-5, weight decay
    /// 0.01, batch size 32.
    pub fn finetune() -> Self {
        Self {
            mode: TrainMode::Finetune,
            epochs: 30,
            lr: 2e-5,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 42,
            eval_fraction: 0.0,
            mask_prob: 0.15,
        }
    }
}

// ---- AdamW ----

/// Decoupled-weight-decay Adam. Decay is applied to the parameter before
/// the moment update; moments are bias-corrected.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: std::collections::BTreeMap<String, (Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Default::default(),
        }
    }
}

/// One AdamW step over every named parameter.
pub fn adamw_step(
    params: &mut NamedTensors,
    grads: &NamedTensors,
    state: &mut OptimizerState,
) -> Result<(), TrainError> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(TrainError::NanGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        m.zip_update(g, |m, g| state.beta1 * m + (1.0 - state.beta1) * g);
        v.zip_update(g, |v, g| state.beta2 * v + (1.0 - state.beta2) * g * g);
        // decoupled decay first, then the Adam update
        p.update(|w| w * (1.0 - state.lr * state.weight_decay));
        let (lr, eps) = (state.lr, state.eps);
        let mv: Vec<f64> = m
            .data()
            .iter()
            .zip(v.data())
            .map(|(&m, &v)| lr * (m / bc1) / ((v / bc2).sqrt() + eps))
            .collect();
        let upd = Tensor::from_vec(g.shape(), mv).expect("moment shapes match");
        p.zip_update(&upd, |w, u| w - u);
    }
    Ok(())
}

// ---- masking ----

/// Result of corrupting one sequence for the MLM objective.
#[derive(Clone, Debug)]
pub struct MaskingOutcome {
    /// Input ids after corruption.
    pub corrupted: TokenSequence,
    /// Per-position selection flags (specials are never selected).
    pub selected: Vec<bool>,
    /// Original ids at the selected positions, in position order.
    pub targets: Vec<usize>,
}

impl MaskingOutcome {
    pub fn selected_positions(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}

/// Fractions of selected positions replaced by MASK / a random token /
/// kept unchanged. The remainder after mask+random is kept.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorruptionSplit {
    pub mask_frac: f64,
    pub random_frac: f64,
}

impl Default for CorruptionSplit {
    fn default() -> Self {
        // standard BERT recipe
        Self {
            mask_frac: 0.8,
            random_frac: 0.1,
        }
    }
}

/// Selects each non-special position independently with probability `p`;
/// selected positions are 80% MASK, 10% random vocabulary token, 10%
/// unchanged (configurable via [`CorruptionSplit`]).
pub fn mask_tokens(
    seq: &TokenSequence,
    p: f64,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<MaskingOutcome, TrainError> {
    mask_tokens_with(seq, p, seed, vocab, CorruptionSplit::default())
}

pub fn mask_tokens_with(
    seq: &TokenSequence,
    p: f64,
    seed: u64,
    vocab: &Vocabulary,
    split: CorruptionSplit,
) -> Result<MaskingOutcome, TrainError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TrainError::BadProbability(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corrupted = seq.clone();
    let mut selected = vec![false; seq.len()];
    let mut targets = Vec::new();
    let content_ids = vocab.content_id_range();
    for pos in seq.content_positions() {
        if rng.random::<f64>() >= p {
            continue;
        }
        selected[pos] = true;
        targets.push(seq.ids()[pos]);
        let roll: f64 = rng.random();
        let replacement = if roll < split.mask_frac {
            MASK_ID
        } else if roll < split.mask_frac + split.random_frac && !content_ids.is_empty() {
            rng.random_range(content_ids.clone())
        } else {
            seq.ids()[pos]
        };
        corrupted = corrupted.with_id_at(pos, replacement);
    }
    Ok(MaskingOutcome {
        corrupted,
        selected,
        targets,
    })
}

// ---- curves ----

/// One logged scalar: written to CSV as epoch, step, split, metric, value.
#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: u64,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,step,split,metric,value\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.epoch, p.step, p.split, p.metric, p.value
        ));
    }
    out
}

// ---- pre-training ----

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
}

/// Continued MLM pre-training on the text field only. Labels are ignored.
/// Per-epoch train and eval losses are logged; the eval split uses fixed
/// masks so its loss is comparable across epochs.
pub fn pretrain(
    model: &mut Model,
    corpus: &Dataset,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    if cfg.mode != TrainMode::Pretrain {
        return Err(TrainError::WrongMode {
            expected: TrainMode::Pretrain,
            found: cfg.mode,
        });
    }
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (train_ds, eval_ds) = corpus.split(cfg.eval_fraction, mix64(cfg.seed ^ 0x5e11));
    let encode_all = |ds: &Dataset| -> Result<Vec<TokenSequence>, TrainError> {
        ds.examples
            .iter()
            .map(|ex| Ok(model.encode_text(&ex.text)?))
            .collect()
    };
    let train_seqs = encode_all(&train_ds)?;
    let eval_seqs = encode_all(&eval_ds)?;
    if train_seqs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }

    // fixed eval masks, retrying the derived seed until at least one
    // position is selected so the eval loss is always defined
    let eval_masked: Vec<MaskingOutcome> = eval_seqs
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut salt = 0u64;
            loop {
                let seed = mix64(cfg.seed ^ mix64(0xe7a1 ^ i as u64) ^ salt);
                let outcome = mask_tokens(seq, cfg.mask_prob, seed, &model.vocab)?;
                if !outcome.targets.is_empty() || seq.content_len() == 0 {
                    return Ok(outcome);
                }
                salt += 1;
            }
        })
        .collect::<Result<_, TrainError>>()?;

    let mut opt = OptimizerState::new(cfg.lr, cfg.weight_decay);
    let mut curve = Vec::new();
    let mut step: u64 = 0;
    let mut initial_train_loss = f64::NAN;
    let mut final_train_loss = f64::NAN;
    let mut final_eval_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed) ^ epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let masked: Vec<MaskingOutcome> = chunk
                .iter()
                .map(|&i| {
                    mask_tokens(
                        &train_seqs[i],
                        cfg.mask_prob,
                        mix64(cfg.seed ^ mix64(epoch as u64) ^ (i as u64)),
                        &model.vocab,
                    )
                })
                .collect::<Result<_, TrainError>>()?;
            let Some((loss, grads)) = mlm_batch_loss(
                model,
                &masked,
                Mode::Train {
                    seed: cfg.seed,
                    step,
                },
                true,
            )?
            else {
                continue; // nothing selected in this batch
            };
            adamw_step(&mut model.params, &grads, &mut opt)?;
            epoch_loss_sum += loss;
            epoch_batches += 1;
            step += 1;
        }
        let train_loss = epoch_loss_sum / epoch_batches.max(1) as f64;
        if epoch == 0 {
            initial_train_loss = train_loss;
        }
        final_train_loss = train_loss;
        curve.push(CurvePoint {
            epoch,
            step,
            split: "train",
            metric: "mlm_loss",
            value: train_loss,
        });

        if !eval_masked.is_empty() {
            let mut eval_sum = 0.0;
            let mut eval_batches = 0usize;
            for chunk in eval_masked.chunks(cfg.batch_size) {
                if let Some((loss, _)) = mlm_batch_loss(model, chunk, Mode::Eval, false)? {
                    eval_sum += loss;
                    eval_batches += 1;
                }
            }
            final_eval_loss = eval_sum / eval_batches.max(1) as f64;
            curve.push(CurvePoint {
                epoch,
                step,
                split: "eval",
                metric: "mlm_loss",
                value: final_eval_loss,
            });
        }
    }

    Ok(PretrainOutcome {
        curve,
        initial_train_loss,
        final_train_loss,
        final_eval_loss,
    })
}

/// Masked cross-entropy over one batch; optionally with gradients.
fn mlm_batch_loss(
    model: &Model,
    masked: &[MaskingOutcome],
    mode: Mode,
    with_grads: bool,
) -> Result<Option<(f64, NamedTensors)>, TrainError> {
    let seqs: Vec<TokenSequence> = masked.iter().map(|m| m.corrupted.clone()).collect();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let seq_len = seqs.first().map(|s| s.len()).unwrap_or(0);
    for (b, m) in masked.iter().enumerate() {
        for (pos, &sel) in m.selected.iter().enumerate() {
            if sel {
                positions.push(b * seq_len + pos);
            }
        }
        targets.extend_from_slice(&m.targets);
    }
    if positions.is_empty() {
        return Ok(None);
    }
    let batch = EncodedBatch::from_sequences(&seqs)?;
    if with_grads {
        let tape = crate::tensor::Tape::new();
        let vars = model.params.tracked(&tape);
        let hidden = encode_forward(&vars, &model.encoder_config, &batch, mode)?;
        let logits = mlm_logits_at(&vars, &model.encoder_config, &hidden, &positions)?;
        let loss = logits.cross_entropy_rows(&targets)?;
        let grads = vars.gradients(&loss.backward()?);
        Ok(Some((loss.value().item(), grads)))
    } else {
        let vars = model.params.constants();
        let hidden = encode_forward(&vars, &model.encoder_config, &batch, mode)?;
        let logits = mlm_logits_at(&vars, &model.encoder_config, &hidden, &positions)?;
        let loss = logits.cross_entropy_rows(&targets)?;
        Ok(Some((loss.value().item(), NamedTensors::new())))
    }
}

// ---- fine-tuning ----

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub curve: Vec<CurvePoint>,
    /// Epoch whose dev metrics were best (micro F1, earlier epoch wins
    /// ties).
    pub best_epoch: usize,
    /// Parameter snapshot at the best epoch.
    pub best_params: NamedTensors,
    pub best_dev: MetricsReport,
    pub final_dev: MetricsReport,
}

/// Supervised fine-tuning with per-label binary cross-entropy on sigmoid
/// probabilities. Logs per-epoch dev metrics and retains the best-dev
/// checkpoint; the model is left holding the final-epoch parameters.
pub fn finetune(
    model: &mut Model,
    train: &Dataset,
    dev: &Dataset,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, TrainError> {
    if cfg.mode != TrainMode::Finetune {
        return Err(TrainError::WrongMode {
            expected: TrainMode::Finetune,
            found: cfg.mode,
        });
    }
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if model.head_config.num_labels() != NUM_LABELS {
        return Err(TrainError::Model(ModelError::LabelUniverse {
            head: model.head_config.num_labels(),
            universe: NUM_LABELS,
        }));
    }
    let train_seqs: Vec<TokenSequence> = train
        .examples
        .iter()
        .map(|ex| model.encode_text(&ex.text))
        .collect::<Result<_, ModelError>>()?;
    let train_targets: Vec<[f64; NUM_LABELS]> = train
        .examples
        .iter()
        .map(|ex| ex.labels.indicator())
        .collect();
    let dev_seqs: Vec<TokenSequence> = dev
        .examples
        .iter()
        .map(|ex| model.encode_text(&ex.text))
        .collect::<Result<_, ModelError>>()?;
    let dev_gold: Vec<LabelSet> = dev.examples.iter().map(|ex| ex.labels).collect();

    let mut opt = OptimizerState::new(cfg.lr, cfg.weight_decay);
    let mut curve = Vec::new();
    let mut step: u64 = 0;
    let mut best: Option<(usize, f64, NamedTensors, MetricsReport)> = None;
    let mut final_dev = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed) ^ epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<TokenSequence> =
                chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            let mut targets = Vec::with_capacity(chunk.len() * NUM_LABELS);
            for &i in chunk {
                targets.extend_from_slice(&train_targets[i]);
            }
            let targets = Tensor::from_vec(&[chunk.len(), NUM_LABELS], targets)?;

            let batch = EncodedBatch::from_sequences(&seqs)?;
            let tape = crate::tensor::Tape::new();
            let vars = model.params.tracked(&tape);
            let mode = Mode::Train {
                seed: cfg.seed,
                step,
            };
            let hidden = encode_forward(&vars, &model.encoder_config, &batch, mode)?;
            let mask = Var::constant(batch_additive_mask(&batch));
            let logits = head_forward(&model.head_config, &vars, &hidden, &mask, mode)?;
            let loss = logits.bce_with_logits(&targets)?;
            let grads = vars.gradients(&loss.backward()?);
            adamw_step(&mut model.params, &grads, &mut opt)?;
            loss_sum += loss.value().item();
            batches += 1;
            step += 1;
        }
        curve.push(CurvePoint {
            epoch,
            step,
            split: "train",
            metric: "bce_loss",
            value: loss_sum / batches.max(1) as f64,
        });

        let preds = model.predict(&dev_seqs, 0.5)?;
        let report = evaluate(&preds, &dev_gold)?;
        for (metric, value) in [
            ("subset_accuracy", report.subset_accuracy),
            ("micro_f1", report.micro_f1),
            ("macro_f1", report.macro_f1),
            ("samples_f1", report.samples_f1),
        ] {
            curve.push(CurvePoint {
                epoch,
                step,
                split: "dev",
                metric,
                value,
            });
        }
        let is_better = best
            .as_ref()
            .map(|(_, f1, _, _)| report.micro_f1 > *f1)
            .unwrap_or(true);
        if is_better {
            best = Some((epoch, report.micro_f1, model.params.clone(), report.clone()));
        }
        final_dev = Some(report);
    }

    let (best_epoch, _, best_params, best_dev) = best.expect("at least one epoch ran");
    Ok(FinetuneOutcome {
        curve,
        best_epoch,
        best_params,
        best_dev,
        final_dev: final_dev.expect("at least one epoch ran"),
    })
}

/// Thresholded prediction; see [`Model::predict`]. A label is on iff
/// sigmoid(logit) ≥ threshold.
pub fn predict(
    model: &Model,
    seqs: &[TokenSequence],
    threshold: f64,
) -> Result<Vec<LabelSet>, TrainError> {
    Ok(model.predict(seqs, threshold)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Example, Provenance};

    fn vocab_from(texts: &[&str]) -> (Dataset, Vocabulary) {
        let ds = Dataset::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Example {
                    id: format!("e{i}"),
                    text: t.to_string(),
                    labels: LabelSet::EMPTY,
                })
                .collect(),
            Provenance::Original,
        )
        .unwrap();
        let vocab = Vocabulary::build(&ds, 1).unwrap();
        (ds, vocab)
    }

    fn one_param(value: f64) -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn adamw_first_step_hand_check() {
        // w=1, g=1, lr=0.1, eps=0, wd=0 → bias-corrected m̂=v̂=1 → w=0.9
        let mut params = one_param(1.0);
        let grads = one_param(1.0);
        let mut st = OptimizerState::new(0.1, 0.0);
        st.eps = 0.0;
        adamw_step(&mut params, &grads, &mut st).unwrap();
        assert!((params.get("w").item() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn adamw_decay_only_hand_check() {
        // g=0, wd=0.01, lr=0.1: one step from w=1.0 → 0.999
        let mut params = one_param(1.0);
        let grads = one_param(0.0);
        let mut st = OptimizerState::new(0.1, 0.01);
        adamw_step(&mut params, &grads, &mut st).unwrap();
        assert!((params.get("w").item() - 0.999).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_identity() {
        let mut params = one_param(1.5);
        let grads = one_param(0.0);
        let mut st = OptimizerState::new(0.1, 0.0);
        adamw_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params.get("w").item(), 1.5);
    }

    #[test]
    fn adamw_zero_lr_is_identity() {
        let mut params = one_param(2.5);
        let grads = one_param(0.7);
        let mut st = OptimizerState::new(0.0, 0.01);
        adamw_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params.get("w").item(), 2.5);
    }

    #[test]
    fn adamw_rejects_nan_gradients() {
        let mut params = one_param(1.0);
        let grads = one_param(f64::NAN);
        let mut st = OptimizerState::new(0.1, 0.0);
        assert!(matches!(
            adamw_step(&mut params, &grads, &mut st),
            Err(TrainError::NanGradient(_))
        ));
    }

    #[test]
    fn masking_edge_probabilities() {
        let (_, vocab) = vocab_from(&["a b c d e f g h"]);
        let seq = crate::data::encode("a b c d e f g h", &vocab, 12).unwrap();

        let none = mask_tokens(&seq, 0.0, 1, &vocab).unwrap();
        assert!(none.targets.is_empty());
        assert_eq!(none.corrupted, seq);

        let all = mask_tokens(&seq, 1.0, 1, &vocab).unwrap();
        assert_eq!(all.targets.len(), seq.content_len());

        assert!(mask_tokens(&seq, 1.5, 1, &vocab).is_err());
    }

    #[test]
    fn masking_never_touches_specials() {
        let (_, vocab) = vocab_from(&["a b c"]);
        let seq = crate::data::encode("a b c", &vocab, 8).unwrap();
        for seed in 0..2000 {
            let m = mask_tokens(&seq, 1.0, seed, &vocab).unwrap();
            assert!(!m.selected[0], "CLS selected at seed {seed}");
            for pos in seq.content_len() + 1..seq.len() {
                assert!(!m.selected[pos], "SEP/PAD selected at seed {seed}");
            }
            // corruption must never write special ids other than MASK
            for pos in seq.content_positions() {
                let id = m.corrupted.ids()[pos];
                assert!(id == MASK_ID || !Vocabulary::is_special(id));
            }
        }
    }

    #[test]
    fn masking_rate_close_to_p() {
        let (_, vocab) = vocab_from(&["a b c d e f g h i j"]);
        let seq = crate::data::encode("a b c d e f g h i j", &vocab, 16).unwrap();
        let mut selected = 0usize;
        let mut total = 0usize;
        for seed in 0..1500 {
            let m = mask_tokens(&seq, 0.15, seed, &vocab).unwrap();
            selected += m.targets.len();
            total += seq.content_len();
        }
        let rate = selected as f64 / total as f64;
        assert!(
            (rate - 0.15).abs() < 0.01,
            "selection rate {rate} outside 15% ± 1pp over {total} positions"
        );
    }

    #[test]
    fn curve_csv_format() {
        let points = vec![CurvePoint {
            epoch: 0,
            step: 4,
            split: "train",
            metric: "mlm_loss",
            value: 2.5,
        }];
        assert_eq!(
            curve_csv(&points),
            "epoch,step,split,metric,value\n0,4,train,mlm_loss,2.5\n"
        );
    }

    #[test]
    fn pretrain_rejects_wrong_mode_and_empty_corpus() {
        let (ds, vocab) = vocab_from(&["a b", "c d"]);
        let mut enc = crate::encoder::EncoderConfig::mini(vocab.len());
        enc.hidden_size = 8;
        enc.num_layers = 1;
        enc.ff_size = 16;
        enc.max_len = 6;
        let mut model = Model::new(
            enc,
            crate::heads::HeadConfig::Fc(Default::default()),
            vocab,
            3,
        )
        .unwrap();
        assert!(matches!(
            pretrain(&mut model, &ds, &TrainConfig::finetune()),
            Err(TrainError::WrongMode { .. })
        ));
        let empty = Dataset::new(vec![], Provenance::Original).unwrap();
        assert!(matches!(
            pretrain(&mut model, &empty, &TrainConfig::pretrain()),
            Err(TrainError::EmptyCorpus)
        ));
    }
}
