//! The full model: encoder weights, head weights, configs and vocabulary,
//! plus checkpoint (de)serialization and eval-mode inference helpers.
//!
//! Checkpoints are a versioned JSON document: configs and vocabulary in the
//! header, every tensor as `name → {shape, values}`. Serialization order is
//! deterministic, so identical training runs produce byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{encode, LabelSet, TokenSequence, Vocabulary, NUM_LABELS};
use crate::encoder::{
    encode_forward, EncodedBatch, EncoderConfig, EncoderError, EncoderParameters, Mode,
};
use crate::heads::{head_forward, HeadConfig, HeadError, HeadParameters};
use crate::tensor::{NamedTensors, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Evaluation batch size; prediction over larger inputs is chunked.
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("head expects {head} labels but the label universe has {universe}")]
    LabelUniverse { head: usize, universe: usize },
}

/// Encoder + head weights with their configs and the vocabulary they were
/// trained against.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder_config: EncoderConfig,
    pub head_config: HeadConfig,
    pub vocab: Vocabulary,
    pub params: NamedTensors,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    encoder: EncoderConfig,
    head: HeadConfig,
    vocab: Vocabulary,
    tensors: NamedTensors,
}

impl Model {
    /// Fresh model with seeded initialization. The encoder config's
    /// vocab_size is overwritten from the vocabulary.
    pub fn new(
        mut encoder_config: EncoderConfig,
        head_config: HeadConfig,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self, ModelError> {
        encoder_config.vocab_size = vocab.len();
        if head_config.num_labels() != NUM_LABELS {
            return Err(ModelError::LabelUniverse {
                head: head_config.num_labels(),
                universe: NUM_LABELS,
            });
        }
        let mut params = EncoderParameters::init(&encoder_config, seed)?.0;
        let head = HeadParameters::init(&head_config, encoder_config.hidden_size, seed ^ 0x9e37)?;
        for (name, t) in head.0.iter() {
            params.insert(name.clone(), t.clone());
        }
        Ok(Self {
            encoder_config,
            head_config,
            vocab,
            params,
        })
    }

    /// Encodes a preprocessed text to the model's fixed length.
    pub fn encode_text(&self, text: &str) -> Result<TokenSequence, ModelError> {
        Ok(encode(text, &self.vocab, self.encoder_config.max_len)?)
    }

    /// Eval-mode classification logits (B, num_labels).
    pub fn logits_eval(&self, seqs: &[TokenSequence]) -> Result<Tensor, ModelError> {
        let batch = EncodedBatch::from_sequences(seqs)?;
        let vars = self.params.constants();
        let hidden = encode_forward(&vars, &self.encoder_config, &batch, Mode::Eval)?;
        let mask = Var::constant(batch_additive_mask(&batch));
        let logits = head_forward(&self.head_config, &vars, &hidden, &mask, Mode::Eval)?;
        Ok(logits.value().clone())
    }

    /// Eval-mode sigmoid probabilities (B, num_labels), chunked internally.
    pub fn probabilities(&self, seqs: &[TokenSequence]) -> Result<Vec<[f64; NUM_LABELS]>, ModelError> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(EVAL_BATCH) {
            let logits = self.logits_eval(chunk)?;
            for row in logits.data().chunks(NUM_LABELS) {
                let mut probs = [0.0; NUM_LABELS];
                for (slot, &z) in probs.iter_mut().zip(row) {
                    *slot = sigmoid(z);
                }
                out.push(probs);
            }
        }
        Ok(out)
    }

    /// Thresholded prediction: a label is on iff sigmoid(logit) ≥ threshold.
    pub fn predict(&self, seqs: &[TokenSequence], threshold: f64) -> Result<Vec<LabelSet>, ModelError> {
        Ok(self
            .probabilities(seqs)?
            .into_iter()
            .map(|probs| {
                let mut ls = LabelSet::EMPTY;
                for (l, &p) in probs.iter().enumerate() {
                    if p >= threshold {
                        ls = ls.with(l);
                    }
                }
                ls
            })
            .collect())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            encoder: self.encoder_config.clone(),
            head: self.head_config.clone(),
            vocab: self.vocab.clone(),
            tensors: self.params.clone(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(json)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Version {
                expected: CHECKPOINT_VERSION,
                found: ck.format_version,
            });
        }
        Ok(Self {
            encoder_config: ck.encoder,
            head_config: ck.head,
            vocab: ck.vocab,
            params: ck.tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Additive PAD mask for a batch, shared by encoder and head attention.
pub fn batch_additive_mask(batch: &EncodedBatch) -> Tensor {
    batch.additive_mask_tensor()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Example, Provenance};
    use crate::heads::FcHeadConfig;

    fn toy_model() -> Model {
        let ds = Dataset::new(
            vec![Example {
                id: "a".into(),
                text: "the cat sat on the mat".into(),
                labels: LabelSet::EMPTY,
            }],
            Provenance::Original,
        )
        .unwrap();
        let vocab = Vocabulary::build(&ds, 1).unwrap();
        let mut enc = EncoderConfig::mini(vocab.len());
        enc.hidden_size = 16;
        enc.ff_size = 32;
        enc.max_len = 8;
        Model::new(
            enc,
            HeadConfig::Fc(FcHeadConfig {
                classifier_size: 8,
                ..FcHeadConfig::default()
            }),
            vocab,
            7,
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = toy_model();
        let json = model.to_json();
        let back = Model::from_json(&json).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.encoder_config, model.encoder_config);
        assert_eq!(back.head_config, model.head_config);
        assert_eq!(back.vocab, model.vocab);
        // deterministic serialization
        assert_eq!(back.to_json(), json);
    }

    #[test]
    fn wrong_version_rejected() {
        let model = toy_model();
        let json = model.to_json().replace("\"format_version\":1", "\"format_version\":9");
        assert!(matches!(
            Model::from_json(&json),
            Err(ModelError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn predict_thresholds() {
        let model = toy_model();
        let seq = model.encode_text("the cat sat").unwrap();
        // untrained logits are near zero → probabilities near 0.5:
        // threshold 1.0 with finite logits must give the empty set
        let empty = model.predict(&[seq.clone()], 1.0).unwrap();
        assert!(empty[0].is_empty());
        // threshold 0.0 turns everything on
        let full = model.predict(&[seq], 0.0).unwrap();
        assert_eq!(full[0].len(), NUM_LABELS);
    }

    #[test]
    fn zero_logits_with_half_threshold_turn_all_labels_on() {
        let mut model = toy_model();
        // zero every parameter: logits collapse to the zero bias
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            let t = model.params.get_mut(&name);
            *t = Tensor::zeros(t.shape());
        }
        let seq = model.encode_text("the cat").unwrap();
        let pred = model.predict(&[seq], 0.5).unwrap();
        assert_eq!(pred[0].len(), NUM_LABELS, "0.5 ≥ 0.5 boundary is inclusive");
    }
}
