//! The two classification heads: stacked fully-connected layers and
//! projected attention. Both consume encoder hidden states and produce raw
//! logits per label; the sigmoid lives in the loss/prediction stage so the
//! loss can use the fused log-sigmoid form.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::NUM_LABELS;
use crate::encoder::{cls_pool, multi_head_attention, EncoderError, Mode};
use crate::tensor::{NamedTensors, NamedVars, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("invalid head config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Stacked fully-connected head: l linear layers of width c, each followed
/// by ReLU and dropout, then a final linear layer to the label count.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FcHeadConfig {
    pub num_layers: usize,
    pub classifier_size: usize,
    pub dropout_p: f64,
    pub num_labels: usize,
}

impl Default for FcHeadConfig {
    fn default() -> Self {
        Self {
            num_layers: 1,
            classifier_size: 32,
            dropout_p: 0.1,
            num_labels: NUM_LABELS,
        }
    }
}

/// Projected-attention head: a linear projection from hidden size to the
/// attention dimension d, multi-head self-attention with k heads over the
/// projected sequence (PAD masked), then a linear layer from the position-0
/// output to the label count.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProjAttHeadConfig {
    pub attention_dim: usize,
    pub num_heads: usize,
    pub num_labels: usize,
}

impl Default for ProjAttHeadConfig {
    fn default() -> Self {
        Self {
            attention_dim: 16,
            num_heads: 1,
            num_labels: NUM_LABELS,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadConfig {
    Fc(FcHeadConfig),
    ProjAtt(ProjAttHeadConfig),
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        match self {
            HeadConfig::Fc(cfg) => {
                if cfg.num_layers < 1 {
                    return Err(HeadError::BadConfig("fc head needs at least one layer".into()));
                }
                if cfg.classifier_size < 1 {
                    return Err(HeadError::BadConfig("classifier_size must be positive".into()));
                }
                if !(0.0..=1.0).contains(&cfg.dropout_p) {
                    return Err(HeadError::BadConfig(format!(
                        "dropout_p {} outside [0, 1]",
                        cfg.dropout_p
                    )));
                }
            }
            HeadConfig::ProjAtt(cfg) => {
                if cfg.attention_dim == 0 || cfg.num_heads == 0 {
                    return Err(HeadError::BadConfig("zero-sized attention".into()));
                }
                if cfg.attention_dim % cfg.num_heads != 0 {
                    return Err(HeadError::BadConfig(format!(
                        "attention_dim {} not divisible by num_heads {}",
                        cfg.attention_dim, cfg.num_heads
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        match self {
            HeadConfig::Fc(c) => c.num_labels,
            HeadConfig::ProjAtt(c) => c.num_labels,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadConfig::Fc(_) => "fc",
            HeadConfig::ProjAtt(_) => "projatt",
        }
    }
}

/// Head weights, initialized like the encoder from N(0, 0.02²).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParameters(pub NamedTensors);

const INIT_STD: f64 = 0.02;

impl HeadParameters {
    pub fn init(cfg: &HeadConfig, hidden_size: usize, seed: u64) -> Result<Self, HeadError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NamedTensors::new();
        let mut randn = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);
        match cfg {
            HeadConfig::Fc(cfg) => {
                let mut input = hidden_size;
                for j in 0..cfg.num_layers {
                    p.insert(format!("head.fc.layer{j}.w"), randn(&[input, cfg.classifier_size]));
                    p.insert(format!("head.fc.layer{j}.b"), randn(&[cfg.classifier_size]));
                    input = cfg.classifier_size;
                }
                p.insert("head.fc.out.w", randn(&[input, cfg.num_labels]));
                p.insert("head.fc.out.b", randn(&[cfg.num_labels]));
            }
            HeadConfig::ProjAtt(cfg) => {
                let d = cfg.attention_dim;
                p.insert("head.projatt.proj.w", randn(&[hidden_size, d]));
                p.insert("head.projatt.proj.b", randn(&[d]));
                for part in ["wq", "wk", "wv", "wo"] {
                    p.insert(format!("head.projatt.attn.{part}"), randn(&[d, d]));
                }
                for part in ["bq", "bk", "bv", "bo"] {
                    p.insert(format!("head.projatt.attn.{part}"), randn(&[d]));
                }
                p.insert("head.projatt.out.w", randn(&[d, cfg.num_labels]));
                p.insert("head.projatt.out.b", randn(&[cfg.num_labels]));
            }
        }
        Ok(Self(p))
    }
}

/// Exact trainable scalar count of a constructed head.
pub fn count_parameters(params: &HeadParameters) -> usize {
    params.0.scalar_count()
}

/// Logits (B, num_labels) through the fully-connected head.
pub fn fc_head_forward(
    vars: &NamedVars,
    cfg: &FcHeadConfig,
    pooled: &Var,
    mode: Mode,
) -> Result<Var, HeadError> {
    let mut x = pooled.clone();
    for j in 0..cfg.num_layers {
        x = x
            .matmul(vars.get(&format!("head.fc.layer{j}.w")))?
            .add(vars.get(&format!("head.fc.layer{j}.b")))?
            .relu()
            .dropout(cfg.dropout_p, head_dropout_key(mode, j as u64), is_training(mode))?;
    }
    Ok(x.matmul(vars.get("head.fc.out.w"))?.add(vars.get("head.fc.out.b"))?)
}

/// Logits (B, num_labels) through the projected-attention head. Consumes
/// the full hidden states; attention is over the projected sequence with
/// PAD keys masked, and the classifier reads position 0.
pub fn proj_att_head_forward(
    vars: &NamedVars,
    cfg: &ProjAttHeadConfig,
    hidden: &Var,
    additive_mask: &Var,
) -> Result<Var, HeadError> {
    let [b, l, h] = hidden.shape() else {
        return Err(HeadError::Tensor(TensorError::BadShape {
            op: "proj_att_head_forward",
            shape: hidden.shape().to_vec(),
        }));
    };
    let (b, l, h) = (*b, *l, *h);
    let d = cfg.attention_dim;
    let projected = hidden
        .reshape(&[b * l, h])?
        .matmul(vars.get("head.projatt.proj.w"))?
        .add(vars.get("head.projatt.proj.b"))?
        .reshape(&[b, l, d])?;
    let attended = multi_head_attention(vars, "head.projatt.attn", &projected, additive_mask, cfg.num_heads)?;
    let first = attended.slice_mid(0, 1)?.reshape(&[b, d])?;
    Ok(first
        .matmul(vars.get("head.projatt.out.w"))?
        .add(vars.get("head.projatt.out.b"))?)
}

fn head_dropout_key(mode: Mode, index: u64) -> crate::tensor::DropoutKey {
    // head dropout streams live far away from the encoder's layer indices
    match mode {
        Mode::Train { seed, step } => crate::tensor::DropoutKey {
            seed,
            layer: 10_000 + index,
            step,
        },
        Mode::Eval => crate::tensor::DropoutKey {
            seed: 0,
            layer: 10_000 + index,
            step: 0,
        },
    }
}

fn is_training(mode: Mode) -> bool {
    matches!(mode, Mode::Train { .. })
}

/// One interface for both heads: full hidden states in, logits out. The fc
/// head pools [CLS] internally; projected attention uses the whole
/// sequence.
pub fn head_forward(
    cfg: &HeadConfig,
    vars: &NamedVars,
    hidden: &Var,
    additive_mask: &Var,
    mode: Mode,
) -> Result<Var, HeadError> {
    match cfg {
        HeadConfig::Fc(fc) => {
            let pooled = cls_pool(hidden)?;
            fc_head_forward(vars, fc, &pooled, mode)
        }
        HeadConfig::ProjAtt(pa) => proj_att_head_forward(vars, pa, hidden, additive_mask),
    }
}
