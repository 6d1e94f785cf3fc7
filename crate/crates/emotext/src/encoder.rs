//! Mini BERT-style bidirectional encoder with an MLM projection and CLS
//! pooling.
//!
//! Post-layer-norm blocks, learned position embeddings, no token-type
//! embeddings (single-segment task). The MLM projection is untied from the
//! input embedding; tying is available as a config flag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TokenSequence;
use crate::tensor::{DropoutKey, NamedTensors, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("sequence length {found} does not match configured max_len {expected}")]
    SequenceLength { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Feed-forward activation. The classification head always uses ReLU; the
/// encoder defaults to GELU following BERT convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_attention_heads: usize,
    pub ff_size: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Reuse the token embedding matrix as the MLM projection.
    #[serde(default)]
    pub tie_mlm_weights: bool,
}

impl EncoderConfig {
    /// Desk-scale default: h=64, 2 layers, 2 heads, ff=128, max_len=64.
    pub fn mini(vocab_size: usize) -> Self {
        Self {
            hidden_size: 64,
            num_layers: 2,
            num_attention_heads: 2,
            ff_size: 128,
            max_len: 64,
            vocab_size,
            dropout_p: 0.1,
            activation: Activation::Gelu,
            tie_mlm_weights: false,
        }
    }

    /// bert-base geometry. Provided as a preset only; nothing here trains
    /// at this size.
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            hidden_size: 768,
            num_layers: 12,
            num_attention_heads: 12,
            ff_size: 3072,
            max_len: 512,
            vocab_size,
            dropout_p: 0.1,
            activation: Activation::Gelu,
            tie_mlm_weights: false,
        }
    }

    /// bert-large / roberta-large geometry, preset only.
    pub fn bert_large(vocab_size: usize) -> Self {
        Self {
            hidden_size: 1024,
            num_layers: 24,
            num_attention_heads: 16,
            ff_size: 4096,
            max_len: 512,
            vocab_size,
            dropout_p: 0.1,
            activation: Activation::Gelu,
            tie_mlm_weights: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hidden_size == 0 || self.num_layers == 0 || self.ff_size == 0 {
            return Err(EncoderError::BadConfig("zero-sized dimension".into()));
        }
        if self.hidden_size % self.num_attention_heads != 0 {
            return Err(EncoderError::BadConfig(format!(
                "hidden_size {} not divisible by num_attention_heads {}",
                self.hidden_size, self.num_attention_heads
            )));
        }
        if self.max_len < 3 {
            return Err(EncoderError::BadConfig(format!(
                "max_len {} below minimum of 3",
                self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(EncoderError::BadConfig(format!(
                "dropout_p {} outside [0, 1]",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Encoder weights. Everything is initialized from N(0, 0.02²) except
/// layer-norm scales (1) and shifts (0).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParameters(pub NamedTensors);

const INIT_STD: f64 = 0.02;

impl EncoderParameters {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_size;
        let mut p = NamedTensors::new();
        let mut randn = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);
        p.insert("embed.token", randn(&[cfg.vocab_size, h]));
        p.insert("embed.pos", randn(&[cfg.max_len, h]));
        for i in 0..cfg.num_layers {
            for part in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("layer{i}.attn.{part}"), randn(&[h, h]));
            }
            for part in ["bq", "bk", "bv", "bo"] {
                p.insert(format!("layer{i}.attn.{part}"), randn(&[h]));
            }
            p.insert(format!("layer{i}.ln1.scale"), Tensor::filled(&[h], 1.0));
            p.insert(format!("layer{i}.ln1.shift"), Tensor::zeros(&[h]));
            p.insert(format!("layer{i}.ff.w1"), randn(&[h, cfg.ff_size]));
            p.insert(format!("layer{i}.ff.b1"), randn(&[cfg.ff_size]));
            p.insert(format!("layer{i}.ff.w2"), randn(&[cfg.ff_size, h]));
            p.insert(format!("layer{i}.ff.b2"), randn(&[h]));
            p.insert(format!("layer{i}.ln2.scale"), Tensor::filled(&[h], 1.0));
            p.insert(format!("layer{i}.ln2.shift"), Tensor::zeros(&[h]));
        }
        if !cfg.tie_mlm_weights {
            p.insert("mlm.w", randn(&[h, cfg.vocab_size]));
        }
        p.insert("mlm.b", randn(&[cfg.vocab_size]));
        Ok(Self(p))
    }
}

/// Forward-pass mode: training applies dropout keyed by (seed, layer,
/// step); eval is deterministic and records nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64, step: u64 },
    Eval,
}

impl Mode {
    fn dropout_key(&self, layer: u64) -> DropoutKey {
        match *self {
            Mode::Train { seed, step } => DropoutKey { seed, layer, step },
            Mode::Eval => DropoutKey {
                seed: 0,
                layer,
                step: 0,
            },
        }
    }

    fn training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// A batch of equal-length sequences with their attention masks.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    ids: Vec<usize>,
    attend: Vec<bool>,
    batch: usize,
    seq_len: usize,
}

impl EncodedBatch {
    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self, EncoderError> {
        let seq_len = seqs.first().map(TokenSequence::len).unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut attend = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            if s.len() != seq_len {
                return Err(EncoderError::SequenceLength {
                    expected: seq_len,
                    found: s.len(),
                });
            }
            ids.extend_from_slice(s.ids());
            attend.extend(s.attention_mask());
        }
        Ok(Self {
            ids,
            attend,
            batch: seqs.len(),
            seq_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Flat positions (into batch × seq_len) of content tokens.
    pub fn content_flat_positions(&self, seqs: &[TokenSequence]) -> Vec<usize> {
        let mut out = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            for pos in s.content_positions() {
                out.push(b * self.seq_len + pos);
            }
        }
        out
    }

    /// Additive attention mask (B, L, L): 0 where the key position is
    /// attendable, a large negative number at PAD keys so softmax assigns
    /// them exactly zero weight.
    pub fn additive_mask_tensor(&self) -> Tensor {
        const NEG: f64 = -1e30;
        let (b, l) = (self.batch, self.seq_len);
        let mut data = vec![0.0; b * l * l];
        for bi in 0..b {
            let row = &self.attend[bi * l..(bi + 1) * l];
            for q in 0..l {
                for (k, &ok) in row.iter().enumerate() {
                    if !ok {
                        data[bi * l * l + q * l + k] = NEG;
                    }
                }
            }
        }
        Tensor::from_vec(&[b, l, l], data).expect("mask shape")
    }
}

/// Multi-head self-attention over `x` (B, L, h) with the given parameter
/// name prefix; shared by the encoder layers and the projected-attention
/// head. `mask` must be the additive (B, L, L) mask.
pub(crate) fn multi_head_attention(
    vars: &crate::tensor::NamedVars,
    prefix: &str,
    x: &Var,
    mask: &Var,
    num_heads: usize,
) -> Result<Var, TensorError> {
    let [b, l, width] = x.shape() else {
        return Err(TensorError::BadShape {
            op: "multi_head_attention",
            shape: x.shape().to_vec(),
        });
    };
    let (b, l, width) = (*b, *l, *width);
    let head_dim = width / num_heads;
    let flat = x.reshape(&[b * l, width])?;
    let project = |w: &str, bias: &str| -> Result<Var, TensorError> {
        flat.matmul(vars.get(&format!("{prefix}.{w}")))?
            .add(vars.get(&format!("{prefix}.{bias}")))?
            .reshape(&[b, l, width])
    };
    let q = project("wq", "bq")?;
    let k = project("wk", "bk")?;
    let v = project("wv", "bv")?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for j in 0..num_heads {
        let qj = q.slice_last(j * head_dim, head_dim)?;
        let kj = k.slice_last(j * head_dim, head_dim)?;
        let vj = v.slice_last(j * head_dim, head_dim)?;
        let scores = qj.matmul(&kj.transpose_last2()?)?.scale(scale).add(mask)?;
        let probs = scores.softmax_last()?;
        heads.push(probs.matmul(&vj)?);
    }
    let head_refs: Vec<&Var> = heads.iter().collect();
    let merged = Var::concat_last(&head_refs)?;
    merged
        .reshape(&[b * l, width])?
        .matmul(vars.get(&format!("{prefix}.wo")))?
        .add(vars.get(&format!("{prefix}.bo")))?
        .reshape(&[b, l, width])
}

const LN_EPS: f64 = 1e-5;

/// Runs the encoder over a batch, returning hidden states (B, L, h).
/// PAD positions are never attended to.
pub fn encode_forward(
    vars: &crate::tensor::NamedVars,
    cfg: &EncoderConfig,
    batch: &EncodedBatch,
    mode: Mode,
) -> Result<Var, EncoderError> {
    if batch.seq_len() != cfg.max_len {
        return Err(EncoderError::SequenceLength {
            expected: cfg.max_len,
            found: batch.seq_len(),
        });
    }
    let (b, l, h) = (batch.batch_size(), cfg.max_len, cfg.hidden_size);
    let tok = vars.get("embed.token").embedding_lookup(batch.ids())?;
    let pos_ids: Vec<usize> = (0..b * l).map(|i| i % l).collect();
    let pos = vars.get("embed.pos").embedding_lookup(&pos_ids)?;
    let mut x = tok
        .add(&pos)?
        .dropout(cfg.dropout_p, mode.dropout_key(0), mode.training())?;
    let mask = Var::constant(batch.additive_mask_tensor());

    for i in 0..cfg.num_layers {
        let x3 = x.reshape(&[b, l, h])?;
        let attn = multi_head_attention(
            vars,
            &format!("layer{i}.attn"),
            &x3,
            &mask,
            cfg.num_attention_heads,
        )?
        .reshape(&[b * l, h])?
        .dropout(
            cfg.dropout_p,
            mode.dropout_key(1 + 2 * i as u64),
            mode.training(),
        )?;
        x = x
            .add(&attn)?
            .layer_norm_last(LN_EPS)?
            .mul(vars.get(&format!("layer{i}.ln1.scale")))?
            .add(vars.get(&format!("layer{i}.ln1.shift")))?;

        let inner = x
            .matmul(vars.get(&format!("layer{i}.ff.w1")))?
            .add(vars.get(&format!("layer{i}.ff.b1")))?;
        let activated = match cfg.activation {
            Activation::Gelu => inner.gelu(),
            Activation::Relu => inner.relu(),
        };
        let ff = activated
            .matmul(vars.get(&format!("layer{i}.ff.w2")))?
            .add(vars.get(&format!("layer{i}.ff.b2")))?
            .dropout(
                cfg.dropout_p,
                mode.dropout_key(2 + 2 * i as u64),
                mode.training(),
            )?;
        x = x
            .add(&ff)?
            .layer_norm_last(LN_EPS)?
            .mul(vars.get(&format!("layer{i}.ln2.scale")))?
            .add(vars.get(&format!("layer{i}.ln2.shift")))?;
    }
    Ok(x.reshape(&[b, l, h])?)
}

/// Returns the position-0 ([CLS]) vectors, (B, h).
pub fn cls_pool(hidden: &Var) -> Result<Var, EncoderError> {
    let [b, _, h] = hidden.shape() else {
        return Err(EncoderError::Tensor(TensorError::BadShape {
            op: "cls_pool",
            shape: hidden.shape().to_vec(),
        }));
    };
    let (b, h) = (*b, *h);
    Ok(hidden.slice_mid(0, 1)?.reshape(&[b, h])?)
}

fn mlm_projection(vars: &crate::tensor::NamedVars, cfg: &EncoderConfig, rows: &Var) -> Result<Var, TensorError> {
    let w = if cfg.tie_mlm_weights {
        vars.get("embed.token").transpose_last2()?
    } else {
        vars.get("mlm.w").clone()
    };
    rows.matmul(&w)?.add(vars.get("mlm.b"))
}

/// Vocabulary scores for every position, (B, L, vocab).
pub fn mlm_logits(
    vars: &crate::tensor::NamedVars,
    cfg: &EncoderConfig,
    hidden: &Var,
) -> Result<Var, EncoderError> {
    let [b, l, h] = hidden.shape() else {
        return Err(EncoderError::Tensor(TensorError::BadShape {
            op: "mlm_logits",
            shape: hidden.shape().to_vec(),
        }));
    };
    let (b, l, h) = (*b, *l, *h);
    let flat = hidden.reshape(&[b * l, h])?;
    Ok(mlm_projection(vars, cfg, &flat)?.reshape(&[b, l, cfg.vocab_size])?)
}

/// Vocabulary scores only at the given flat positions, (n, vocab); the
/// cheap path for MLM training where ~15% of positions carry targets.
pub fn mlm_logits_at(
    vars: &crate::tensor::NamedVars,
    cfg: &EncoderConfig,
    hidden: &Var,
    flat_positions: &[usize],
) -> Result<Var, EncoderError> {
    let [b, l, h] = hidden.shape() else {
        return Err(EncoderError::Tensor(TensorError::BadShape {
            op: "mlm_logits_at",
            shape: hidden.shape().to_vec(),
        }));
    };
    let flat = hidden.reshape(&[b * l, *h])?;
    let rows = flat.gather_rows(flat_positions)?;
    Ok(mlm_projection(vars, cfg, &rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TokenSequence, CLS_ID, MASK_ID};

    fn seq(content: &[usize], max_len: usize) -> TokenSequence {
        TokenSequence::from_content_ids(content, max_len).unwrap()
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            hidden_size: 16,
            num_layers: 2,
            num_attention_heads: 2,
            ff_size: 32,
            max_len: 8,
            vocab_size: 12,
            dropout_p: 0.1,
            activation: Activation::Gelu,
            tie_mlm_weights: false,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.num_attention_heads = 3;
        assert!(cfg.validate().is_err());
        cfg = tiny_cfg();
        cfg.max_len = 2;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny_cfg();
        let params = EncoderParameters::init(&cfg, 1).unwrap();
        let batch =
            EncodedBatch::from_sequences(&[seq(&[5, 6, 7], 8), seq(&[8, 9], 8)]).unwrap();
        let vars = params.0.constants();
        let hidden = encode_forward(&vars, &cfg, &batch, Mode::Eval).unwrap();
        assert_eq!(hidden.shape(), &[2, 8, 16]);
        let pooled = cls_pool(&hidden).unwrap();
        assert_eq!(pooled.shape(), &[2, 16]);
        let logits = mlm_logits(&vars, &cfg, &hidden).unwrap();
        assert_eq!(logits.shape(), &[2, 8, 12]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_cfg();
        let params = EncoderParameters::init(&cfg, 2).unwrap();
        let batch = EncodedBatch::from_sequences(&[seq(&[5, 6, 7, 8], 8)]).unwrap();
        let a = encode_forward(&params.0.constants(), &cfg, &batch, Mode::Eval).unwrap();
        let b = encode_forward(&params.0.constants(), &cfg, &batch, Mode::Eval).unwrap();
        assert_eq!(a.value().data(), b.value().data());
    }

    #[test]
    fn pad_content_does_not_leak_into_cls() {
        let cfg = tiny_cfg();
        let params = EncoderParameters::init(&cfg, 3).unwrap();
        let base = seq(&[5, 6], 8);
        // same sequence but with garbage ids written into the PAD tail
        let mut tampered = base.clone();
        for pos in 5..8 {
            tampered = tampered.with_id_at(pos, 9);
        }
        let vars = params.0.constants();
        let ha = encode_forward(
            &vars,
            &cfg,
            &EncodedBatch::from_sequences(&[base]).unwrap(),
            Mode::Eval,
        )
        .unwrap();
        let hb = encode_forward(
            &vars,
            &cfg,
            &EncodedBatch::from_sequences(&[tampered]).unwrap(),
            Mode::Eval,
        )
        .unwrap();
        // all non-PAD positions (0..=3: CLS, two tokens, SEP) must agree
        for pos in 0..4 {
            for d in 0..16 {
                let a = ha.value().at(&[0, pos, d]);
                let b = hb.value().at(&[0, pos, d]);
                assert!((a - b).abs() < 1e-12, "position {pos} dim {d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn untrained_mlm_cross_entropy_near_ln_vocab() {
        // At N(0, 0.02²) init the logits are near-uniform, so masked-token
        // cross-entropy should sit within 10% of ln(vocab).
        let cfg = tiny_cfg();
        let params = EncoderParameters::init(&cfg, 4).unwrap();
        let batch = EncodedBatch::from_sequences(&[
            seq(&[5, MASK_ID, 7, 8], 8),
            seq(&[MASK_ID, 9, 10], 8),
        ])
        .unwrap();
        let vars = params.0.constants();
        let hidden = encode_forward(&vars, &cfg, &batch, Mode::Eval).unwrap();
        let logits = mlm_logits_at(&vars, &cfg, &hidden, &[2, 9]).unwrap();
        let loss = logits.cross_entropy_rows(&[6, 5]).unwrap();
        let expected = (cfg.vocab_size as f64).ln();
        let got = loss.value().item();
        assert!(
            (got - expected).abs() / expected < 0.10,
            "cross-entropy {got} vs ln(V) {expected}"
        );
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let cfg = tiny_cfg();
        let params = EncoderParameters::init(&cfg, 5).unwrap();
        let batch = EncodedBatch::from_sequences(&[seq(&[5, 6, 7, 8, 9, 10], 8)]).unwrap();
        let tape = crate::tensor::Tape::new();
        let vars = params.0.tracked(&tape);
        let hidden = encode_forward(
            &vars,
            &cfg,
            &batch,
            Mode::Train { seed: 1, step: 0 },
        )
        .unwrap();
        // loss touching every position and the MLM projection
        let logits = mlm_logits(&vars, &cfg, &hidden).unwrap();
        let loss = logits
            .reshape(&[8, 12])
            .unwrap()
            .cross_entropy_rows(&[5, 6, 7, 8, 9, 10, 5, 6])
            .unwrap();
        let grads = vars.gradients(&loss.backward().unwrap());
        for (name, g) in grads.iter() {
            let norm: f64 = g.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "dead parameter at init: {name}");
        }
    }

    #[test]
    fn sequence_length_mismatch_errors() {
        let cfg = tiny_cfg();
        let params = EncoderParameters::init(&cfg, 6).unwrap();
        let batch = EncodedBatch::from_sequences(&[seq(&[5], 4)]).unwrap();
        let err = encode_forward(&params.0.constants(), &cfg, &batch, Mode::Eval);
        assert!(matches!(
            err,
            Err(EncoderError::SequenceLength {
                expected: 8,
                found: 4
            })
        ));
    }

    #[test]
    fn cls_is_position_zero() {
        let cfg = tiny_cfg();
        let params = EncoderParameters::init(&cfg, 7).unwrap();
        let batch = EncodedBatch::from_sequences(&[seq(&[5, 6], 8)]).unwrap();
        assert_eq!(batch.ids()[0], CLS_ID);
        let hidden =
            encode_forward(&params.0.constants(), &cfg, &batch, Mode::Eval).unwrap();
        let pooled = cls_pool(&hidden).unwrap();
        for d in 0..16 {
            assert_eq!(pooled.value().at(&[0, d]), hidden.value().at(&[0, 0, d]));
        }
    }

    #[test]
    fn tied_mlm_projection_uses_token_embedding() {
        let mut cfg = tiny_cfg();
        cfg.tie_mlm_weights = true;
        let params = EncoderParameters::init(&cfg, 8).unwrap();
        assert!(!params.0.contains("mlm.w"));
        let batch = EncodedBatch::from_sequences(&[seq(&[5, 6], 8)]).unwrap();
        let vars = params.0.constants();
        let hidden = encode_forward(&vars, &cfg, &batch, Mode::Eval).unwrap();
        let logits = mlm_logits(&vars, &cfg, &hidden).unwrap();
        assert_eq!(logits.shape(), &[1, 8, 12]);
    }
}
