//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a tensor that may be tracked on a [`Tape`]. Operations
//! between vars record a backward closure; [`Var::backward`] walks the
//! recorded nodes in reverse creation order (which is reverse topological
//! order) and accumulates gradients additively across uses.
//!
//! Vars without a tape are constants: running the same forward code with
//! constant parameters performs no recording at all, which is how eval-mode
//! inference stays allocation-light and thread-safe.

use std::cell::RefCell;
use std::rc::Rc;

use super::{mm_nn, mm_nt, mm_tn, Tensor, TensorError};

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    backward: Option<BackFn>,
}

#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tracked leaf (a trainable parameter or input).
    pub fn leaf(&self, value: Tensor) -> Var {
        let id = self.push(Node { backward: None });
        Var {
            tape: Some(self.clone()),
            id,
            value,
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.inner.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

/// Gradients produced by [`Var::backward`], queryable per tracked var.
pub struct Gradients {
    tape_ptr: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. A tracked var the loss
    /// does not depend on gets a zero gradient of the var's shape.
    pub fn wrt(&self, var: &Var) -> Tensor {
        let tape = var
            .tape
            .as_ref()
            .expect("gradient requested for a detached var");
        assert_eq!(
            tape.ptr_id(),
            self.tape_ptr,
            "gradient requested for a var from a different tape"
        );
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value.shape()),
        }
    }
}

/// Deterministic dropout stream identity: masks depend only on this key and
/// the element index, never on parameter values, so a finite-difference
/// re-evaluation sees the identical mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

/// splitmix64-style finalizer; also used to derive per-epoch and
/// per-example seeds elsewhere in the crate.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn dropout_hash(key: DropoutKey, index: u64) -> u64 {
    mix64(mix64(mix64(mix64(key.seed) ^ key.layer) ^ key.step) ^ index)
}

/// A tensor value optionally tracked on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Option<Tape>,
    id: usize,
    value: Tensor,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("tracked", &self.tape.is_some())
            .field("value", &self.value)
            .finish()
    }
}

fn same_tape(ops: &[&Var]) -> Result<Option<Tape>, TensorError> {
    let mut found: Option<&Tape> = None;
    for v in ops {
        if let Some(t) = &v.tape {
            match found {
                None => found = Some(t),
                Some(prev) if prev.ptr_id() == t.ptr_id() => {}
                Some(_) => return Err(TensorError::TapeMismatch),
            }
        }
    }
    Ok(found.cloned())
}

fn record(tape: Option<Tape>, op: &'static str, value: Tensor, back: Option<BackFn>) -> Var {
    debug_assert!(value.all_finite(), "non-finite output of {op}");
    match (tape, back) {
        (Some(tape), Some(back)) => {
            let id = tape.push(Node { backward: Some(back) });
            Var {
                tape: Some(tape),
                id,
                value,
            }
        }
        _ => Var {
            tape: None,
            id: usize::MAX,
            value,
        },
    }
}

fn acc(contribs: &mut Vec<(usize, Tensor)>, id: Option<usize>, grad: Tensor) {
    if let Some(id) = id {
        contribs.push((id, grad));
    }
}

impl Var {
    /// An untracked constant. Backward through it contributes nothing.
    pub fn constant(value: Tensor) -> Self {
        Self {
            tape: None,
            id: usize::MAX,
            value,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Drops the tape link, turning this var into a constant.
    pub fn detach(&self) -> Var {
        Var::constant(self.value.clone())
    }

    fn tracked_id(&self) -> Option<usize> {
        self.tape.as_ref().map(|_| self.id)
    }

    /// Backpropagates from a scalar loss, visiting each recorded node once
    /// in reverse order. Gradients accumulate additively across uses.
    pub fn backward(&self) -> Result<Gradients, TensorError> {
        let tape = self.tape.as_ref().ok_or(TensorError::Detached)?;
        if self.value.len() != 1 {
            return Err(TensorError::NotScalar(self.value.shape().to_vec()));
        }
        let nodes = tape.inner.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(Tensor::filled(self.value.shape(), 1.0));
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            if let Some(back) = &nodes[id].backward {
                for (pid, contrib) in back(&g) {
                    match &mut grads[pid] {
                        Some(existing) => existing.zip_update(&contrib, |a, b| a + b),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
        }
        Ok(Gradients {
            tape_ptr: tape.ptr_id(),
            grads,
        })
    }

    // ---- arithmetic ----

    /// Matrix product. 2D: (m,k)·(k,n). 3D: batched over the leading dim.
    pub fn matmul(&self, rhs: &Var) -> Result<Var, TensorError> {
        let (a, b) = (&self.value, &rhs.value);
        let (batch, m, k, n) = match (a.shape(), b.shape()) {
            ([m, k1], [k2, n]) if k1 == k2 => (1usize, *m, *k1, *n),
            ([b1, m, k1], [b2, k2, n]) if b1 == b2 && k1 == k2 => (*b1, *m, *k1, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mm_nn(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out_shape: Vec<usize> = if a.shape().len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let value = Tensor::from_vec(&out_shape, out)?;
        let tape = same_tape(&[self, rhs])?;
        let (ida, idb) = (self.tracked_id(), rhs.tracked_id());
        let (av, bv) = (a.clone(), b.clone());
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            if ida.is_some() {
                // dA = g · Bᵀ
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    mm_nt(
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[bi * k * n..(bi + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                }
                acc(&mut contribs, ida, Tensor::from_vec(av.shape(), da).unwrap());
            }
            if idb.is_some() {
                // dB = Aᵀ · g
                let mut db = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    mm_tn(
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut db[bi * k * n..(bi + 1) * k * n],
                    );
                }
                acc(&mut contribs, idb, Tensor::from_vec(bv.shape(), db).unwrap());
            }
            contribs
        });
        Ok(record(tape, "matmul", value, Some(back)))
    }

    /// Swaps the last two axes of a 2D or 3D tensor.
    pub fn transpose_last2(&self) -> Result<Var, TensorError> {
        let shape = self.value.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::BadShape {
                op: "transpose_last2",
                shape,
            });
        }
        let value = transpose_raw(&self.value)?;
        let tape = same_tape(&[self])?;
        let id = self.tracked_id();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            acc(&mut contribs, id, transpose_raw(g).unwrap());
            contribs
        });
        Ok(record(tape, "transpose_last2", value, Some(back)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value.reshaped(shape)?;
        let tape = same_tape(&[self])?;
        let id = self.tracked_id();
        let orig = self.value.shape().to_vec();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            acc(&mut contribs, id, g.reshaped(&orig).unwrap());
            contribs
        });
        Ok(record(tape, "reshape", value, Some(back)))
    }

    /// Elementwise sum. `rhs` may be a suffix shape of `self` (broadcast
    /// over leading axes), the usual bias-add pattern.
    pub fn add(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.broadcast_binop(rhs, "add", |a, b| a + b, |_a, _b, g| (g, g), false)
    }

    /// Elementwise product, same broadcast rule as [`Var::add`].
    pub fn mul(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.broadcast_binop(rhs, "mul", |a, b| a * b, |a, b, g| (g * b, g * a), true)
    }

    /// Elementwise difference, same shapes only.
    pub fn sub(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.add(&rhs.scale(-1.0))
    }

    fn broadcast_binop(
        &self,
        rhs: &Var,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64, f64) -> (f64, f64),
        needs_values: bool,
    ) -> Result<Var, TensorError> {
        let (a, b) = (&self.value, &rhs.value);
        let a_shape = a.shape();
        let b_shape = b.shape();
        let suffix_ok = a_shape.len() >= b_shape.len()
            && a_shape[a_shape.len() - b_shape.len()..] == b_shape[..];
        if !suffix_ok {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let blen = b.len().max(1);
        let out: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &av)| f(av, b.data()[i % blen]))
            .collect();
        let value = Tensor::from_vec(a_shape, out)?;
        let tape = same_tape(&[self, rhs])?;
        let (ida, idb) = (self.tracked_id(), rhs.tracked_id());
        let (av, bv) = if needs_values {
            (Some(a.clone()), Some(b.clone()))
        } else {
            (None, None)
        };
        let a_shape_v = a_shape.to_vec();
        let b_shape_v = b_shape.to_vec();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            let pick = |side_a: bool, i: usize| -> f64 {
                match (side_a, &av, &bv) {
                    (true, Some(t), _) => t.data()[i],
                    (false, _, Some(t)) => t.data()[i % t.len().max(1)],
                    _ => 0.0,
                }
            };
            if ida.is_some() {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| df(pick(true, i), pick(false, i), gv).0)
                    .collect();
                acc(
                    &mut contribs,
                    ida,
                    Tensor::from_vec(&a_shape_v, da).unwrap(),
                );
            }
            if idb.is_some() {
                let db_len = b_shape_v.iter().product::<usize>().max(1);
                let mut db = vec![0.0; db_len];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % db_len] += df(pick(true, i), pick(false, i), gv).1;
                }
                acc(
                    &mut contribs,
                    idb,
                    Tensor::from_vec(&b_shape_v, db).unwrap(),
                );
            }
            contribs
        });
        Ok(record(tape, op, value, Some(back)))
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.value.map(|v| v * c);
        let tape = same_tape(&[self]).expect("single operand");
        let id = self.tracked_id();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            acc(&mut contribs, id, g.map(|v| v * c));
            contribs
        });
        record(tape, "scale", value, Some(back))
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value.map(f);
        let tape = same_tape(&[self]).expect("single operand");
        let id = self.tracked_id();
        let x = self.value.clone();
        let y = value.clone();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            let dx: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            acc(&mut contribs, id, Tensor::from_vec(x.shape(), dx).unwrap());
            contribs
        });
        record(tape, op, value, Some(back))
    }

    pub fn relu(&self) -> Var {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    pub fn sigmoid(&self) -> Var {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var, TensorError> {
        let shape = self.value.shape();
        let cols = *shape.last().ok_or(TensorError::BadShape {
            op: "softmax_last",
            shape: shape.to_vec(),
        })?;
        let mut out = self.value.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let tape = same_tape(&[self])?;
        let id = self.tracked_id();
        let y = value.clone();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            let mut dx = vec![0.0; y.len()];
            for (r, (grow, yrow)) in g.data().chunks(cols).zip(y.data().chunks(cols)).enumerate() {
                let dot: f64 = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                for (c, (&gv, &yv)) in grow.iter().zip(yrow).enumerate() {
                    dx[r * cols + c] = yv * (gv - dot);
                }
            }
            acc(&mut contribs, id, Tensor::from_vec(y.shape(), dx).unwrap());
            contribs
        });
        Ok(record(tape, "softmax_last", value, Some(back)))
    }

    /// Row normalization over the last axis: (x − μ) / √(σ² + eps).
    /// Scale and shift are applied by the caller with `mul`/`add`.
    pub fn layer_norm_last(&self, eps: f64) -> Result<Var, TensorError> {
        let shape = self.value.shape();
        let cols = *shape.last().ok_or(TensorError::BadShape {
            op: "layer_norm_last",
            shape: shape.to_vec(),
        })?;
        let h = cols as f64;
        let mut out = Vec::with_capacity(self.value.len());
        let mut inv_stds = Vec::with_capacity(self.value.len() / cols);
        for row in self.value.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / h;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / h;
            let inv_std = 1.0 / (var + eps).sqrt();
            inv_stds.push(inv_std);
            out.extend(row.iter().map(|&v| (v - mean) * inv_std));
        }
        let value = Tensor::from_vec(shape, out)?;
        let tape = same_tape(&[self])?;
        let id = self.tracked_id();
        let xhat = value.clone();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            let mut dx = vec![0.0; xhat.len()];
            for (r, (grow, xrow)) in g
                .data()
                .chunks(cols)
                .zip(xhat.data().chunks(cols))
                .enumerate()
            {
                let g_mean = grow.iter().sum::<f64>() / h;
                let gx_mean = grow.iter().zip(xrow).map(|(&gv, &xv)| gv * xv).sum::<f64>() / h;
                let inv_std = inv_stds[r];
                for (c, (&gv, &xv)) in grow.iter().zip(xrow).enumerate() {
                    dx[r * cols + c] = inv_std * (gv - g_mean - xv * gx_mean);
                }
            }
            acc(
                &mut contribs,
                id,
                Tensor::from_vec(xhat.shape(), dx).unwrap(),
            );
            contribs
        });
        Ok(record(tape, "layer_norm_last", value, Some(back)))
    }

    /// Gathers rows of a 2D tensor; `ids` may repeat. Also serves as the
    /// embedding lookup (`table` rows indexed by token id).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var, TensorError> {
        let shape = self.value.shape();
        let [rows, cols] = shape else {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                shape: shape.to_vec(),
            });
        };
        let (rows, cols) = (*rows, *cols);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&self.value.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::from_vec(&[ids.len(), cols], out)?;
        let tape = same_tape(&[self])?;
        let id = self.tracked_id();
        let ids = ids.to_vec();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            if id.is_some() {
                let mut dt = vec![0.0; rows * cols];
                for (slot, &i) in ids.iter().enumerate() {
                    let grow = &g.data()[slot * cols..(slot + 1) * cols];
                    for (d, &gv) in dt[i * cols..(i + 1) * cols].iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
                acc(
                    &mut contribs,
                    id,
                    Tensor::from_vec(&[rows, cols], dt).unwrap(),
                );
            }
            contribs
        });
        Ok(record(tape, "gather_rows", value, Some(back)))
    }

    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Var, TensorError> {
        self.gather_rows(ids)
    }

    /// Inverted dropout: in training mode surviving activations are scaled
    /// by 1/(1−p); eval mode is the identity. The mask is a pure function
    /// of `key` and the element index.
    pub fn dropout(&self, p: f64, key: DropoutKey, training: bool) -> Result<Var, TensorError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(TensorError::BadProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let factors: Tensor = if p >= 1.0 {
            Tensor::zeros(self.value.shape())
        } else {
            let keep_scale = 1.0 / (1.0 - p);
            let threshold = ((1.0 - p) * (u64::MAX as f64)) as u64;
            let data = (0..self.value.len() as u64)
                .map(|i| {
                    if dropout_hash(key, i) < threshold {
                        keep_scale
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::from_vec(self.value.shape(), data)?
        };
        self.mul(&Var::constant(factors))
    }

    /// Concatenates along the last axis; all parts share the leading shape.
    pub fn concat_last(parts: &[&Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::BadShape {
            op: "concat_last",
            shape: vec![],
        })?;
        let lead = &first.value.shape()[..first.value.shape().len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.value.shape();
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first.value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&p.value.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::from_vec(&shape, out)?;
        let tape = same_tape(parts)?;
        let ids: Vec<Option<usize>> = parts.iter().map(|p| p.tracked_id()).collect();
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.value.shape().to_vec()).collect();
        let widths_c = widths.clone();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            let mut offset = 0;
            for ((id, w), pshape) in ids.iter().zip(&widths_c).zip(&part_shapes) {
                if id.is_some() {
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    acc(&mut contribs, *id, Tensor::from_vec(pshape, dp).unwrap());
                }
                offset += w;
            }
            contribs
        });
        Ok(record(tape, "concat_last", value, Some(back)))
    }

    /// Takes `[start, start+len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.value.shape().to_vec();
        let cols = *shape.last().ok_or(TensorError::BadShape {
            op: "slice_last",
            shape: shape.clone(),
        })?;
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_last",
                index: start + len,
                bound: cols,
            });
        }
        let rows = self.value.len() / cols;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.value.data()[r * cols + start..r * cols + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::from_vec(&out_shape, out)?;
        let tape = same_tape(&[self])?;
        let id = self.tracked_id();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            if id.is_some() {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(&mut contribs, id, Tensor::from_vec(&shape, dx).unwrap());
            }
            contribs
        });
        Ok(record(tape, "slice_last", value, Some(back)))
    }

    /// Takes `[start, start+len)` of the middle axis of a 3D tensor.
    pub fn slice_mid(&self, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.value.shape().to_vec();
        let [b, l, h] = shape[..] else {
            return Err(TensorError::BadShape {
                op: "slice_mid",
                shape,
            });
        };
        if start + len > l {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_mid",
                index: start + len,
                bound: l,
            });
        }
        let mut out = Vec::with_capacity(b * len * h);
        for bi in 0..b {
            let base = bi * l * h;
            out.extend_from_slice(&self.value.data()[base + start * h..base + (start + len) * h]);
        }
        let value = Tensor::from_vec(&[b, len, h], out)?;
        let tape = same_tape(&[self])?;
        let id = self.tracked_id();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            if id.is_some() {
                let mut dx = vec![0.0; b * l * h];
                for bi in 0..b {
                    let base = bi * l * h;
                    dx[base + start * h..base + (start + len) * h]
                        .copy_from_slice(&g.data()[bi * len * h..(bi + 1) * len * h]);
                }
                acc(
                    &mut contribs,
                    id,
                    Tensor::from_vec(&[b, l, h], dx).unwrap(),
                );
            }
            contribs
        });
        Ok(record(tape, "slice_mid", value, Some(back)))
    }

    pub fn sum_all(&self) -> Var {
        let total: f64 = self.value.data().iter().sum();
        let value = Tensor::scalar(total);
        let tape = same_tape(&[self]).expect("single operand");
        let id = self.tracked_id();
        let shape = self.value.shape().to_vec();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            acc(&mut contribs, id, Tensor::filled(&shape, g.item()));
            contribs
        });
        record(tape, "sum_all", value, Some(back))
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Mean softmax cross-entropy of 2D logits against class indices.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Var, TensorError> {
        let shape = self.value.shape();
        let [rows, cols] = shape else {
            return Err(TensorError::BadShape {
                op: "cross_entropy_rows",
                shape: shape.to_vec(),
            });
        };
        let (rows, cols) = (*rows, *cols);
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: shape.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_rows",
                index: bad,
                bound: cols,
            });
        }
        let mut total = 0.0;
        for (row, &t) in self.value.data().chunks(cols).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / rows as f64);
        let tape = same_tape(&[self])?;
        let id = self.tracked_id();
        let logits = self.value.clone();
        let targets = targets.to_vec();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            if id.is_some() {
                let scale = g.item() / rows as f64;
                let mut dx = vec![0.0; rows * cols];
                for (r, (row, &t)) in logits.data().chunks(cols).zip(&targets).enumerate() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for (c, &v) in row.iter().enumerate() {
                        let p = (v - max).exp() / sum;
                        dx[r * cols + c] = scale * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                acc(
                    &mut contribs,
                    id,
                    Tensor::from_vec(logits.shape(), dx).unwrap(),
                );
            }
            contribs
        });
        Ok(record(tape, "cross_entropy_rows", value, Some(back)))
    }

    /// Multi-label loss in fused log-sigmoid form: per example the sum over
    /// labels of softplus(z) − z·t, averaged over examples (rows).
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Var, TensorError> {
        let shape = self.value.shape();
        if shape != targets.shape() || shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: shape.to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let rows = shape[0];
        let total: f64 = self
            .value
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| softplus(z) - z * t)
            .sum();
        let value = Tensor::scalar(total / rows as f64);
        let tape = same_tape(&[self])?;
        let id = self.tracked_id();
        let logits = self.value.clone();
        let targets = targets.clone();
        let back: BackFn = Box::new(move |g| {
            let mut contribs = Vec::new();
            if id.is_some() {
                let scale = g.item() / rows as f64;
                let dx: Vec<f64> = logits
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| scale * (sigmoid_scalar(z) - t))
                    .collect();
                acc(
                    &mut contribs,
                    id,
                    Tensor::from_vec(logits.shape(), dx).unwrap(),
                );
            }
            contribs
        });
        Ok(record(tape, "bce_with_logits", value, Some(back)))
    }
}

pub(crate) fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    // ln(1 + e^z), stable on both tails
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn transpose_raw(t: &Tensor) -> Result<Tensor, TensorError> {
    let shape = t.shape();
    let n = shape.len();
    let (r, c) = (shape[n - 2], shape[n - 1]);
    let batch: usize = shape[..n - 2].iter().product();
    let mut out = vec![0.0; t.len()];
    for bi in 0..batch {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = t.data()[base + i * c + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[n - 2] = c;
    out_shape[n - 1] = r;
    Tensor::from_vec(&out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        // loss = sum(w ∘ w), w = [1, 2] → grad [2, 4]
        let tape = Tape::new();
        let w = tape.leaf(v(&[2], vec![1.0, 2.0]));
        let loss = w.mul(&w).unwrap().sum_all();
        assert_eq!(loss.value().item(), 5.0);
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(v(&[2], vec![1.0, 2.0]));
        let p = tape.leaf(v(&[3], vec![5.0, 6.0, 7.0]));
        let loss = w.sum_all();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_on_detached_errors() {
        let c = Var::constant(Tensor::scalar(1.0));
        let y = c.scale(2.0);
        assert!(matches!(y.backward(), Err(TensorError::Detached)));
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let tape = Tape::new();
        let w = tape.leaf(v(&[2], vec![1.0, 2.0]));
        assert!(matches!(w.backward(), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn mixing_tapes_errors() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(2.0));
        assert!(matches!(a.add(&b), Err(TensorError::TapeMismatch)));
    }

    #[test]
    fn matmul_values_and_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(v(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(v(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.value().data(), &[19.0, 22.0, 43.0, 50.0]);
        let loss = c.sum_all();
        let grads = loss.backward().unwrap();
        // dA = 1·Bᵀ row sums, dB = Aᵀ·1
        assert_eq!(grads.wrt(&a).data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.wrt(&b).data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Var::constant(v(&[2, 3], vec![0.0; 6]));
        let b = Var::constant(v(&[2, 3], vec![0.0; 6]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_symmetry() {
        let x = Var::constant(v(&[2, 2], vec![0.0, 0.0, 3.0, -1.0]));
        let y = x.softmax_last().unwrap();
        assert_eq!(y.value().at(&[0, 0]), 0.5);
        assert_eq!(y.value().at(&[0, 1]), 0.5);
        let row1: f64 = y.value().data()[2..].iter().sum();
        assert!((row1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = Var::constant(v(&[1, 4], vec![3.0; 4]));
        let y = x.layer_norm_last(1e-5).unwrap();
        for &o in y.value().data() {
            assert!(o.abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Var::constant(Tensor::scalar(0.0));
        assert_eq!(x.sigmoid().value().item(), 0.5);
    }

    #[test]
    fn dropout_p0_is_identity_and_p1_kills_gradients() {
        let tape = Tape::new();
        let key = DropoutKey {
            seed: 7,
            layer: 0,
            step: 0,
        };
        let w = tape.leaf(v(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let same = w.dropout(0.0, key, true).unwrap();
        assert_eq!(same.value().data(), w.value().data());

        let dead = w.dropout(1.0, key, true).unwrap();
        assert_eq!(dead.value().data(), &[0.0; 4]);
        let grads = dead.sum_all().backward().unwrap();
        assert_eq!(grads.wrt(&w).data(), &[0.0; 4]);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let key = DropoutKey {
            seed: 7,
            layer: 0,
            step: 0,
        };
        let w = Var::constant(v(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let out = w.dropout(0.9, key, false).unwrap();
        assert_eq!(out.value().data(), w.value().data());
    }

    #[test]
    fn dropout_mask_is_reproducible() {
        let key = DropoutKey {
            seed: 42,
            layer: 3,
            step: 11,
        };
        let w = Var::constant(v(&[64], vec![1.0; 64]));
        let a = w.dropout(0.5, key, true).unwrap();
        let b = w.dropout(0.5, key, true).unwrap();
        assert_eq!(a.value().data(), b.value().data());
        let other = w
            .dropout(
                0.5,
                DropoutKey {
                    seed: 42,
                    layer: 3,
                    step: 12,
                },
                true,
            )
            .unwrap();
        assert_ne!(a.value().data(), other.value().data());
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let w = Var::constant(v(&[2], vec![1.0, 2.0]));
        let key = DropoutKey {
            seed: 0,
            layer: 0,
            step: 0,
        };
        assert!(w.dropout(-0.1, key, true).is_err());
        assert!(w.dropout(1.5, key, true).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.leaf(v(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(v(&[2, 1], vec![9.0, 8.0]));
        let c = Var::concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = c.slice_last(0, 2).unwrap();
        assert_eq!(back.value().data(), a.value().data());
        let grads = c.sum_all().backward().unwrap();
        assert_eq!(grads.wrt(&b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn gather_rows_accumulates_repeated_ids() {
        let tape = Tape::new();
        let table = tape.leaf(v(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = table.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(picked.value().data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let grads = picked.sum_all().backward().unwrap();
        assert_eq!(grads.wrt(&table).data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_constant_zero_logits_is_ln2_per_label() {
        let logits = Var::constant(v(&[3, 5], vec![0.0; 15]));
        let targets = v(&[3, 5], vec![1.0; 15]);
        let loss = logits.bce_with_logits(&targets).unwrap();
        assert!((loss.value().item() - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn backward_linearity() {
        // backward(a·L1 + b·L2) = a·backward(L1) + b·backward(L2)
        let run = |ca: f64, cb: f64| -> Vec<f64> {
            let tape = Tape::new();
            let w = tape.leaf(v(&[2], vec![0.3, -0.7]));
            let l1 = w.mul(&w).unwrap().sum_all();
            let l2 = w.sigmoid().sum_all();
            let loss = l1.scale(ca).add(&l2.scale(cb)).unwrap();
            let grads = loss.backward().unwrap();
            grads.wrt(&w).data().to_vec()
        };
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        let g = run(2.0, 3.0);
        for i in 0..2 {
            assert!((g[i] - (2.0 * g1[i] + 3.0 * g2[i])).abs() < 1e-12);
        }
    }

    /// Central finite differences against the analytic gradient for a small
    /// MLP built from the same ops the encoder uses.
    #[test]
    fn mlp_gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w1 = Tensor::randn(&[3, 4], 0.5, &mut rng);
        let b1 = Tensor::randn(&[4], 0.5, &mut rng);
        let w2 = Tensor::randn(&[4, 2], 0.5, &mut rng);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);

        let loss_of = |w1: &Tensor, b1: &Tensor, w2: &Tensor| -> f64 {
            let w1 = Var::constant(w1.clone());
            let b1 = Var::constant(b1.clone());
            let w2 = Var::constant(w2.clone());
            let xv = Var::constant(x.clone());
            let h = xv.matmul(&w1).unwrap().add(&b1).unwrap().gelu();
            let y = h.matmul(&w2).unwrap().softmax_last().unwrap();
            y.mul(&y).unwrap().sum_all().value().item()
        };

        let tape = Tape::new();
        let w1v = tape.leaf(w1.clone());
        let b1v = tape.leaf(b1.clone());
        let w2v = tape.leaf(w2.clone());
        let xv = Var::constant(x.clone());
        let h = xv.matmul(&w1v).unwrap().add(&b1v).unwrap().gelu();
        let y = h.matmul(&w2v).unwrap().softmax_last().unwrap();
        let loss = y.mul(&y).unwrap().sum_all();
        let grads = loss.backward().unwrap();

        let h_step = 1e-5;
        let check = |analytic: &Tensor, base: &Tensor, eval: &dyn Fn(&Tensor) -> f64| {
            for i in 0..base.len() {
                let x0 = base.data()[i];
                let up = eval(&base.with_value_at(i, x0 + h_step));
                let down = eval(&base.with_value_at(i, x0 - h_step));
                let fd = (up - down) / (2.0 * h_step);
                let a = analytic.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-4, "element {i}: analytic {a} vs fd {fd}");
            }
        };
        check(&grads.wrt(&w1v), &w1, &|t| loss_of(t, &b1, &w2));
        check(&grads.wrt(&b1v), &b1, &|t| loss_of(&w1, t, &w2));
        check(&grads.wrt(&w2v), &w2, &|t| loss_of(&w1, &b1, t));
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // logits row [0, 0] target 0 → loss = ln 2
        let logits = Var::constant(v(&[1, 2], vec![0.0, 0.0]));
        let loss = logits.cross_entropy_rows(&[0]).unwrap();
        assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let a = v(&[2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect());
        let b = v(&[2, 3, 2], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect());
        let out = Var::constant(a.clone())
            .matmul(&Var::constant(b.clone()))
            .unwrap();
        for bi in 0..2 {
            let a2 = v(&[2, 3], a.data()[bi * 6..(bi + 1) * 6].to_vec());
            let b2 = v(&[3, 2], b.data()[bi * 6..(bi + 1) * 6].to_vec());
            let o2 = Var::constant(a2).matmul(&Var::constant(b2)).unwrap();
            assert_eq!(
                &out.value().data()[bi * 4..(bi + 1) * 4],
                o2.value().data()
            );
        }
    }
}
