//! Neural-network building blocks on top of the tape: named parameter
//! stores, initialization, gradient accumulation, an Adam wrapper, and the
//! shared LSTM/attention/feed-forward pieces the agents are assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamHyper, AdamState, Checkpoint, Gradients, Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Insertion-ordered collection of named parameter tensors. The order is
/// the checkpoint order, so two stores built by the same code path produce
/// identical manifests.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, mut tensor: Tensor<S>) -> Result<ParamId> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        tensor.set_requires_grad(true);
        self.entries.push((name.to_string(), tensor));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Drop gradient tracking on every parameter (frozen teacher copies).
    pub fn freeze(&mut self) {
        for (_, t) in &mut self.entries {
            t.set_requires_grad(false);
        }
    }

    /// Ordered (name, shape) list; the parity fingerprint of an agent.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn to_checkpoint(&self, manifest_text: Option<&str>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        if let Some(text) = manifest_text {
            ck.set_manifest(text)?;
        }
        for (name, t) in &self.entries {
            ck.push(name, t.shape().to_vec(), t.to_f64_vec())?;
        }
        Ok(ck)
    }

    /// Overwrite every parameter from a checkpoint; names and shapes must
    /// match exactly.
    pub fn load_from_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, t) in &mut self.entries {
            let entry = ck.get(name).ok_or_else(|| Error::Lookup {
                kind: "checkpoint parameter",
                key: name.clone(),
            })?;
            if entry.dims != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter '{}' has shape {:?} in the checkpoint, {:?} in the agent",
                    name,
                    entry.dims,
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&entry.data) {
                *dst = S::from_real(src);
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Xavier-uniform weight matrix: U(-a, a) with a = sqrt(6 / (fanin + fanout)).
pub fn xavier<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_real(rng.gen_range(-a..a)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized construction")
}

pub fn zeros<S: Scalar>(rows: usize, cols: usize) -> Tensor<S> {
    Tensor::zeros(vec![rows, cols])
}

pub fn full<S: Scalar>(rows: usize, cols: usize, x: f64) -> Tensor<S> {
    Tensor::matrix(rows, cols, vec![S::from_real(x); rows * cols]).expect("sized construction")
}

/// Memoizing bridge between a parameter store and one tape: each parameter
/// becomes at most one leaf node, so reuse within an episode accumulates
/// gradients on a single node.
pub struct Binder<'p, S: Scalar> {
    store: &'p ParamStore<S>,
    bound: Vec<Option<Var>>,
}

impl<'p, S: Scalar> Binder<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Binder {
            bound: vec![None; store.len()],
            store,
        }
    }

    pub fn var(&mut self, tape: &mut Tape<'p, S>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = tape.leaf(self.store.get(id))?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// Per-parameter gradient buffers, accumulated across a batch of episodes.
#[derive(Debug, Clone)]
pub struct GradAccum<S: Scalar> {
    bufs: Vec<Vec<S>>,
}

impl<S: Scalar> GradAccum<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        GradAccum {
            bufs: store.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for buf in &mut self.bufs {
            buf.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Pull every bound parameter's gradient out of a finished backward pass.
    pub fn absorb(&mut self, binder: &Binder<'_, S>, grads: &Gradients<S>) {
        for (id, var) in binder.bound() {
            if let Some(g) = grads.get(var) {
                for (acc, &x) in self.bufs[id.0].iter_mut().zip(g) {
                    *acc = *acc + x;
                }
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for buf in &mut self.bufs {
            buf.iter_mut().for_each(|g| *g = *g * c);
        }
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.bufs[id.0]
    }

    pub fn l2_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.iter().all(|g| g.is_finite()))
    }
}

/// Adam over a whole parameter store.
pub struct Optimizer<S: Scalar> {
    states: Vec<AdamState<S>>,
    hyper: AdamHyper,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(store: &ParamStore<S>, hyper: AdamHyper) -> Self {
        Optimizer {
            states: store.iter().map(|(_, t)| AdamState::new(t.numel())).collect(),
            hyper,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &GradAccum<S>) -> Result<()> {
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            adam_step(
                store.get_mut(id).data_mut(),
                grads.get(id),
                &mut self.states[i],
                &self.hyper,
            )?;
        }
        Ok(())
    }
}

/// One LSTM cell step. `x` is 1 x in, `h`/`c` are 1 x hidden, `w_ih` is
/// (4*hidden) x in, `w_hh` is (4*hidden) x hidden, `b` is 1 x (4*hidden).
/// Gate order in the stacked weights: input, forget, cell, output.
pub fn lstm_cell<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let gi = tape.matmul_tb(x, w_ih)?;
    let gh = tape.matmul_tb(h, w_hh)?;
    let lin = tape.add(gi, gh)?;
    let lin = tape.add(lin, b)?;
    let i = tape.slice_cols(lin, 0, hidden)?;
    let f = tape.slice_cols(lin, hidden, hidden)?;
    let g = tape.slice_cols(lin, 2 * hidden, hidden)?;
    let o = tape.slice_cols(lin, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let ct = tape.tanh(c_next)?;
    let h_next = tape.mul(o, ct)?;
    Ok((h_next, c_next))
}

/// Attention flavor and its parameters (as tape nodes).
pub enum AttendParams {
    /// Unscaled dot product; values are the key-value vectors themselves.
    Dot,
    /// score_i = query^T W_b kv_i; values are the key-value vectors.
    Bilinear { w_b: Var },
    /// Projected query/key scores scaled by 1/sqrt(H); values are
    /// W_v-projected.
    ScaledDot { w_q: Var, w_k: Var, w_v: Var },
}

/// Softmax the scores and take the weighted sum of the values.
pub fn attention_readout<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    scores: Var,
    values: Var,
) -> Result<(Var, Var)> {
    let weights = tape.softmax(scores, 1)?;
    let context = tape.matmul(weights, values)?;
    Ok((weights, context))
}

/// Single-query attention over a set of key-value vectors.
///
/// `query` is 1 x H, `keyvalues` is A x H with A >= 1. Returns the A
/// attention weights (a probability row) and the 1 x H context vector.
pub fn attend<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    query: Var,
    keyvalues: Var,
    params: &AttendParams,
) -> Result<(Var, Var)> {
    let (a, h) = tape.dims(keyvalues);
    if a == 0 {
        return Err(Error::Contract("attention over an empty key set".into()));
    }
    match params {
        AttendParams::Dot => {
            let scores = tape.matmul_tb(query, keyvalues)?;
            attention_readout(tape, scores, keyvalues)
        }
        AttendParams::Bilinear { w_b } => {
            let q = tape.matmul(query, *w_b)?;
            let scores = tape.matmul_tb(q, keyvalues)?;
            attention_readout(tape, scores, keyvalues)
        }
        AttendParams::ScaledDot { w_q, w_k, w_v } => {
            let q = tape.matmul_tb(query, *w_q)?;
            let keys = tape.matmul_tb(keyvalues, *w_k)?;
            let values = tape.matmul_tb(keyvalues, *w_v)?;
            attend_kv(tape, q, keys, values, Some(S::one() / S::from_usize_exact(h).sqrt()))
        }
    }
}

/// Attention over explicit keys and values: softmax(query keys^T * scale)
/// blended over the value rows. Callers that reuse a projection across many
/// attends project once and come through here instead of [`attend`].
pub fn attend_kv<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    query: Var,
    keys: Var,
    values: Var,
    scale: Option<S>,
) -> Result<(Var, Var)> {
    let (a, _) = tape.dims(keys);
    if a == 0 {
        return Err(Error::Contract("attention over an empty key set".into()));
    }
    let mut scores = tape.matmul_tb(query, keys)?;
    if let Some(s) = scale {
        scores = tape.scale(scores, s)?;
    }
    attention_readout(tape, scores, values)
}

/// Position-wise feed-forward: gelu(x W1^T + b1) W2^T + b2.
pub fn feed_forward<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let hidden = tape.matmul_tb(x, w1)?;
    let hidden = tape.add(hidden, b1)?;
    let hidden = tape.gelu(hidden)?;
    let out = tape.matmul_tb(hidden, w2)?;
    tape.add(out, b2)
}

/// Post-norm residual connection: layer_norm(x + sublayer).
pub fn residual_norm<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    x: Var,
    sublayer: Var,
    gain: Var,
    bias: Var,
) -> Result<Var> {
    let sum = tape.add(x, sublayer)?;
    tape.layer_norm(sum, gain, bias)
}
