//! Listener agents: message plus candidate objects in, per-candidate scores
//! out.

use std::path::Path;

use super::{argmax, encode_object, Arch, AttentionRecord, MatchKind, Message, PairSpec};
use crate::error::{Error, Result};
use crate::nn::{attend_kv, feed_forward, residual_norm, xavier, Binder, ParamId,
    ParamStore};
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Var};
use crate::{Real, RealTensor};

/// Forward-pass record. `score_var` is the live 1 x C score row on the
/// caller's tape, for building the cross-entropy loss.
#[derive(Clone)]
pub struct ListenerPass {
    pub scores: Vec<Real>,
    pub score_var: Var,
    /// One record per candidate: T attention rows over its A patches.
    pub attention: Vec<AttentionRecord>,
}

impl ListenerPass {
    pub fn choice(&self) -> usize {
        argmax(&self.scores)
    }
}

#[derive(Clone)]
struct LstmIds {
    obj_w: ParamId,
    obj_b: ParamId,
    embed: ParamId,
    fwd_w_ih: ParamId,
    fwd_w_hh: ParamId,
    fwd_b: ParamId,
    bwd_w_ih: ParamId,
    bwd_w_hh: ParamId,
    bwd_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Clone)]
struct TransformerIds {
    obj_w: ParamId,
    obj_b: ParamId,
    embed: ParamId,
    pos: ParamId,
    sa_q: ParamId,
    sa_k: ParamId,
    sa_v: ParamId,
    sa_o: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone)]
enum ListenerIds {
    Lstm(LstmIds),
    Transformer(TransformerIds),
}

#[derive(Clone)]
struct MatchIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

#[derive(Clone)]
pub struct Listener {
    spec: PairSpec,
    store: ParamStore<Real>,
    ids: ListenerIds,
    match_ids: Option<MatchIds>,
}

impl Listener {
    pub fn new(spec: &PairSpec, seed: u64) -> Result<Listener> {
        spec.sizes.validate()?;
        let s = spec.sizes;
        let (v, t, h, d) = (s.v, s.t, s.h, s.d);
        let mut store = ParamStore::new();
        let mut rng = crate::seeds::rng(seed, "listener/init", 0);

        let obj_w = store.add("obj_enc.w", xavier(h, d, &mut rng))?;
        let obj_b = store.add("obj_enc.b", crate::nn::zeros(1, h))?;
        let embed = store.add("embed.sym", xavier(v, h, &mut rng))?;

        let ids = match spec.arch {
            Arch::Lstm => {
                let fwd_w_ih = store.add("bilstm.fwd.w_ih", xavier(4 * h, h, &mut rng))?;
                let fwd_w_hh = store.add("bilstm.fwd.w_hh", xavier(4 * h, h, &mut rng))?;
                let fwd_b = store.add("bilstm.fwd.b", crate::nn::zeros(1, 4 * h))?;
                let bwd_w_ih = store.add("bilstm.bwd.w_ih", xavier(4 * h, h, &mut rng))?;
                let bwd_w_hh = store.add("bilstm.bwd.w_hh", xavier(4 * h, h, &mut rng))?;
                let bwd_b = store.add("bilstm.bwd.b", crate::nn::zeros(1, 4 * h))?;
                let proj_w = store.add("bilstm.proj.w", xavier(h, 2 * h, &mut rng))?;
                let proj_b = store.add("bilstm.proj.b", crate::nn::zeros(1, h))?;
                for id in [fwd_b, bwd_b] {
                    for x in &mut store.get_mut(id).data_mut()[h..2 * h] {
                        *x = 1.0;
                    }
                }
                ListenerIds::Lstm(LstmIds {
                    obj_w,
                    obj_b,
                    embed,
                    fwd_w_ih,
                    fwd_w_hh,
                    fwd_b,
                    bwd_w_ih,
                    bwd_w_hh,
                    bwd_b,
                    proj_w,
                    proj_b,
                })
            }
            Arch::Transformer => {
                let pos = store.add("embed.pos", xavier(t, h, &mut rng))?;
                let sa_q = store.add("self_attn.w_q", xavier(h, h, &mut rng))?;
                let sa_k = store.add("self_attn.w_k", xavier(h, h, &mut rng))?;
                let sa_v = store.add("self_attn.w_v", xavier(h, h, &mut rng))?;
                let sa_o = store.add("self_attn.w_o", xavier(h, h, &mut rng))?;
                let ln1_g = store.add("ln1.g", crate::nn::full(1, h, 1.0))?;
                let ln1_b = store.add("ln1.b", crate::nn::zeros(1, h))?;
                let ffn_w1 = store.add("ffn.w1", xavier(4 * h, h, &mut rng))?;
                let ffn_b1 = store.add("ffn.b1", crate::nn::zeros(1, 4 * h))?;
                let ffn_w2 = store.add("ffn.w2", xavier(h, 4 * h, &mut rng))?;
                let ffn_b2 = store.add("ffn.b2", crate::nn::zeros(1, h))?;
                let ln2_g = store.add("ln2.g", crate::nn::full(1, h, 1.0))?;
                let ln2_b = store.add("ln2.b", crate::nn::zeros(1, h))?;
                ListenerIds::Transformer(TransformerIds {
                    obj_w,
                    obj_b,
                    embed,
                    pos,
                    sa_q,
                    sa_k,
                    sa_v,
                    sa_o,
                    ln1_g,
                    ln1_b,
                    ffn_w1,
                    ffn_b1,
                    ffn_w2,
                    ffn_b2,
                    ln2_g,
                    ln2_b,
                })
            }
        };

        let match_ids = match spec.match_kind {
            MatchKind::Dot => None,
            MatchKind::ScaledDot => Some(MatchIds {
                w_q: store.add("match.w_q", xavier(h, h, &mut rng))?,
                w_k: store.add("match.w_k", xavier(h, h, &mut rng))?,
                w_v: store.add("match.w_v", xavier(h, h, &mut rng))?,
            }),
        };

        Ok(Listener { spec: *spec, store, ids, match_ids })
    }

    pub fn spec(&self) -> &PairSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<Real> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<Real> {
        &mut self.store
    }

    pub fn param_manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.store.manifest()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = self
            .store
            .to_checkpoint(Some(&self.spec.manifest_text("listener")))?;
        write_checkpoint(path, &ck)
    }

    pub fn load(path: &Path, spec: &PairSpec, seed: u64) -> Result<Listener> {
        let mut agent = Listener::new(spec, seed)?;
        let ck = read_checkpoint(path)?;
        agent.store.load_from_checkpoint(&ck)?;
        Ok(agent)
    }

    /// Score each candidate against the message. Higher is a stronger match.
    pub fn score<'p>(
        &'p self,
        tape: &mut Tape<'p, Real>,
        binder: &mut Binder<'p, Real>,
        message: &Message,
        candidates: &[&'p RealTensor],
    ) -> Result<ListenerPass> {
        let s = self.spec.sizes;
        if message.len() != s.t {
            return Err(Error::Contract(format!(
                "message of {} symbols where the listener expects {}",
                message.len(),
                s.t
            )));
        }
        if let Some(&bad) = message.symbols().iter().find(|&&m| usize::from(m) >= s.v) {
            return Err(Error::Contract(format!(
                "symbol id {bad} outside the listener vocabulary of {}",
                s.v
            )));
        }
        if candidates.is_empty() {
            return Err(Error::Contract("listener needs at least one candidate".into()));
        }
        for c in candidates {
            let (rows, cols) = c.mat_dims()?;
            if rows != s.a || cols != s.d {
                return Err(Error::Contract(format!(
                    "listener expects {}x{} candidates, got {rows}x{cols}",
                    s.a, s.d
                )));
            }
        }

        let symbol_vecs = self.encode_message(tape, binder, message)?;

        // Queries depend only on the message and key/value projections only
        // on each candidate, so both are projected once, not per attend.
        enum Match {
            Dot,
            Scaled { queries: Vec<Var>, w_k: Var, w_v: Var, scale: Real },
        }
        let matching = match (&self.match_ids, self.spec.match_kind) {
            (None, MatchKind::Dot) => Match::Dot,
            (Some(ids), MatchKind::ScaledDot) => {
                let w_q = binder.var(tape, ids.w_q)?;
                let queries = symbol_vecs
                    .iter()
                    .map(|&m_t| tape.matmul_tb(m_t, w_q))
                    .collect::<Result<Vec<_>>>()?;
                Match::Scaled {
                    queries,
                    w_k: binder.var(tape, ids.w_k)?,
                    w_v: binder.var(tape, ids.w_v)?,
                    scale: 1.0 / (s.h as Real).sqrt(),
                }
            }
            _ => return Err(Error::Contract("match parameters out of sync".into())),
        };
        let (obj_w, obj_b) = self.obj_ids();

        let mut per_candidate = Vec::with_capacity(candidates.len());
        let mut attention = Vec::with_capacity(candidates.len());
        for patches in candidates {
            let enc =
                encode_object(tape, binder, obj_w, obj_b, patches, self.spec.listener_mode)?;
            let (keys, values) = match &matching {
                Match::Dot => (enc, enc),
                Match::Scaled { w_k, w_v, .. } => {
                    (tape.matmul_tb(enc, *w_k)?, tape.matmul_tb(enc, *w_v)?)
                }
            };
            let mut step_scores = Vec::with_capacity(s.t);
            let mut rows = Vec::with_capacity(s.t);
            for (t, &m_t) in symbol_vecs.iter().enumerate() {
                let (query, scale) = match &matching {
                    Match::Dot => (m_t, None),
                    Match::Scaled { queries, scale, .. } => (queries[t], Some(*scale)),
                };
                let (weights, ctx) = attend_kv(tape, query, keys, values, scale)?;
                let st = tape.matmul_tb(ctx, m_t)?;
                step_scores.push(st);
                rows.push(tape.value(weights).data.to_vec());
            }
            let stacked = tape.concat_cols(&step_scores)?;
            per_candidate.push(tape.mean(stacked)?);
            attention.push(AttentionRecord { rows });
        }

        let score_var = tape.concat_cols(&per_candidate)?;
        let scores = tape.value(score_var).data.to_vec();
        Ok(ListenerPass { scores, score_var, attention })
    }

    fn obj_ids(&self) -> (ParamId, ParamId) {
        match &self.ids {
            ListenerIds::Lstm(ids) => (ids.obj_w, ids.obj_b),
            ListenerIds::Transformer(ids) => (ids.obj_w, ids.obj_b),
        }
    }

    /// Per-symbol representation vectors m_1..m_T, each 1 x H.
    fn encode_message<'p>(
        &'p self,
        tape: &mut Tape<'p, Real>,
        binder: &mut Binder<'p, Real>,
        message: &Message,
    ) -> Result<Vec<Var>> {
        let s = self.spec.sizes;
        match &self.ids {
            ListenerIds::Lstm(ids) => {
                let embed = binder.var(tape, ids.embed)?;
                let fwd_w_ih = binder.var(tape, ids.fwd_w_ih)?;
                let fwd_w_hh = binder.var(tape, ids.fwd_w_hh)?;
                let fwd_b = binder.var(tape, ids.fwd_b)?;
                let bwd_w_ih = binder.var(tape, ids.bwd_w_ih)?;
                let bwd_w_hh = binder.var(tape, ids.bwd_w_hh)?;
                let bwd_b = binder.var(tape, ids.bwd_b)?;
                let proj_w = binder.var(tape, ids.proj_w)?;
                let proj_b = binder.var(tape, ids.proj_b)?;

                let embedded: Vec<Var> = message
                    .symbols()
                    .iter()
                    .map(|&m| tape.row(embed, usize::from(m)))
                    .collect::<Result<_>>()?;

                let mut h = tape.constant(1, s.h, vec![0.0; s.h])?;
                let mut c = tape.constant(1, s.h, vec![0.0; s.h])?;
                let mut fwd = Vec::with_capacity(s.t);
                for &x in &embedded {
                    let (nh, nc) =
                        crate::nn::lstm_cell(tape, x, h, c, fwd_w_ih, fwd_w_hh, fwd_b, s.h)?;
                    h = nh;
                    c = nc;
                    fwd.push(h);
                }
                let mut h = tape.constant(1, s.h, vec![0.0; s.h])?;
                let mut c = tape.constant(1, s.h, vec![0.0; s.h])?;
                let mut bwd = vec![Var::default(); s.t];
                for (i, &x) in embedded.iter().enumerate().rev() {
                    let (nh, nc) =
                        crate::nn::lstm_cell(tape, x, h, c, bwd_w_ih, bwd_w_hh, bwd_b, s.h)?;
                    h = nh;
                    c = nc;
                    bwd[i] = h;
                }

                (0..s.t)
                    .map(|i| {
                        let cat = tape.concat_cols(&[fwd[i], bwd[i]])?;
                        let proj = tape.matmul_tb(cat, proj_w)?;
                        tape.add(proj, proj_b)
                    })
                    .collect()
            }
            ListenerIds::Transformer(ids) => {
                let embed = binder.var(tape, ids.embed)?;
                let pos = binder.var(tape, ids.pos)?;
                let sa_q = binder.var(tape, ids.sa_q)?;
                let sa_k = binder.var(tape, ids.sa_k)?;
                let sa_v = binder.var(tape, ids.sa_v)?;
                let sa_o = binder.var(tape, ids.sa_o)?;
                let ln1_g = binder.var(tape, ids.ln1_g)?;
                let ln1_b = binder.var(tape, ids.ln1_b)?;
                let ffn_w1 = binder.var(tape, ids.ffn_w1)?;
                let ffn_b1 = binder.var(tape, ids.ffn_b1)?;
                let ffn_w2 = binder.var(tape, ids.ffn_w2)?;
                let ffn_b2 = binder.var(tape, ids.ffn_b2)?;
                let ln2_g = binder.var(tape, ids.ln2_g)?;
                let ln2_b = binder.var(tape, ids.ln2_b)?;

                let mut rows = Vec::with_capacity(s.t);
                for (i, &m) in message.symbols().iter().enumerate() {
                    let e = tape.row(embed, usize::from(m))?;
                    let p = tape.row(pos, i)?;
                    rows.push(tape.add(e, p)?);
                }
                let x = tape.concat_rows(&rows)?;

                // Full (uncausal) self-attention over the message.
                let scale = 1.0 / (s.h as Real).sqrt();
                let q = tape.matmul_tb(x, sa_q)?;
                let k = tape.matmul_tb(x, sa_k)?;
                let v = tape.matmul_tb(x, sa_v)?;
                let raw = tape.matmul_tb(q, k)?;
                let raw = tape.scale(raw, scale)?;
                let w = tape.softmax(raw, 1)?;
                let ctx = tape.matmul(w, v)?;
                let proj = tape.matmul_tb(ctx, sa_o)?;
                let y = residual_norm(tape, x, proj, ln1_g, ln1_b)?;
                let f = feed_forward(tape, y, ffn_w1, ffn_b1, ffn_w2, ffn_b2)?;
                let m = residual_norm(tape, y, f, ln2_g, ln2_b)?;

                (0..s.t).map(|i| tape.row(m, i)).collect()
            }
        }
    }
}
