//! Speaker agents: object in, T-symbol message out.

use std::path::Path;

use super::{
    argmax, encode_object, sample_index, Arch, AttentionRecord, Decode, Message, PairSpec,
    SpeakerOutput,
};
use crate::error::{Error, Result};
use crate::nn::{attend, feed_forward, residual_norm, xavier, AttendParams, Binder, ParamId,
    ParamStore};
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Var};
use crate::{Real, RealTensor};

/// Forward-pass record. `dist_vars` are the live per-step distribution nodes
/// on the caller's tape, for building the policy loss.
#[derive(Clone)]
pub struct SpeakerPass {
    pub message: Message,
    pub step_dists: Vec<Vec<Real>>,
    pub attention: AttentionRecord,
    pub dist_vars: Vec<Var>,
}

impl SpeakerPass {
    pub fn output(&self) -> SpeakerOutput {
        SpeakerOutput {
            message: self.message.clone(),
            step_distributions: self.step_dists.clone(),
            attention: self.attention.clone(),
        }
    }
}

#[derive(Clone)]
struct LstmIds {
    obj_w: ParamId,
    obj_b: ParamId,
    embed: ParamId,
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
    attn_wb: ParamId,
    luong_wc: ParamId,
    out_w: ParamId,
    out_b: ParamId,
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
    ca_q: ParamId,
    ca_k: ParamId,
    ca_v: ParamId,
    ca_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln3_g: ParamId,
    ln3_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone)]
enum SpeakerIds {
    Lstm(LstmIds),
    Transformer(TransformerIds),
}

#[derive(Clone)]
pub struct Speaker {
    spec: PairSpec,
    store: ParamStore<Real>,
    ids: SpeakerIds,
}

impl Speaker {
    pub fn new(spec: &PairSpec, seed: u64) -> Result<Speaker> {
        spec.sizes.validate()?;
        let s = spec.sizes;
        let (v, t, h, d) = (s.v, s.t, s.h, s.d);
        let mut store = ParamStore::new();
        let mut rng = crate::seeds::rng(seed, "speaker/init", 0);

        let obj_w = store.add("obj_enc.w", xavier(h, d, &mut rng))?;
        let obj_b = store.add("obj_enc.b", crate::nn::zeros(1, h))?;
        // Row V is the begin-of-message embedding.
        let embed = store.add("embed.sym", xavier(v + 1, h, &mut rng))?;

        let ids = match spec.arch {
            Arch::Lstm => {
                let w_ih = store.add("lstm.w_ih", xavier(4 * h, h, &mut rng))?;
                let w_hh = store.add("lstm.w_hh", xavier(4 * h, h, &mut rng))?;
                let b = store.add("lstm.b", crate::nn::zeros(1, 4 * h))?;
                let attn_wb = store.add("attn.w_b", xavier(h, h, &mut rng))?;
                let luong_wc = store.add("luong.w_c", xavier(h, 2 * h, &mut rng))?;
                let out_w = store.add("out.w", xavier(v, h, &mut rng))?;
                let out_b = store.add("out.b", crate::nn::zeros(1, v))?;
                // Forget-gate bias starts at 1 so early cells retain state.
                for x in &mut store.get_mut(b).data_mut()[h..2 * h] {
                    *x = 1.0;
                }
                SpeakerIds::Lstm(LstmIds {
                    obj_w,
                    obj_b,
                    embed,
                    w_ih,
                    w_hh,
                    b,
                    attn_wb,
                    luong_wc,
                    out_w,
                    out_b,
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
                let ca_q = store.add("cross_attn.w_q", xavier(h, h, &mut rng))?;
                let ca_k = store.add("cross_attn.w_k", xavier(h, h, &mut rng))?;
                let ca_v = store.add("cross_attn.w_v", xavier(h, h, &mut rng))?;
                let ca_o = store.add("cross_attn.w_o", xavier(h, h, &mut rng))?;
                let ln2_g = store.add("ln2.g", crate::nn::full(1, h, 1.0))?;
                let ln2_b = store.add("ln2.b", crate::nn::zeros(1, h))?;
                let ffn_w1 = store.add("ffn.w1", xavier(4 * h, h, &mut rng))?;
                let ffn_b1 = store.add("ffn.b1", crate::nn::zeros(1, 4 * h))?;
                let ffn_w2 = store.add("ffn.w2", xavier(h, 4 * h, &mut rng))?;
                let ffn_b2 = store.add("ffn.b2", crate::nn::zeros(1, h))?;
                let ln3_g = store.add("ln3.g", crate::nn::full(1, h, 1.0))?;
                let ln3_b = store.add("ln3.b", crate::nn::zeros(1, h))?;
                let out_w = store.add("out.w", xavier(v, h, &mut rng))?;
                let out_b = store.add("out.b", crate::nn::zeros(1, v))?;
                SpeakerIds::Transformer(TransformerIds {
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
                    ca_q,
                    ca_k,
                    ca_v,
                    ca_o,
                    ln2_g,
                    ln2_b,
                    ffn_w1,
                    ffn_b1,
                    ffn_w2,
                    ffn_b2,
                    ln3_g,
                    ln3_b,
                    out_w,
                    out_b,
                })
            }
        };

        Ok(Speaker { spec: *spec, store, ids })
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

    /// Disable gradients on every parameter (EMA copies).
    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = self
            .store
            .to_checkpoint(Some(&self.spec.manifest_text("speaker")))?;
        write_checkpoint(path, &ck)
    }

    pub fn load(path: &Path, spec: &PairSpec, seed: u64) -> Result<Speaker> {
        let mut agent = Speaker::new(spec, seed)?;
        let ck = read_checkpoint(path)?;
        agent.store.load_from_checkpoint(&ck)?;
        Ok(agent)
    }

    /// Run the speaker over one object. The tape and binder are supplied by
    /// the caller so losses can be built on the same graph.
    pub fn generate<'p>(
        &'p self,
        tape: &mut Tape<'p, Real>,
        binder: &mut Binder<'p, Real>,
        patches: &'p RealTensor,
        decode: Decode<'_>,
    ) -> Result<SpeakerPass> {
        let s = self.spec.sizes;
        let (rows, cols) = patches.mat_dims()?;
        if rows != s.a || cols != s.d {
            return Err(Error::Contract(format!(
                "speaker expects a {}x{} object, got {rows}x{cols}",
                s.a, s.d
            )));
        }
        match &self.ids {
            SpeakerIds::Lstm(ids) => self.generate_lstm(tape, binder, patches, decode, ids),
            SpeakerIds::Transformer(ids) => {
                self.generate_transformer(tape, binder, patches, decode, ids)
            }
        }
    }

    fn select_symbol(
        &self,
        dist: &[Real],
        step: usize,
        decode: &mut Decode<'_>,
    ) -> Result<u16> {
        let idx = match decode {
            Decode::Sample(rng) => sample_index(dist, rng),
            Decode::Greedy => argmax(dist),
            Decode::Forced(msg) => {
                if msg.len() != self.spec.sizes.t {
                    return Err(Error::Contract(format!(
                        "forced message has {} symbols, speaker emits {}",
                        msg.len(),
                        self.spec.sizes.t
                    )));
                }
                usize::from(msg.symbols()[step])
            }
        };
        u16::try_from(idx).map_err(|_| Error::Contract("symbol id exceeds u16".into()))
    }

    fn generate_lstm<'p>(
        &'p self,
        tape: &mut Tape<'p, Real>,
        binder: &mut Binder<'p, Real>,
        patches: &'p RealTensor,
        mut decode: Decode<'_>,
        ids: &LstmIds,
    ) -> Result<SpeakerPass> {
        let s = self.spec.sizes;
        let enc = encode_object(tape, binder, ids.obj_w, ids.obj_b, patches, self.spec.speaker_mode)?;
        let embed = binder.var(tape, ids.embed)?;
        let w_ih = binder.var(tape, ids.w_ih)?;
        let w_hh = binder.var(tape, ids.w_hh)?;
        let b = binder.var(tape, ids.b)?;
        let attn_wb = binder.var(tape, ids.attn_wb)?;
        let luong_wc = binder.var(tape, ids.luong_wc)?;
        let out_w = binder.var(tape, ids.out_w)?;
        let out_b = binder.var(tape, ids.out_b)?;

        let mut h = tape.constant(1, s.h, vec![0.0; s.h])?;
        let mut c = tape.constant(1, s.h, vec![0.0; s.h])?;
        let mut prev: usize = s.v;

        let mut symbols = Vec::with_capacity(s.t);
        let mut step_dists = Vec::with_capacity(s.t);
        let mut attn_rows = Vec::with_capacity(s.t);
        let mut dist_vars = Vec::with_capacity(s.t);

        for step in 0..s.t {
            let x = tape.row(embed, prev)?;
            let (nh, nc) = crate::nn::lstm_cell(tape, x, h, c, w_ih, w_hh, b, s.h)?;
            h = nh;
            c = nc;
            let (weights, ctx) =
                attend(tape, h, enc, &AttendParams::Bilinear { w_b: attn_wb })?;
            let cat = tape.concat_cols(&[h, ctx])?;
            let mixed = tape.matmul_tb(cat, luong_wc)?;
            let mixed = tape.tanh(mixed)?;
            let logits = tape.matmul_tb(mixed, out_w)?;
            let logits = tape.add(logits, out_b)?;
            let dist = tape.softmax(logits, 1)?;

            let dist_vals = tape.value(dist).data.to_vec();
            let sym = self.select_symbol(&dist_vals, step, &mut decode)?;
            attn_rows.push(tape.value(weights).data.to_vec());
            step_dists.push(dist_vals);
            dist_vars.push(dist);
            symbols.push(sym);
            prev = usize::from(sym);
        }

        Ok(SpeakerPass {
            message: Message::new(symbols, s.v, s.t)?,
            step_dists,
            attention: AttentionRecord { rows: attn_rows },
            dist_vars,
        })
    }

    fn generate_transformer<'p>(
        &'p self,
        tape: &mut Tape<'p, Real>,
        binder: &mut Binder<'p, Real>,
        patches: &'p RealTensor,
        mut decode: Decode<'_>,
        ids: &TransformerIds,
    ) -> Result<SpeakerPass> {
        let s = self.spec.sizes;
        let scale = 1.0 / (s.h as Real).sqrt();
        let enc = encode_object(tape, binder, ids.obj_w, ids.obj_b, patches, self.spec.speaker_mode)?;
        let embed = binder.var(tape, ids.embed)?;
        let pos = binder.var(tape, ids.pos)?;
        let sa_q = binder.var(tape, ids.sa_q)?;
        let sa_k = binder.var(tape, ids.sa_k)?;
        let sa_v = binder.var(tape, ids.sa_v)?;
        let sa_o = binder.var(tape, ids.sa_o)?;
        let ln1_g = binder.var(tape, ids.ln1_g)?;
        let ln1_b = binder.var(tape, ids.ln1_b)?;
        let ca_q = binder.var(tape, ids.ca_q)?;
        let ca_k = binder.var(tape, ids.ca_k)?;
        let ca_v = binder.var(tape, ids.ca_v)?;
        let ca_o = binder.var(tape, ids.ca_o)?;
        let ln2_g = binder.var(tape, ids.ln2_g)?;
        let ln2_b = binder.var(tape, ids.ln2_b)?;
        let ffn_w1 = binder.var(tape, ids.ffn_w1)?;
        let ffn_b1 = binder.var(tape, ids.ffn_b1)?;
        let ffn_w2 = binder.var(tape, ids.ffn_w2)?;
        let ffn_b2 = binder.var(tape, ids.ffn_b2)?;
        let ln3_g = binder.var(tape, ids.ln3_g)?;
        let ln3_b = binder.var(tape, ids.ln3_b)?;
        let out_w = binder.var(tape, ids.out_w)?;
        let out_b = binder.var(tape, ids.out_b)?;

        // Cross-attention keys/values depend only on the object; build once.
        let cross_k = tape.matmul_tb(enc, ca_k)?;
        let cross_v = tape.matmul_tb(enc, ca_v)?;

        let mut prefix: Vec<usize> = vec![s.v];
        let mut symbols = Vec::with_capacity(s.t);
        let mut step_dists = Vec::with_capacity(s.t);
        let mut attn_rows = Vec::with_capacity(s.t);
        let mut dist_vars = Vec::with_capacity(s.t);

        for step in 0..s.t {
            let mut rows = Vec::with_capacity(prefix.len());
            for (i, &id) in prefix.iter().enumerate() {
                let e = tape.row(embed, id)?;
                let p = tape.row(pos, i)?;
                rows.push(tape.add(e, p)?);
            }
            let x = tape.concat_rows(&rows)?;
            let x_last = rows[rows.len() - 1];

            // Self-attention, querying from the newest prefix position only.
            let q = tape.matmul_tb(x_last, sa_q)?;
            let k = tape.matmul_tb(x, sa_k)?;
            let v = tape.matmul_tb(x, sa_v)?;
            let raw = tape.matmul_tb(q, k)?;
            let raw = tape.scale(raw, scale)?;
            let w = tape.softmax(raw, 1)?;
            let ctx = tape.matmul(w, v)?;
            let proj = tape.matmul_tb(ctx, sa_o)?;
            let y = residual_norm(tape, x_last, proj, ln1_g, ln1_b)?;

            // Cross-attention over the object encoding.
            let q2 = tape.matmul_tb(y, ca_q)?;
            let raw2 = tape.matmul_tb(q2, cross_k)?;
            let raw2 = tape.scale(raw2, scale)?;
            let w2 = tape.softmax(raw2, 1)?;
            let ctx2 = tape.matmul(w2, cross_v)?;
            let proj2 = tape.matmul_tb(ctx2, ca_o)?;
            let z = residual_norm(tape, y, proj2, ln2_g, ln2_b)?;

            let f = feed_forward(tape, z, ffn_w1, ffn_b1, ffn_w2, ffn_b2)?;
            let top = residual_norm(tape, z, f, ln3_g, ln3_b)?;

            let logits = tape.matmul_tb(top, out_w)?;
            let logits = tape.add(logits, out_b)?;
            let dist = tape.softmax(logits, 1)?;

            let dist_vals = tape.value(dist).data.to_vec();
            let sym = self.select_symbol(&dist_vals, step, &mut decode)?;
            attn_rows.push(tape.value(w2).data.to_vec());
            step_dists.push(dist_vals);
            dist_vars.push(dist);
            symbols.push(sym);
            prefix.push(usize::from(sym));
        }

        Ok(SpeakerPass {
            message: Message::new(symbols, s.v, s.t)?,
            step_dists,
            attention: AttentionRecord { rows: attn_rows },
            dist_vars,
        })
    }
}
