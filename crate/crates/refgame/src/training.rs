//! The optimization loop: REINFORCE speaker updates with entropy and EMA-KL
//! regularizers, cross-entropy listener updates, and accuracy evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::agents::{Decode, Listener, ListenerPass, Message, PairSpec, Speaker, SpeakerPass};
use crate::error::{Error, Result};
use crate::nn::{Binder, GradAccum, Optimizer, ParamStore};
use crate::tensor::AdamHyper;
use crate::seeds;
use crate::tensor::{Tape, Var, LOG_FLOOR};
use crate::world::{Episode, SplitSel, World};
use crate::{Real, RealTensor};

/// The speaker's minimized quantity, decomposed. `entropy` is the minimized
/// term -sum_t H_t, so `combined = policy + alpha * entropy + beta * kl`.
#[derive(Debug, Clone, Copy)]
pub struct SpeakerLossTerms {
    pub policy: Real,
    pub entropy: Real,
    pub kl: Real,
    pub combined: Real,
    pub alpha: Real,
    pub beta: Real,
}

/// 1.0 when the listener picked the target.
pub fn reward(chosen: usize, target: usize) -> Real {
    if chosen == target {
        1.0
    } else {
        0.0
    }
}

/// Build the speaker loss on the caller's tape:
/// -r * sum_t log pi(m_t) + alpha * (-sum_t H_t) + beta * sum_t KL(pi_t || ema_t).
///
/// The EMA distributions enter as constants, so gradients flow only through
/// the live policy. Returns the combined 1x1 node and the term values.
pub fn speaker_loss_graph<'p>(
    tape: &mut Tape<'p, Real>,
    pass: &SpeakerPass,
    r: Real,
    ema_dists: &[Vec<Real>],
    alpha: Real,
    beta: Real,
) -> Result<(Var, SpeakerLossTerms)> {
    let t_len = pass.dist_vars.len();
    if ema_dists.len() != t_len {
        return Err(Error::Contract(format!(
            "{} anchor distributions for {} message steps",
            ema_dists.len(),
            t_len
        )));
    }

    let mut policy_parts = Vec::with_capacity(t_len);
    let mut entropy_parts = Vec::with_capacity(t_len);
    let mut kl_parts = Vec::with_capacity(t_len);
    for (t, &dist) in pass.dist_vars.iter().enumerate() {
        let (_, v) = tape.dims(dist);
        if ema_dists[t].len() != v {
            return Err(Error::Contract(format!(
                "anchor distribution of {} entries where the vocabulary is {v}",
                ema_dists[t].len()
            )));
        }
        let logp = tape.log_floor(dist)?;

        let picked = tape.pick(logp, 0, usize::from(pass.message.symbols()[t]))?;
        policy_parts.push(tape.scale(picked, -r)?);

        // sum p log p is both -H_t and the live half of the KL term.
        let plogp = tape.mul(dist, logp)?;
        let neg_h = tape.sum(plogp)?;
        entropy_parts.push(neg_h);

        let ema_log: Vec<Real> =
            ema_dists[t].iter().map(|&q| q.max(LOG_FLOOR).ln()).collect();
        let ema_log = tape.constant(1, v, ema_log)?;
        let cross = tape.mul(dist, ema_log)?;
        let cross = tape.sum(cross)?;
        kl_parts.push(tape.sub(neg_h, cross)?);
    }

    let policy = sum_vars(tape, &policy_parts)?;
    let entropy = sum_vars(tape, &entropy_parts)?;
    let kl = sum_vars(tape, &kl_parts)?;

    let scaled_h = tape.scale(entropy, alpha)?;
    let scaled_kl = tape.scale(kl, beta)?;
    let reg = tape.add(scaled_h, scaled_kl)?;
    let combined = tape.add(policy, reg)?;

    let terms = SpeakerLossTerms {
        policy: tape.value(policy).data[0],
        entropy: tape.value(entropy).data[0],
        kl: tape.value(kl).data[0],
        combined: tape.value(combined).data[0],
        alpha,
        beta,
    };
    if terms.kl < -1e-9 {
        return Err(Error::Numeric {
            op: "speaker_loss",
            detail: format!("negative KL {}", terms.kl),
        });
    }
    Ok((combined, terms))
}

fn sum_vars<'p>(tape: &mut Tape<'p, Real>, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// Cross-entropy of softmax(scores) at the target index, on the caller's
/// tape. Returns the 1x1 loss node and its value.
pub fn listener_loss_graph<'p>(
    tape: &mut Tape<'p, Real>,
    scores: Var,
    target: usize,
) -> Result<(Var, Real)> {
    let (_, c) = tape.dims(scores);
    if target >= c {
        return Err(Error::Contract(format!(
            "target index {target} among {c} candidates"
        )));
    }
    let probs = tape.softmax(scores, 1)?;
    let logp = tape.log_floor(probs)?;
    let picked = tape.pick(logp, 0, target)?;
    let loss = tape.scale(picked, -1.0)?;
    Ok((loss, tape.value(loss).data[0]))
}

/// Per-tensor shadow <- decay * shadow + (1 - decay) * live.
pub fn ema_update(
    shadow: &mut ParamStore<Real>,
    live: &ParamStore<Real>,
    decay: Real,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
    }
    let shadow_manifest = shadow.manifest();
    if shadow_manifest != live.manifest() {
        return Err(Error::Contract(
            "EMA shadow and live parameter sets differ in names or shapes".into(),
        ));
    }
    for (id, live_id) in shadow.ids().zip(live.ids()).collect::<Vec<_>>() {
        let src = live.get(live_id).data().to_vec();
        for (dst, s) in shadow.get_mut(id).data_mut().iter_mut().zip(src) {
            *dst = decay * *dst + (1.0 - decay) * s;
        }
    }
    Ok(())
}

/// A gradient-frozen trailing copy of the speaker, queried with teacher
/// forcing to anchor the KL regularizer.
#[derive(Clone)]
pub struct EmaPolicy {
    speaker: Speaker,
    decay: Real,
}

impl EmaPolicy {
    pub fn new(live: &Speaker, decay: Real) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
        }
        let mut speaker = live.clone();
        speaker.freeze();
        Ok(EmaPolicy { speaker, decay })
    }

    pub fn decay(&self) -> Real {
        self.decay
    }

    pub fn speaker(&self) -> &Speaker {
        &self.speaker
    }

    pub fn update(&mut self, live: &Speaker) -> Result<()> {
        ema_update(self.speaker.store_mut(), live.store(), self.decay)
    }

    /// Step distributions for the given message prefix, gradient-detached.
    pub fn distributions(
        &self,
        patches: &RealTensor,
        message: &Message,
    ) -> Result<Vec<Vec<Real>>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(self.speaker.store());
        let pass =
            self.speaker
                .generate(&mut tape, &mut binder, patches, Decode::Forced(message))?;
        Ok(pass.step_dists)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub step: usize,
    pub train_acc: Real,
    pub policy_loss: Real,
    pub entropy: Real,
    pub kl: Real,
    pub listener_loss: Real,
    pub msg_entropy: Real,
    pub seconds: Real,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn new() -> Self {
        TrainLog::default()
    }

    pub fn push(&mut self, record: TrainRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::Contract(format!(
                    "log steps must increase: {} after {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("step,train_acc,policy_loss,entropy,kl,listener_loss,msg_entropy,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.train_acc,
                r.policy_loss,
                r.entropy,
                r.kl,
                r.listener_loss,
                r.msg_entropy,
                r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub candidates: usize,
    pub alpha: Real,
    pub beta: Real,
    pub ema_decay: Real,
    pub speaker_lr: Real,
    pub listener_lr: Real,
    /// Subtract the batch-mean reward from each episode's reward.
    pub baseline: bool,
    pub log_every: usize,
    /// When false the `seconds` column is 0.0 and logs are byte-reproducible.
    pub log_walltime: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.candidates < 2 || self.log_every == 0 {
            return Err(Error::Config(format!(
                "batch {} / candidates {} / log_every {} out of range",
                self.batch, self.candidates, self.log_every
            )));
        }
        if !(self.speaker_lr > 0.0) || !(self.listener_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "EMA decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("regularizer coefficients must be finite".into()));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub speaker: Speaker,
    pub listener: Listener,
    pub log: TrainLog,
}

struct EpisodeRun<'p> {
    speaker_binder: Binder<'p, Real>,
    listener_binder: Binder<'p, Real>,
    tape: Tape<'p, Real>,
    pass: SpeakerPass,
    lpass: ListenerPass,
    ema_dists: Vec<Vec<Real>>,
    target: usize,
    reward: Real,
}

/// Empirical entropy (nats) of the batch's message frequencies.
/// BTreeMap keeps the summation order fixed so identical runs log identical bytes.
fn message_entropy(messages: &[&Message]) -> Real {
    let mut counts: BTreeMap<&[u16], usize> = BTreeMap::new();
    for m in messages {
        *counts.entry(m.symbols()).or_insert(0) += 1;
    }
    let n = messages.len() as Real;
    counts
        .values()
        .map(|&c| {
            let p = c as Real / n;
            -p * p.ln()
        })
        .sum()
}

/// One full training run; bit-reproducible under (world, pair, cfg, seed).
pub fn train(world: &World, pair: &PairSpec, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut speaker = Speaker::new(pair, seeds::derive(seed, "train/speaker", 0))?;
    let mut listener = Listener::new(pair, seeds::derive(seed, "train/listener", 0))?;
    let mut ema = EmaPolicy::new(&speaker, cfg.ema_decay)?;
    let mut opt_s = Optimizer::new(
        speaker.store(),
        AdamHyper { lr: cfg.speaker_lr, ..AdamHyper::default() },
    );
    let mut opt_l = Optimizer::new(
        listener.store(),
        AdamHyper { lr: cfg.listener_lr, ..AdamHyper::default() },
    );
    let mut accum_s = GradAccum::new(speaker.store());
    let mut accum_l = GradAccum::new(listener.store());

    let mut episode_rng = seeds::rng(seed, "train/episodes", 0);
    let mut sample_rng = seeds::rng(seed, "train/sampling", 0);
    let mut log = TrainLog::new();
    let start = Instant::now();

    for step in 1..=cfg.steps {
        accum_s.zero();
        accum_l.zero();

        let episodes: Vec<Episode> = (0..cfg.batch)
            .map(|_| world.sample_episode(SplitSel::Train, cfg.candidates, &mut episode_rng))
            .collect::<Result<_>>()?;

        let stats = {
            let mut runs: Vec<EpisodeRun<'_>> = Vec::with_capacity(cfg.batch);
            for ep in &episodes {
                let mut tape = Tape::new();
                let mut speaker_binder = Binder::new(speaker.store());
                let pass = speaker.generate(
                    &mut tape,
                    &mut speaker_binder,
                    &ep.speaker_instance.patches,
                    Decode::Sample(&mut sample_rng),
                )?;
                let ema_dists = ema.distributions(&ep.speaker_instance.patches, &pass.message)?;
                let mut listener_binder = Binder::new(listener.store());
                let cands: Vec<&RealTensor> = ep.candidates.iter().map(|c| &c.patches).collect();
                let lpass =
                    listener.score(&mut tape, &mut listener_binder, &pass.message, &cands)?;
                let r = reward(lpass.choice(), ep.target_index);
                runs.push(EpisodeRun {
                    speaker_binder,
                    listener_binder,
                    tape,
                    pass,
                    lpass,
                    ema_dists,
                    target: ep.target_index,
                    reward: r,
                });
            }

            let mean_reward =
                runs.iter().map(|r| r.reward).sum::<Real>() / cfg.batch as Real;
            let mut policy_sum = 0.0;
            let mut entropy_sum = 0.0;
            let mut kl_sum = 0.0;
            let mut listener_sum = 0.0;
            for run in &mut runs {
                let advantage = if cfg.baseline {
                    run.reward - mean_reward
                } else {
                    run.reward
                };
                let (sp_loss, terms) = speaker_loss_graph(
                    &mut run.tape,
                    &run.pass,
                    advantage,
                    &run.ema_dists,
                    cfg.alpha,
                    cfg.beta,
                )?;
                let (li_loss, li_value) =
                    listener_loss_graph(&mut run.tape, run.lpass.score_var, run.target)?;
                if !terms.combined.is_finite() || !li_value.is_finite() {
                    return Err(Error::Numeric {
                        op: "train",
                        detail: format!(
                            "non-finite loss at step {step} (speaker {}, listener {li_value})",
                            terms.combined
                        ),
                    });
                }
                let sp_grads = run.tape.backward(sp_loss)?;
                accum_s.absorb(&run.speaker_binder, &sp_grads);
                let li_grads = run.tape.backward(li_loss)?;
                accum_l.absorb(&run.listener_binder, &li_grads);

                policy_sum += terms.policy;
                entropy_sum += terms.entropy;
                kl_sum += terms.kl;
                listener_sum += li_value;
            }

            let messages: Vec<&Message> = runs.iter().map(|r| &r.pass.message).collect();
            (
                mean_reward,
                policy_sum / cfg.batch as Real,
                entropy_sum / cfg.batch as Real,
                kl_sum / cfg.batch as Real,
                listener_sum / cfg.batch as Real,
                message_entropy(&messages),
            )
        };
        let (acc, policy, entropy, kl, listener_loss, msg_entropy) = stats;

        let inv = 1.0 / cfg.batch as Real;
        accum_s.scale(inv);
        accum_l.scale(inv);
        if !accum_s.is_finite() || !accum_l.is_finite() {
            return Err(Error::Numeric {
                op: "train",
                detail: format!("non-finite gradient at step {step}"),
            });
        }
        opt_s.step(speaker.store_mut(), &accum_s)?;
        opt_l.step(listener.store_mut(), &accum_l)?;
        ema.update(&speaker)?;

        if step % cfg.log_every == 0 || step == cfg.steps {
            let seconds = if cfg.log_walltime {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            log.push(TrainRecord {
                step,
                train_acc: acc,
                policy_loss: policy,
                entropy,
                kl,
                listener_loss,
                msg_entropy,
                seconds,
            })?;
        }
    }

    Ok(TrainOutcome { speaker, listener, log })
}

/// Fraction of rounds where the greedy message leads the listener to the
/// target. `SplitSel::Train` measures TrainAcc, `SplitSel::Eval` GenAcc.
pub fn evaluate(
    speaker: &Speaker,
    listener: &Listener,
    world: &World,
    split: SplitSel,
    rounds: usize,
    candidates: usize,
    seed: u64,
) -> Result<Real> {
    if rounds == 0 {
        return Err(Error::Config("evaluation over zero rounds".into()));
    }
    let tag = match split {
        SplitSel::Train => "evaluate/train",
        SplitSel::Eval => "evaluate/eval",
    };
    let mut rng = seeds::rng(seed, tag, 0);
    let mut hits = 0usize;
    for _ in 0..rounds {
        let ep = world.sample_episode(split, candidates, &mut rng)?;
        let mut tape = Tape::new();
        let mut sbinder = Binder::new(speaker.store());
        let pass =
            speaker.generate(&mut tape, &mut sbinder, &ep.speaker_instance.patches, Decode::Greedy)?;
        let mut lbinder = Binder::new(listener.store());
        let cands: Vec<&RealTensor> = ep.candidates.iter().map(|c| &c.patches).collect();
        let lpass = listener.score(&mut tape, &mut lbinder, &pass.message, &cands)?;
        if lpass.choice() == ep.target_index {
            hits += 1;
        }
    }
    Ok(hits as Real / rounds as Real)
}

#[cfg(test)]
mod tests;
