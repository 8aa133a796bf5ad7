use rand::Rng;

use super::*;
use crate::agents::{Arch, AttentionRecord, MatchKind, Mode, Sizes};
use crate::world::{build_world, Scheme, WorldKind, WorldSpec};

const SIZES: Sizes = Sizes { v: 6, t: 2, h: 8, a: 4, d: 6 };

fn pair(arch: Arch) -> PairSpec {
    PairSpec {
        arch,
        speaker_mode: Mode::At,
        listener_mode: Mode::At,
        match_kind: MatchKind::default_for(arch),
        sizes: SIZES,
    }
}

fn micro_world(types_train: usize, types_eval: usize, n: usize) -> World {
    build_world(
        &WorldSpec {
            kind: WorldKind::Synthetic,
            scheme: Scheme::Combination { n, k: 2 },
            patches: SIZES.a,
            dim: SIZES.d,
            sigma: 0.1,
            split_train: types_train,
            split_eval: types_eval,
        },
        99,
    )
    .unwrap()
}

fn micro_cfg() -> TrainConfig {
    TrainConfig {
        steps: 5,
        batch: 4,
        candidates: 3,
        alpha: 0.02,
        beta: 0.1,
        ema_decay: 0.99,
        speaker_lr: 1e-3,
        listener_lr: 1e-3,
        baseline: false,
        log_every: 1,
        log_walltime: false,
    }
}

#[test]
fn reward_is_an_indicator() {
    assert_eq!(reward(3, 3), 1.0);
    assert_eq!(reward(0, 3), 0.0);
}

#[test]
fn listener_loss_examples() {
    let mut tape = Tape::new();
    let uniform = tape.constant(1, 15, vec![0.7; 15]).unwrap();
    let (_, loss) = listener_loss_graph(&mut tape, uniform, 4).unwrap();
    assert!((loss - (15.0f64).ln()).abs() < 1e-12, "got {loss}");
    assert!((loss - 2.7081).abs() < 1e-4);

    let two = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
    let (_, loss2) = listener_loss_graph(&mut tape, two, 0).unwrap();
    assert!((loss2 - (2.0f64).ln()).abs() < 1e-12);

    // Raising the target score with the rest fixed strictly lowers the loss.
    let mut prev = f64::INFINITY;
    for margin in [0.0, 0.5, 1.0, 2.0] {
        let scores = tape.constant(1, 3, vec![margin, 0.0, 0.0]).unwrap();
        let (_, l) = listener_loss_graph(&mut tape, scores, 0).unwrap();
        assert!(l < prev);
        prev = l;
    }

    let bad = tape.constant(1, 3, vec![0.0; 3]).unwrap();
    assert!(listener_loss_graph(&mut tape, bad, 3).is_err());
}

fn manual_pass(tape: &mut Tape<'_, Real>, dists: &[Vec<Real>], symbols: &[u16]) -> SpeakerPass {
    let v = dists[0].len();
    let dist_vars: Vec<Var> = dists
        .iter()
        .map(|d| {
            let logits = tape.constant(1, v, d.iter().map(|p| p.ln()).collect()).unwrap();
            tape.softmax(logits, 1).unwrap()
        })
        .collect();
    SpeakerPass {
        message: Message::new(symbols.to_vec(), v, symbols.len()).unwrap(),
        step_dists: dists.to_vec(),
        attention: AttentionRecord { rows: vec![vec![1.0]; symbols.len()] },
        dist_vars,
    }
}

#[test]
fn speaker_loss_examples() {
    // T=1, V=2, uniform policy, sampled symbol 0, r=1.
    let mut tape = Tape::new();
    let pass = manual_pass(&mut tape, &[vec![0.5, 0.5]], &[0]);
    let ema = vec![vec![0.5, 0.5]];
    let (_, terms) = speaker_loss_graph(&mut tape, &pass, 1.0, &ema, 0.1, 0.2).unwrap();
    assert!((terms.policy - (2.0f64).ln()).abs() < 1e-12, "policy {}", terms.policy);
    assert!((terms.policy - 0.6931).abs() < 1e-4);
    assert!(terms.kl.abs() < 1e-12, "anchored at itself: kl {}", terms.kl);
    // entropy term is -H = sum p log p = -ln 2.
    assert!((terms.entropy + (2.0f64).ln()).abs() < 1e-12);
    let recombined = terms.policy + terms.alpha * terms.entropy + terms.beta * terms.kl;
    assert!((terms.combined - recombined).abs() < 1e-12);

    // r=0 and zero coefficients: every term contributes nothing.
    let (_, zeroed) = speaker_loss_graph(&mut tape, &pass, 0.0, &ema, 0.0, 0.0).unwrap();
    assert_eq!(zeroed.combined, 0.0);

    // Mismatched anchor shapes are rejected.
    assert!(speaker_loss_graph(&mut tape, &pass, 1.0, &[], 0.0, 0.0).is_err());
    assert!(speaker_loss_graph(&mut tape, &pass, 1.0, &[vec![1.0]], 0.0, 0.0).is_err());
}

#[test]
fn zero_signal_means_exactly_zero_gradient() {
    let logits = crate::RealTensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.0])
        .unwrap()
        .with_grad();
    let mut tape = Tape::new();
    let lv = tape.leaf(&logits).unwrap();
    let dist = tape.softmax(lv, 1).unwrap();
    let pass = SpeakerPass {
        message: Message::new(vec![2], 4, 1).unwrap(),
        step_dists: vec![tape.value(dist).data.to_vec()],
        attention: AttentionRecord { rows: vec![vec![1.0]] },
        dist_vars: vec![dist],
    };
    let ema = vec![vec![0.25; 4]];
    let (loss, _) = speaker_loss_graph(&mut tape, &pass, 0.0, &ema, 0.0, 0.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(lv).unwrap();
    assert!(g.iter().all(|&x| x == 0.0), "expected exact zeros, got {g:?}");
}

#[test]
fn kl_term_is_nonnegative_and_detects_mismatch() {
    let mut rng = crate::seeds::rng(17, "test/kl", 0);
    for trial in 0..100 {
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let lv = tape.constant(1, 5, logits).unwrap();
        let dist = tape.softmax(lv, 1).unwrap();
        let live = tape.value(dist).data.to_vec();
        let pass = SpeakerPass {
            message: Message::new(vec![0], 5, 1).unwrap(),
            step_dists: vec![live.clone()],
            attention: AttentionRecord { rows: vec![vec![1.0]] },
            dist_vars: vec![dist],
        };

        // Anchored at itself: zero.
        let (_, same) = speaker_loss_graph(&mut tape, &pass, 0.0, &[live.clone()], 0.0, 1.0).unwrap();
        assert!(same.kl.abs() < 1e-12);

        // Anchored elsewhere: strictly positive.
        let mut other = live.clone();
        other.rotate_right(1);
        let tv: f64 = live.iter().zip(&other).map(|(a, b)| (a - b).abs()).sum();
        let (_, diff) = speaker_loss_graph(&mut tape, &pass, 0.0, &[other], 0.0, 1.0).unwrap();
        assert!(diff.kl >= -1e-9);
        if tv > 0.01 {
            assert!(diff.kl > 1e-9, "trial {trial}: kl {} at tv {tv}", diff.kl);
        }
    }
}

fn forced_loss(
    speaker: &Speaker,
    patches: &crate::RealTensor,
    msg: &Message,
    ema: &[Vec<Real>],
    r: Real,
    alpha: Real,
    beta: Real,
) -> Real {
    let mut tape = Tape::new();
    let mut binder = Binder::new(speaker.store());
    let pass = speaker
        .generate(&mut tape, &mut binder, patches, Decode::Forced(msg))
        .unwrap();
    let (_, terms) = speaker_loss_graph(&mut tape, &pass, r, ema, alpha, beta).unwrap();
    terms.combined
}

#[test]
fn policy_gradient_matches_finite_differences_on_frozen_samples() {
    let spec = pair(Arch::Lstm);
    let mut speaker = Speaker::new(&spec, 7).unwrap();
    let mut rng = crate::seeds::rng(7, "test/fd", 0);
    let patches = crate::RealTensor::matrix(
        SIZES.a,
        SIZES.d,
        (0..SIZES.a * SIZES.d)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let msg = Message::new(vec![1, 4], SIZES.v, SIZES.t).unwrap();
    let ema = vec![vec![1.0 / SIZES.v as f64; SIZES.v]; SIZES.t];
    let (r, alpha, beta) = (1.0, 0.0, 0.0);

    let mut accum = GradAccum::new(speaker.store());
    {
        let mut tape = Tape::new();
        let mut binder = Binder::new(speaker.store());
        let pass = speaker
            .generate(&mut tape, &mut binder, &patches, Decode::Forced(&msg))
            .unwrap();
        let (loss, _) = speaker_loss_graph(&mut tape, &pass, r, &ema, alpha, beta).unwrap();
        let grads = tape.backward(loss).unwrap();
        accum.absorb(&binder, &grads);
    }

    let h = 1e-5;
    let ids: Vec<_> = speaker.store().ids().collect();
    for id in ids {
        let name = speaker.store().name(id).to_string();
        if name != "out.w" && name != "obj_enc.w" && name != "lstm.w_hh" {
            continue;
        }
        for k in 0..5 {
            let orig = speaker.store().get(id).data()[k];
            speaker.store_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = forced_loss(&speaker, &patches, &msg, &ema, r, alpha, beta);
            speaker.store_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = forced_loss(&speaker, &patches, &msg, &ema, r, alpha, beta);
            speaker.store_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = accum.get(id)[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "{name}[{k}]: analytic {analytic} vs numeric {numeric}");
        }
    }
}

#[test]
fn ema_update_examples() {
    let mut shadow = ParamStore::<Real>::new();
    shadow.add("w", crate::nn::zeros(1, 2)).unwrap();
    let mut live = ParamStore::<Real>::new();
    live.add("w", crate::nn::full(1, 2, 1.0)).unwrap();

    let mut frozen = shadow.clone();
    ema_update(&mut frozen, &live, 1.0).unwrap();
    assert_eq!(frozen.iter().next().unwrap().1.data(), &[0.0, 0.0]);

    let mut copied = shadow.clone();
    ema_update(&mut copied, &live, 0.0).unwrap();
    assert_eq!(copied.iter().next().unwrap().1.data(), &[1.0, 1.0]);

    ema_update(&mut shadow, &live, 0.9).unwrap();
    ema_update(&mut shadow, &live, 0.9).unwrap();
    for &x in shadow.iter().next().unwrap().1.data() {
        assert!((x - 0.19).abs() < 1e-12);
    }

    let mut wrong = ParamStore::<Real>::new();
    wrong.add("w", crate::nn::zeros(1, 3)).unwrap();
    assert!(ema_update(&mut wrong, &live, 0.5).is_err());
    assert!(ema_update(&mut shadow, &live, 1.5).is_err());
}

#[test]
fn ema_policy_shadows_and_converges_to_live() {
    let spec = pair(Arch::Lstm);
    let speaker = Speaker::new(&spec, 21).unwrap();
    let mut rng = crate::seeds::rng(21, "test/ema", 0);
    let patches = crate::RealTensor::matrix(
        SIZES.a,
        SIZES.d,
        (0..SIZES.a * SIZES.d)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let msg = Message::new(vec![0, 3], SIZES.v, SIZES.t).unwrap();

    // decay 0 makes the shadow an exact copy after one update.
    let other = Speaker::new(&spec, 22).unwrap();
    let mut ema = EmaPolicy::new(&other, 0.0).unwrap();
    ema.update(&speaker).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new(speaker.store());
    let live_pass = speaker
        .generate(&mut tape, &mut binder, &patches, Decode::Forced(&msg))
        .unwrap();
    let shadow_dists = ema.distributions(&patches, &msg).unwrap();
    assert_eq!(live_pass.step_dists, shadow_dists);
    assert!(EmaPolicy::new(&speaker, 1.1).is_err());
}

#[test]
fn zero_steps_keeps_the_initialization() {
    let world = micro_world(10, 5, 6);
    let spec = pair(Arch::Lstm);
    let cfg = TrainConfig { steps: 0, ..micro_cfg() };
    let outcome = train(&world, &spec, &cfg, 42).unwrap();
    let fresh = Speaker::new(&spec, seeds::derive(42, "train/speaker", 0)).unwrap();
    for ((_, a), (_, b)) in outcome.speaker.store().iter().zip(fresh.store().iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert!(outcome.log.records().is_empty());
}

#[test]
fn untrained_pairs_score_at_chance() {
    // A single untrained pair is a fixed (argmax) scoring rule, so its
    // accuracy carries a per-draw bias of a few points in either direction.
    // Chance only emerges when pooling over weight draws, so this averages
    // ten fresh pairs at 500 rounds each (5,000 episodes total).
    let world = micro_world(30, 15, 10);
    let spec = pair(Arch::Lstm);
    let mut total = 0.0;
    for s in 0..10u64 {
        let speaker = Speaker::new(&spec, 100 + s).unwrap();
        let listener = Listener::new(&spec, 200 + s).unwrap();
        total += evaluate(&speaker, &listener, &world, SplitSel::Train, 500, 15, 77 + s).unwrap();
    }
    let acc = total / 10.0;
    assert!(
        (acc - 1.0 / 15.0).abs() < 0.02,
        "pooled untrained accuracy {acc} should sit at chance 0.0667"
    );
}

#[test]
fn training_is_bit_reproducible() {
    let world = micro_world(10, 5, 6);
    let spec = pair(Arch::Lstm);
    let cfg = TrainConfig { steps: 8, log_every: 4, ..micro_cfg() };
    let a = train(&world, &spec, &cfg, 3).unwrap();
    let b = train(&world, &spec, &cfg, 3).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    for ((_, x), (_, y)) in a.speaker.store().iter().zip(b.speaker.store().iter()) {
        assert_eq!(x.data(), y.data());
    }
    for ((_, x), (_, y)) in a.listener.store().iter().zip(b.listener.store().iter()) {
        assert_eq!(x.data(), y.data());
    }

    // A different seed diverges.
    let c = train(&world, &spec, &cfg, 4).unwrap();
    assert_ne!(a.log.to_csv(), c.log.to_csv());
}

#[test]
fn log_walltime_toggle_and_csv_shape() {
    let world = micro_world(10, 5, 6);
    let spec = pair(Arch::Transformer);
    let cfg = TrainConfig { steps: 3, log_every: 2, ..micro_cfg() };
    let outcome = train(&world, &spec, &cfg, 1).unwrap();
    let csv = outcome.log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,train_acc,policy_loss,entropy,kl,listener_loss,msg_entropy,seconds"
    );
    // Steps 2 and 3 (the final step is always logged).
    let steps: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, vec!["2", "3"]);
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",0"), "seconds column must be 0 when walltime is off: {line}");
    }

    let mut log = TrainLog::new();
    let rec = TrainRecord {
        step: 5,
        train_acc: 0.0,
        policy_loss: 0.0,
        entropy: 0.0,
        kl: 0.0,
        listener_loss: 0.0,
        msg_entropy: 0.0,
        seconds: 0.0,
    };
    log.push(rec).unwrap();
    assert!(log.push(rec).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let world = micro_world(10, 5, 6);
    let spec = pair(Arch::Lstm);
    for cfg in [
        TrainConfig { batch: 0, ..micro_cfg() },
        TrainConfig { candidates: 1, ..micro_cfg() },
        TrainConfig { ema_decay: 1.5, ..micro_cfg() },
        TrainConfig { speaker_lr: 0.0, ..micro_cfg() },
        TrainConfig { log_every: 0, ..micro_cfg() },
        TrainConfig { alpha: f64::NAN, ..micro_cfg() },
    ] {
        assert!(train(&world, &spec, &cfg, 0).is_err());
    }
    assert!(evaluate(
        &Speaker::new(&spec, 0).unwrap(),
        &Listener::new(&spec, 0).unwrap(),
        &world,
        SplitSel::Train,
        0,
        3,
        0
    )
    .is_err());
}

#[test]
fn short_training_lifts_accuracy_above_chance() {
    // A quick sanity run: 5 candidates (chance 0.2) on the tiny world.
    let world = micro_world(10, 5, 6);
    let spec = pair(Arch::Lstm);
    let cfg = TrainConfig {
        steps: 150,
        batch: 16,
        candidates: 5,
        alpha: 0.02,
        beta: 0.05,
        speaker_lr: 5e-3,
        listener_lr: 5e-3,
        log_every: 10,
        ..micro_cfg()
    };
    let outcome = train(&world, &spec, &cfg, 11).unwrap();
    let acc = evaluate(&outcome.speaker, &outcome.listener, &world, SplitSel::Train, 500, 5, 1)
        .unwrap();
    assert!(acc > 0.3, "trained accuracy {acc} barely above chance 0.2");
}
