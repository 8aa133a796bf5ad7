//! Experiment orchestration: flat-text configs, (α, seed) sweeps with
//! idempotent on-disk artifacts, top-k selection, and plot-data emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::agents::{Arch, Decode, Listener, MatchKind, Mode, PairSpec, Sizes, Speaker};
use crate::error::{Error, Result};
use crate::metrics::{
    attention_discrepancy, symbol_concept_map, topsim, AssociationMatrix, DiscrepancySample,
    EpisodeTrace, LanguageTable, TopSimStatus, JSD_MAX,
};
use crate::nn::Binder;
use crate::seeds;
use crate::tensor::Tape;
use crate::training::{evaluate, train, TrainConfig};
use crate::world::{
    build_world, write_feature_file, FeatureDataset, FeatureInstance, Scheme, SplitSel, World,
    WorldKind, WorldSpec,
};
use crate::{Real, RealTensor};

/// Everything a sweep needs: the world, one agent pairing, the training
/// budget, and the (α, seed) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub world_seed: u64,
    pub arch: Arch,
    pub speaker_mode: Mode,
    pub listener_mode: Mode,
    pub match_kind: MatchKind,
    pub vocab: usize,
    pub message_len: usize,
    pub hidden: usize,
    pub batch: usize,
    pub steps: usize,
    pub candidates: usize,
    pub eval_rounds: usize,
    pub alphas: Vec<Real>,
    pub beta: Real,
    pub lr: Real,
    pub ema_decay: Real,
    pub baseline: bool,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Agent dimensions implied by this config on a built world. The world
    /// wins on patch count and feature dimension so feature files with their
    /// own grid geometry stay consistent.
    pub fn pair_spec(&self, world: &World) -> PairSpec {
        PairSpec {
            arch: self.arch,
            speaker_mode: self.speaker_mode,
            listener_mode: self.listener_mode,
            match_kind: self.match_kind,
            sizes: Sizes {
                v: self.vocab,
                t: self.message_len,
                h: self.hidden,
                a: world.patch_count(),
                d: world.feature_dim(),
            },
        }
    }

    pub fn train_config(&self, alpha: Real) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            candidates: self.candidates,
            alpha,
            beta: self.beta,
            ema_decay: self.ema_decay,
            speaker_lr: self.lr,
            listener_lr: self.lr,
            baseline: self.baseline,
            log_every: (self.steps / 60).max(1),
            log_walltime: false,
        }
    }

    /// `<speaker>-<listener>` label matching the four attention pairings.
    pub fn setting(&self) -> String {
        format!("{}-{}", self.speaker_mode.tag(), self.listener_mode.tag())
    }

    /// Fields that change the trained outcome, one `key = value` line each.
    /// Sweep coordinates (α list, seeds) and the output directory are
    /// excluded: they pick rows inside the run tree, not what a run means.
    fn semantic_text(&self) -> String {
        let mut s = String::new();
        let w = &self.world;
        match &w.kind {
            WorldKind::Synthetic => s.push_str("world = synthetic\n"),
            WorldKind::FeatureFile(p) => {
                let _ = writeln!(s, "world = features\nfeature_file = {}", p.display());
            }
        }
        match &w.scheme {
            Scheme::Combination { n, k } => {
                let _ = writeln!(s, "n_values = {n}\nk_values = {k}");
            }
            // Not constructible from a config file; still hashed faithfully.
            Scheme::Product { arities } => {
                let parts: Vec<String> = arities.iter().map(usize::to_string).collect();
                let _ = writeln!(s, "product_arities = {}", parts.join(","));
            }
        }
        let _ = writeln!(s, "patches = {}\npatch_dim = {}\nsigma = {}", w.patches, w.dim, w.sigma);
        let _ = writeln!(s, "split_train = {}\nsplit_eval = {}", w.split_train, w.split_eval);
        let _ = writeln!(s, "world_seed = {}", self.world_seed);
        let _ = writeln!(s, "architecture = {}", self.arch.tag());
        let _ = writeln!(s, "speaker_mode = {}", self.speaker_mode.tag());
        let _ = writeln!(s, "listener_mode = {}", self.listener_mode.tag());
        let _ = writeln!(s, "listener_attention = {}", self.match_kind.tag());
        let _ = writeln!(s, "vocab = {}\nmessage_len = {}\nhidden = {}", self.vocab, self.message_len, self.hidden);
        let _ = writeln!(s, "batch = {}\nsteps = {}", self.batch, self.steps);
        let _ = writeln!(s, "candidates = {}\neval_rounds = {}", self.candidates, self.eval_rounds);
        let _ = writeln!(s, "beta = {}\nlr = {}\nema_decay = {}", self.beta, self.lr, self.ema_decay);
        let _ = writeln!(s, "baseline = {}", self.baseline);
        s
    }

    /// FNV-1a over the semantic fields; names the sweep directory.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.semantic_text().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Full config as parseable text; written next to the runs it produced.
    pub fn to_text(&self) -> String {
        let mut s = self.semantic_text();
        let alphas: Vec<String> = self.alphas.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(s, "alpha = {}", alphas.join(", "));
        let seeds: Vec<String> = self.seeds.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(", "));
        let _ = writeln!(s, "out = {}", self.out.display());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.vocab < 2 {
            bad.push("vocab: need at least 2 symbols".to_string());
        }
        for (key, value) in [
            ("message_len", self.message_len),
            ("hidden", self.hidden),
            ("batch", self.batch),
            ("eval_rounds", self.eval_rounds),
        ] {
            if value == 0 {
                bad.push(format!("{key}: must be positive"));
            }
        }
        if self.candidates < 2 {
            bad.push("candidates: need at least 2".to_string());
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            bad.push("alpha: need a nonempty list of finite values >= 0".to_string());
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            bad.push("beta: must be finite and >= 0".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bad.push("lr: must be finite and positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            bad.push("ema_decay: must lie in [0, 1]".to_string());
        }
        if self.seeds.is_empty() {
            bad.push("seeds: need at least one".to_string());
        }
        let unique: BTreeSet<&u64> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            bad.push("seeds: duplicates would overwrite each other's runs".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// The profile every shipped `configs/desk-*.cfg` file encodes: a sweep
/// small enough for minutes-scale runs on one CPU core while keeping the
/// game's structural constants (vocabulary, message length, candidate count,
/// split ratio) at full size.
pub fn desk_profile(arch: Arch, speaker_mode: Mode, listener_mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        world: WorldSpec {
            kind: WorldKind::Synthetic,
            scheme: Scheme::Combination { n: 10, k: 2 },
            patches: 8,
            dim: 16,
            sigma: 0.1,
            split_train: 30,
            split_eval: 15,
        },
        world_seed: 0,
        arch,
        speaker_mode,
        listener_mode,
        match_kind: MatchKind::default_for(arch),
        vocab: 20,
        message_len: 2,
        hidden: 32,
        batch: 64,
        steps: 3000,
        candidates: 15,
        eval_rounds: 2000,
        alphas: vec![0.01],
        beta: 0.1,
        lr: 2e-3,
        ema_decay: 0.99,
        baseline: true,
        seeds: (0..10).collect(),
        out: PathBuf::from(format!("runs/desk-{}", arch.tag())),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str) -> std::result::Result<Vec<T>, String> {
    raw.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|_| format!("bad list entry `{p}`")))
        .collect()
}

/// `a..b` half-open range or a comma list.
fn parse_seeds(raw: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((lo, hi)) = raw.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| format!("bad range start `{lo}`"))?;
        let hi: u64 = hi.trim().parse().map_err(|_| format!("bad range end `{hi}`"))?;
        if lo >= hi {
            return Err(format!("empty seed range {lo}..{hi}"));
        }
        Ok((lo..hi).collect())
    } else {
        parse_list(raw)
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    let mut bad: Vec<String> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                    bad.push(format!("{}: set twice", k.trim()));
                }
            }
            None => bad.push(format!("line {}: expected `key = value`", no + 1)),
        }
    }

    // Every key is pulled out of `map`; leftovers are unknown keys. All
    // problems accumulate in `bad` so one pass reports every offender.
    macro_rules! field {
        ($key:literal, $parse:expr) => {
            match map.remove($key) {
                None => {
                    bad.push(format!("{}: missing", $key));
                    None
                }
                Some(raw) => match $parse(raw.as_str()) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        bad.push(format!("{}: {e}", $key));
                        None
                    }
                },
            }
        };
        ($key:literal, $parse:expr, $default:expr) => {
            match map.remove($key) {
                None => Some($default),
                Some(raw) => match $parse(raw.as_str()) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        bad.push(format!("{}: {e}", $key));
                        None
                    }
                },
            }
        };
    }
    fn num<T: std::str::FromStr>(raw: &str) -> std::result::Result<T, String> {
        raw.parse::<T>().map_err(|_| format!("bad value `{raw}`"))
    }

    let kind = field!("world", |raw: &str| match raw {
        "synthetic" => Ok(None),
        "features" => Ok(Some(())),
        other => Err(format!("unknown world `{other}`")),
    });
    let feature_file = map.remove("feature_file");
    let n_values = field!("n_values", num::<usize>);
    let k_values = field!("k_values", num::<usize>);
    let patches = field!("patches", num::<usize>);
    let patch_dim = field!("patch_dim", num::<usize>);
    let sigma = field!("sigma", num::<Real>);
    let split_train = field!("split_train", num::<usize>);
    let split_eval = field!("split_eval", num::<usize>);
    let world_seed = field!("world_seed", num::<u64>, 0);
    let arch = field!("architecture", |raw: &str| match raw {
        "lstm" => Ok(Arch::Lstm),
        "transformer" => Ok(Arch::Transformer),
        other => Err(format!("unknown architecture `{other}`")),
    });
    let mode = |raw: &str| match raw {
        "at" => Ok(Mode::At),
        "noat" => Ok(Mode::NoAt),
        other => Err(format!("unknown mode `{other}`")),
    };
    let speaker_mode = field!("speaker_mode", mode);
    let listener_mode = field!("listener_mode", mode);
    let match_kind = match map.remove("listener_attention") {
        Some(raw) => match raw.as_str() {
            "dot" => Some(MatchKind::Dot),
            "scaled_dot" => Some(MatchKind::ScaledDot),
            other => {
                bad.push(format!("listener_attention: unknown kind `{other}`"));
                None
            }
        },
        None => arch.map(MatchKind::default_for),
    };
    let vocab = field!("vocab", num::<usize>);
    let message_len = field!("message_len", num::<usize>);
    let hidden = field!("hidden", num::<usize>);
    let batch = field!("batch", num::<usize>);
    let steps = field!("steps", num::<usize>);
    let candidates = field!("candidates", num::<usize>);
    let eval_rounds = field!("eval_rounds", num::<usize>);
    let alphas = field!("alpha", parse_list::<Real>);
    let beta = field!("beta", num::<Real>);
    let lr = field!("lr", num::<Real>);
    let ema_decay = field!("ema_decay", num::<Real>);
    let baseline = field!(
        "baseline",
        |raw: &str| match raw {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(format!("expected true or false, got `{other}`")),
        },
        false
    );
    let seeds_list = field!("seeds", parse_seeds);
    let out = field!("out", |raw: &str| Ok::<_, String>(PathBuf::from(raw)));

    for key in map.keys() {
        bad.push(format!("{key}: unknown key"));
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad.join("; ")));
    }

    let kind = match (kind.unwrap(), feature_file) {
        (None, None) => WorldKind::Synthetic,
        (Some(()), Some(path)) => WorldKind::FeatureFile(PathBuf::from(path)),
        (None, Some(_)) => {
            return Err(Error::Config("feature_file: only valid with world = features".into()))
        }
        (Some(()), None) => {
            return Err(Error::Config("feature_file: required with world = features".into()))
        }
    };
    let cfg = ExperimentConfig {
        world: WorldSpec {
            kind,
            scheme: Scheme::Combination { n: n_values.unwrap(), k: k_values.unwrap() },
            patches: patches.unwrap(),
            dim: patch_dim.unwrap(),
            sigma: sigma.unwrap(),
            split_train: split_train.unwrap(),
            split_eval: split_eval.unwrap(),
        },
        world_seed: world_seed.unwrap(),
        arch: arch.unwrap(),
        speaker_mode: speaker_mode.unwrap(),
        listener_mode: listener_mode.unwrap(),
        match_kind: match_kind.unwrap(),
        vocab: vocab.unwrap(),
        message_len: message_len.unwrap(),
        hidden: hidden.unwrap(),
        batch: batch.unwrap(),
        steps: steps.unwrap(),
        candidates: candidates.unwrap(),
        eval_rounds: eval_rounds.unwrap(),
        alphas: alphas.unwrap(),
        beta: beta.unwrap(),
        lr: lr.unwrap(),
        ema_decay: ema_decay.unwrap(),
        baseline: baseline.unwrap(),
        seeds: seeds_list.unwrap(),
        out: out.unwrap(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Outcome of one (α, seed) run, reconstructible from its directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config_hash: String,
    pub alpha: Real,
    pub seed: u64,
    /// NaN mid-training; the sweep keeps going and records the failure.
    pub failed: bool,
    pub train_acc: Real,
    pub gen_acc: Real,
    pub topsim: Option<Real>,
    pub disc_success: Option<Real>,
    pub disc_failure: Option<Real>,
    pub dir: PathBuf,
}

impl RunResult {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("log.csv")
    }

    pub fn speaker_path(&self) -> PathBuf {
        self.dir.join("speaker.ck")
    }

    pub fn listener_path(&self) -> PathBuf {
        self.dir.join("listener.ck")
    }

    fn to_metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "status,{}", if self.failed { "failed" } else { "ok" });
        let _ = writeln!(s, "alpha,{}", self.alpha);
        let _ = writeln!(s, "seed,{}", self.seed);
        if !self.failed {
            let _ = writeln!(s, "train_acc,{}", self.train_acc);
            let _ = writeln!(s, "gen_acc,{}", self.gen_acc);
            match self.topsim {
                Some(v) => {
                    let _ = writeln!(s, "topsim,{v}");
                }
                None => {
                    let _ = writeln!(s, "topsim,degenerate");
                }
            }
            if let Some(v) = self.disc_success {
                let _ = writeln!(s, "disc_success,{v}");
            }
            if let Some(v) = self.disc_failure {
                let _ = writeln!(s, "disc_failure,{v}");
            }
        }
        s
    }

    fn from_metrics_csv(text: &str, hash: &str, dir: &Path) -> Result<RunResult> {
        let mut fields = BTreeMap::new();
        for line in text.lines().skip(1) {
            if let Some((k, v)) = line.split_once(',') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let lookup = |key: &str| {
            fields.get(key).cloned().ok_or_else(|| Error::Format {
                path: dir.to_path_buf(),
                offset: 0,
                detail: format!("missing {key}"),
            })
        };
        let parse = |key: &str| -> Result<Real> {
            lookup(key)?.parse().map_err(|_| Error::Format {
                path: dir.to_path_buf(),
                offset: 0,
                detail: format!("bad {key}"),
            })
        };
        let failed = lookup("status")? == "failed";
        let alpha = parse("alpha")?;
        let seed = lookup("seed")?.parse().map_err(|_| Error::Format {
            path: dir.to_path_buf(),
            offset: 0,
            detail: "bad seed".into(),
        })?;
        if failed {
            return Ok(RunResult {
                config_hash: hash.to_string(),
                alpha,
                seed,
                failed,
                train_acc: 0.0,
                gen_acc: 0.0,
                topsim: None,
                disc_success: None,
                disc_failure: None,
                dir: dir.to_path_buf(),
            });
        }
        let topsim = match lookup("topsim")?.as_str() {
            "degenerate" => None,
            raw => Some(raw.parse().map_err(|_| Error::Format {
                path: dir.to_path_buf(),
                offset: 0,
                detail: "bad topsim".into(),
            })?),
        };
        Ok(RunResult {
            config_hash: hash.to_string(),
            alpha,
            seed,
            failed,
            train_acc: parse("train_acc")?,
            gen_acc: parse("gen_acc")?,
            topsim,
            disc_success: fields.get("disc_success").and_then(|v| v.parse().ok()),
            disc_failure: fields.get("disc_failure").and_then(|v| v.parse().ok()),
            dir: dir.to_path_buf(),
        })
    }
}

/// Evaluation-split analysis of one trained pair: the full-universe greedy
/// language, its topographic similarity, per-episode attention discrepancy
/// (speaker and listener shown the identical target instance), and the
/// symbol-concept association counts.
#[derive(Debug)]
pub struct AnalysisReport {
    pub language: LanguageTable,
    pub topsim: TopSimStatus,
    pub samples: Vec<DiscrepancySample>,
    pub association: Option<AssociationMatrix>,
}

pub fn analyze_pair(
    speaker: &Speaker,
    listener: &Listener,
    world: &World,
    rounds: usize,
    candidates: usize,
    seed: u64,
) -> Result<AnalysisReport> {
    let mut language = LanguageTable::new(world.total_values());
    let mut render_rng = seeds::rng(seed, "analysis/render", 0);
    for ty in world.universe() {
        let inst = world.render_instance(ty, &mut render_rng)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(speaker.store());
        let pass = speaker.generate(&mut tape, &mut binder, &inst.patches, Decode::Greedy)?;
        language.push(ty.clone(), pass.output().message)?;
    }
    let topsim = topsim(&language)?;

    // Discrepancy and association both need real attention rows, which only
    // attending agents produce; a pooled side records a single-weight row.
    let spec = speaker.spec();
    let discrepancy_defined = spec.speaker_mode == Mode::At && spec.listener_mode == Mode::At;
    let association_defined = spec.speaker_mode == Mode::At;

    let mut episode_rng = seeds::rng(seed, "analysis/episodes", 0);
    let mut samples = Vec::new();
    let mut traces_owned = Vec::new();
    for episode in 0..rounds {
        let ep = world.sample_episode(SplitSel::Eval, candidates, &mut episode_rng)?;
        let mut tape = Tape::new();
        let mut sbinder = Binder::new(speaker.store());
        let pass = speaker.generate(
            &mut tape,
            &mut sbinder,
            &ep.speaker_instance.patches,
            Decode::Greedy,
        )?;
        let mut lbinder = Binder::new(listener.store());
        // Identical-instance mode: the listener's target slot holds the very
        // instance the speaker saw, so the attention rows are comparable.
        let cands: Vec<&RealTensor> = ep
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == ep.target_index {
                    &ep.speaker_instance.patches
                } else {
                    &c.patches
                }
            })
            .collect();
        let out = pass.output();
        let lpass = listener.score(&mut tape, &mut lbinder, &out.message, &cands)?;
        if discrepancy_defined {
            let listener_attn = &lpass.attention[ep.target_index];
            samples.push(DiscrepancySample {
                episode,
                success: lpass.choice() == ep.target_index,
                discrepancy: attention_discrepancy(&out.attention, listener_attn)?,
            });
        }
        if association_defined {
            traces_owned.push((out.message, out.attention, ep.speaker_instance));
        }
    }

    let association = if association_defined {
        let traces: Vec<EpisodeTrace<'_>> = traces_owned
            .iter()
            .map(|(message, attention, instance)| EpisodeTrace { message, attention, instance })
            .collect();
        Some(symbol_concept_map(
            &traces,
            spec.sizes.v,
            world.total_values(),
        )?)
    } else {
        None
    };

    Ok(AnalysisReport { language, topsim, samples, association })
}

pub fn language_text(table: &LanguageTable) -> String {
    let mut s = String::from("type\tmessage\n");
    for (ty, msg) in table.entries() {
        let _ = writeln!(s, "{}\t{}", ty.label(), msg.render());
    }
    s
}

pub fn discrepancy_csv(samples: &[DiscrepancySample]) -> String {
    let mut s = String::from("episode,success,discrepancy\n");
    for sample in samples {
        let _ = writeln!(s, "{},{},{}", sample.episode, sample.success as u8, sample.discrepancy);
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_one(
    world: &World,
    cfg: &ExperimentConfig,
    hash: &str,
    alpha: Real,
    seed: u64,
) -> Result<RunResult> {
    let dir = cfg.out.join(hash).join(alpha.to_string()).join(seed.to_string());
    let metrics_path = dir.join("metrics.csv");
    if metrics_path.exists() {
        let text =
            fs::read_to_string(&metrics_path).map_err(|e| Error::io(&*metrics_path, e))?;
        return RunResult::from_metrics_csv(&text, hash, &dir);
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&*dir, e))?;

    let pair = cfg.pair_spec(world);
    let outcome = match train(world, &pair, &cfg.train_config(alpha), seed) {
        Ok(outcome) => outcome,
        Err(Error::Numeric { .. }) => {
            let result = RunResult {
                config_hash: hash.to_string(),
                alpha,
                seed,
                failed: true,
                train_acc: 0.0,
                gen_acc: 0.0,
                topsim: None,
                disc_success: None,
                disc_failure: None,
                dir,
            };
            write_file(&metrics_path, &result.to_metrics_csv())?;
            return Ok(result);
        }
        Err(e) => return Err(e),
    };

    write_file(&dir.join("log.csv"), &outcome.log.to_csv())?;
    outcome.speaker.save(&dir.join("speaker.ck"))?;
    outcome.listener.save(&dir.join("listener.ck"))?;

    let train_acc = evaluate(
        &outcome.speaker,
        &outcome.listener,
        world,
        SplitSel::Train,
        cfg.eval_rounds,
        cfg.candidates,
        seed,
    )?;
    let gen_acc = evaluate(
        &outcome.speaker,
        &outcome.listener,
        world,
        SplitSel::Eval,
        cfg.eval_rounds,
        cfg.candidates,
        seed,
    )?;

    let report = analyze_pair(
        &outcome.speaker,
        &outcome.listener,
        world,
        cfg.eval_rounds,
        cfg.candidates,
        seed,
    )?;
    write_file(&dir.join("language.txt"), &language_text(&report.language))?;
    if !report.samples.is_empty() {
        write_file(&dir.join("discrepancy.csv"), &discrepancy_csv(&report.samples))?;
    }
    if let Some(assoc) = &report.association {
        write_file(&dir.join("association.csv"), &assoc.to_csv())?;
    }

    let mean = |keep: bool| {
        let vals: Vec<Real> = report
            .samples
            .iter()
            .filter(|s| s.success == keep)
            .map(|s| s.discrepancy)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<Real>() / vals.len() as Real)
        }
    };
    let result = RunResult {
        config_hash: hash.to_string(),
        alpha,
        seed,
        failed: false,
        train_acc,
        gen_acc,
        topsim: report.topsim.value(),
        disc_success: mean(true),
        disc_failure: mean(false),
        dir,
    };
    // Written last: its presence marks the run complete for resumption.
    write_file(&metrics_path, &result.to_metrics_csv())?;
    Ok(result)
}

/// Trains every (α, seed) combination, skipping runs already on disk. Runs
/// are independent; `workers` of them execute concurrently.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let world = build_world(&cfg.world, cfg.world_seed)?;
    if cfg.candidates > cfg.world.split_eval.min(cfg.world.split_train) {
        return Err(Error::Config(format!(
            "candidates = {} exceeds a split ({} train / {} eval types)",
            cfg.candidates, cfg.world.split_train, cfg.world.split_eval
        )));
    }
    let hash = cfg.hash();
    let sweep_dir = cfg.out.join(&hash);
    fs::create_dir_all(&sweep_dir).map_err(|e| Error::io(&*sweep_dir, e))?;
    write_file(&sweep_dir.join("config.txt"), &cfg.to_text())?;

    let mut jobs: Vec<(Real, u64)> = Vec::new();
    for &alpha in &cfg.alphas {
        for &seed in &cfg.seeds {
            jobs.push((alpha, seed));
        }
    }
    let queue = Mutex::new(jobs.into_iter());
    let done: Mutex<Vec<RunResult>> = Mutex::new(Vec::new());
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    let workers = workers.clamp(1, cfg.alphas.len() * cfg.seeds.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").next();
                let Some((alpha, seed)) = job else { return };
                match run_one(&world, cfg, &hash, alpha, seed) {
                    Ok(result) => done.lock().expect("results lock").push(result),
                    Err(e) => {
                        first_err.lock().expect("error lock").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = first_err.into_inner().expect("error lock") {
        return Err(e);
    }
    let mut results = done.into_inner().expect("results lock");
    results.sort_by(|a, b| {
        a.alpha.partial_cmp(&b.alpha).expect("finite alphas").then(a.seed.cmp(&b.seed))
    });
    Ok(results)
}

/// The k results with the highest generalization accuracy; ties fall back to
/// topographic similarity (degenerate sorts last), then to seed.
pub fn select_top_k(results: &[RunResult], k: usize) -> Result<Vec<RunResult>> {
    if k > results.len() {
        return Err(Error::Contract(format!(
            "top-{k} requested from {} results",
            results.len()
        )));
    }
    let mut sorted = results.to_vec();
    sorted.sort_by(|a, b| {
        let acc = |r: &RunResult| if r.failed { Real::NEG_INFINITY } else { r.gen_acc };
        let ts = |r: &RunResult| r.topsim.unwrap_or(Real::NEG_INFINITY);
        acc(b)
            .partial_cmp(&acc(a))
            .expect("finite accuracy")
            .then(ts(b).partial_cmp(&ts(a)).expect("finite topsim"))
            .then(a.seed.cmp(&b.seed))
    });
    sorted.truncate(k);
    Ok(sorted)
}

/// Scans a sweep tree (`<out>/<hash>/<alpha>/<seed>`) and groups completed
/// runs by the `<speaker>-<listener>` setting recorded in each config.txt.
pub fn collect_results(out: &Path) -> Result<BTreeMap<String, Vec<RunResult>>> {
    let mut groups: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
    let sweeps = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
    for sweep in sweeps {
        let sweep = sweep.map_err(|e| Error::io(out, e))?.path();
        let config_path = sweep.join("config.txt");
        if !config_path.is_file() {
            continue;
        }
        let cfg = load_config(&config_path)?;
        let hash = cfg.hash();
        let setting = format!("{}/{}", cfg.arch.tag(), cfg.setting());
        for &alpha in &cfg.alphas {
            for &seed in &cfg.seeds {
                let dir = sweep.join(alpha.to_string()).join(seed.to_string());
                let metrics_path = dir.join("metrics.csv");
                if !metrics_path.is_file() {
                    continue;
                }
                let text = fs::read_to_string(&metrics_path)
                    .map_err(|e| Error::io(&*metrics_path, e))?;
                groups
                    .entry(setting.clone())
                    .or_default()
                    .push(RunResult::from_metrics_csv(&text, &hash, &dir)?);
            }
        }
    }
    Ok(groups)
}

/// Five-number summary with Tukey hinges: the quartiles are medians of the
/// lower and upper halves, the median included in both when the count is odd.
pub fn five_number_summary(values: &[Real]) -> Result<[Real; 5]> {
    if values.is_empty() {
        return Err(Error::Contract("summary of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    let median = |s: &[Real]| {
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        }
    };
    let n = v.len();
    let half = n / 2 + n % 2;
    Ok([v[0], median(&v[..half]), median(&v), median(&v[n - half..]), v[n - 1]])
}

const HIST_BINS: usize = 20;

/// Per-class normalized histogram over [0, ln 2], the discrepancy range.
fn histogram(values: &[Real]) -> Vec<Real> {
    let mut counts = vec![0usize; HIST_BINS];
    let hi = JSD_MAX;
    for &v in values {
        let bin = ((v / hi) * HIST_BINS as Real) as usize;
        counts[bin.min(HIST_BINS - 1)] += 1;
    }
    let total = values.len().max(1) as Real;
    counts.iter().map(|&c| c as Real / total).collect()
}

struct SvgCanvas {
    w: Real,
    h: Real,
    body: String,
}

impl SvgCanvas {
    fn new(w: Real, h: Real) -> Self {
        SvgCanvas { w, h, body: String::new() }
    }

    fn rect(&mut self, x: Real, y: Real, w: Real, h: Real, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="{fill}" stroke="black"/>"#
        );
    }

    fn line(&mut self, x1: Real, y1: Real, x2: Real, y2: Real) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="black"/>"#
        );
    }

    fn text(&mut self, x: Real, y: Real, size: Real, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size:.0}" font-family="sans-serif" text-anchor="middle">{s}</text>"#
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.w, self.h, self.w, self.h, self.body
        )
    }
}

fn box_plot_svg(title: &str, rows: &[(String, [Real; 5])]) -> String {
    let mut svg = SvgCanvas::new(120.0 + 90.0 * rows.len() as Real, 260.0);
    let lo = rows.iter().map(|r| r.1[0]).fold(Real::INFINITY, Real::min);
    let hi = rows.iter().map(|r| r.1[4]).fold(Real::NEG_INFINITY, Real::max);
    let span = (hi - lo).max(1e-9);
    let y = |v: Real| 220.0 - (v - lo) / span * 180.0;
    svg.text(svg.w / 2.0, 20.0, 14.0, title);
    for (i, (label, q)) in rows.iter().enumerate() {
        let x = 100.0 + 90.0 * i as Real;
        svg.line(x, y(q[0]), x, y(q[1]));
        svg.line(x, y(q[3]), x, y(q[4]));
        svg.line(x - 15.0, y(q[0]), x + 15.0, y(q[0]));
        svg.line(x - 15.0, y(q[4]), x + 15.0, y(q[4]));
        svg.rect(x - 25.0, y(q[3]), 50.0, (y(q[1]) - y(q[3])).max(0.5), "#cfe2f3");
        svg.line(x - 25.0, y(q[2]), x + 25.0, y(q[2]));
        svg.text(x, 245.0, 11.0, label);
    }
    svg.text(30.0, y(lo), 10.0, &format!("{lo:.2}"));
    svg.text(30.0, y(hi) + 4.0, 10.0, &format!("{hi:.2}"));
    svg.finish()
}

fn histogram_svg(title: &str, classes: &[(String, Vec<Real>)]) -> String {
    let mut svg = SvgCanvas::new(520.0, 260.0);
    svg.text(svg.w / 2.0, 20.0, 14.0, title);
    let peak = classes
        .iter()
        .flat_map(|(_, f)| f.iter().copied())
        .fold(0.0, Real::max)
        .max(1e-9);
    let fills = ["#9ec5e8", "#f4a6a6", "#b7d7a8", "#ffe599"];
    let bar = 480.0 / HIST_BINS as Real;
    for (ci, (label, freqs)) in classes.iter().enumerate() {
        let fill = fills[ci % fills.len()];
        for (bi, &f) in freqs.iter().enumerate() {
            let h = f / peak * 180.0;
            let x = 20.0 + bar * bi as Real + 2.0 + (ci as Real) * (bar / 2.0 - 2.0);
            svg.rect(x, 220.0 - h, bar / 2.0 - 2.0, h.max(0.2), fill);
        }
        svg.text(120.0 + 160.0 * ci as Real, 244.0, 11.0, label);
        svg.rect(80.0 + 160.0 * ci as Real, 236.0, 10.0, 10.0, fill);
    }
    svg.finish()
}

/// Per metric: a `(setting, alpha, seed, value)` CSV, a five-number box
/// summary CSV, and an SVG rendering; plus per-class normalized discrepancy
/// histograms where runs recorded samples. Returns warnings for groups that
/// had to be skipped.
pub fn emit_plots(groups: &BTreeMap<String, Vec<RunResult>>, out: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut warnings = Vec::new();
    let metrics: [(&str, fn(&RunResult) -> Option<Real>); 3] = [
        ("train_acc", |r| (!r.failed).then_some(r.train_acc)),
        ("gen_acc", |r| (!r.failed).then_some(r.gen_acc)),
        ("topsim", |r| r.topsim),
    ];
    for (name, extract) in metrics {
        let mut values = String::from("setting,alpha,seed,value\n");
        let mut boxes = String::from("setting,min,q1,median,q3,max\n");
        let mut rows = Vec::new();
        for (setting, results) in groups {
            let mut group_values = Vec::new();
            for r in results {
                if let Some(v) = extract(r) {
                    let _ = writeln!(values, "{setting},{},{},{v}", r.alpha, r.seed);
                    group_values.push(v);
                }
            }
            if group_values.is_empty() {
                warnings.push(format!("{setting}: no usable {name} values, box skipped"));
                continue;
            }
            let q = five_number_summary(&group_values)?;
            let _ = writeln!(boxes, "{setting},{},{},{},{},{}", q[0], q[1], q[2], q[3], q[4]);
            rows.push((setting.clone(), q));
        }
        write_file(&out.join(format!("plot_{name}.csv")), &values)?;
        write_file(&out.join(format!("box_{name}.csv")), &boxes)?;
        if !rows.is_empty() {
            write_file(&out.join(format!("box_{name}.svg")), &box_plot_svg(name, &rows))?;
        }
    }

    let hi = JSD_MAX;
    let mut hist = String::from("setting,outcome,bin_lo,bin_hi,frequency\n");
    let mut svg_classes = Vec::new();
    for (setting, results) in groups {
        let mut success = Vec::new();
        let mut failure = Vec::new();
        for r in results {
            let path = r.dir.join("discrepancy.csv");
            if !path.is_file() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&*path, e))?;
            for line in text.lines().skip(1) {
                let mut parts = line.split(',');
                let (_, ok, v) = (parts.next(), parts.next(), parts.next());
                if let (Some(ok), Some(v)) = (ok, v) {
                    let v: Real = v.parse().map_err(|_| Error::Format {
                        path: path.clone(),
                        offset: 0,
                        detail: "bad discrepancy value".into(),
                    })?;
                    if ok == "1" {
                        success.push(v);
                    } else {
                        failure.push(v);
                    }
                }
            }
        }
        for (outcome, vals) in [("success", &success), ("failure", &failure)] {
            if vals.is_empty() {
                warnings.push(format!("{setting}: no {outcome} discrepancy samples"));
                continue;
            }
            let freqs = histogram(vals);
            for (bi, &f) in freqs.iter().enumerate() {
                let lo = hi * bi as Real / HIST_BINS as Real;
                let up = hi * (bi + 1) as Real / HIST_BINS as Real;
                let _ = writeln!(hist, "{setting},{outcome},{lo},{up},{f}");
            }
            svg_classes.push((format!("{setting} {outcome}"), freqs));
        }
    }
    write_file(&out.join("hist_discrepancy.csv"), &hist)?;
    if !svg_classes.is_empty() {
        write_file(
            &out.join("hist_discrepancy.svg"),
            &histogram_svg("attention discrepancy", &svg_classes),
        )?;
    }
    Ok(warnings)
}

/// A run directory rehydrated: the sweep config two levels up, the world it
/// trained in, and both checkpointed agents.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub world: World,
    pub speaker: Speaker,
    pub listener: Listener,
    pub alpha: Real,
    pub seed: u64,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let missing = |what: &'static str| Error::Format {
        path: dir.to_path_buf(),
        offset: 0,
        detail: format!("not a <sweep>/<alpha>/<seed> run directory: {what}"),
    };
    let seed: u64 = dir
        .file_name()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| missing("seed component"))?;
    let alpha_dir = dir.parent().ok_or_else(|| missing("alpha component"))?;
    let alpha: Real = alpha_dir
        .file_name()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| missing("alpha component"))?;
    let sweep = alpha_dir.parent().ok_or_else(|| missing("sweep component"))?;
    let config = load_config(&sweep.join("config.txt"))?;
    let world = build_world(&config.world, config.world_seed)?;
    let pair = config.pair_spec(&world);
    let speaker = Speaker::load(&dir.join("speaker.ck"), &pair, 0)?;
    let listener = Listener::load(&dir.join("listener.ck"), &pair, 0)?;
    Ok(LoadedRun { config, world, speaker, listener, alpha, seed })
}

/// Renders a small synthetic dataset in the binary feature-file format:
/// every universe type gets `instances` renderings whose boxes are the
/// occupied patch slots.
pub fn generate_feature_file(cfg: &ExperimentConfig, instances: usize, out: &Path) -> Result<()> {
    if instances == 0 {
        return Err(Error::Config("need at least one instance per type".into()));
    }
    let spec = WorldSpec { kind: WorldKind::Synthetic, ..cfg.world.clone() };
    let world = build_world(&spec, cfg.world_seed)?;
    let k = match spec.scheme {
        Scheme::Combination { k, .. } => k,
        Scheme::Product { ref arities } => arities.len(),
    };
    let mut rng = seeds::rng(cfg.world_seed, "features/generate", 0);
    let mut dataset = FeatureDataset {
        grid_h: 1,
        grid_w: spec.patches,
        dim: spec.dim,
        items_per_image: k,
        instances: Vec::new(),
    };
    for ty in world.universe() {
        for _ in 0..instances {
            let inst = world.render_instance(ty, &mut rng)?;
            let mut class_ids = Vec::new();
            let mut boxes = Vec::new();
            for (value, slots) in &inst.locations {
                let lo = *slots.iter().min().expect("occupied slots") as u32;
                let hi = *slots.iter().max().expect("occupied slots") as u32;
                class_ids.push(*value as u32);
                boxes.push([0, lo, 1, hi + 1]);
            }
            dataset.instances.push(FeatureInstance {
                class_ids,
                boxes,
                features: inst.patches.data().iter().map(|&x| x as f32).collect(),
            });
        }
    }
    write_feature_file(out, &dataset)
}
