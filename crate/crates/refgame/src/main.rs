use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use refgame::metrics::ks_statistic;
use refgame::runner::{
    analyze_pair, collect_results, discrepancy_csv, emit_plots, generate_feature_file,
    language_text, load_config, load_run, run_experiment, select_top_k, RunResult,
};
use refgame::training::evaluate;
use refgame::world::SplitSel;
use refgame::Result;

#[derive(Parser)]
#[command(
    name = "refgame",
    version,
    about = "Referential-game lab: train speaker/listener pairs and analyze the emergent language"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the (alpha, seed) sweep described by a config file; completed
    /// runs found on disk are reused.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Re-evaluate a single run directory on both splits.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the config's eval_rounds.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Recompute language, topographic similarity, attention discrepancy,
    /// and the symbol-concept association for one run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Pool a sweep tree into per-setting plot data and SVGs.
    Report {
        #[arg(long)]
        sweep: PathBuf,
        /// Keep the top K runs per setting by generalization accuracy.
        #[arg(long = "top-k")]
        top_k: usize,
    },
    /// Write a synthetic dataset in the binary feature-file format.
    GenFeatures {
        /// Config whose world block describes the dataset.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Renderings per object type.
        #[arg(long, default_value_t = 8)]
        instances: usize,
    },
}

fn print_results(results: &[RunResult]) {
    println!("alpha      seed  status  train_acc  gen_acc  topsim");
    for r in results {
        let status = if r.failed { "failed" } else { "ok" };
        let topsim = r.topsim.map_or("degenerate".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<9}  {:<4}  {:<6}  {:<9.4}  {:<7.4}  {}",
            r.alpha, r.seed, status, r.train_acc, r.gen_acc, topsim
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, workers } => {
            let cfg = load_config(&config)?;
            let results = run_experiment(&cfg, workers)?;
            print_results(&results);
            println!("artifacts under {}", cfg.out.join(cfg.hash()).display());
        }
        Cmd::Eval { run, rounds } => {
            let loaded = load_run(&run)?;
            let rounds = rounds.unwrap_or(loaded.config.eval_rounds);
            let candidates = loaded.config.candidates;
            let train_acc = evaluate(
                &loaded.speaker,
                &loaded.listener,
                &loaded.world,
                SplitSel::Train,
                rounds,
                candidates,
                loaded.seed,
            )?;
            let gen_acc = evaluate(
                &loaded.speaker,
                &loaded.listener,
                &loaded.world,
                SplitSel::Eval,
                rounds,
                candidates,
                loaded.seed,
            )?;
            println!("train_acc {train_acc:.4}");
            println!("gen_acc   {gen_acc:.4}");
        }
        Cmd::Analyze { run, rounds } => {
            let loaded = load_run(&run)?;
            let rounds = rounds.unwrap_or(loaded.config.eval_rounds);
            let report = analyze_pair(
                &loaded.speaker,
                &loaded.listener,
                &loaded.world,
                rounds,
                loaded.config.candidates,
                loaded.seed,
            )?;
            std::fs::write(run.join("language.txt"), language_text(&report.language))
                .map_err(|e| refgame::Error::io(run.join("language.txt"), e))?;
            match report.topsim.value() {
                Some(v) => println!("topsim {v:.4} over {} types", report.language.len()),
                None => println!("topsim degenerate (all messages identical)"),
            }
            if !report.samples.is_empty() {
                std::fs::write(run.join("discrepancy.csv"), discrepancy_csv(&report.samples))
                    .map_err(|e| refgame::Error::io(run.join("discrepancy.csv"), e))?;
                let split = |keep: bool| -> Vec<f64> {
                    report
                        .samples
                        .iter()
                        .filter(|s| s.success == keep)
                        .map(|s| s.discrepancy)
                        .collect()
                };
                let (ok, err) = (split(true), split(false));
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                println!(
                    "discrepancy success {:.4} ({} eps) / failure {:.4} ({} eps)",
                    mean(&ok),
                    ok.len(),
                    mean(&err),
                    err.len()
                );
                if !ok.is_empty() && !err.is_empty() {
                    let ks = ks_statistic(&err, &ok)?;
                    println!("ks D {:.4} p {:.4}", ks.d, ks.p);
                }
            }
            if let Some(assoc) = &report.association {
                std::fs::write(run.join("association.csv"), assoc.to_csv())
                    .map_err(|e| refgame::Error::io(run.join("association.csv"), e))?;
                println!("association matrix written ({} symbols)", assoc.vocab());
            }
        }
        Cmd::Report { sweep, top_k } => {
            let groups = collect_results(&sweep)?;
            if groups.is_empty() {
                println!("no completed runs under {}", sweep.display());
                return Ok(());
            }
            let mut kept: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
            for (setting, results) in &groups {
                let top = select_top_k(results, top_k.min(results.len()))?;
                if top.len() < top_k {
                    println!(
                        "warning: {setting} has only {} completed runs of the requested {top_k}",
                        top.len()
                    );
                }
                println!("== {setting} (top {}) ==", top.len());
                print_results(&top);
                kept.insert(setting.clone(), top);
            }
            let report_dir = sweep.join("report");
            let warnings = emit_plots(&kept, &report_dir)?;
            for w in warnings {
                println!("warning: {w}");
            }
            println!("plot data under {}", report_dir.display());
        }
        Cmd::GenFeatures { spec, out, instances } => {
            let cfg = load_config(&spec)?;
            generate_feature_file(&cfg, instances, &out)?;
            println!("feature file written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
