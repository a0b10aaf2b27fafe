//! `slowfast`: route generation, training, evaluation, sweeps, ablations and
//! activation analysis. Every command writes into an output directory with a
//! `manifest.json` recording the version, seeds and configuration hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use slowfast_core::buffer::EvictionPolicy;
use slowfast_core::eval::{
    ablate, analyze_activations, evaluate, sweep, write_csv, AblationSpec, EvalOptions, GatePolicy, QFormerVariant,
    RouteRow, Suite, SweepRow,
};
use slowfast_core::model::ConnectorMode;
use slowfast_core::sim::{generate_route, Difficulty};
use slowfast_core::trainer::{build_dataset, route_plan, Checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "slowfast", version, about = "Slow-fast driving planner toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// Training configuration, JSON or `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation suite: tiny or short.
    #[arg(long, default_value = "short")]
    suite: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated routes as JSON plus a CSV index.
    GenRoutes {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0.5)]
        hard_fraction: f64,
    },
    /// Build demonstrations and write them as JSON.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train a model, checkpointing after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        config: ConfigArg,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Closed-loop evaluation under one activation policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        /// adaptive, always, never or fixed:<rate>.
        #[arg(long, default_value = "adaptive")]
        policy: GatePolicy,
        /// Also write per-step state logs.
        #[arg(long)]
        step_logs: bool,
    },
    /// Evaluate several policies on the same routes.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "never,fixed:0.25,adaptive,always")]
        policies: Vec<GatePolicy>,
    },
    /// Train and evaluate a grid of variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "short")]
        suite: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "none,w-only,w+h")]
        connectors: Vec<ConnectorMode>,
        #[arg(long, value_delimiter = ',', default_value = "vanilla,ls")]
        qformers: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "fifo,hard-reset,pmf")]
        policies: Vec<EvictionPolicy>,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        capacities: Vec<usize>,
    },
    /// Activation histograms and per-route timelines for the learned gate.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

fn version() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match git {
        Some(g) if !g.is_empty() => format!("{} ({g})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn manifest(out: &Path, command: &str, fields: serde_json::Value) -> Result<()> {
    let mut m = json!({ "command": command, "version": version() });
    if let (Some(m), Some(f)) = (m.as_object_mut(), fields.as_object()) {
        m.extend(f.clone());
    }
    write_json(&out.join("manifest.json"), &m)
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = match &arg.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_routes(common: &Common, count: usize, hard_fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&hard_fraction) {
        bail!("--hard-fraction must lie in [0, 1]");
    }
    let seed = common.seed.unwrap_or(0);
    let dir = common.out.join("routes");
    prepare(&dir)?;
    #[derive(Serialize)]
    struct Row {
        seed: u64,
        difficulty: String,
        length: f64,
        junctions: usize,
        obstacles: usize,
        file: String,
    }
    let mut rows = Vec::new();
    for (s, d) in route_plan(seed, count, hard_fraction) {
        let route = generate_route(s, d);
        let name = format!("route_{s}_{}.json", difficulty_name(d));
        fs::write(dir.join(&name), route.to_json())?;
        rows.push(Row {
            seed: s,
            difficulty: difficulty_name(d).into(),
            length: route.length,
            junctions: route.junctions.len(),
            obstacles: route.obstacles.len(),
            file: name,
        });
    }
    write_csv(&common.out.join("routes.csv"), &rows)?;
    manifest(
        &common.out,
        "gen-routes",
        json!({ "seed": seed, "count": count, "hard_fraction": hard_fraction }),
    )?;
    println!("wrote {count} routes to {}", dir.display());
    Ok(())
}

fn difficulty_name(d: Difficulty) -> &'static str {
    match d {
        Difficulty::Easy => "easy",
        Difficulty::Hard => "hard",
    }
}

fn build(common: &Common, arg: &ConfigArg) -> Result<()> {
    let config = load_config(arg, common.seed)?;
    prepare(&common.out)?;
    let data = build_dataset(&config)?;
    write_json(&common.out.join("dataset.json"), &data)?;
    manifest(
        &common.out,
        "build-dataset",
        json!({ "seed": config.seed, "config_hash": config.hash(), "dataset_hash": data.hash(),
                "episodes": data.episodes.len(), "frames": data.num_frames() }),
    )?;
    println!(
        "{} episodes, {} frames, hard fraction {:.2}",
        data.episodes.len(),
        data.num_frames(),
        data.hard_fraction()
    );
    Ok(())
}

fn train(common: &Common, arg: &ConfigArg, resume: Option<&Path>) -> Result<()> {
    prepare(&common.out)?;
    let (mut trainer, data) = match resume {
        Some(p) => {
            let trainer = Trainer::from_checkpoint(&load_checkpoint(p)?)?;
            let data = build_dataset(&trainer.config)?;
            (trainer, data)
        }
        None => {
            let config = load_config(arg, common.seed)?;
            let data = build_dataset(&config)?;
            (Trainer::new(config, data.num_frames())?, data)
        }
    };
    write_json(&common.out.join("config.json"), &trainer.config)?;
    manifest(
        &common.out,
        "train",
        json!({ "seed": trainer.config.seed, "config_hash": trainer.config.hash(), "dataset_hash": data.hash(),
                "frames": data.num_frames(), "resumed_from": resume.map(|p| p.display().to_string()) }),
    )?;
    let out = common.out.clone();
    trainer.train(&data, |t| {
        let s = t.summaries.last().cloned().unwrap_or_default();
        println!(
            "epoch {:>3}  L_T {:.4}  L_LLM {:.4}  L_Fuse {:.4}  gamma {:.4}  rate {:.3}",
            s.epoch, s.loss_fast, s.loss_llm, s.loss_fuse, s.gamma, s.activation_rate
        );
        t.checkpoint().save(&out.join("checkpoint.json"))?;
        write_csv(&out.join("metrics.csv"), &t.metrics)?;
        write_csv(&out.join("epochs.csv"), &t.summaries)?;
        Ok(())
    })?;
    println!("checkpoint: {}", common.out.join("checkpoint.json").display());
    Ok(())
}

fn eval(common: &Common, args: &EvalArgs, policy: GatePolicy, step_logs: bool) -> Result<()> {
    prepare(&common.out)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let (model, store) = ck.restore()?;
    let suite = Suite::by_name(&args.suite)?;
    let report = evaluate(&model, &store, &suite, policy, EvalOptions { step_logs })?;
    let rows: Vec<RouteRow> = report.episodes.iter().map(RouteRow::from_episode).collect();
    write_csv(&common.out.join("routes.csv"), &rows)?;
    write_csv(&common.out.join("summary.csv"), &[SweepRow::from_report(&report)])?;
    if step_logs {
        for e in &report.episodes {
            write_csv(
                &common
                    .out
                    .join(format!("steps_{}_{}.csv", e.route_seed, difficulty_name(e.difficulty))),
                &e.steps,
            )?;
        }
    }
    manifest(
        &common.out,
        "eval",
        json!({ "config_hash": ck.config_hash, "seed": ck.config.seed, "suite": suite.name, "policy": policy.name(),
                "flops_conserved": report.flops.conserved(&model) }),
    )?;
    println!(
        "{}: DS {:.3} (easy {:.3}, hard {:.3})  RC {:.3}  IS {:.3}  rate {:.3}  FLOPs/frame {:.0}",
        policy.name(),
        report.mean_ds,
        report.ds(Some(Difficulty::Easy)),
        report.ds(Some(Difficulty::Hard)),
        report.mean_rc,
        report.mean_is,
        report.activation_rate,
        report.flops_per_frame()
    );
    Ok(())
}

fn run_sweep(common: &Common, args: &EvalArgs, policies: &[GatePolicy]) -> Result<()> {
    prepare(&common.out)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let (model, store) = ck.restore()?;
    let suite = Suite::by_name(&args.suite)?;
    let rows: Vec<SweepRow> = sweep(&model, &store, &suite, policies)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    write_csv(&common.out.join("sweep.csv"), &rows)?;
    manifest(
        &common.out,
        "sweep",
        json!({ "config_hash": ck.config_hash, "seed": ck.config.seed, "suite": suite.name,
                "policies": policies.iter().map(|p| p.name()).collect::<Vec<_>>() }),
    )?;
    for r in &rows {
        println!(
            "{:<12} DS {:.3}  hard {:.3}  rate {:.3}  FLOPs/frame {:.0}",
            r.policy, r.ds, r.ds_hard, r.activation_rate, r.flops_per_frame
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_ablate(
    common: &Common,
    arg: &ConfigArg,
    suite: &str,
    seeds: &[u64],
    connectors: &[ConnectorMode],
    qformers: &[String],
    policies: &[EvictionPolicy],
    capacities: &[usize],
) -> Result<()> {
    prepare(&common.out)?;
    let train = load_config(arg, common.seed)?;
    let qformers = qformers
        .iter()
        .map(|q| match q.as_str() {
            "vanilla" => Ok(QFormerVariant::Vanilla),
            "ls" => Ok(QFormerVariant::Ls),
            other => bail!("unknown aggregator `{other}` (vanilla, ls)"),
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = AblationSpec {
        connectors: connectors.to_vec(),
        qformers,
        policies: policies.to_vec(),
        capacities: capacities.to_vec(),
        seeds: seeds.to_vec(),
        train,
        suite: Suite::by_name(suite)?,
    };
    manifest(
        &common.out,
        "ablate",
        json!({ "seeds": seeds, "config_hash": spec.train.hash(), "suite": suite, "cells": spec.cells().len() }),
    )?;
    let rows = ablate(&spec, |r| {
        println!(
            "{:<7} {:<8} {:<10} k={:<3} seed {}: DS {:.3}  hard {:.3}  rate {:.3}",
            r.connectors, r.qformer, r.buffer_policy, r.capacity, r.seed, r.ds, r.ds_hard, r.activation_rate
        )
    })?;
    write_csv(&common.out.join("ablation.csv"), &rows)?;
    Ok(())
}

fn analyze(common: &Common, args: &EvalArgs) -> Result<()> {
    prepare(&common.out)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let (model, store) = ck.restore()?;
    let suite = Suite::by_name(&args.suite)?;
    let report = evaluate(&model, &store, &suite, GatePolicy::Adaptive, EvalOptions::default())?;
    let a = analyze_activations(&report);
    write_csv(&common.out.join("histogram.csv"), &a.histogram)?;
    let timeline: Vec<_> = a
        .timelines
        .iter()
        .flat_map(|(_, _, rows)| rows.iter().cloned())
        .collect();
    write_csv(&common.out.join("timeline.csv"), &timeline)?;
    write_json(
        &common.out.join("analysis.json"),
        &json!({ "easy_rate": a.easy_rate, "hard_rate": a.hard_rate,
                 "event_density": a.event_density, "background_density": a.background_density }),
    )?;
    manifest(
        &common.out,
        "analyze",
        json!({ "config_hash": ck.config_hash, "seed": ck.config.seed, "suite": suite.name }),
    )?;
    println!(
        "rate easy {:.3} hard {:.3}; near intersections {:.3} vs elsewhere {:.3}",
        a.easy_rate, a.hard_rate, a.event_density, a.background_density
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenRoutes {
            common,
            count,
            hard_fraction,
        } => gen_routes(common, *count, *hard_fraction),
        Command::BuildDataset { common, config } => build(common, config),
        Command::Train { common, config, resume } => train(common, config, resume.as_deref()),
        Command::Eval {
            common,
            eval: e,
            policy,
            step_logs,
        } => eval(common, e, *policy, *step_logs),
        Command::Sweep {
            common,
            eval: e,
            policies,
        } => run_sweep(common, e, policies),
        Command::Ablate {
            common,
            config,
            suite,
            seeds,
            connectors,
            qformers,
            policies,
            capacities,
        } => run_ablate(common, config, suite, seeds, connectors, qformers, policies, capacities),
        Command::Analyze { common, eval: e } => analyze(common, e),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
