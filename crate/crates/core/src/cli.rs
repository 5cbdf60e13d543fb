//! Command-line front end: binds config files to runs and writes artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{self, LabConfig, RunConfig, Versioned};
use crate::error::{EqlenError, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use crate::lab::{run_efficiency, run_prop1, run_prop2, table2_identities, Prop1Instance, Prop2Instance};
use crate::reward::score_rollout;
use crate::rollout::{check_dualtrack, rollout_dualtrack, rollout_independent};
use crate::trainer::{train, MetricsRow, TrainOutcome};
use crate::types::PolicyTable;

pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Parser)]
#[command(name = "eqlen", version, about = "Equal-length pair training laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunFlags {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the seed recorded in the config.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Reduce gradients sequentially in a fixed order.
    #[arg(long)]
    pub deterministic_reduction: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write metrics, checkpoint and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run one of the lab constructions.
    Lab {
        #[arg(value_enum)]
        prop: LabProp,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the rollouts of one step under a (possibly trained) policy.
    RolloutDump {
        #[arg(long)]
        config: PathBuf,
        /// Policy checkpoint; the uniform policy when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabProp {
    Prop1,
    Prop2,
    Efficiency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run, plus hashes of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub deterministic_reduction: bool,
    pub outputs: BTreeMap<String, OutputFile>,
}

/// Configure the worker pool from `EQLEN_THREADS`.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("EQLEN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| EqlenError::config("EQLEN_THREADS", format!("{raw:?} is not a positive integer")))?;
    // A second initialization (tests calling run twice) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into one directory and remembers their hashes.
struct OutDir {
    root: PathBuf,
    outputs: BTreeMap<String, OutputFile>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| EqlenError::io(root, e))?;
        let marker = root.join(FAILURE_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| EqlenError::io(&marker, e))?;
        }
        Ok(OutDir {
            root: root.to_path_buf(),
            outputs: BTreeMap::new(),
        })
    }

    fn write(&mut self, key: &str, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| EqlenError::io(&path, e))?;
        self.outputs.insert(
            key.to_string(),
            OutputFile {
                path: name.to_string(),
                sha256: sha256_hex(bytes),
            },
        );
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, key: &str, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(key, name, &bytes)
    }

    fn fail(&self, reason: &str) -> Result<()> {
        let path = self.root.join(FAILURE_MARKER);
        fs::write(&path, format!("{reason}\n")).map_err(|e| EqlenError::io(&path, e))
    }

    fn finish(self, command: &str, config: serde_json::Value, seed: u64, flags: &RunFlags) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool: "eqlen".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seed,
            deterministic_reduction: flags.deterministic_reduction,
            outputs: self.outputs,
        };
        let path = self.root.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| EqlenError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Load a config document, or the config embedded in a manifest.
fn load_doc<T: Versioned + serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| EqlenError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| EqlenError::config("<document>", e.to_string()))?;
    if value.get("outputs").is_some() {
        if let Some(inner) = value.get("config") {
            return config::parse(&inner.to_string());
        }
    }
    config::parse(&text)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(MetricsRow::HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| EqlenError::Numerical(format!("csv buffer: {e}")))
}

pub fn metrics_jsonl(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Exit status of a finished command.
pub type Status = i32;

pub fn cmd_train(config_path: &Path, flags: &RunFlags) -> Result<Status> {
    let mut cfg: RunConfig = load_doc(config_path)?;
    if let Some(seed) = flags.seed_override {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    let questions = cfg.questions.resolve(&cfg.train)?;
    let mut out = OutDir::create(&flags.out)?;
    let outcome: TrainOutcome = train(&cfg.train, &questions, cfg.starting_policy()?)?;
    out.write("metrics_csv", "metrics.csv", &metrics_csv(&outcome.metrics)?)?;
    out.write("metrics_jsonl", "metrics.jsonl", &metrics_jsonl(&outcome.metrics)?)?;
    out.write_json("checkpoint", "checkpoint.json", &outcome.policy)?;
    let status = match &outcome.abort {
        None => 0,
        Some(abort) => {
            out.write_json("abort_dump", "abort_dump.json", abort)?;
            out.fail(&format!("step {}: {}", abort.step, abort.reason))?;
            eprintln!("training aborted at step {}: {}", abort.step, abort.reason);
            3
        }
    };
    out.finish("train", serde_json::to_value(&cfg)?, cfg.train.seed, flags)?;
    Ok(status)
}

pub fn cmd_lab(prop: LabProp, config_path: Option<&Path>, flags: &RunFlags) -> Result<Status> {
    let mut cfg: LabConfig = match config_path {
        Some(p) => load_doc(p)?,
        None => LabConfig {
            schema_version: config::SCHEMA_VERSION,
            ..LabConfig::default()
        },
    };
    if let Some(seed) = flags.seed_override {
        cfg.prop2.seed = seed;
        cfg.efficiency.seed = seed;
    }
    let mut out = OutDir::create(&flags.out)?;
    let seed = match prop {
        LabProp::Prop1 => {
            let inst = Prop1Instance::canonical();
            let reports = cfg.prop1.lrs.iter().map(|&lr| run_prop1(&inst, lr)).collect::<Result<Vec<_>>>()?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["lr", "prefix_prob_before", "prefix_prob_after_grpo", "strictly_decreased", "prefix_prob_grad_eqlen"])?;
            for r in &reports {
                w.write_record([
                    r.lr.to_string(),
                    r.prefix_prob_before.to_string(),
                    r.prefix_prob_after_grpo.to_string(),
                    r.strictly_decreased.to_string(),
                    r.prefix_prob_grad_eqlen.to_string(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| EqlenError::Numerical(format!("csv buffer: {e}")))?;
            out.write_json("report", "prop1.json", &reports)?;
            out.write("table", "prop1.csv", &bytes)?;
            0
        }
        LabProp::Prop2 => {
            let base = Prop2Instance::canonical();
            let p = base.p + cfg.prop2.p_offset;
            let inst = base.with_p(p);
            let report = run_prop2(&inst, cfg.prop2.steps, cfg.prop2.trials, cfg.prop2.seed)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for d in &report.drift_std_by_t {
                w.serialize(d)?;
            }
            let bytes = w.into_inner().map_err(|e| EqlenError::Numerical(format!("csv buffer: {e}")))?;
            out.write_json("report", "prop2.json", &report)?;
            out.write("drift", "drift_std_by_t.csv", &bytes)?;
            cfg.prop2.seed
        }
        LabProp::Efficiency => {
            let e = &cfg.efficiency;
            let report = run_efficiency(e, &e.policy(), &e.question_set())?;
            #[derive(Serialize)]
            struct Doc<'a> {
                simulated: &'a crate::lab::EfficiencyReport,
                recorded: crate::lab::Table2Check,
            }
            out.write_json(
                "report",
                "efficiency.json",
                &Doc {
                    simulated: &report,
                    recorded: table2_identities(),
                },
            )?;
            e.seed
        }
    };
    let command = format!("lab {}", serde_json::to_value(prop)?.as_str().unwrap_or("?"));
    out.finish(&command, serde_json::to_value(&cfg)?, seed, flags)?;
    Ok(0)
}

fn gradcheck_csv(report: &GradcheckReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["case", "instances", "discarded", "max_rel_error", "tolerance", "passed", "worst_context", "worst_token"])?;
    for c in &report.cases {
        let (ctx, tok) = match &c.worst {
            Some(wc) => (format!("{}:{:?}", wc.context.question_id, wc.context.window), wc.token.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            c.case.name().to_string(),
            c.instances.to_string(),
            c.discarded.to_string(),
            format!("{:e}", c.max_rel_error),
            format!("{:e}", c.tolerance),
            c.passed.to_string(),
            ctx,
            tok,
        ])?;
    }
    w.into_inner().map_err(|e| EqlenError::Numerical(format!("csv buffer: {e}")))
}

pub fn cmd_gradcheck(config_path: Option<&Path>, out_dir: Option<&Path>) -> Result<Status> {
    let cfg: GradcheckConfig = match config_path {
        Some(p) => load_doc(p)?,
        None => GradcheckConfig::default(),
    };
    let report = run_gradcheck(&cfg)?;
    let table = gradcheck_csv(&report)?;
    std::io::stdout()
        .write_all(&table)
        .map_err(|e| EqlenError::io("<stdout>", e))?;
    if let Some(dir) = out_dir {
        let mut out = OutDir::create(dir)?;
        out.write("table", "gradcheck.csv", &table)?;
        out.write_json("report", "gradcheck.json", &report)?;
        if !report.passed {
            out.fail("gradient check exceeded tolerance")?;
        }
    }
    if report.passed {
        return Ok(0);
    }
    for c in report.cases.iter().filter(|c| !c.passed) {
        match &c.worst {
            Some(w) => eprintln!(
                "{}: rel error {:e} > {:e} at question {} window {:?} token {} (analytic {:e}, numeric {:e})",
                c.case.name(),
                c.max_rel_error,
                c.tolerance,
                w.context.question_id,
                w.context.window,
                w.token,
                w.analytic,
                w.numeric
            ),
            None => eprintln!("{}: rel error {:e} > {:e}", c.case.name(), c.max_rel_error, c.tolerance),
        }
    }
    Ok(3)
}

pub fn cmd_rollout_dump(config_path: &Path, checkpoint: Option<&Path>, flags: &RunFlags) -> Result<Status> {
    let mut cfg: RunConfig = load_doc(config_path)?;
    if let Some(seed) = flags.seed_override {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    let questions = cfg.questions.resolve(&cfg.train)?;
    let policy: PolicyTable = match checkpoint {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| EqlenError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| EqlenError::config("checkpoint", e.to_string()))?
        }
        None => cfg.starting_policy()?,
    };
    let eos = policy.vocab().eos_id();
    let mut rollouts = Vec::with_capacity(questions.len());
    for q in &questions {
        let mut r = if cfg.train.algorithm.is_eqlen() {
            let r = rollout_dualtrack(&policy, q, &cfg.train.rollout, cfg.train.seed)?;
            check_dualtrack(&r, policy.vocab())?;
            r
        } else {
            rollout_independent(&policy, q, cfg.train.rollout.group_size, cfg.train.rollout.max_len, cfg.train.seed)
        };
        score_rollout(&mut r, &q.verifier, eos, cfg.train.reward_options())?;
        rollouts.push(r);
    }
    let mut out = OutDir::create(&flags.out)?;
    out.write_json("rollouts", "rollouts.json", &rollouts)?;
    out.finish("rollout-dump", serde_json::to_value(&cfg)?, cfg.train.seed, flags)?;
    Ok(0)
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<Status> {
    init_threads()?;
    match cli.command {
        Command::Train { config, flags } => cmd_train(&config, &flags),
        Command::Lab { prop, config, flags } => cmd_lab(prop, config.as_deref(), &flags),
        Command::Gradcheck { config, out } => cmd_gradcheck(config.as_deref(), out.as_deref()),
        Command::RolloutDump { config, checkpoint, flags } => cmd_rollout_dump(&config, checkpoint.as_deref(), &flags),
    }
}
