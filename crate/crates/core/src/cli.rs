//! The `conftransfer` command line.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 I/O error,
//! 4 training divergence. Every output file is written atomically.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::demo::{
    generate_dataset, label_confidence, parse_composition, read_jsonl, resolve_composition,
    write_jsonl, Calibration, TrajectorySet,
};
use crate::env::{make_env_pair, scripted_policy, EnvPair, Grade, Policy};
use crate::error::{Error, Result};
use crate::evalstats::{eval_policy, imitate, run_ablation, run_varying_composition};
use crate::imitate::{load_policy, save_policy, weight_dataset, LearnedPolicy, WeightSource};
use crate::io::write_atomic;
use crate::par::{with_jobs, Execution};
use crate::seed;
use crate::transfer::{load_model, save_model, train_source, train_transfer_with, TransferHistory, TransferModel};

#[derive(Debug, Parser)]
#[command(name = "conftransfer", version, about = "Confidence transfer across environments for imitation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a demonstration set (source sets are labeled).
    GenDemos {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        side: Side,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the source predictor and transfer it to the target.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tar: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics stream; defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Attach predicted per-pair confidences to a demonstration set.
    Predict {
        #[arg(long, required_unless_present = "use_labels")]
        model: Option<PathBuf>,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the stored ground-truth labels instead of a model.
        #[arg(long)]
        use_labels: bool,
    },
    /// Train a policy on a weighted demonstration set.
    Imitate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weighted: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ignore the weights (plain imitation).
        #[arg(long)]
        unweighted: bool,
    },
    /// Evaluate a policy on the target environment; prints JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the method ablation and the varying-composition study.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Pooled-variance t-test instead of Welch.
        #[arg(long)]
        pooled: bool,
        #[arg(long)]
        skip_varying: bool,
    },
}

pub fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Io { .. } => 3,
        Error::Divergence(_) | Error::NonFinite(_) => 4,
        _ => 2,
    }
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, text.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn env_pair(cfg: &RunConfig) -> Result<EnvPair> {
    make_env_pair(cfg.pair.pair, &cfg.pair)
}

/// Either a learned checkpoint or `{"scripted": "<grade>"}`.
#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ScriptedDoc {
    scripted: Grade,
}

fn load_any_policy(text: &str, pair: &EnvPair) -> Result<Box<dyn Policy>> {
    if let Ok(doc) = serde_json::from_str::<ScriptedDoc>(text) {
        return Ok(Box::new(scripted_policy(&pair.target, doc.scripted)?));
    }
    let p: LearnedPolicy = load_policy(text)?;
    if p.net.input_dim() != pair.target.state_dim() || p.net.output_dim() != pair.target.action_dim() {
        return Err(Error::Shape("policy does not fit the target environment".into()));
    }
    Ok(Box::new(p))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenDemos {
            config,
            side,
            out,
            seed: seed_value,
        } => {
            let cfg = RunConfig::load(&config)?;
            let pair = env_pair(&cfg)?;
            let seed_value = seed_value.unwrap_or(cfg.seeds[0]);
            let (env, comp, stream) = match side {
                Side::Source => (&pair.source, &cfg.compositions.source, "source_demos"),
                Side::Target => (&pair.target, &cfg.compositions.target, "target_demos"),
            };
            let levels = resolve_composition(env, &parse_composition(comp)?, &Calibration::default())?;
            let set = generate_dataset(env, &levels, seed::derive(seed_value, stream))?;
            let set = match side {
                Side::Source => label_confidence(&set)?,
                Side::Target => set,
            };
            ensure_parent(&out)?;
            write_jsonl(&set, &out)?;
            eprintln!("wrote {} trajectories to {}", set.len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            src,
            tar,
            out,
            metrics,
        } => {
            let cfg = RunConfig::load(&config)?;
            let src = read_jsonl(&src)?;
            let tar = read_jsonl(&tar)?.unlabeled();
            let metrics = metrics.unwrap_or_else(|| with_suffix(&out, ".metrics.jsonl"));
            train_command(&cfg, &src, &tar, &out, &metrics)
        }
        Command::Predict {
            model,
            demos,
            out,
            use_labels,
        } => {
            let set = read_jsonl(&demos)?;
            let predicted = if use_labels {
                with_pair_confidences(&set, |t| {
                    let c = t.confidence.ok_or_else(|| {
                        Error::InvalidArgument("--use-labels needs labeled demonstrations".into())
                    })?;
                    Ok(vec![c; t.len()])
                })?
            } else {
                let path = model.expect("clap requires --model without --use-labels");
                let model = load_model(&read_text(&path)?)?;
                with_pair_confidences(&set, |t| model.predict_trajectory(t))?
            };
            ensure_parent(&out)?;
            write_jsonl(&predicted, &out)
        }
        Command::Imitate {
            config,
            weighted,
            out,
            unweighted,
        } => {
            let cfg = RunConfig::load(&config)?;
            let pair = env_pair(&cfg)?;
            let set = read_jsonl(&weighted)?;
            if set.env_id != pair.target.id {
                return Err(Error::InvalidArgument(format!(
                    "demonstrations come from {}, the config targets {}",
                    set.env_id, pair.target.id
                )));
            }
            let source = if unweighted {
                WeightSource::Constant(1.0)
            } else if set.trajectories.iter().all(|t| t.pair_confidences.is_some()) {
                WeightSource::Stored
            } else {
                WeightSource::Oracle
            };
            let data = weight_dataset(&set, source)?;
            let policy = imitate(&pair.target, &data, &cfg.imitate_hyper, unweighted)?;
            write_text(&out, &save_policy(&policy))
        }
        Command::Eval {
            config,
            policy,
            n,
            seed: seed_value,
        } => {
            let cfg = RunConfig::load(&config)?;
            let pair = env_pair(&cfg)?;
            let pol = load_any_policy(&read_text(&policy)?, &pair)?;
            let result = eval_policy(
                &pair.target,
                pol.as_ref(),
                n.unwrap_or(cfg.eval.rollouts),
                seed_value.unwrap_or(cfg.eval.seed),
            )?;
            println!("{}", serde_json::to_string(&result).expect("plain data serializes"));
            Ok(())
        }
        Command::Experiment {
            config,
            out,
            jobs,
            pooled,
            skip_varying,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.eval.pooled |= pooled;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            with_jobs(jobs, || experiment_command(&cfg, &out, skip_varying))
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn with_pair_confidences(
    set: &TrajectorySet,
    mut conf: impl FnMut(&crate::demo::Trajectory) -> Result<Vec<f64>>,
) -> Result<TrajectorySet> {
    let mut out = set.clone();
    for t in &mut out.trajectories {
        let c = conf(t)?;
        t.confidence = if c.is_empty() {
            None
        } else {
            Some(c.iter().sum::<f64>() / c.len() as f64)
        };
        t.pair_confidences = Some(c);
    }
    Ok(out)
}

fn train_command(cfg: &RunConfig, src: &TrajectorySet, tar: &TrajectorySet, out: &Path, metrics: &Path) -> Result<()> {
    let hyper = &cfg.transfer_hyper;
    let mut model = TransferModel::for_sets(src, tar, hyper)?;
    let stage1 = match train_source(&mut model, src) {
        Ok(h) => h,
        Err(e) => return Err(save_on_divergence(e, &model, out)),
    };
    let mut last_good = model.clone();
    let result = train_transfer_with(&mut model, src, tar, |_, m| last_good = m.clone());
    let (stage2, early_stopped_at) = match result {
        Ok(r) => r,
        Err(e) => return Err(save_on_divergence(e, &last_good, out)),
    };
    let history = TransferHistory {
        stage1,
        stage2,
        early_stopped_at,
    };
    write_text(out, &save_model(&model))?;
    write_text(metrics, &history.metrics_jsonl(1))?;
    if let Some(last) = history.stage2.last() {
        for k in 0..last.loss_fea.len() {
            println!(
                "k={} loss_fea={:.6} loss_con={:.6}",
                k + 1,
                last.loss_fea[k],
                last.loss_con[k]
            );
        }
    }
    if let Some(step) = history.early_stopped_at {
        println!("early stop at step {step}");
    }
    Ok(())
}

fn save_on_divergence(err: Error, last_good: &TransferModel, out: &Path) -> Error {
    if matches!(err.root(), Error::Divergence(_) | Error::NonFinite(_)) {
        let path = with_suffix(out, ".last_good.json");
        if let Err(io) = write_text(&path, &save_model(last_good)) {
            eprintln!("could not save last good checkpoint: {io}");
        } else {
            eprintln!("last good checkpoint saved to {}", path.display());
        }
    }
    err
}

fn experiment_command(cfg: &RunConfig, out: &Path, skip_varying: bool) -> Result<()> {
    let exp = cfg.experiment();
    let exec = Execution::Parallel;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let table = run_ablation(&exp, exec)?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    write_text(&out.join("predictor.csv"), &table.predictor_csv())?;
    write_text(&out.join("p_values.json"), &table.p_values_json())?;
    for m in table.methods() {
        println!("{m}: mean return {:.4}", table.mean_return(m));
    }
    if !skip_varying {
        let comp = run_varying_composition(&exp, exec)?;
        write_text(&out.join("varying_composition.csv"), &comp.to_csv())?;
        for s in comp.summaries() {
            println!(
                "{}: mean return {:.4} (std {:.4}), median spearman {}",
                s.source_composition,
                s.mean_return,
                s.std_return,
                s.median_spearman.map(|v| format!("{v:.4}")).unwrap_or_else(|| "null".into())
            );
        }
    }
    Ok(())
}
