use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lockgate::config::{RunConfig, TargetMode};
use lockgate::harness::{self, Suite};
use lockgate::runtime::EvalMode;
use lockgate::{Error, Result};

/// Exit codes: 0 success, 1 a requested threshold was not met,
/// 2 infrastructure failure (I/O, config, incompatible checkpoint).
const BELOW_THRESHOLD: u8 = 1;

#[derive(Parser)]
#[command(name = "lockgate", version, about = "Gated dual-process policy on a letter gridworld")]
struct Cli {
    /// Run configuration TOML; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll scripted-expert episodes and write an annotated dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Mix in disturbance episodes and synthetic stale-lock gate rows.
        #[arg(long)]
        augment: bool,
        /// Goal targets: completion | fixed-offset.
        #[arg(long, default_value = "completion")]
        targets: String,
    },
    /// Run the two-stage curriculum on a dataset and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional per-step loss/lr CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a suite.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "spelling")]
        suite: String,
        /// gated | always-reason | no-system2 | fixed-step.
        #[arg(long, default_value = "gated")]
        mode: String,
        /// Gate threshold for gated mode; checkpoint default when omitted.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = harness::EVAL_SEED_BASE)]
        seed_base: u64,
        #[arg(long)]
        cost_full: Option<f64>,
        #[arg(long)]
        cost_skip: Option<f64>,
        /// Directory for report.json plus CSV/plot artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit 1 when the success rate lands below this.
        #[arg(long)]
        min_success: Option<f64>,
    },
    /// Sweep gating thresholds and reconcile the cost ledger.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "spelling")]
        suite: String,
        #[arg(long = "tau", value_delimiter = ',', default_values_t = [0.3, 0.4, 0.5, 0.6, 0.7])]
        taus: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = harness::EVAL_SEED_BASE)]
        seed_base: u64,
        #[arg(long)]
        cost_full: Option<f64>,
        #[arg(long)]
        cost_skip: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Disturbance study: re-trigger lags and recovery margins.
    Interfere {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = harness::EVAL_SEED_BASE)]
        seed_base: u64,
        /// Re-trigger window in control steps.
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit 1 when the re-trigger rate lands below this.
        #[arg(long)]
        min_retrigger: Option<f64>,
    },
    /// Held-out head diagnostics against an annotated dataset.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Re-render CSVs and plots from a saved report.json.
    Report {
        /// report.json produced by eval.
        #[arg(long)]
        input: PathBuf,
        /// Optional sweep.json produced by sweep.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Threshold line drawn on the trace plot.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
}

fn base_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_targets(s: &str) -> Result<TargetMode> {
    match s {
        "completion" => Ok(TargetMode::Completion),
        "fixed-offset" => Ok(TargetMode::FixedOffset),
        other => Err(Error::Config(format!("unknown target mode {other:?}"))),
    }
}

fn parse_mode(s: &str, tau: Option<f64>, default_tau: f64) -> Result<EvalMode> {
    match s {
        "gated" => Ok(EvalMode::Gated { tau: tau.unwrap_or(default_tau) }),
        "always-reason" => Ok(EvalMode::AlwaysReason),
        "no-system2" => Ok(EvalMode::NoSystem2),
        "fixed-step" => Ok(EvalMode::FixedStep),
        other => Err(Error::Config(format!("unknown eval mode {other:?}"))),
    }
}

fn apply_cost_overrides(cfg: &mut RunConfig, full: Option<f64>, skip: Option<f64>) -> Result<()> {
    if let Some(f) = full {
        cfg.gate.cost_full = f;
    }
    if let Some(s) = skip {
        cfg.gate.cost_skip = s;
    }
    cfg.validate()
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::GenData { out, episodes, seed, augment, targets } => {
            let cfg = base_config(&cli.config)?;
            cfg.validate()?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mode = parse_targets(&targets)?;
            let man = harness::generate_dataset(&cfg, episodes, seed, augment, mode, &out)?;
            println!(
                "wrote {} episodes ({} ok, {} disturbed, {} synth rows, zero fraction {:.3}) to {}",
                man.n_episodes,
                man.successes,
                man.interference_episodes,
                man.synth_rows,
                man.gate_zero_fraction,
                man.path
            );
            Ok(0)
        }
        Cmd::Train { data, out, seed, metrics } => {
            let cfg = base_config(&cli.config)?;
            cfg.validate()?;
            let (_, _, report) =
                harness::run_training(&cfg, &data, seed, Some(&out), metrics.as_deref())?;
            println!(
                "trained {} steps, probe loss {:.4} -> {:.4}, checkpoint at {}",
                report.rows.len(),
                report.probe_start,
                report.probe_end,
                out.display()
            );
            Ok(0)
        }
        Cmd::Eval {
            ckpt,
            suite,
            mode,
            tau,
            trials,
            seed_base,
            cost_full,
            cost_skip,
            out,
            min_success,
        } => {
            let (store, mut cfg) = harness::load_checkpoint(&ckpt)?;
            apply_cost_overrides(&mut cfg, cost_full, cost_skip)?;
            let suite = Suite::parse(&suite)?;
            let mode = parse_mode(&mode, tau, cfg.gate.tau)?;
            let rep = harness::evaluate(&store, &cfg, suite, mode, trials, seed_base)?;
            println!(
                "{} / {}: success {:.1}%, skip {:.1}%, latency {:.1}, replans {:.1}, lock violations {}",
                rep.suite,
                rep.mode,
                100.0 * rep.success_rate,
                100.0 * rep.mean_skip_ratio,
                rep.mean_cost,
                rep.mean_replans,
                rep.lock_violations
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                harness::save_json(&dir.join("report.json"), &rep)?;
                let line_tau = match mode {
                    EvalMode::Gated { tau } => tau,
                    _ => cfg.gate.tau,
                };
                harness::emit_report(&dir, &rep, None, line_tau)?;
            }
            if let Some(min) = min_success {
                if rep.success_rate < min {
                    eprintln!("success {:.3} below required {min:.3}", rep.success_rate);
                    return Ok(BELOW_THRESHOLD);
                }
            }
            Ok(0)
        }
        Cmd::Sweep { ckpt, suite, taus, trials, seed_base, cost_full, cost_skip, out } => {
            let (store, mut cfg) = harness::load_checkpoint(&ckpt)?;
            apply_cost_overrides(&mut cfg, cost_full, cost_skip)?;
            let suite = Suite::parse(&suite)?;
            let rep = harness::threshold_sweep(&store, &cfg, suite, &taus, trials, seed_base)?;
            std::fs::create_dir_all(&out)?;
            harness::save_json(&out.join("sweep.json"), &rep)?;
            harness::write_sweep_csv(&out.join("sweep.csv"), &rep)?;
            harness::write_sentinels_csv(&out.join("sentinels.csv"), &rep)?;
            harness::write_recon_csv(&out.join("reconciliation.csv"), &rep.recon)?;
            harness::plot_sweep_curves(
                &out.join("sweep_cost.png"),
                &out.join("sweep_success.png"),
                &rep,
            )?;
            for r in &rep.rows {
                println!(
                    "{}: success {:.1}%, skip {:.1}%, latency {:.1}",
                    r.label,
                    100.0 * r.success_rate,
                    100.0 * r.mean_skip_ratio,
                    r.mean_cost
                );
            }
            for r in &rep.sentinels {
                println!("{}: latency {:.1}", r.label, r.mean_cost);
            }
            let worst =
                rep.recon.iter().map(|r| r.rel_err).fold(0.0f64, f64::max);
            println!("ledger reconciliation worst relative error {:.3}", worst);
            Ok(0)
        }
        Cmd::Interfere { ckpt, trials, seed_base, window, out, min_retrigger } => {
            let (store, cfg) = harness::load_checkpoint(&ckpt)?;
            let rep = harness::interference_study(&store, &cfg, trials, seed_base, window)?;
            println!(
                "re-trigger within {} steps: {}/{} ({:.1}%), mean lag {}",
                rep.window,
                rep.retriggered_within,
                rep.episodes_with_events,
                100.0 * rep.retrigger_rate,
                rep.mean_lag.map_or("n/a".into(), |l| format!("{l:.2}")),
            );
            println!(
                "success: disturbed {:.1}%, control {:.1}%, no-reasoner {:.1}%, removed-block episodes {}",
                100.0 * rep.gated.success_rate,
                100.0 * rep.control.success_rate,
                100.0 * rep.no_system2.success_rate,
                rep.removed_block_episodes
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                harness::save_json(&dir.join("interference.json"), &rep)?;
                harness::write_episodes_csv(&dir.join("disturbed_episodes.csv"), &rep.gated)?;
                harness::write_episodes_csv(&dir.join("control_episodes.csv"), &rep.control)?;
            }
            if let Some(min) = min_retrigger {
                if rep.retrigger_rate < min {
                    eprintln!("re-trigger rate {:.3} below required {min:.3}", rep.retrigger_rate);
                    return Ok(BELOW_THRESHOLD);
                }
            }
            Ok(0)
        }
        Cmd::Probe { ckpt, data } => {
            let (store, cfg) = harness::load_checkpoint(&ckpt)?;
            let ds = lockgate::annotate::load_dataset(&data)?;
            let m = harness::heldout_metrics(&store, &cfg, &ds)?;
            println!(
                "gate AUC {:.4} ({} rows), imagination acc {:.4}, plan exact {:.4} ({} frames)",
                m.gate_auc, m.gate_rows, m.imagination_token_acc, m.plan_exact_rate,
                m.planning_frames
            );
            Ok(0)
        }
        Cmd::Report { input, sweep, out, tau } => {
            let rep: harness::EvalReport = harness::load_json(&input)?;
            let sw: Option<harness::SweepReport> =
                sweep.map(|p| harness::load_json(&p)).transpose()?;
            let files = harness::emit_report(&out, &rep, sw.as_ref(), tau)?;
            println!("wrote {} artifacts to {}", files.len(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
