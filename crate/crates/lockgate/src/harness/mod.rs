//! Experiment harness: canonical task suites, dataset generation, checkpoint
//! I/O, seeded evaluation, threshold sweeps, interference studies, and
//! CSV/PNG report emission. Every report is a pure function of
//! (parameters, config, suite, seeds, mode), so artifacts regenerate
//! identically.

pub mod plot;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotate::{annotate, gate_labels, load_dataset, save_dataset, AnnotatedDataset};
use crate::config::{Provenance, RunConfig, TargetMode};
use crate::letterworld::expert::{run_expert_episode, InterferenceDriver};
use crate::letterworld::log::Outcome;
use crate::letterworld::{InterferenceKind, TaskSpec};
use crate::model::{self, gate, imagine, subtask, ObsBatch};
use crate::params::ParamStore;
use crate::rng;
use crate::runtime::{
    check_mode_compat, mean_cost_closed_form, run_episode, EpisodeResult, EvalMode, Mode,
};
use crate::tape::Tape;
use crate::train::{train, TrainReport};
use crate::{Error, Result};

/// Evaluation layouts start here so they never collide with training seeds.
pub const EVAL_SEED_BASE: u64 = 10_000;

/// Reference operating points for the latency model: (tau, skip ratio,
/// mean latency). The sweep's reconciliation table checks the closed-form
/// ledger against these.
pub const REFERENCE_POINTS: [(f64, f64, f64); 5] = [
    (0.3, 0.88, 92.0),
    (0.4, 0.81, 110.0),
    (0.5, 0.72, 128.0),
    (0.6, 0.54, 165.0),
    (0.7, 0.35, 195.0),
];

// ---------------------------------------------------------------- suites

/// Canonical evaluation suites. Words are fixed per suite; the trial seed
/// varies the layout, so generalization is across arrangements, not
/// vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Three letters, six sub-tasks: the long-horizon suite.
    Spelling,
    /// Two letters into adjacent slots; the final cell must be exact.
    Insertion,
    /// Spelling with 1-2 injected disturbances per episode.
    InterferenceSpelling,
}

impl Suite {
    pub fn label(self) -> &'static str {
        match self {
            Suite::Spelling => "spelling",
            Suite::Insertion => "insertion",
            Suite::InterferenceSpelling => "interference-spelling",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spelling" => Ok(Suite::Spelling),
            "insertion" => Ok(Suite::Insertion),
            "interference-spelling" => Ok(Suite::InterferenceSpelling),
            other => Err(Error::Config(format!("unknown suite {other:?}"))),
        }
    }

    pub fn word(self) -> &'static [u8] {
        match self {
            Suite::Spelling | Suite::InterferenceSpelling => &[0, 1, 2],
            Suite::Insertion => &[3, 4],
        }
    }

    pub fn task(self) -> TaskSpec {
        match self {
            Suite::Insertion => TaskSpec::insertion(self.word()),
            _ => TaskSpec::spelling(self.word()),
        }
    }

    /// 1-2 disturbances per episode, committed up front from the trial seed.
    pub fn driver(self, trial_seed: u64) -> Option<InterferenceDriver> {
        if self != Suite::InterferenceSpelling {
            return None;
        }
        let n = 1 + (trial_seed % 2) as usize;
        Some(InterferenceDriver::new(trial_seed ^ rng::fnv1a64(b"trial.interfere"), n))
    }
}

// ------------------------------------------------------ dataset generation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: String,
    pub n_episodes: usize,
    pub seed: u64,
    pub augment: bool,
    pub target_mode: TargetMode,
    pub delta: usize,
    pub spelling_episodes: usize,
    pub insertion_episodes: usize,
    pub interference_episodes: usize,
    pub successes: usize,
    pub synth_rows: usize,
    pub gate_rows: usize,
    /// Fraction of recompute (0) labels among all gate rows, synthetic
    /// included. Augmentation must raise this.
    pub gate_zero_fraction: f64,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    dataset.with_file_name(name)
}

/// Roll scripted-expert episodes over the spelling and insertion families,
/// annotate them, and write dataset plus manifest. `augment` attaches a
/// disturbance schedule to every fourth episode and mixes synthetic
/// stale-lock gate rows in; both are what interference recovery trains on.
pub fn generate_dataset(
    cfg: &RunConfig,
    n_episodes: usize,
    seed: u64,
    augment: bool,
    mode: TargetMode,
    out: &Path,
) -> Result<DatasetManifest> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be >= 1".into()));
    }
    let delta = if mode == TargetMode::FixedOffset { cfg.env.chunk } else { 0 };
    let mut logs = Vec::with_capacity(n_episodes);
    let (mut n_spell, mut n_insert, mut n_interfere) = (0usize, 0usize, 0usize);
    for i in 0..n_episodes {
        let ep_seed = seed.wrapping_add(i as u64);
        let family = if i % 2 == 0 { Suite::Spelling } else { Suite::Insertion };
        match family {
            Suite::Spelling => n_spell += 1,
            _ => n_insert += 1,
        }
        let mut driver = if augment && i % 4 == 2 {
            n_interfere += 1;
            Suite::InterferenceSpelling.driver(ep_seed)
        } else {
            None
        };
        logs.push(run_expert_episode(&cfg.env, &family.task(), ep_seed, driver.as_mut())?);
    }
    let synth_per = if augment { 4 } else { 0 };
    let ds = annotate(
        &cfg.env,
        &cfg.model,
        logs,
        mode,
        delta,
        seed ^ rng::fnv1a64(b"synth"),
        synth_per,
    )?;

    let mut zeros = ds.synth.len();
    let mut total = ds.synth.len();
    for ep in &ds.episodes {
        let labels = gate_labels(&ep.segments, ep.log.steps.len());
        zeros += labels.iter().filter(|&&l| l == 0.0).count();
        total += labels.len();
    }
    let successes = ds.episodes.iter().filter(|e| e.log.outcome == Outcome::Success).count();

    save_dataset(out, &ds)?;
    let man = DatasetManifest {
        path: out.display().to_string(),
        n_episodes,
        seed,
        augment,
        target_mode: mode,
        delta,
        spelling_episodes: n_spell,
        insertion_episodes: n_insert,
        interference_episodes: n_interfere,
        successes,
        synth_rows: ds.synth.len(),
        gate_rows: total,
        gate_zero_fraction: zeros as f64 / total.max(1) as f64,
    };
    let text = serde_json::to_string_pretty(&man)?;
    std::fs::write(manifest_path(out), text)?;
    Ok(man)
}

// ------------------------------------------------------------ checkpoints

pub fn save_checkpoint(dir: &Path, store: &ParamStore, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    store.save(&dir.join("params.bin"))?;
    cfg.save(&dir.join("config.toml"))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, RunConfig)> {
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let store = ParamStore::load(&dir.join("params.bin"))?;
    Ok((store, cfg))
}

/// Train on a saved dataset and stamp the checkpoint with provenance so
/// evaluation can refuse incompatible modes later.
pub fn run_training(
    base: &RunConfig,
    dataset_path: &Path,
    seed: u64,
    out_dir: Option<&Path>,
    metrics: Option<&Path>,
) -> Result<(ParamStore, RunConfig, TrainReport)> {
    let ds = load_dataset(dataset_path)?;
    let mut cfg = base.clone();
    cfg.provenance = Some(Provenance {
        target_mode: ds.target_mode,
        train_seed: seed,
        dataset: dataset_path.display().to_string(),
    });
    let (store, report) = train(&cfg, &ds, seed, metrics)?;
    if let Some(dir) = out_dir {
        save_checkpoint(dir, &store, &cfg)?;
    }
    Ok((store, cfg, report))
}

fn trained_mode(cfg: &RunConfig) -> Result<TargetMode> {
    cfg.provenance.as_ref().map(|p| p.target_mode).ok_or_else(|| {
        Error::Checkpoint("checkpoint carries no training provenance; cannot vet the mode".into())
    })
}

// -------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub mode: String,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_skip_ratio: f64,
    /// Mean modeled latency per control step, in ledger units.
    pub mean_cost: f64,
    pub mean_replans: f64,
    pub lock_violations: usize,
    pub episodes: Vec<EpisodeResult>,
}

impl EvalReport {
    /// (episodes whose every disturbance saw a Full step within `window`
    /// control steps, episodes with at least one disturbance).
    pub fn retrigger_within(&self, window: usize) -> (usize, usize) {
        let mut with = 0;
        let mut hit = 0;
        for ep in &self.episodes {
            if ep.events.is_empty() {
                continue;
            }
            with += 1;
            if ep.retrigger_lags().iter().all(|l| l.is_some_and(|v| v <= window)) {
                hit += 1;
            }
        }
        (hit, with)
    }

    /// Mean lag over every disturbance that was followed by a Full step;
    /// None when no episode had one.
    pub fn mean_retrigger_lag(&self) -> Option<f64> {
        let lags: Vec<usize> =
            self.episodes.iter().flat_map(|e| e.retrigger_lags()).flatten().collect();
        if lags.is_empty() {
            None
        } else {
            Some(lags.iter().sum::<usize>() as f64 / lags.len() as f64)
        }
    }
}

fn summarize(suite: Suite, mode: EvalMode, episodes: Vec<EpisodeResult>) -> EvalReport {
    let n = episodes.len().max(1) as f64;
    EvalReport {
        suite: suite.label().into(),
        mode: mode.label(),
        trials: episodes.len(),
        success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n,
        mean_skip_ratio: episodes.iter().map(|e| e.skip_ratio).sum::<f64>() / n,
        mean_cost: episodes.iter().map(|e| e.mean_cost).sum::<f64>() / n,
        mean_replans: episodes.iter().map(|e| e.replans as f64).sum::<f64>() / n,
        lock_violations: episodes.iter().map(|e| e.lock_violations()).sum(),
        episodes,
    }
}

/// Run trials in parallel over the read-only parameters, then reassemble
/// in seed order so the report is deterministic.
fn run_trials(
    store: &ParamStore,
    cfg: &RunConfig,
    suite: Suite,
    mode: EvalMode,
    seeds: &[u64],
) -> Result<Vec<EpisodeResult>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(seeds.len())
        .max(1);
    let mut slots: Vec<Option<Result<EpisodeResult>>> = Vec::new();
    slots.resize_with(seeds.len(), || None);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < seeds.len() {
                        let seed = seeds[i];
                        let mut driver = suite.driver(seed);
                        let r = run_episode(store, cfg, &suite.task(), seed, mode, driver.as_mut());
                        out.push((i, r));
                        i += workers;
                    }
                    out
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("trial worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|o| o.expect("every trial slot filled")).collect()
}

pub fn evaluate(
    store: &ParamStore,
    cfg: &RunConfig,
    suite: Suite,
    mode: EvalMode,
    n_trials: usize,
    seed_base: u64,
) -> Result<EvalReport> {
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be >= 1".into()));
    }
    check_mode_compat(mode, trained_mode(cfg)?)?;
    let seeds: Vec<u64> = (0..n_trials as u64).map(|i| seed_base + i).collect();
    let episodes = run_trials(store, cfg, suite, mode, &seeds)?;
    Ok(summarize(suite, mode, episodes))
}

// --------------------------------------------------------- held-out probes

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    pub gate_rows: usize,
    /// Rank AUC of the gate score separating interior frames (label 1)
    /// from boundary frames (label 0).
    pub gate_auc: f64,
    pub planning_frames: usize,
    /// Fraction of goal-pyramid cells decoded exactly at planning frames.
    pub imagination_token_acc: f64,
    /// Fraction of planning frames whose decoded sub-task text matches the
    /// scripted plan exactly.
    pub plan_exact_rate: f64,
}

/// Mann-Whitney AUC with average ranks on ties. None when either class is
/// absent.
pub fn rank_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l >= 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] >= 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Score the gate, imagination, and sub-task heads against a held-out
/// annotated dataset. Gate rows pair every step with its own segment's
/// lock; planning frames are where the runtime would recompute: step 0 and
/// each boundary (which belongs to the next sub-task).
pub fn heldout_metrics(
    store: &ParamStore,
    cfg: &RunConfig,
    ds: &AnnotatedDataset,
) -> Result<HeldoutMetrics> {
    const CHUNK: usize = 64;
    struct GateProbe<'a> {
        t: usize,
        ep: &'a crate::annotate::AnnotatedEpisode,
        plan: &'a [u16],
        goal: &'a [u16],
        label: f64,
    }
    struct PlanProbe<'a> {
        t: usize,
        ep: &'a crate::annotate::AnnotatedEpisode,
        plan: &'a [u16],
        pyramid: &'a [u16],
    }

    let mut gate_probes = Vec::new();
    let mut plan_probes = Vec::new();
    for ep in &ds.episodes {
        let labels = gate_labels(&ep.segments, ep.log.steps.len());
        for t in 0..ep.log.steps.len() {
            let seg = &ep.segments[ep.seg_of[t]];
            if let Some(goal) = seg.goal_pyramid.as_ref() {
                gate_probes.push(GateProbe { t, ep, plan: &seg.plan, goal, label: labels[t] });
            }
        }
        for (k, seg) in ep.segments.iter().enumerate() {
            let Some(pyr) = seg.goal_pyramid.as_ref() else { continue };
            let t = if k == 0 { 0 } else { ep.segments[k - 1].end };
            plan_probes.push(PlanProbe { t, ep, plan: &seg.plan, pyramid: pyr });
        }
    }
    if gate_probes.is_empty() || plan_probes.is_empty() {
        return Err(Error::Data("held-out dataset has no usable goal-bearing segments".into()));
    }

    let mut scores = Vec::with_capacity(gate_probes.len());
    let mut labels = Vec::with_capacity(gate_probes.len());
    for chunk in gate_probes.chunks(CHUNK) {
        let mut tape = Tape::new();
        let mut ob = ObsBatch::default();
        for p in chunk {
            let s = &p.ep.log.steps[p.t];
            let instr = p.ep.log.task.instruction_tokens(cfg.model.instr_len);
            ob.push(&s.head, &s.wrist, &s.proprio, &instr);
        }
        let enc = model::encode(&mut tape, store, cfg, &ob)?;
        let plans: Vec<Vec<u16>> = chunk.iter().map(|p| p.plan.to_vec()).collect();
        let goals: Vec<Vec<u16>> = chunk.iter().map(|p| p.goal.to_vec()).collect();
        let pp = model::embed_plan_pooled(&mut tape, store, &cfg.model, &plans);
        let gt = model::embed_goal_tokens(&mut tape, store, &cfg.model, &goals);
        scores.extend(gate::scores(&mut tape, store, &enc, pp, gt)?);
        labels.extend(chunk.iter().map(|p| p.label));
    }
    let gate_auc = rank_auc(&scores, &labels)
        .ok_or_else(|| Error::Data("AUC needs both interior and boundary rows".into()))?;

    let (mut cells_hit, mut cells_total, mut plan_hits) = (0usize, 0usize, 0usize);
    for chunk in plan_probes.chunks(CHUNK) {
        let mut tape = Tape::new();
        let mut ob = ObsBatch::default();
        for p in chunk {
            let s = &p.ep.log.steps[p.t];
            let instr = p.ep.log.task.instruction_tokens(cfg.model.instr_len);
            ob.push(&s.head, &s.wrist, &s.proprio, &instr);
        }
        let enc = model::encode(&mut tape, store, cfg, &ob)?;
        let plans: Vec<Vec<u16>> = chunk.iter().map(|p| p.plan.to_vec()).collect();
        let pp = model::embed_plan_pooled(&mut tape, store, &cfg.model, &plans);
        let pyramids = imagine::decode(&mut tape, store, cfg, &enc, pp);
        let decoded_plans = subtask::decode(&mut tape, store, cfg, &enc);
        for (i, p) in chunk.iter().enumerate() {
            cells_total += p.pyramid.len();
            cells_hit +=
                pyramids[i].iter().zip(p.pyramid.iter()).filter(|(a, b)| a == b).count();
            if decoded_plans[i] == p.plan {
                plan_hits += 1;
            }
        }
    }

    Ok(HeldoutMetrics {
        gate_rows: scores.len(),
        gate_auc,
        planning_frames: plan_probes.len(),
        imagination_token_acc: cells_hit as f64 / cells_total.max(1) as f64,
        plan_exact_rate: plan_hits as f64 / plan_probes.len() as f64,
    })
}

/// Full-mode frequency near ground-truth boundaries vs segment interiors,
/// pooled over episodes. None when either bucket is empty. A trained gate
/// should recompute near boundaries and skip through interiors.
pub fn bimodality(episodes: &[EpisodeResult], window: usize) -> Option<(f64, f64)> {
    let (mut near_full, mut near_n, mut far_full, mut far_n) = (0usize, 0usize, 0usize, 0usize);
    for ep in episodes {
        let bounds: Vec<usize> =
            ep.trace.iter().filter(|r| r.gt_boundary).map(|r| r.step).collect();
        for r in &ep.trace {
            let near = bounds.iter().any(|&b| r.step.abs_diff(b) <= window);
            let full = r.mode == Mode::Full;
            if near {
                near_n += 1;
                near_full += full as usize;
            } else {
                far_n += 1;
                far_full += full as usize;
            }
        }
    }
    if near_n == 0 || far_n == 0 {
        return None;
    }
    Some((near_full as f64 / near_n as f64, far_full as f64 / far_n as f64))
}

// ------------------------------------------------------------------ sweeps

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub tau: f64,
    pub success_rate: f64,
    pub mean_skip_ratio: f64,
    pub mean_cost: f64,
    pub mean_replans: f64,
}

impl SweepRow {
    fn from_report(label: String, tau: f64, r: &EvalReport) -> Self {
        SweepRow {
            label,
            tau,
            success_rate: r.success_rate,
            mean_skip_ratio: r.mean_skip_ratio,
            mean_cost: r.mean_cost,
            mean_replans: r.mean_replans,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconRow {
    pub tau: f64,
    pub skip_ratio: f64,
    pub reported_latency: f64,
    pub ledger_mean: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub suite: String,
    pub rows: Vec<SweepRow>,
    /// always-skip (gate pinned open) and never-skip (reason every step).
    pub sentinels: Vec<SweepRow>,
    pub recon: Vec<ReconRow>,
}

/// The closed-form ledger against each reference operating point.
pub fn reconciliation(cost_full: f64, cost_skip: f64) -> Vec<ReconRow> {
    REFERENCE_POINTS
        .iter()
        .map(|&(tau, r, latency)| {
            let ledger = mean_cost_closed_form(r, cost_full, cost_skip);
            ReconRow {
                tau,
                skip_ratio: r,
                reported_latency: latency,
                ledger_mean: ledger,
                rel_err: (ledger - latency).abs() / latency,
            }
        })
        .collect()
}

pub fn threshold_sweep(
    store: &ParamStore,
    cfg: &RunConfig,
    suite: Suite,
    taus: &[f64],
    n_trials: usize,
    seed_base: u64,
) -> Result<SweepReport> {
    for &t in taus {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!(
                "sweep tau {t} outside (0,1); sentinels cover the endpoints"
            )));
        }
    }
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let r = evaluate(store, cfg, suite, EvalMode::Gated { tau }, n_trials, seed_base)?;
        rows.push(SweepRow::from_report(format!("tau={tau}"), tau, &r));
    }
    // tau 0 can never be exceeded from below, so only the forced first
    // step reasons; tau 1 can never be exceeded at all.
    let open = evaluate(store, cfg, suite, EvalMode::Gated { tau: 0.0 }, n_trials, seed_base)?;
    let closed = evaluate(store, cfg, suite, EvalMode::AlwaysReason, n_trials, seed_base)?;
    let sentinels = vec![
        SweepRow::from_report("always-skip".into(), 0.0, &open),
        SweepRow::from_report("never-skip".into(), 1.0, &closed),
    ];
    Ok(SweepReport {
        suite: suite.label().into(),
        rows,
        sentinels,
        recon: reconciliation(cfg.gate.cost_full, cfg.gate.cost_skip),
    })
}

// ---------------------------------------------------- interference studies

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterferenceReport {
    /// Re-trigger window in control steps.
    pub window: usize,
    pub gated: EvalReport,
    /// Same layouts and mode without any disturbance.
    pub control: EvalReport,
    pub always_reason: EvalReport,
    pub no_system2: EvalReport,
    pub episodes_with_events: usize,
    pub retriggered_within: usize,
    pub retrigger_rate: f64,
    pub mean_lag: Option<f64>,
    pub always_reason_mean_lag: Option<f64>,
    /// Episodes where a block was removed outright; the word may be
    /// unspellable afterwards, so these are tallied separately.
    pub removed_block_episodes: usize,
}

pub fn interference_study(
    store: &ParamStore,
    cfg: &RunConfig,
    n_trials: usize,
    seed_base: u64,
    window: usize,
) -> Result<InterferenceReport> {
    let tau = cfg.gate.tau;
    let gated = evaluate(
        store,
        cfg,
        Suite::InterferenceSpelling,
        EvalMode::Gated { tau },
        n_trials,
        seed_base,
    )?;
    let control =
        evaluate(store, cfg, Suite::Spelling, EvalMode::Gated { tau }, n_trials, seed_base)?;
    let always = evaluate(
        store,
        cfg,
        Suite::InterferenceSpelling,
        EvalMode::AlwaysReason,
        n_trials,
        seed_base,
    )?;
    let no_sys2 = evaluate(
        store,
        cfg,
        Suite::InterferenceSpelling,
        EvalMode::NoSystem2,
        n_trials,
        seed_base,
    )?;
    let (hit, with) = gated.retrigger_within(window);
    let removed = gated
        .episodes
        .iter()
        .filter(|e| e.events.iter().any(|ev| ev.kind == InterferenceKind::RemovePlacedBlock))
        .count();
    Ok(InterferenceReport {
        window,
        episodes_with_events: with,
        retriggered_within: hit,
        retrigger_rate: hit as f64 / with.max(1) as f64,
        mean_lag: gated.mean_retrigger_lag(),
        always_reason_mean_lag: always.mean_retrigger_lag(),
        removed_block_episodes: removed,
        gated,
        control,
        always_reason: always,
        no_system2: no_sys2,
    })
}

// ----------------------------------------------------------------- reports

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

pub fn write_summary_csv(path: &Path, rep: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "suite",
        "mode",
        "trials",
        "success_rate",
        "mean_skip_ratio",
        "mean_cost",
        "mean_replans",
        "lock_violations",
    ])
    .map_err(csv_err)?;
    w.write_record([
        rep.suite.clone(),
        rep.mode.clone(),
        rep.trials.to_string(),
        format!("{:.4}", rep.success_rate),
        format!("{:.4}", rep.mean_skip_ratio),
        format!("{:.4}", rep.mean_cost),
        format!("{:.4}", rep.mean_replans),
        rep.lock_violations.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

pub fn write_episodes_csv(path: &Path, rep: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "seed",
        "success",
        "control_steps",
        "env_steps",
        "skip_ratio",
        "mean_cost",
        "replans",
        "events",
        "lock_violations",
    ])
    .map_err(csv_err)?;
    for e in &rep.episodes {
        w.write_record([
            e.seed.to_string(),
            (e.success as u8).to_string(),
            e.control_steps.to_string(),
            e.env_steps.to_string(),
            format!("{:.4}", e.skip_ratio),
            format!("{:.4}", e.mean_cost),
            e.replans.to_string(),
            e.events.len().to_string(),
            e.lock_violations().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_sweep_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["label", "tau", "success_rate", "mean_skip_ratio", "mean_cost", "mean_replans"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            format!("{}", r.tau),
            format!("{:.4}", r.success_rate),
            format!("{:.4}", r.mean_skip_ratio),
            format!("{:.4}", r.mean_cost),
            format!("{:.4}", r.mean_replans),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rep: &SweepReport) -> Result<()> {
    write_sweep_rows(path, &rep.rows)
}

pub fn write_sentinels_csv(path: &Path, rep: &SweepReport) -> Result<()> {
    write_sweep_rows(path, &rep.sentinels)
}

pub fn write_recon_csv(path: &Path, recon: &[ReconRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["tau", "skip_ratio", "reported_latency", "ledger_mean", "rel_err"])
        .map_err(csv_err)?;
    for r in recon {
        w.write_record([
            format!("{}", r.tau),
            format!("{}", r.skip_ratio),
            format!("{}", r.reported_latency),
            format!("{:.4}", r.ledger_mean),
            format!("{:.6}", r.rel_err),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Score trace of one episode: d per control step, the threshold line, and
/// an accent tick at every Full step. Returns the number of Full marks.
pub fn plot_trace(path: &Path, ep: &EpisodeResult, tau: f64) -> Result<usize> {
    if ep.trace.is_empty() {
        return Err(Error::Data("cannot plot an empty trace".into()));
    }
    let (w, h) = (480u32, 200u32);
    let mut c = plot::Canvas::new(w, h);
    let last = ep.trace.last().unwrap().step as f64;
    let f = plot::Frame::fit(w, h, 0.0, last.max(1.0), 0.0, 1.0);
    f.axes(&mut c);
    f.hline(&mut c, tau, plot::SOFT);
    let pts: Vec<(f64, f64)> = ep.trace.iter().map(|r| (r.step as f64, r.d)).collect();
    f.polyline(&mut c, &pts, plot::SERIES);
    let mut fulls = 0;
    for r in &ep.trace {
        if r.mode == Mode::Full {
            fulls += 1;
            let x = f.x(r.step as f64);
            c.line(x, f.py + f.ph - 8, x, f.py + f.ph, plot::ACCENT);
        }
    }
    c.save(path)?;
    Ok(fulls)
}

/// Mode timeline: one column per control step, tall column for Full, short
/// for Skip. Returns the number of Full columns drawn.
pub fn plot_timeline(path: &Path, ep: &EpisodeResult) -> Result<usize> {
    if ep.trace.is_empty() {
        return Err(Error::Data("cannot plot an empty trace".into()));
    }
    let n = ep.trace.len() as u32;
    let (cw, gap, m) = (4i64, 2i64, 12i64);
    let w = (2 * m + n as i64 * (cw + gap)) as u32;
    let h = 80u32;
    let mut c = plot::Canvas::new(w, h);
    let base = h as i64 - m;
    let mut fulls = 0;
    for (i, r) in ep.trace.iter().enumerate() {
        let x = m + i as i64 * (cw + gap);
        let (height, color) = match r.mode {
            Mode::Full => {
                fulls += 1;
                (48, plot::FULL_COLOR)
            }
            Mode::Skip => (14, plot::SKIP_COLOR),
        };
        c.rect(x, base - height, cw, height, color);
    }
    c.save(path)?;
    Ok(fulls)
}

/// Count timeline columns that contain the Full color: the cross-check
/// that every recompute is marked.
pub fn count_full_marks(path: &Path) -> Result<usize> {
    let img = image::open(path).map_err(|e| Error::Io(std::io::Error::other(e)))?.to_rgb8();
    let mut cols = 0;
    for x in 0..img.width() {
        let mut hit = false;
        for y in 0..img.height() {
            if img.get_pixel(x, y) == &plot::FULL_COLOR {
                hit = true;
                break;
            }
        }
        cols += hit as usize;
    }
    // Columns are separated by background gaps, so contiguous marked
    // pixel-columns belong to one timeline column.
    let mut marks = 0;
    let mut prev = false;
    for x in 0..img.width() {
        let hit = (0..img.height()).any(|y| img.get_pixel(x, y) == &plot::FULL_COLOR);
        if hit && !prev {
            marks += 1;
        }
        prev = hit;
    }
    let _ = cols;
    Ok(marks)
}

pub fn plot_sweep_curves(cost_path: &Path, success_path: &Path, rep: &SweepReport) -> Result<()> {
    if rep.rows.is_empty() {
        return Err(Error::Data("sweep has no rows to plot".into()));
    }
    let pts_cost: Vec<(f64, f64)> = rep.rows.iter().map(|r| (r.tau, r.mean_cost)).collect();
    let pts_succ: Vec<(f64, f64)> = rep.rows.iter().map(|r| (r.tau, r.success_rate)).collect();
    let max_cost = pts_cost.iter().map(|p| p.1).fold(0.0f64, f64::max).max(1.0);

    let (w, h) = (360u32, 240u32);
    let mut c = plot::Canvas::new(w, h);
    let f = plot::Frame::fit(w, h, 0.0, 1.0, 0.0, max_cost * 1.05);
    f.axes(&mut c);
    f.polyline(&mut c, &pts_cost, plot::SERIES);
    c.save(cost_path)?;

    let mut c = plot::Canvas::new(w, h);
    let f = plot::Frame::fit(w, h, 0.0, 1.0, 0.0, 1.0);
    f.axes(&mut c);
    f.polyline(&mut c, &pts_succ, plot::ACCENT);
    c.save(success_path)?;
    Ok(())
}

/// Write the full artifact set for one evaluation (and optionally a sweep)
/// into `dir`. Column order is fixed; plots regenerate byte-identically
/// from the same inputs.
pub fn emit_report(
    dir: &Path,
    eval: &EvalReport,
    sweep: Option<&SweepReport>,
    tau: f64,
) -> Result<Vec<PathBuf>> {
    if eval.episodes.is_empty() {
        return Err(Error::Data("refusing to emit a report with no episodes".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut push = |p: PathBuf| -> PathBuf {
        out.push(p.clone());
        p
    };

    write_summary_csv(&push(dir.join("summary.csv")), eval)?;
    write_episodes_csv(&push(dir.join("episodes.csv")), eval)?;

    let first = &eval.episodes[0];
    if first.trace.is_empty() {
        return Err(Error::Data("first episode has an empty trace".into()));
    }
    plot_trace(&push(dir.join("trace.png")), first, tau)?;
    plot_timeline(&push(dir.join("timeline.png")), first)?;

    if let Some(sw) = sweep {
        write_sweep_csv(&push(dir.join("sweep.csv")), sw)?;
        write_sentinels_csv(&push(dir.join("sentinels.csv")), sw)?;
        write_recon_csv(&push(dir.join("reconciliation.csv")), &sw.recon)?;
        plot_sweep_curves(
            &push(dir.join("sweep_cost.png")),
            &push(dir.join("sweep_success.png")),
            sw,
        )?;
    }
    Ok(out)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::TraceRow;

    fn micro_with_provenance(mode: TargetMode) -> (ParamStore, RunConfig) {
        let mut cfg = RunConfig::micro();
        cfg.provenance = Some(Provenance {
            target_mode: mode,
            train_seed: 7,
            dataset: "unit-test".into(),
        });
        let store = model::init_params(&cfg, 7);
        (store, cfg)
    }

    #[test]
    fn suite_labels_roundtrip() {
        for s in [Suite::Spelling, Suite::Insertion, Suite::InterferenceSpelling] {
            assert_eq!(Suite::parse(s.label()).unwrap(), s);
        }
        assert!(Suite::parse("bowling").is_err());
        assert!(Suite::Spelling.driver(3).is_none());
        assert!(Suite::InterferenceSpelling.driver(3).is_some());
    }

    #[test]
    fn dataset_generation_is_byte_deterministic() {
        let cfg = RunConfig::micro();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        generate_dataset(&cfg, 6, 11, true, TargetMode::Completion, &p1).unwrap();
        generate_dataset(&cfg, 6, 11, true, TargetMode::Completion, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert!(manifest_path(&p1).exists());
    }

    #[test]
    fn augmentation_raises_the_zero_label_fraction() {
        let cfg = RunConfig::micro();
        let dir = tempfile::tempdir().unwrap();
        let plain =
            generate_dataset(&cfg, 8, 5, false, TargetMode::Completion, &dir.path().join("p.json"))
                .unwrap();
        let aug =
            generate_dataset(&cfg, 8, 5, true, TargetMode::Completion, &dir.path().join("a.json"))
                .unwrap();
        assert_eq!(plain.synth_rows, 0);
        assert!(aug.synth_rows > 0);
        assert!(
            aug.gate_zero_fraction > plain.gate_zero_fraction,
            "augmented {} vs plain {}",
            aug.gate_zero_fraction,
            plain.gate_zero_fraction
        );
    }

    #[test]
    fn checkpoint_roundtrip_preserves_params_and_provenance() {
        let (store, cfg) = micro_with_provenance(TargetMode::Completion);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store, &cfg).unwrap();
        let (loaded, lcfg) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(lcfg, cfg);
        assert_eq!(loaded.names(), store.names());
        let n = &store.names()[0];
        assert_eq!(loaded.get(n).unwrap().value.data, store.get(n).unwrap().value.data);
    }

    #[test]
    fn evaluate_refuses_mode_mismatch_and_missing_provenance() {
        let (store, cfg) = micro_with_provenance(TargetMode::Completion);
        let err = evaluate(&store, &cfg, Suite::Spelling, EvalMode::FixedStep, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Runtime(_)), "{err}");

        let mut bare = cfg.clone();
        bare.provenance = None;
        let err =
            evaluate(&store, &bare, Suite::Spelling, EvalMode::Gated { tau: 0.5 }, 1, 0)
                .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn evaluate_is_deterministic_and_seed_ordered() {
        let (store, cfg) = micro_with_provenance(TargetMode::Completion);
        let a = evaluate(&store, &cfg, Suite::Spelling, EvalMode::Gated { tau: 0.5 }, 5, 100)
            .unwrap();
        let b = evaluate(&store, &cfg, Suite::Spelling, EvalMode::Gated { tau: 0.5 }, 5, 100)
            .unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let seeds: Vec<u64> = a.episodes.iter().map(|e| e.seed).collect();
        assert_eq!(seeds, vec![100, 101, 102, 103, 104]);
    }

    #[test]
    fn rank_auc_matches_hand_counts() {
        assert_eq!(rank_auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 1.0, 0.0, 1.0]), Some(1.0));
        assert_eq!(rank_auc(&[0.35, 0.4, 0.5, 0.8], &[0.0, 1.0, 0.0, 1.0]), Some(0.75));
        assert_eq!(rank_auc(&[0.5, 0.5, 0.5, 0.5], &[1.0, 0.0, 1.0, 0.0]), Some(0.5));
        assert_eq!(rank_auc(&[0.2, 0.9], &[1.0, 1.0]), None);
    }

    #[test]
    fn untrained_gate_scores_give_chance_auc() {
        let (store, cfg) = micro_with_provenance(TargetMode::Completion);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        generate_dataset(&cfg, 2, 31, false, TargetMode::Completion, &p).unwrap();
        let ds = load_dataset(&p).unwrap();
        let m = heldout_metrics(&store, &cfg, &ds).unwrap();
        // Zero-initialized gate output scores everything exactly 0.5.
        assert!((m.gate_auc - 0.5).abs() < 1e-12, "auc {}", m.gate_auc);
        assert!(m.gate_rows > 0 && m.planning_frames > 0);
        assert!((0.0..=1.0).contains(&m.imagination_token_acc));
        assert!((0.0..=1.0).contains(&m.plan_exact_rate));
    }

    #[test]
    fn reconciliation_hits_the_reference_points() {
        let recon = reconciliation(244.0, 83.0);
        assert_eq!(recon.len(), 5);
        for r in &recon {
            assert!(r.rel_err < 0.15, "tau {} err {}", r.tau, r.rel_err);
        }
        let mid = recon.iter().find(|r| r.tau == 0.5).unwrap();
        assert!(mid.rel_err < 0.01, "tau 0.5 err {}", mid.rel_err);
    }

    #[test]
    fn sweep_rejects_endpoint_taus() {
        let (store, cfg) = micro_with_provenance(TargetMode::Completion);
        let err = threshold_sweep(&store, &cfg, Suite::Spelling, &[0.0], 1, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn fake_episode(modes: &[Mode], boundaries: &[usize]) -> EpisodeResult {
        let trace: Vec<TraceRow> = modes
            .iter()
            .enumerate()
            .map(|(i, &m)| TraceRow {
                step: i,
                d: if m == Mode::Full { 0.2 } else { 0.8 },
                mode: m,
                replans: 0,
                cost: 0.0,
                lock_fp: 1,
                gt_boundary: boundaries.contains(&i),
            })
            .collect();
        let replans = modes.iter().filter(|&&m| m == Mode::Full).count();
        EpisodeResult {
            seed: 0,
            mode_label: "test".into(),
            success: true,
            control_steps: modes.len(),
            env_steps: modes.len() * 5,
            skip_ratio: 0.0,
            mean_cost: 0.0,
            replans,
            trace,
            actions: vec![vec![0.0]; modes.len()],
            events: vec![],
        }
    }

    #[test]
    fn bimodality_separates_boundary_heavy_recomputes() {
        use Mode::{Full, Skip};
        let ep = fake_episode(
            &[Full, Skip, Skip, Skip, Full, Skip, Skip, Skip, Full, Skip],
            &[4, 8],
        );
        let (near, far) = bimodality(&[ep], 1).unwrap();
        assert!(near > far, "near {near} far {far}");
        assert!(bimodality(&[], 1).is_none());
    }

    #[test]
    fn timeline_marks_match_replans_and_regenerate_identically() {
        use Mode::{Full, Skip};
        let ep = fake_episode(&[Full, Skip, Skip, Full, Skip, Full], &[]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tl.png");
        let marks = plot_timeline(&p, &ep).unwrap();
        assert_eq!(marks, ep.replans);
        assert_eq!(count_full_marks(&p).unwrap(), ep.replans);

        let p2 = dir.path().join("tl2.png");
        plot_timeline(&p2, &ep).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());

        let empty = EpisodeResult { trace: vec![], ..ep };
        assert!(plot_timeline(&dir.path().join("x.png"), &empty).is_err());
        assert!(plot_trace(&dir.path().join("y.png"), &empty, 0.5).is_err());
    }

    #[test]
    fn emit_report_writes_the_stable_artifact_set() {
        let (store, cfg) = micro_with_provenance(TargetMode::Completion);
        let rep = evaluate(&store, &cfg, Suite::Spelling, EvalMode::Gated { tau: 0.5 }, 2, 40)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(dir.path(), &rep, None, 0.5).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            assert!(f.exists(), "{f:?}");
        }
        let header = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(header.starts_with(
            "suite,mode,trials,success_rate,mean_skip_ratio,mean_cost,mean_replans,lock_violations"
        ));
    }
}
