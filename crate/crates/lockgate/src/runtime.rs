//! The lock-and-gate runtime: a per-episode state machine that decides,
//! each control step, between reusing the cached reasoning outputs (Skip)
//! and regenerating them (Full), while charging a modeled cost ledger.
//!
//! Ordering within a step: gate first against the existing lock, then
//! replan if the gate says the locked sub-task is finished. The first
//! gate evaluation against a fresh lock therefore happens on the next
//! step.

use crate::config::{RunConfig, TargetMode};
use crate::letterworld::expert::InterferenceDriver;
use crate::letterworld::{check_success, render, reset, step, InterferenceEvent, TaskSpec};
use crate::model::{self, action, gate, imagine, subtask, ObsBatch};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::Tape;
use crate::{Error, Result};
use std::fmt;
use std::io::Write as IoWrite;
use std::path::Path;

/// Score recorded at steps where no gate ran (step 0, and every step of
/// the reasoner-free ablation), chosen so traces are total functions.
pub const D_SENTINEL: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Full,
    Skip,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::Skip => "skip",
        })
    }
}

/// The three-rule gating table: the first step always reasons; afterwards
/// a high score means the sub-task is still in progress, so reasoning is
/// skipped; scores at or below the threshold trigger a fresh plan.
pub fn decide_mode(t: usize, d: f64, tau: f64) -> Mode {
    if t == 0 {
        Mode::Full
    } else if d > tau {
        Mode::Skip
    } else {
        Mode::Full
    }
}

/// Cached reasoning outputs. Plan and goal only ever change together.
#[derive(Debug, Clone, PartialEq)]
pub struct LockState {
    pub plan: Vec<u16>,
    /// Full decoded pyramid; consumers embed the finest scale.
    pub goal: Vec<u16>,
    pub lock_step: usize,
    pub replans: usize,
}

impl LockState {
    /// Order-sensitive fingerprint of (plan, goal) for trace auditing.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(2 + 2 * (self.plan.len() + self.goal.len()));
        for &t in &self.plan {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        bytes.push(0xff);
        bytes.push(0xfe);
        for &t in &self.goal {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        rng::fnv1a64(&bytes)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LedgerRecord {
    pub step: usize,
    pub mode: Mode,
    pub d: f64,
    pub cost: f64,
}

/// Modeled cost accounting. Costs are units, not wall-clock: the point is
/// the amortization arithmetic, which tiny networks cannot time out.
#[derive(Debug, Clone)]
pub struct CostLedger {
    pub cost_full: f64,
    pub cost_skip: f64,
    pub records: Vec<LedgerRecord>,
}

impl CostLedger {
    pub fn new(cost_full: f64, cost_skip: f64) -> Self {
        CostLedger { cost_full, cost_skip, records: Vec::new() }
    }

    pub fn charge(&mut self, step: usize, mode: Mode, d: f64) {
        let cost = match mode {
            Mode::Full => self.cost_full,
            Mode::Skip => self.cost_skip,
        };
        self.records.push(LedgerRecord { step, mode, d, cost });
    }

    pub fn skip_ratio(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let skips = self.records.iter().filter(|r| r.mode == Mode::Skip).count();
        skips as f64 / self.records.len() as f64
    }

    /// Mean cost in closed form, r*cost_skip + (1-r)*cost_full.
    pub fn mean_cost(&self) -> f64 {
        mean_cost_closed_form(self.skip_ratio(), self.cost_full, self.cost_skip)
    }

    pub fn full_count(&self) -> usize {
        self.records.iter().filter(|r| r.mode == Mode::Full).count()
    }

    pub fn summary(&self) -> Result<(f64, f64, usize)> {
        if self.records.is_empty() {
            return Err(Error::Runtime("ledger has no records".into()));
        }
        Ok((self.skip_ratio(), self.mean_cost(), self.full_count()))
    }
}

pub fn mean_cost_closed_form(skip_ratio: f64, cost_full: f64, cost_skip: f64) -> f64 {
    skip_ratio * cost_skip + (1.0 - skip_ratio) * cost_full
}

/// Replay a recorded score trace under a different threshold and count
/// the Full steps it would produce.
pub fn full_count_on_trace(ds: &[f64], tau: f64) -> usize {
    ds.iter().enumerate().filter(|&(t, &d)| decide_mode(t, d, tau) == Mode::Full).count()
}

/// How the scheduler consults System 2 during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum EvalMode {
    /// Gate each step against the locked completion state.
    Gated { tau: f64 },
    /// Reason every step; identical code path with the threshold pinned
    /// to 1.0, which no score in (0,1) can exceed.
    AlwaysReason,
    /// No reasoner at all: actions condition on the instruction, the
    /// goal slot stays zero, every step charges the cheap cost.
    NoSystem2,
    /// Reason every step against a checkpoint trained on fixed-offset
    /// future frames instead of completion states.
    FixedStep,
}

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Gated { tau } => format!("gated(tau={tau})"),
            EvalMode::AlwaysReason => "always-reason".into(),
            EvalMode::NoSystem2 => "no-system2".into(),
            EvalMode::FixedStep => "fixed-step".into(),
        }
    }

    fn effective_tau(&self) -> f64 {
        match self {
            EvalMode::Gated { tau } => *tau,
            // A score in (0,1) never exceeds 1.0, so every step is Full.
            _ => 1.0,
        }
    }
}

/// Refuse mode/checkpoint pairings whose training targets do not match
/// the scheduling the mode assumes.
pub fn check_mode_compat(mode: EvalMode, trained_for: TargetMode) -> Result<()> {
    let need = match mode {
        EvalMode::FixedStep => TargetMode::FixedOffset,
        _ => TargetMode::Completion,
    };
    if trained_for != need {
        return Err(Error::Runtime(format!(
            "{} requires a checkpoint trained with {:?} targets, got {:?}",
            mode.label(),
            need,
            trained_for
        )));
    }
    Ok(())
}

/// One control step of the episode trace.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub d: f64,
    pub mode: Mode,
    pub replans: usize,
    pub cost: f64,
    /// Fingerprint of the lock driving this step's actions (0 if none).
    pub lock_fp: u64,
    /// Ground-truth segment boundary: the scripted description of the
    /// live state changed between the previous control step and this one.
    pub gt_boundary: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub mode_label: String,
    pub success: bool,
    pub control_steps: usize,
    pub env_steps: usize,
    pub skip_ratio: f64,
    pub mean_cost: f64,
    pub replans: usize,
    pub trace: Vec<TraceRow>,
    /// Actions actually executed, flattened per control step.
    pub actions: Vec<Vec<f64>>,
    /// Interference events that fired, with the env step they hit.
    pub events: Vec<InterferenceEvent>,
}

impl EpisodeResult {
    /// Control steps from each interference event to the next Full step;
    /// None when no Full step followed.
    pub fn retrigger_lags(&self) -> Vec<Option<usize>> {
        let chunk = if self.env_steps > 0 && self.control_steps > 0 {
            self.env_steps.div_ceil(self.control_steps)
        } else {
            1
        };
        self.events
            .iter()
            .map(|e| {
                let at = e.step / chunk;
                self.trace
                    .iter()
                    .find(|r| r.step >= at && r.mode == Mode::Full)
                    .map(|r| r.step - at)
            })
            .collect()
    }

    /// Zero when locked plan and goal never changed between consecutive
    /// Full steps.
    pub fn lock_violations(&self) -> usize {
        let mut v = 0;
        let mut last_fp = None;
        for r in &self.trace {
            if r.mode == Mode::Skip {
                if let Some(fp) = last_fp {
                    if fp != r.lock_fp {
                        v += 1;
                    }
                }
            }
            last_fp = Some(r.lock_fp);
        }
        v
    }
}

/// Run one evaluation episode. The caller has already checked mode
/// compatibility against the checkpoint's provenance.
pub fn run_episode(
    store: &ParamStore,
    cfg: &RunConfig,
    task: &TaskSpec,
    seed: u64,
    mode: EvalMode,
    mut driver: Option<&mut InterferenceDriver>,
) -> Result<EpisodeResult> {
    let kd = cfg.env.chunk * cfg.env.action_dim;
    let tau = mode.effective_tau();
    let mut state = reset(&cfg.env, task, seed)?;
    let mut ledger = CostLedger::new(cfg.gate.cost_full, cfg.gate.cost_skip);
    let mut lock: Option<LockState> = None;
    let mut trace = Vec::new();
    let mut actions = Vec::new();
    let mut events = Vec::new();
    let instr = task.instruction_tokens(cfg.model.instr_len);
    let max_control = cfg.env.max_steps / cfg.env.chunk;
    let mut success = false;
    let mut prev_desc = None;

    for t in 0..max_control {
        if let Some(dr) = driver.as_deref_mut() {
            events.extend(dr.poll(&mut state)?);
        }
        let obs = render(&state, &cfg.env);
        let desc = crate::letterworld::expert::derive_active(&state, task);
        let gt_boundary = prev_desc.as_ref().map_or(false, |p| *p != desc);
        prev_desc = Some(desc);

        let mut tape = Tape::new();
        let mut batch = ObsBatch::default();
        batch.push(&obs.head, &obs.wrist, &obs.proprio, &instr);
        let enc = model::encode(&mut tape, store, cfg, &batch)?;

        let (d, mode_t) = match (&mode, &lock) {
            (EvalMode::NoSystem2, _) => (D_SENTINEL, Mode::Skip),
            (_, None) => (D_SENTINEL, decide_mode(t, D_SENTINEL, tau)),
            (_, Some(l)) => {
                let p = model::embed_plan_pooled(&mut tape, store, &cfg.model, &[l.plan.clone()]);
                let g = model::embed_goal_tokens(&mut tape, store, &cfg.model, &[l.goal.clone()]);
                let d = gate::scores(&mut tape, store, &enc, p, g)?[0];
                let mut m = decide_mode(t, d, tau);
                if m == Mode::Full && t > 0 && t - l.lock_step < cfg.gate.min_dwell {
                    m = Mode::Skip;
                }
                (d, m)
            }
        };

        if mode_t == Mode::Full && mode != EvalMode::NoSystem2 {
            let plan = subtask::decode(&mut tape, store, cfg, &enc).remove(0);
            let pe = model::embed_plan_pooled(&mut tape, store, &cfg.model, &[plan.clone()]);
            let goal = imagine::decode(&mut tape, store, cfg, &enc, pe).remove(0);
            let replans = lock.as_ref().map_or(0, |l| l.replans) + 1;
            lock = Some(LockState { plan, goal, lock_step: t, replans });
        }

        let cond = match (&mode, &lock) {
            (EvalMode::NoSystem2, _) => {
                let p = enc.instr_pooled(&mut tape);
                model::condition(&mut tape, store, &enc, p, None)
            }
            (_, Some(l)) => {
                let p = model::embed_plan_pooled(&mut tape, store, &cfg.model, &[l.plan.clone()]);
                let g = model::embed_goal_tokens(&mut tape, store, &cfg.model, &[l.goal.clone()]);
                model::condition(&mut tape, store, &enc, p, Some(g))
            }
            (_, None) => unreachable!("step 0 always locks"),
        };
        let cond_row = tape.value(cond).to_vec();
        let mut a0 = vec![0.0; kd];
        let mut r = rng::stream_n(seed, "eval.a0", t as u64);
        rng::fill_normal(&mut r, &mut a0);
        let chunk = action::sample(store, cfg, &cond_row, &a0, cfg.model.ode_steps);

        ledger.charge(t, if mode == EvalMode::NoSystem2 { Mode::Skip } else { mode_t }, d);
        trace.push(TraceRow {
            step: t,
            d,
            mode: mode_t,
            replans: lock.as_ref().map_or(0, |l| l.replans),
            cost: ledger.records.last().unwrap().cost,
            lock_fp: lock.as_ref().map_or(0, |l| l.fingerprint()),
            gt_boundary,
        });

        for k in 0..cfg.env.chunk {
            step(&mut state, &chunk[k * cfg.env.action_dim..(k + 1) * cfg.env.action_dim]);
        }
        actions.push(chunk);

        if check_success(&state) {
            success = true;
            break;
        }
    }

    let (skip_ratio, mean_cost, _) = ledger.summary()?;
    Ok(EpisodeResult {
        seed,
        mode_label: mode.label(),
        success,
        control_steps: trace.len(),
        env_steps: state.steps,
        skip_ratio,
        mean_cost,
        replans: lock.as_ref().map_or(0, |l| l.replans),
        trace,
        actions,
        events,
    })
}

/// Write a trace file: commented header, then one CSV row per step.
pub fn write_trace(path: &Path, cfg: &RunConfig, res: &EpisodeResult) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# mode={} seed={}", res.mode_label, res.seed)?;
    writeln!(
        f,
        "# tau={} cost_full={} cost_skip={}",
        cfg.gate.tau, cfg.gate.cost_full, cfg.gate.cost_skip
    )?;
    writeln!(f, "step,d,mode,replans,cost,lock_fp,gt_boundary")?;
    for r in &res.trace {
        writeln!(
            f,
            "{},{:.6},{},{},{},{:016x},{}",
            r.step, r.d, r.mode, r.replans, r.cost, r.lock_fp, u8::from(r.gt_boundary)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decide_mode_follows_the_three_rules() {
        assert_eq!(decide_mode(0, 0.99, 0.5), Mode::Full);
        assert_eq!(decide_mode(7, 0.7, 0.5), Mode::Skip);
        assert_eq!(decide_mode(7, 0.5, 0.5), Mode::Full);
        assert_eq!(decide_mode(7, 0.2, 0.5), Mode::Full);
    }

    #[test]
    fn exhaustive_truth_table_has_zero_deviations() {
        for t in [0usize, 1] {
            for di in 1..=99 {
                let d = di as f64 / 100.0;
                for tau in [0.3, 0.4, 0.5, 0.6, 0.7] {
                    let got = decide_mode(t, d, tau);
                    let want = if t == 0 {
                        Mode::Full
                    } else if d > tau {
                        Mode::Skip
                    } else {
                        Mode::Full
                    };
                    assert_eq!(got, want, "t={t} d={d} tau={tau}");
                }
            }
        }
    }

    #[test]
    fn ledger_mean_is_the_closed_form() {
        let mut l = CostLedger::new(244.0, 83.0);
        for t in 0..100 {
            l.charge(t, if t % 4 == 0 { Mode::Full } else { Mode::Skip }, 0.5);
        }
        let (r, mean, fulls) = l.summary().unwrap();
        assert_eq!(r, 0.75);
        assert_eq!(fulls, 25);
        assert_eq!(mean, 0.75 * 83.0 + 0.25 * 244.0);
        assert_eq!(mean, mean_cost_closed_form(r, 244.0, 83.0));
    }

    #[test]
    fn ledger_reference_points() {
        let m = mean_cost_closed_form(0.72, 244.0, 83.0);
        assert!((m - 128.1).abs() < 0.05);
        assert_eq!(mean_cost_closed_form(0.0, 244.0, 83.0), 244.0);
        assert_eq!(mean_cost_closed_form(1.0, 244.0, 83.0), 83.0);
    }

    #[test]
    fn empty_ledger_summary_is_an_error() {
        let l = CostLedger::new(244.0, 83.0);
        assert!(l.summary().is_err());
    }

    #[test]
    fn raising_tau_never_reduces_full_steps_on_a_fixed_trace() {
        let ds = [0.9, 0.8, 0.45, 0.7, 0.55, 0.3, 0.95, 0.5];
        let mut taus = vec![0.1, 0.3, 0.45, 0.5, 0.55, 0.7, 0.9];
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let counts: Vec<usize> = taus.iter().map(|&t| full_count_on_trace(&ds, t)).collect();
        for w in counts.windows(2) {
            assert!(w[0] <= w[1], "counts {counts:?}");
        }
    }

    #[test]
    fn mode_checkpoint_compatibility() {
        assert!(check_mode_compat(EvalMode::Gated { tau: 0.5 }, TargetMode::Completion).is_ok());
        assert!(check_mode_compat(EvalMode::AlwaysReason, TargetMode::Completion).is_ok());
        assert!(check_mode_compat(EvalMode::FixedStep, TargetMode::FixedOffset).is_ok());
        assert!(check_mode_compat(EvalMode::FixedStep, TargetMode::Completion).is_err());
        assert!(check_mode_compat(EvalMode::Gated { tau: 0.5 }, TargetMode::FixedOffset).is_err());
    }

    #[test]
    fn lock_fingerprint_separates_plan_and_goal_content() {
        let a = LockState { plan: vec![4, 10], goal: vec![2], lock_step: 0, replans: 1 };
        let b = LockState { plan: vec![4], goal: vec![10, 2], lock_step: 0, replans: 1 };
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn first_step_always_locks_and_charges_full() {
        let cfg = RunConfig::micro();
        let store = crate::model::init_params(&cfg, 3);
        let task = TaskSpec::spelling(&[0]);
        let res =
            run_episode(&store, &cfg, &task, 1, EvalMode::Gated { tau: 0.5 }, None).unwrap();
        assert_eq!(res.trace[0].mode, Mode::Full);
        assert_eq!(res.trace[0].d, D_SENTINEL);
        assert!(res.replans >= 1);
        assert_ne!(res.trace[0].lock_fp, 0);
    }

    #[test]
    fn untrained_gate_scores_half_so_default_tau_reasons_every_step() {
        // Zero-initialized gate output emits exactly 0.5, and 0.5 <= tau.
        let cfg = RunConfig::micro();
        let store = crate::model::init_params(&cfg, 3);
        let task = TaskSpec::spelling(&[0]);
        let res =
            run_episode(&store, &cfg, &task, 1, EvalMode::Gated { tau: 0.5 }, None).unwrap();
        assert!(res.trace.iter().all(|r| r.mode == Mode::Full));
        assert_eq!(res.replans, res.control_steps);
        assert_eq!(res.skip_ratio, 0.0);
        assert_eq!(res.mean_cost, cfg.gate.cost_full);
    }

    #[test]
    fn always_reason_equals_gated_with_threshold_one_bit_for_bit() {
        let cfg = RunConfig::micro();
        let store = crate::model::init_params(&cfg, 3);
        let task = TaskSpec::spelling(&[0]);
        let a =
            run_episode(&store, &cfg, &task, 5, EvalMode::Gated { tau: 1.0 }, None).unwrap();
        let b = run_episode(&store, &cfg, &task, 5, EvalMode::AlwaysReason, None).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.success, b.success);
        assert_eq!(
            a.trace.iter().map(|r| r.mode).collect::<Vec<_>>(),
            b.trace.iter().map(|r| r.mode).collect::<Vec<_>>()
        );
    }

    #[test]
    fn no_system2_never_replans_and_charges_the_floor_cost() {
        let cfg = RunConfig::micro();
        let store = crate::model::init_params(&cfg, 3);
        let task = TaskSpec::spelling(&[0]);
        let res = run_episode(&store, &cfg, &task, 2, EvalMode::NoSystem2, None).unwrap();
        assert_eq!(res.replans, 0);
        assert_eq!(res.skip_ratio, 1.0);
        assert_eq!(res.mean_cost, cfg.gate.cost_skip);
        assert!(res.trace.iter().all(|r| r.lock_fp == 0));
        assert_eq!(res.lock_violations(), 0);
    }

    #[test]
    fn lock_is_constant_between_full_steps_on_any_episode() {
        let cfg = RunConfig::micro();
        let store = crate::model::init_params(&cfg, 9);
        for seed in 0..5u64 {
            for mode in [EvalMode::Gated { tau: 0.5 }, EvalMode::Gated { tau: 0.05 }] {
                let task = TaskSpec::spelling(&[0, 1]);
                let res = run_episode(&store, &cfg, &task, seed, mode, None).unwrap();
                assert_eq!(res.lock_violations(), 0);
            }
        }
    }

    #[test]
    fn trace_file_round_trips_the_header_and_rows() {
        let cfg = RunConfig::micro();
        let store = crate::model::init_params(&cfg, 3);
        let task = TaskSpec::spelling(&[0]);
        let res =
            run_episode(&store, &cfg, &task, 1, EvalMode::Gated { tau: 0.5 }, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&path, &cfg, &res).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# mode=gated"));
        assert!(lines.next().unwrap().contains("cost_full=244"));
        assert_eq!(lines.next().unwrap(), "step,d,mode,replans,cost,lock_fp,gt_boundary");
        assert_eq!(text.lines().count(), 3 + res.trace.len());
    }

    proptest::proptest! {
        #[test]
        fn monotone_full_count_property(
            ds in proptest::collection::vec(0.01f64..0.99, 1..60),
            t1 in 0.01f64..0.98,
            bump in 0.001f64..0.5,
        ) {
            let t2 = (t1 + bump).min(0.99);
            proptest::prop_assert!(
                full_count_on_trace(&ds, t1) <= full_count_on_trace(&ds, t2)
            );
        }
    }
}
