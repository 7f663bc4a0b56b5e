//! Annotation pipeline: raw episode logs in, training targets out.
//!
//! The activity track logged with each step drives everything. A boundary
//! is a step whose activity differs from the previous step's (plus the
//! final step); a segment is the half-open span between boundaries,
//! inclusive of its own boundary step. Because the activity is derived
//! from the state before the action, the boundary frame is the first one
//! that shows the previous sub-task completed, so it doubles as that
//! segment's goal image.
//!
//! Segments cut short by a disturbance have no completion frame of their
//! own; they borrow the goal from the next later segment that finishes the
//! same sub-task. The disturbed frame then becomes a labeled example of
//! "the lock is stale, recompute", straight from a real rollout.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, ModelConfig, TargetMode};
use crate::letterworld::log::{state_at, EpisodeLog, Outcome};
use crate::letterworld::{expert, render, render_head, ActiveDesc};
use crate::rng;
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Inclusive span; `end` is the boundary step whose frame shows this
    /// segment's sub-task completed.
    pub start: usize,
    pub end: usize,
    pub desc: ActiveDesc,
    pub sub_idx: i32,
    pub plan: Vec<u16>,
    /// Step whose head frame serves as the goal image. Usually `end`;
    /// borrowed from a later segment when this one was interrupted; `None`
    /// when nothing valid exists (the segment is then excluded from
    /// goal-conditioned training).
    pub goal_step: Option<usize>,
    pub goal_pyramid: Option<Vec<u16>>,
    pub interrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedEpisode {
    pub log: EpisodeLog,
    pub segments: Vec<Segment>,
    /// Segment index per step.
    pub seg_of: Vec<usize>,
    /// Per-step goal pyramids in fixed-offset mode (completion mode reads
    /// goals off the segments instead).
    pub fixed_goals: Option<Vec<Vec<u16>>>,
}

/// A standalone gate example: an observation paired with a lock it does
/// not belong to. Always labeled "recompute".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub head: Vec<u8>,
    pub wrist: Vec<u8>,
    pub proprio: Vec<f64>,
    pub plan: Vec<u16>,
    pub goal_pyramid: Vec<u16>,
    pub label: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedDataset {
    pub version: u32,
    pub target_mode: TargetMode,
    pub delta: usize,
    pub episodes: Vec<AnnotatedEpisode>,
    pub synth: Vec<GateRow>,
}

/// Token pyramid of a head frame: one grid per scale, coarse to fine, each
/// cell the max palette id over the pixels it covers. The palette orders
/// ids by salience, so max-pooling keeps the most informative content.
pub fn tokenize_pyramid(head: &[u8], env: &EnvConfig, model: &ModelConfig) -> Vec<u16> {
    let w = env.grid_w;
    debug_assert_eq!(head.len(), w * env.grid_h);
    let mut out = Vec::with_capacity(model.pyramid_cells());
    for &s in &model.scales {
        let cell = w / s;
        for cy in 0..s {
            for cx in 0..s {
                let mut m = 0u8;
                for y in cy * cell..(cy + 1) * cell {
                    for x in cx * cell..(cx + 1) * cell {
                        m = m.max(head[y * w + x]);
                    }
                }
                out.push(m as u16);
            }
        }
    }
    out
}

fn boundaries(log: &EpisodeLog) -> Vec<usize> {
    let t = log.steps.len();
    let mut b: Vec<usize> = (1..t)
        .filter(|&i| log.steps[i].desc != log.steps[i - 1].desc)
        .collect();
    if b.last() != Some(&(t - 1)) {
        b.push(t - 1);
    }
    b
}

/// Whether the final segment ends in a settled frame a goal can be read
/// from: the success frame, or the idle-at-home frame of a given-up
/// episode. Budget-truncated logs end mid-motion and are excluded.
fn final_end_is_settled(log: &EpisodeLog) -> bool {
    if log.outcome == Outcome::Success {
        return true;
    }
    let last = log.steps.last().expect("non-empty episode");
    last.desc == ActiveDesc::Done && last.proprio[0] == -1.0 && last.proprio[1] == -1.0
}

/// Split an episode into segments and resolve each one's goal frame.
pub fn segment_episode(log: &EpisodeLog) -> Vec<Segment> {
    let b = boundaries(log);
    let mut segs: Vec<Segment> = Vec::with_capacity(b.len());
    let mut start = 0usize;
    for &end in &b {
        if end < start {
            continue;
        }
        let desc = log.steps[start].desc;
        let interrupted = log.events.iter().any(|e| e.step == end);
        segs.push(Segment {
            start,
            end,
            desc,
            sub_idx: log.steps[start].sub_idx,
            plan: desc.plan_tokens(),
            goal_step: None,
            goal_pyramid: None,
            interrupted,
        });
        start = end + 1;
    }
    let n = segs.len();
    for k in 0..n {
        if segs[k].interrupted {
            // Borrow the completion frame from the next clean segment that
            // finishes the same sub-task.
            segs[k].goal_step = segs
                .iter()
                .skip(k + 1)
                .find(|s| s.desc == segs[k].desc && !s.interrupted)
                .map(|s| s.end);
        } else if k + 1 < n || final_end_is_settled(log) {
            segs[k].goal_step = Some(segs[k].end);
        }
    }
    segs
}

/// Per-step goal images as token pyramids.
///
/// Completion mode: every step in a segment maps to that segment's goal
/// frame, constant across the segment. Fixed-offset mode: step t maps to
/// the frame `delta` steps ahead, clamped to the final step.
pub fn extract_targets(
    env: &EnvConfig,
    model: &ModelConfig,
    log: &EpisodeLog,
    segments: &[Segment],
    mode: TargetMode,
    delta: usize,
) -> Vec<Vec<u16>> {
    let t = log.steps.len();
    match mode {
        TargetMode::Completion => {
            let per_seg: Vec<Vec<u16>> = segments
                .iter()
                .map(|s| {
                    let g = s.goal_step.unwrap_or(s.end);
                    tokenize_pyramid(&log.steps[g].head, env, model)
                })
                .collect();
            let mut out = Vec::with_capacity(t);
            for (k, s) in segments.iter().enumerate() {
                for _ in s.start..=s.end.min(t - 1) {
                    out.push(per_seg[k].clone());
                }
            }
            out
        }
        TargetMode::FixedOffset => (0..t)
            .map(|i| tokenize_pyramid(&log.steps[(i + delta).min(t - 1)].head, env, model))
            .collect(),
    }
}

/// Gate label per step: 1 while the segment is in progress, 0 at its
/// boundary step (the frame that shows completion, or the disturbed frame
/// of an interrupted segment).
pub fn gate_labels(segments: &[Segment], n_steps: usize) -> Vec<f64> {
    let mut out = vec![1.0; n_steps];
    for s in segments {
        if s.end < n_steps {
            out[s.end] = 0.0;
        }
    }
    out
}

/// Action chunk starting at `t`, clamped at the segment boundary and
/// zero-padded: the boundary frame itself gets an all-no-op chunk, which
/// is what makes a policy hold still once its goal is met.
pub fn action_chunk(log: &EpisodeLog, seg: &Segment, t: usize, env: &EnvConfig) -> Vec<f64> {
    let k = env.chunk;
    let d = env.action_dim;
    let mut out = vec![0.0; k * d];
    let hi = seg.end.min(t + k);
    for (j, i) in (t..hi).enumerate() {
        out[j * d..(j + 1) * d].copy_from_slice(&log.steps[i].action);
    }
    out
}

pub fn annotate_episode(
    env: &EnvConfig,
    model: &ModelConfig,
    log: EpisodeLog,
    mode: TargetMode,
    delta: usize,
) -> AnnotatedEpisode {
    let mut segments = segment_episode(&log);
    for s in &mut segments {
        s.goal_pyramid = s
            .goal_step
            .map(|g| tokenize_pyramid(&log.steps[g].head, env, model));
    }
    let mut seg_of = vec![0usize; log.steps.len()];
    for (k, s) in segments.iter().enumerate() {
        for slot in seg_of.iter_mut().take(s.end + 1).skip(s.start) {
            *slot = k;
        }
    }
    let fixed_goals = match mode {
        TargetMode::Completion => None,
        TargetMode::FixedOffset => {
            Some(extract_targets(env, model, &log, &segments, mode, delta))
        }
    };
    AnnotatedEpisode { log, segments, seg_of, fixed_goals }
}

/// Synthetic stale-lock examples from a clean episode: replay to a random
/// step, knock a placed block out of (or off) the board, re-render, and
/// pair the result with the lock that was active at that step. Only kept
/// when the disturbance actually changes what should be done next.
pub fn synth_gate_rows(
    env: &EnvConfig,
    ep: &AnnotatedEpisode,
    seed: u64,
    max_rows: usize,
) -> Result<Vec<GateRow>> {
    let mut r = rng::stream(seed, "gate-synth");
    let mut rows = Vec::new();
    let t_max = ep.log.steps.len();
    for _ in 0..max_rows * 8 {
        if rows.len() >= max_rows {
            break;
        }
        let t = r.gen_range(0..t_max);
        let seg = &ep.segments[ep.seg_of[t]];
        let (Some(_), Some(pyr)) = (seg.goal_step, seg.goal_pyramid.as_ref()) else {
            continue;
        };
        let mut state = state_at(env, &ep.log, t)?;
        let placed: Vec<usize> = (0..state.slots.len())
            .filter(|&si| crate::letterworld::slot_satisfied(&state, si))
            .filter_map(|si| {
                let s = state.slots[si].clone();
                state
                    .blocks
                    .iter()
                    .position(|b| !b.removed && !b.held && b.pos == s.pos && b.letter == s.letter)
            })
            .collect();
        if placed.is_empty() {
            continue;
        }
        let block = placed[r.gen_range(0..placed.len())];
        if r.gen_bool(0.5) {
            state.blocks[block].removed = true;
        } else {
            let dx = if r.gen_bool(0.5) { r.gen_range(2..=5) } else { -r.gen_range(2..=5) };
            let dy = if r.gen_bool(0.5) { r.gen_range(2..=5) } else { -r.gen_range(2..=5) };
            let p = state.blocks[block].pos;
            let nx = (p.0 + dx).clamp(0, state.w as i32 - 1);
            let ny = (p.1 + dy).clamp(0, state.h as i32 - 1);
            state.blocks[block].pos = (nx, ny);
            if state.blocks[block].pos == p {
                continue;
            }
        }
        // The pairing is only a valid "recompute" example if the
        // disturbance changes the derived activity.
        if expert::derive_active(&state, &ep.log.task) == seg.desc {
            continue;
        }
        let obs = render(&state, env);
        debug_assert_eq!(render_head(&state), obs.head);
        rows.push(GateRow {
            head: obs.head,
            wrist: obs.wrist,
            proprio: obs.proprio,
            plan: seg.plan.clone(),
            goal_pyramid: pyr.clone(),
            label: 0.0,
        });
    }
    Ok(rows)
}

pub fn annotate(
    env: &EnvConfig,
    model: &ModelConfig,
    episodes: Vec<EpisodeLog>,
    mode: TargetMode,
    delta: usize,
    synth_seed: u64,
    synth_per_episode: usize,
) -> Result<AnnotatedDataset> {
    if mode == TargetMode::FixedOffset && delta == 0 {
        return Err(Error::Data("fixed-offset targets need delta >= 1".into()));
    }
    let mut out = Vec::with_capacity(episodes.len());
    let mut synth = Vec::new();
    for (i, log) in episodes.into_iter().enumerate() {
        let ep = annotate_episode(env, model, log, mode, delta);
        if synth_per_episode > 0 && ep.log.events.is_empty() && ep.log.outcome == Outcome::Success
        {
            synth.extend(synth_gate_rows(
                env,
                &ep,
                synth_seed.wrapping_add(i as u64),
                synth_per_episode,
            )?);
        }
        out.push(ep);
    }
    Ok(AnnotatedDataset {
        version: DATASET_VERSION,
        target_mode: mode,
        delta,
        episodes: out,
        synth,
    })
}

pub fn save_dataset(path: &Path, ds: &AnnotatedDataset) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer(f, ds)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<AnnotatedDataset> {
    let f = BufReader::new(File::open(path)?);
    let ds: AnnotatedDataset = serde_json::from_reader(f)?;
    if ds.version != DATASET_VERSION {
        return Err(Error::Data(format!(
            "dataset version {} (expected {DATASET_VERSION})",
            ds.version
        )));
    }
    Ok(ds)
}
