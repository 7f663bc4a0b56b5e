//! Deterministic letter-block gridworld.
//!
//! A square grid holds lettered blocks, lettered target slots, and a gripper
//! that starts at the home cell (0,0). Tasks ask for the blocks to be placed
//! into their slots in order (spelling a word, or inserting into a tight row
//! of slots), after which the gripper returns home. The world is fully
//! observable through a palette-indexed head view plus a small wrist crop
//! centered on the gripper.
//!
//! Everything is deterministic: (layout seed, action sequence, interference
//! schedule) fixes the entire trajectory.

pub mod expert;
pub mod log;

use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::rng;
use crate::vocab;
use crate::{Error, Result};

// Palette. Indices double as goal-grid token ids, so ordering encodes
// salience: later entries win when a cell is downsampled.
pub const C_EMPTY: u8 = 0;
pub const C_LETTER_BASE: u8 = 1; // 1..=6 for letters a..f
pub const C_SLOT_BASE: u8 = 7; // 7..=12 for slots 0..5
pub const C_FILLED: u8 = 13;
pub const C_GRIP_OPEN: u8 = 14;
pub const C_GRIP_CLOSED: u8 = 15;

pub const HOME: (i32, i32) = (0, 0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verb {
    Pick,
    Place,
    Insert,
    Home,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    pub verb: Verb,
    pub letter: Option<u8>,
    pub slot: Option<u8>,
}

impl SubTask {
    pub fn pick(letter: u8) -> Self {
        SubTask { verb: Verb::Pick, letter: Some(letter), slot: None }
    }

    pub fn place(letter: u8, slot: u8) -> Self {
        SubTask { verb: Verb::Place, letter: Some(letter), slot: Some(slot) }
    }

    pub fn insert(letter: u8, slot: u8) -> Self {
        SubTask { verb: Verb::Insert, letter: Some(letter), slot: Some(slot) }
    }

    pub fn home() -> Self {
        SubTask { verb: Verb::Home, letter: None, slot: None }
    }
}

/// The ground-truth activity marker logged with every step. `Done` covers
/// the wrap-up trek back to home once every sub-task is finished (or nothing
/// actionable remains).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActiveDesc {
    Sub(SubTask),
    Done,
}

impl ActiveDesc {
    /// Token rendering over the closed vocabulary. Plans end at EOS, except
    /// the standalone DONE marker.
    pub fn plan_tokens(&self) -> Vec<u16> {
        match self {
            ActiveDesc::Done => vec![vocab::DONE],
            ActiveDesc::Sub(st) => {
                let mut out = Vec::with_capacity(4);
                out.push(match st.verb {
                    Verb::Pick => vocab::PICK,
                    Verb::Place => vocab::PLACE,
                    Verb::Insert => vocab::INSERT,
                    Verb::Home => vocab::HOME,
                });
                if let Some(l) = st.letter {
                    out.push(vocab::letter_token(l));
                }
                if let Some(s) = st.slot {
                    out.push(vocab::slot_token(s));
                }
                out.push(vocab::EOS);
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Spell,
    Insert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Letters in slot order; slot i wants word[i].
    pub word: Vec<u8>,
    pub subtasks: Vec<SubTask>,
}

impl TaskSpec {
    pub fn spelling(word: &[u8]) -> Self {
        let subtasks = word
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| [SubTask::pick(l), SubTask::place(l, i as u8)])
            .collect();
        TaskSpec { kind: TaskKind::Spell, word: word.to_vec(), subtasks }
    }

    pub fn insertion(word: &[u8]) -> Self {
        let subtasks = word
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| [SubTask::pick(l), SubTask::insert(l, i as u8)])
            .collect();
        TaskSpec { kind: TaskKind::Insert, word: word.to_vec(), subtasks }
    }

    /// Instruction over the shared vocabulary, padded to `len`.
    pub fn instruction_tokens(&self, len: usize) -> Vec<u16> {
        let mut out = vec![match self.kind {
            TaskKind::Spell => vocab::SPELL,
            TaskKind::Insert => vocab::FILL,
        }];
        for &l in &self.word {
            out.push(vocab::letter_token(l));
        }
        out.truncate(len);
        while out.len() < len {
            out.push(vocab::PAD);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.word.is_empty() || self.word.len() > vocab::MAX_SLOTS as usize {
            return Err(Error::Sim(format!("word length {} unsupported", self.word.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for &l in &self.word {
            if l >= vocab::MAX_LETTERS || !seen.insert(l) {
                return Err(Error::Sim("letters must be distinct and in range".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub letter: u8,
    pub pos: (i32, i32),
    pub held: bool,
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotCell {
    pub letter: u8,
    pub pos: (i32, i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub w: usize,
    pub h: usize,
    pub blocks: Vec<Block>,
    pub slots: Vec<SlotCell>,
    pub gripper: (i32, i32),
    pub closed: bool,
    pub held: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub head: Vec<u8>,
    pub wrist: Vec<u8>,
    pub proprio: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterferenceKind {
    MovePlacedBlock,
    RemovePlacedBlock,
    MoveTargetBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceEvent {
    /// Environment step index the event fires at (before that step's action).
    pub step: usize,
    pub kind: InterferenceKind,
    pub block: usize,
    pub displacement: (i32, i32),
}

pub fn chebyshev(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Sample a layout for the task. Slots form a row (gap 3 for spelling, 1 for
/// insertion); blocks land on free cells. Layouts are rejected until every
/// leg of the nominal visit sequence (home, block 0, slot 0, block 1, ...,
/// home) spans at least `min_leg` in Chebyshev distance.
pub fn reset(env: &EnvConfig, task: &TaskSpec, seed: u64) -> Result<WorldState> {
    task.validate()?;
    let (w, h) = (env.grid_w as i32, env.grid_h as i32);
    let n = task.word.len();
    let gap = match task.kind {
        TaskKind::Spell => 3,
        TaskKind::Insert => 1,
    };
    let mut r = rng::stream(seed, "layout");
    for _attempt in 0..10_000 {
        let span = (n as i32 - 1) * gap;
        if span >= w {
            return Err(Error::Sim("grid too small for slot row".into()));
        }
        let sx = rand::Rng::gen_range(&mut r, 0..w - span);
        let sy = rand::Rng::gen_range(&mut r, 0..h);
        let slots: Vec<SlotCell> = (0..n)
            .map(|i| SlotCell { letter: task.word[i], pos: (sx + i as i32 * gap, sy) })
            .collect();
        let mut occupied: Vec<(i32, i32)> = slots.iter().map(|s| s.pos).collect();
        occupied.push(HOME);
        let mut blocks = Vec::with_capacity(n);
        let mut ok = true;
        for &letter in &task.word {
            let mut placed = false;
            for _ in 0..50 {
                let p = (rand::Rng::gen_range(&mut r, 0..w), rand::Rng::gen_range(&mut r, 0..h));
                if !occupied.contains(&p) {
                    occupied.push(p);
                    blocks.push(Block { letter, pos: p, held: false, removed: false });
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        // Visit-sequence legs must all be long enough.
        let mut legs = Vec::new();
        let mut cur = HOME;
        for i in 0..n {
            legs.push((cur, blocks[i].pos));
            legs.push((blocks[i].pos, slots[i].pos));
            cur = slots[i].pos;
        }
        legs.push((cur, HOME));
        if legs.iter().all(|&(a, b)| chebyshev(a, b) >= env.min_leg as i32) {
            return Ok(WorldState {
                w: env.grid_w,
                h: env.grid_h,
                blocks,
                slots,
                gripper: HOME,
                closed: false,
                held: None,
                steps: 0,
            });
        }
    }
    Err(Error::Sim(format!("no layout satisfies min_leg {} (seed {seed})", env.min_leg)))
}

/// Apply one action: move by the rounded deltas (clamped to the grid), then
/// interpret the grip command. Close over a block grasps it; open while
/// holding releases into the current cell. Blocks are conserved; only
/// removal events delete them.
pub fn step(state: &mut WorldState, action: &[f64]) {
    debug_assert!(action.len() >= 3);
    let dx = action[0].round().clamp(-1.0, 1.0) as i32;
    let dy = action[1].round().clamp(-1.0, 1.0) as i32;
    let nx = (state.gripper.0 + dx).clamp(0, state.w as i32 - 1);
    let ny = (state.gripper.1 + dy).clamp(0, state.h as i32 - 1);
    state.gripper = (nx, ny);
    if let Some(b) = state.held {
        state.blocks[b].pos = state.gripper;
    }

    let grip = action[2];
    if grip > 0.5 && !state.closed {
        state.closed = true;
        if state.held.is_none() {
            if let Some(idx) = state
                .blocks
                .iter()
                .position(|b| !b.removed && !b.held && b.pos == state.gripper)
            {
                state.blocks[idx].held = true;
                state.held = Some(idx);
            }
        }
    } else if grip < -0.5 && state.closed {
        state.closed = false;
        if let Some(b) = state.held.take() {
            state.blocks[b].held = false;
            state.blocks[b].pos = state.gripper;
        }
    }
    state.steps += 1;
}

/// A slot is satisfied when its letter's block rests on it.
pub fn slot_satisfied(state: &WorldState, slot_idx: usize) -> bool {
    let slot = &state.slots[slot_idx];
    state
        .blocks
        .iter()
        .any(|b| !b.removed && !b.held && b.letter == slot.letter && b.pos == slot.pos)
}

pub fn satisfied_count(state: &WorldState) -> usize {
    (0..state.slots.len()).filter(|&i| slot_satisfied(state, i)).count()
}

/// Success means every slot holds its required letter and the gripper is
/// back at home.
pub fn check_success(state: &WorldState) -> bool {
    (0..state.slots.len()).all(|i| slot_satisfied(state, i)) && state.gripper == HOME
}

/// Render the head view. Draw order, lowest to highest: gripper, slots,
/// loose blocks, filled markers. The palette index is the token id.
///
/// The gripper draws first so it never hides cell content: the policy must
/// see the block or slot it is standing on to time a grasp or release, and
/// a fresh FILLED marker must be visible the moment it appears. The gripper
/// cell and grip state stay recoverable from proprio everywhere.
pub fn render_head(state: &WorldState) -> Vec<u8> {
    let mut img = vec![C_EMPTY; state.w * state.h];
    let at = |p: (i32, i32)| (p.1 as usize) * state.w + p.0 as usize;
    img[at(state.gripper)] = if state.closed { C_GRIP_CLOSED } else { C_GRIP_OPEN };
    for (i, s) in state.slots.iter().enumerate() {
        img[at(s.pos)] = C_SLOT_BASE + i as u8;
    }
    for b in &state.blocks {
        if b.removed || b.held {
            continue;
        }
        let covering_slot = state.slots.iter().find(|s| s.pos == b.pos);
        img[at(b.pos)] = match covering_slot {
            Some(s) if s.letter == b.letter => C_FILLED,
            _ => C_LETTER_BASE + b.letter,
        };
    }
    img
}

pub fn render(state: &WorldState, env: &EnvConfig) -> Observation {
    let head = render_head(state);
    let half = (env.wrist / 2) as i32;
    let mut wrist = vec![C_EMPTY; env.wrist * env.wrist];
    for dy in -half..=half {
        for dx in -half..=half {
            let x = state.gripper.0 + dx;
            let y = state.gripper.1 + dy;
            if x >= 0 && y >= 0 && x < state.w as i32 && y < state.h as i32 {
                let v = head[(y as usize) * state.w + x as usize];
                wrist[((dy + half) as usize) * env.wrist + (dx + half) as usize] = v;
            }
        }
    }
    let proprio = vec![
        2.0 * state.gripper.0 as f64 / (state.w as f64 - 1.0) - 1.0,
        2.0 * state.gripper.1 as f64 / (state.h as f64 - 1.0) - 1.0,
        if state.closed { 1.0 } else { -1.0 },
    ];
    Observation { head, wrist, proprio }
}

/// Apply an interference event. The mechanical effect is a clamped
/// displacement (or removal); the kind records what the scheduler targeted.
pub fn inject_interference(state: &mut WorldState, ev: &InterferenceEvent) -> Result<()> {
    let b = state
        .blocks
        .get(ev.block)
        .ok_or_else(|| Error::Sim(format!("no block {}", ev.block)))?;
    if b.removed {
        return Err(Error::Sim("affected block already removed".into()));
    }
    if b.held {
        return Err(Error::Sim("cannot disturb a held block".into()));
    }
    match ev.kind {
        InterferenceKind::RemovePlacedBlock => {
            state.blocks[ev.block].removed = true;
        }
        InterferenceKind::MovePlacedBlock | InterferenceKind::MoveTargetBlock => {
            let p = state.blocks[ev.block].pos;
            let mut nx = (p.0 + ev.displacement.0).clamp(0, state.w as i32 - 1);
            let mut ny = (p.1 + ev.displacement.1).clamp(0, state.h as i32 - 1);
            // Clamping at a border must not leave the block where it was.
            if nx == p.0 && ev.displacement.0 != 0 {
                nx = (p.0 - ev.displacement.0).clamp(0, state.w as i32 - 1);
            }
            if ny == p.1 && ev.displacement.1 != 0 {
                ny = (p.1 - ev.displacement.1).clamp(0, state.h as i32 - 1);
            }
            state.blocks[ev.block].pos = (nx, ny);
        }
    }
    Ok(())
}
