//! The learned stack.
//!
//! A shared encoder turns (head view, wrist view, proprio, instruction)
//! into per-source context tokens. Four heads consume them:
//!
//! * `subtask`: greedy autoregressive decoder over the closed plan
//!   vocabulary ("what should be done now").
//! * `imagine`: coarse-to-fine decoder over the goal token pyramid ("what
//!   the head view will look like when that is done").
//! * `gate`: cross-attention between current head tokens and the locked
//!   goal tokens, scored to a probability that work is still in progress.
//! * `action`: conditional flow-matching producer of K-step action chunks.
//!
//! Parameters live in a flat name-keyed store; the prefix of a name
//! ("enc.", "txt.", "img.", "gate.", "act.") is the unit the training
//! curriculum freezes and thaws.

pub mod action;
pub mod gate;
pub mod imagine;
pub mod subtask;

use crate::config::{ModelConfig, RunConfig, PALETTE};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab;
use crate::{Error, Result};

/// Codebook entry used as the imagination decoder's start parent.
pub const GOAL_BOS: usize = PALETTE;

/// First occurrence of the maximum wins, so ties break to the lowest id.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Raw per-sample inputs, one row per sample across the vectors.
#[derive(Debug, Clone, Default)]
pub struct ObsBatch {
    pub heads: Vec<Vec<u8>>,
    pub wrists: Vec<Vec<u8>>,
    pub proprios: Vec<Vec<f64>>,
    pub instrs: Vec<Vec<u16>>,
}

impl ObsBatch {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn push(&mut self, head: &[u8], wrist: &[u8], proprio: &[f64], instr: &[u16]) {
        self.heads.push(head.to_vec());
        self.wrists.push(wrist.to_vec());
        self.proprios.push(proprio.to_vec());
        self.instrs.push(instr.to_vec());
    }
}

/// Context tokens grouped by source; `batch` samples throughout.
pub struct Encoded {
    /// (batch * n_patches, d)
    pub head: Var,
    /// (batch, d)
    pub wrist: Var,
    /// (batch, d)
    pub proprio: Var,
    /// (batch * n_patches, d) head patch tokens re-bound with positions
    /// relative to the agent's own patch, see `encode`.
    pub ego: Var,
    /// (batch * instr_len, d)
    pub instr: Var,
    pub batch: usize,
    pub n_patches: usize,
}

pub fn n_head_patches(cfg: &RunConfig) -> usize {
    let side = cfg.env.grid_w / cfg.model.patch;
    side * side
}

/// Rows of the egocentric offset table: every patch-to-patch displacement
/// on a side x side patch grid, both axes in [-(side-1), side-1].
pub fn n_ego_offsets(cfg: &RunConfig) -> usize {
    let side = cfg.env.grid_w / cfg.model.patch;
    (2 * side - 1) * (2 * side - 1)
}

/// Context token count per sample: head patches + wrist + proprio + text.
pub fn n_context_tokens(cfg: &RunConfig) -> usize {
    n_head_patches(cfg) + 1 + 1 + cfg.model.instr_len
}

fn onehot_patches(frame: &[u8], grid: usize, patch: usize) -> Tensor {
    let side = grid / patch;
    let px = patch * patch;
    let cols = px * PALETTE;
    let mut data = vec![0.0; side * side * cols];
    for py in 0..side {
        for px_i in 0..side {
            let row = py * side + px_i;
            for y in 0..patch {
                for x in 0..patch {
                    let v = frame[(py * patch + y) * grid + px_i * patch + x] as usize;
                    data[row * cols + (y * patch + x) * PALETTE + v] = 1.0;
                }
            }
        }
    }
    Tensor::new(side * side, cols, data).expect("one-hot shape")
}

fn onehot_flat(frame: &[u8]) -> Vec<f64> {
    let mut out = vec![0.0; frame.len() * PALETTE];
    for (i, &v) in frame.iter().enumerate() {
        out[i * PALETTE + v as usize] = 1.0;
    }
    out
}

/// Width of the featurized proprio vector: one bin per column, one per
/// row, plus the raw (x, y, grip) triple.
pub fn prop_features(cfg: &RunConfig) -> usize {
    cfg.env.grid_w + cfg.env.grid_h + 3
}

/// Soft one-hot position code: each axis coordinate in [-1, 1] splits unit
/// mass linearly between its two nearest bins, so the code stays exact on
/// grid cells and smooth in between.
fn prop_encode(cfg: &RunConfig, p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; prop_features(cfg)];
    let mut axis = |offset: usize, bins: usize, v: f64| {
        let t = (v + 1.0) / 2.0 * (bins as f64 - 1.0);
        let lo = (t.floor() as usize).min(bins - 1);
        let hi = (lo + 1).min(bins - 1);
        let frac = t - lo as f64;
        out[offset + lo] += 1.0 - frac;
        out[offset + hi] += frac;
    };
    axis(0, cfg.env.grid_w, p[0]);
    axis(cfg.env.grid_w, cfg.env.grid_h, p[1]);
    let base = cfg.env.grid_w + cfg.env.grid_h;
    out[base] = p[0];
    out[base + 1] = p[1];
    out[base + 2] = p[2];
    out
}

/// Constant matrix that mean-pools g consecutive d-wide blocks of a
/// flattened (rows, g*d) matrix down to (rows, d).
fn pool_matrix(g: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; g * d * d];
    for k in 0..g {
        for j in 0..d {
            data[(k * d + j) * d + j] = 1.0 / g as f64;
        }
    }
    Tensor::new(g * d, d, data).expect("pool matrix shape")
}

/// Mean over groups of `g` consecutive rows: (B*g, d) -> (B, d).
pub fn pool_rows(tape: &mut Tape, x: Var, g: usize) -> Var {
    debug_assert_eq!(x.rows % g, 0);
    let d = x.cols;
    let wide = tape.reshape(x, x.rows / g, g * d);
    let p = tape.leaf(pool_matrix(g, d));
    tape.matmul(wide, p)
}

/// Build every parameter the stack uses. Initialization depends only on
/// (seed, name); the gate's output layer starts at zero so the untrained
/// score is exactly one half.
pub fn init_params(cfg: &RunConfig, seed: u64) -> ParamStore {
    let m = &cfg.model;
    let d = m.d_model;
    let px = m.patch * m.patch * PALETTE;
    let wr = cfg.env.wrist * cfg.env.wrist * PALETTE;
    let n_pat = n_head_patches(cfg);
    let cells = m.pyramid_cells();
    let kd = cfg.env.chunk * cfg.env.action_dim;
    let cond = 7 * d;
    let mut s = ParamStore::new(seed);

    s.add_uniform("enc.head.w", px, d, px);
    s.add_zeros("enc.head.b", 1, d);
    s.add_uniform("enc.head.pos", n_pat, d, d);
    s.add_uniform("enc.ego.pos", n_ego_offsets(cfg), d, d);
    s.add_uniform("enc.wrist.w", wr, d, wr);
    s.add_zeros("enc.wrist.b", 1, d);
    let pr = prop_features(cfg);
    s.add_uniform("enc.prop.w", pr, d, pr);
    s.add_zeros("enc.prop.b", 1, d);
    s.add_uniform("enc.instr.tok", vocab::VOCAB as usize, d, d);
    s.add_uniform("enc.instr.pos", m.instr_len, d, d);

    s.add_uniform("txt.tok", vocab::VOCAB as usize, d, d);
    s.add_uniform("txt.pos", m.plan_max_len, d, d);
    s.add_uniform("txt.ctx.w", 4 * d, d, 4 * d);
    s.add_zeros("txt.ctx.b", 1, d);
    s.add_uniform("txt.h.w", d, m.sub_hidden, d);
    s.add_zeros("txt.h.b", 1, m.sub_hidden);
    s.add_uniform("txt.out.w", m.sub_hidden, vocab::VOCAB as usize, m.sub_hidden);
    s.add_zeros("txt.out.b", 1, vocab::VOCAB as usize);

    s.add_uniform("img.tok", PALETTE + 1, d, d);
    s.add_uniform("img.pos", cells, d, d);
    s.add_uniform("img.att.q", d, d, d);
    s.add_uniform("img.att.k", d, d, d);
    s.add_uniform("img.att.v", d, d, d);
    s.add_uniform("img.ctx.w", 5 * d, d, 5 * d);
    s.add_zeros("img.ctx.b", 1, d);
    s.add_uniform("img.h.w", 3 * d, m.img_hidden, 3 * d);
    s.add_zeros("img.h.b", 1, m.img_hidden);
    s.add_uniform("img.out.w", m.img_hidden, PALETTE, m.img_hidden);
    s.add_zeros("img.out.b", 1, PALETTE);

    s.add_uniform("gate.q.w", d, d, d);
    s.add_uniform("gate.k.w", d, d, d);
    s.add_uniform("gate.v.w", d, d, d);
    s.add_uniform("gate.h1.w", 2 * d, m.gate_hidden, 2 * d);
    s.add_zeros("gate.h1.b", 1, m.gate_hidden);
    s.add_uniform("gate.h2.w", m.gate_hidden, m.gate_hidden, m.gate_hidden);
    s.add_zeros("gate.h2.b", 1, m.gate_hidden);
    s.add_zeros("gate.out.w", m.gate_hidden, 1);
    s.add_zeros("gate.out.b", 1, 1);

    s.add_uniform("act.att.q", d, d, d);
    s.add_uniform("act.att.k", d, d, d);
    s.add_uniform("act.att.v", d, d, d);
    s.add_uniform("act.h1.w", kd + 1 + cond, m.act_hidden, kd + 1 + cond);
    s.add_zeros("act.h1.b", 1, m.act_hidden);
    s.add_uniform("act.h2.w", m.act_hidden, m.act_hidden, m.act_hidden);
    s.add_zeros("act.h2.b", 1, m.act_hidden);
    s.add_uniform("act.out.w", m.act_hidden, kd, m.act_hidden);
    s.add_zeros("act.out.b", 1, kd);
    s
}

/// Encode a batch into per-source context tokens.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &RunConfig,
    batch: &ObsBatch,
) -> Result<Encoded> {
    let m = &cfg.model;
    let d = m.d_model;
    let b = batch.len();
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let head_px = cfg.env.grid_w * cfg.env.grid_h;
    let wrist_px = cfg.env.wrist * cfg.env.wrist;
    for i in 0..b {
        if batch.heads[i].len() != head_px
            || batch.wrists[i].len() != wrist_px
            || batch.proprios[i].len() != 3
            || batch.instrs[i].len() != m.instr_len
        {
            return Err(Error::Shape(format!("sample {i} does not match the configuration")));
        }
    }
    let n_pat = n_head_patches(cfg);

    // Head: one-hot patch pixels, shared projection, per-patch position.
    let mut rows = Vec::with_capacity(b);
    for h in &batch.heads {
        rows.push(onehot_patches(h, cfg.env.grid_w, m.patch));
    }
    let px_cols = rows[0].cols;
    let mut data = Vec::with_capacity(b * n_pat * px_cols);
    for r in &rows {
        data.extend_from_slice(&r.data);
    }
    let oh = tape.leaf(Tensor::new(b * n_pat, px_cols, data)?);
    let w = tape.param(store, "enc.head.w");
    let bb = tape.param(store, "enc.head.b");
    let proj = tape.matmul(oh, w);
    let proj = tape.add_bias(proj, bb);
    let pos_ids: Vec<usize> = (0..b * n_pat).map(|i| i % n_pat).collect();
    let pos_t = tape.param(store, "enc.head.pos");
    let pos = tape.embed(pos_t, &pos_ids);
    // The content*position product keeps what-where binding alive through
    // downstream mean-pools; a plain sum pools to a location-free bag.
    let sum = tape.add(proj, pos);
    let bind = tape.mul(proj, pos);
    let sum = tape.add(sum, bind);
    let head = tape.relu(sum);

    // Egocentric pool: the same patch contents re-bound with positions
    // relative to the agent's own patch. Pooled absolute bindings tell the
    // policy where things are; this pool tells it where they are from here,
    // which is the quantity the action head actually steers by.
    let side = cfg.env.grid_w / m.patch;
    let mut rel_ids = Vec::with_capacity(b * n_pat);
    for p in &batch.proprios {
        let ac = ((p[0] + 1.0) / 2.0 * (cfg.env.grid_w - 1) as f64).round() as usize / m.patch;
        let ar = ((p[1] + 1.0) / 2.0 * (cfg.env.grid_h - 1) as f64).round() as usize / m.patch;
        for j in 0..n_pat {
            let dr = j / side + side - 1 - ar;
            let dc = j % side + side - 1 - ac;
            rel_ids.push(dr * (2 * side - 1) + dc);
        }
    }
    let rel_t = tape.param(store, "enc.ego.pos");
    let rel = tape.embed(rel_t, &rel_ids);
    let sum = tape.add(proj, rel);
    let bind = tape.mul(proj, rel);
    let sum = tape.add(sum, bind);
    let ego = tape.relu(sum);

    // Wrist: one token per sample.
    let mut data = Vec::with_capacity(b * wrist_px * PALETTE);
    for wfr in &batch.wrists {
        data.extend_from_slice(&onehot_flat(wfr));
    }
    let oh = tape.leaf(Tensor::new(b, wrist_px * PALETTE, data)?);
    let w = tape.param(store, "enc.wrist.w");
    let bb = tape.param(store, "enc.wrist.b");
    let proj = tape.matmul(oh, w);
    let proj = tape.add_bias(proj, bb);
    let wrist = tape.relu(proj);

    // Proprio token. The raw triple is spread into soft per-axis bin codes
    // first; a bare coordinate scalar is too blunt for the linear layer to
    // support position arithmetic downstream.
    let pr = prop_features(cfg);
    let mut data = Vec::with_capacity(b * pr);
    for p in &batch.proprios {
        data.extend_from_slice(&prop_encode(cfg, p));
    }
    let pv = tape.leaf(Tensor::new(b, pr, data)?);
    let w = tape.param(store, "enc.prop.w");
    let bb = tape.param(store, "enc.prop.b");
    let proj = tape.matmul(pv, w);
    let proj = tape.add_bias(proj, bb);
    let proprio = tape.relu(proj);

    // Instruction tokens.
    let ids: Vec<usize> = batch
        .instrs
        .iter()
        .flat_map(|v| v.iter().map(|&t| t as usize))
        .collect();
    let tok_t = tape.param(store, "enc.instr.tok");
    let tok = tape.embed(tok_t, &ids);
    let pos_ids: Vec<usize> = (0..b * m.instr_len).map(|i| i % m.instr_len).collect();
    let pos_t = tape.param(store, "enc.instr.pos");
    let pos = tape.embed(pos_t, &pos_ids);
    let sum = tape.add(tok, pos);
    let bind = tape.mul(tok, pos);
    let sum = tape.add(sum, bind);
    let instr = tape.relu(sum);

    let _ = d;
    Ok(Encoded { head, wrist, proprio, ego, instr, batch: b, n_patches: n_pat })
}

impl Encoded {
    /// (B, d) mean of the head patch tokens.
    pub fn head_pooled(&self, tape: &mut Tape) -> Var {
        pool_rows(tape, self.head, self.n_patches)
    }

    /// (B, d) mean of the egocentric patch tokens.
    pub fn ego_pooled(&self, tape: &mut Tape) -> Var {
        pool_rows(tape, self.ego, self.n_patches)
    }

    /// (B, d) mean of the instruction tokens.
    pub fn instr_pooled(&self, tape: &mut Tape) -> Var {
        let g = self.instr.rows / self.batch;
        pool_rows(tape, self.instr, g)
    }

    /// (B, 4d) observation summary: head, wrist, proprio, instruction.
    pub fn obs_summary(&self, tape: &mut Tape) -> Var {
        let h = self.head_pooled(tape);
        let i = self.instr_pooled(tape);
        tape.concat_cols(&[h, self.wrist, self.proprio, i])
    }
}

/// Embed locked goal token ids (finest-scale grid) with their positional
/// entries from the pyramid table: (B*goal_cells, d).
pub fn embed_goal_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    goals: &[Vec<u16>],
) -> Var {
    let cells = cfg.goal_cells();
    let offset = cfg.pyramid_cells() - cells;
    let mut ids = Vec::with_capacity(goals.len() * cells);
    let mut pos_ids = Vec::with_capacity(goals.len() * cells);
    for g in goals {
        debug_assert!(g.len() == cells || g.len() == cfg.pyramid_cells());
        let fine = &g[g.len() - cells..];
        for (c, &t) in fine.iter().enumerate() {
            ids.push(t as usize);
            pos_ids.push(offset + c);
        }
    }
    let tok_t = tape.param(store, "img.tok");
    let tok = tape.embed(tok_t, &ids);
    let pos_t = tape.param(store, "img.pos");
    let pos = tape.embed(pos_t, &pos_ids);
    // Product term again: the pooled goal must say where each token sits,
    // not just which tokens occur.
    let sum = tape.add(tok, pos);
    let bind = tape.mul(tok, pos);
    tape.add(sum, bind)
}

/// Pooled embedding of plan token sequences (padded internally): (B, d).
pub fn embed_plan_pooled(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    plans: &[Vec<u16>],
) -> Var {
    let l = cfg.plan_max_len;
    let mut ids = Vec::with_capacity(plans.len() * l);
    let mut pos_ids = Vec::with_capacity(plans.len() * l);
    for p in plans {
        for i in 0..l {
            ids.push(p.get(i).map_or(vocab::PAD as usize, |&t| t as usize));
            pos_ids.push(i);
        }
    }
    let tok_t = tape.param(store, "txt.tok");
    let tok = tape.embed(tok_t, &ids);
    let pos_t = tape.param(store, "txt.pos");
    let pos = tape.embed(pos_t, &pos_ids);
    let sum = tape.add(tok, pos);
    let bind = tape.mul(tok, pos);
    let sum = tape.add(sum, bind);
    pool_rows(tape, sum, l)
}

/// Single-query attention: one (B, d) query row per sample over that
/// sample's `per`-row slice of `tokens` ((B*per, d)), projected through the
/// named q/k/v weights. A mean pool dilutes any one token by 1/per; this
/// lets the query pick which token to read out.
pub fn attend_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    names: (&str, &str, &str),
    tokens: Var,
    batch: usize,
    query: Var,
) -> Var {
    let per = tokens.rows / batch;
    let d = tokens.cols;
    let wq = tape.param(store, names.0);
    let wk = tape.param(store, names.1);
    let wv = tape.param(store, names.2);
    let q = tape.matmul(query, wq);
    let k = tape.matmul(tokens, wk);
    let v = tape.matmul(tokens, wv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut rows = Vec::with_capacity(batch);
    for s in 0..batch {
        let kv: Vec<usize> = (s * per..(s + 1) * per).collect();
        let qs = tape.embed(q, &[s]);
        let ks = tape.embed(k, &kv);
        let vs = tape.embed(v, &kv);
        let scores = tape.matmul_tb(qs, ks);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        rows.push(tape.matmul(attn, vs));
    }
    tape.concat_rows(&rows)
}

/// Plan-queried readout over the egocentric patch tokens: (B, d). The
/// policy steers by exactly one patch at a time, so the plan picks which
/// relative-position token to read.
pub fn attend_ego(tape: &mut Tape, store: &ParamStore, enc: &Encoded, query: Var) -> Var {
    attend_tokens(tape, store, ("act.att.q", "act.att.k", "act.att.v"), enc.ego, enc.batch, query)
}

/// The composite condition for gating-time action generation: pooled
/// perception (absolute and egocentric), proprio, the plan-attended
/// egocentric readout, the locked plan embedding, pooled locked goal
/// tokens. `goal` of `None` zeroes that slot (the no-reasoner ablation).
pub fn condition(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &Encoded,
    plan_pooled: Var,
    goal_tokens: Option<Var>,
) -> Var {
    let h = enc.head_pooled(tape);
    let d = h.cols;
    let g = match goal_tokens {
        Some(g) => pool_rows(tape, g, g.rows / enc.batch),
        None => tape.leaf(Tensor::zeros(enc.batch, d)),
    };
    let ego = enc.ego_pooled(tape);
    let att = attend_ego(tape, store, enc, plan_pooled);
    tape.concat_cols(&[h, enc.wrist, enc.proprio, ego, att, plan_pooled, g])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::letterworld::{render, reset, TaskSpec};

    fn sample_batch(cfg: &RunConfig, n: usize) -> ObsBatch {
        let task = TaskSpec::spelling(&[0, 1, 2]);
        let mut b = ObsBatch::default();
        for seed in 0..n as u64 {
            let s = reset(&cfg.env, &task, seed).unwrap();
            let o = render(&s, &cfg.env);
            b.push(&o.head, &o.wrist, &o.proprio, &task.instruction_tokens(cfg.model.instr_len));
        }
        b
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = RunConfig::default();
        let store = init_params(&cfg, 7);
        let batch = sample_batch(&cfg, 2);
        let mut t1 = Tape::new();
        let e1 = encode(&mut t1, &store, &cfg, &batch).unwrap();
        let mut t2 = Tape::new();
        let e2 = encode(&mut t2, &store, &cfg, &batch).unwrap();
        assert_eq!(t1.value(e1.head), t2.value(e2.head));
        assert_eq!(t1.value(e1.instr), t2.value(e2.instr));
    }

    #[test]
    fn token_counts_match_configuration() {
        let cfg = RunConfig::default();
        let store = init_params(&cfg, 7);
        let batch = sample_batch(&cfg, 3);
        let mut t = Tape::new();
        let e = encode(&mut t, &store, &cfg, &batch).unwrap();
        assert_eq!(e.head.rows, 3 * 16);
        assert_eq!(e.wrist.rows, 3);
        assert_eq!(e.proprio.rows, 3);
        assert_eq!(e.instr.rows, 3 * cfg.model.instr_len);
        assert_eq!(n_context_tokens(&cfg), 16 + 1 + 1 + 4);
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let cfg = RunConfig::default();
        let store = init_params(&cfg, 7);
        let mut batch = sample_batch(&cfg, 1);
        batch.heads[0].pop();
        let mut t = Tape::new();
        assert!(encode(&mut t, &store, &cfg, &batch).is_err());
    }

    #[test]
    fn instruction_changes_only_instruction_tokens() {
        let cfg = RunConfig::default();
        let store = init_params(&cfg, 7);
        let b1 = sample_batch(&cfg, 1);
        let mut b2 = b1.clone();
        b2.instrs[0] = TaskSpec::insertion(&[3, 4]).instruction_tokens(cfg.model.instr_len);
        let mut t1 = Tape::new();
        let e1 = encode(&mut t1, &store, &cfg, &b1).unwrap();
        let mut t2 = Tape::new();
        let e2 = encode(&mut t2, &store, &cfg, &b2).unwrap();
        assert_eq!(t1.value(e1.head), t2.value(e2.head));
        assert_eq!(t1.value(e1.wrist), t2.value(e2.wrist));
        assert_eq!(t1.value(e1.proprio), t2.value(e2.proprio));
        assert_ne!(t1.value(e1.instr), t2.value(e2.instr));
    }

    #[test]
    fn pool_rows_averages_groups() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(4, 2, vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap());
        let p = pool_rows(&mut t, x, 2);
        assert_eq!(t.value(p), &[2.0, 3.0, 20.0, 30.0]);
    }

    #[test]
    fn condition_concatenates_seven_slots_and_none_zeroes_the_goal() {
        let cfg = RunConfig::default();
        let store = init_params(&cfg, 7);
        let batch = sample_batch(&cfg, 2);
        let mut t = Tape::new();
        let e = encode(&mut t, &store, &cfg, &batch).unwrap();
        let plans = vec![vec![vocab::PICK, vocab::letter_token(0), vocab::EOS]; 2];
        let p = embed_plan_pooled(&mut t, &store, &cfg.model, &plans);
        let goals = vec![vec![0u16; cfg.model.goal_cells()]; 2];
        let g = embed_goal_tokens(&mut t, &store, &cfg.model, &goals);
        let c = condition(&mut t, &store, &e, p, Some(g));
        assert_eq!(c.rows, 2);
        assert_eq!(c.cols, 7 * cfg.model.d_model);
        let c0 = condition(&mut t, &store, &e, p, None);
        let d = cfg.model.d_model;
        for r in 0..2 {
            for j in 6 * d..7 * d {
                assert_eq!(t.value(c0)[r * 7 * d + j], 0.0);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_to_the_lowest_id() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 5.0, 5.0]), 1);
        assert_eq!(argmax(&[-1.0, -3.0]), 0);
    }
}
