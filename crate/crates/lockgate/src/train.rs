//! Multi-task training: flow-matching action loss, sub-task and
//! imagination cross-entropies, gate BCE, a weighted total, and a
//! two-stage curriculum. Stage I trains the reasoning heads against a
//! frozen encoder and action expert (imagination alignment); stage II
//! fine-tunes everything.
//!
//! Supervision for a sampled step t follows run membership: the boundary
//! frame of a segment decodes and imagines the NEXT sub-task (that is
//! what a fresh System 2 pass must produce there), while the gate row for
//! the same frame pairs the OLD segment's lock with label 0. Action
//! chunks are the expert's, clamped at the active segment's end and
//! zero-padded, so behavior near completion tapers to holding still.

use crate::annotate::{action_chunk, AnnotatedDataset, DATASET_VERSION};
use crate::config::{RunConfig, TargetMode, PALETTE};
use crate::model::{self, action, gate, imagine, subtask, ObsBatch};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab;
use crate::{Error, Result};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::Path;

pub const ADAM_EPS: f64 = 1e-8;
/// Batch-draw id reserved for the fixed probe batch.
const PROBE_DRAW: u64 = u64::MAX;

/// Cosine decay from `base` at step 0 toward zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let x = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// The exact weighted-total arithmetic, shared by the tape assembly and
/// the additivity check.
pub fn weighted_total(act: f64, sub: f64, img: f64, gt: f64, cfg: &RunConfig) -> f64 {
    let t = &cfg.train;
    act + t.lambda_sub * sub + t.lambda_img * img + t.lambda_gate * gt
}

/// One sampled training row, resolved to concrete targets.
struct RowView {
    head: Vec<u8>,
    wrist: Vec<u8>,
    proprio: Vec<f64>,
    instr: Vec<u16>,
    /// What System 2 should emit at this frame (run membership).
    decode_plan: Vec<u16>,
    decode_pyramid: Vec<u16>,
    /// The lock that conditions actions at this frame.
    act_plan: Vec<u16>,
    act_goal: Vec<u16>,
    chunk: Vec<f64>,
    /// The lock the gate scores at this frame, with its progress label.
    gate_plan: Vec<u16>,
    gate_goal: Vec<u16>,
    gate_label: f64,
}

/// Index over the dataset: (episode, step) pairs whose targets are all
/// present and mutually consistent.
pub struct TrainData<'a> {
    ds: &'a AnnotatedDataset,
    rows: Vec<(usize, usize)>,
}

impl<'a> TrainData<'a> {
    pub fn new(cfg: &RunConfig, ds: &'a AnnotatedDataset) -> Result<Self> {
        if ds.version != DATASET_VERSION {
            return Err(Error::Data(format!("dataset version {}", ds.version)));
        }
        let cells = cfg.model.pyramid_cells();
        let mut rows = Vec::new();
        for (e, ep) in ds.episodes.iter().enumerate() {
            for t in 0..ep.log.steps.len() {
                let k = ep.seg_of[t];
                let seg = &ep.segments[k];
                let ka = if t == seg.end && k + 1 < ep.segments.len() { k + 1 } else { k };
                let active = &ep.segments[ka];
                if active.desc != ep.log.steps[t].desc {
                    continue;
                }
                match ds.target_mode {
                    TargetMode::Completion => {
                        if seg.goal_pyramid.is_none() || active.goal_pyramid.is_none() {
                            continue;
                        }
                    }
                    TargetMode::FixedOffset => {
                        let fg = ep.fixed_goals.as_ref().ok_or_else(|| {
                            Error::Data("fixed-offset dataset lacks per-step goals".into())
                        })?;
                        if fg[t].len() != cells {
                            return Err(Error::Data("goal grid size mismatch".into()));
                        }
                    }
                }
                for &tok in &active.plan {
                    if tok as usize >= vocab::VOCAB {
                        return Err(Error::Data(format!("plan token {tok} out of vocabulary")));
                    }
                }
                rows.push((e, t));
            }
        }
        for r in &ds.synth {
            if r.goal_pyramid.iter().any(|&t| t as usize >= PALETTE) {
                return Err(Error::Data("synthetic goal token out of palette".into()));
            }
        }
        if rows.is_empty() {
            return Err(Error::Data("no trainable rows in dataset".into()));
        }
        Ok(TrainData { ds, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn view(&self, cfg: &RunConfig, e: usize, t: usize) -> RowView {
        let ep = &self.ds.episodes[e];
        let step = &ep.log.steps[t];
        let k = ep.seg_of[t];
        let seg = &ep.segments[k];
        let ka = if t == seg.end && k + 1 < ep.segments.len() { k + 1 } else { k };
        let active = &ep.segments[ka];
        let (decode_pyr, act_goal, gate_goal) = match self.ds.target_mode {
            TargetMode::Completion => (
                active.goal_pyramid.clone().expect("indexed row"),
                active.goal_pyramid.clone().expect("indexed row"),
                seg.goal_pyramid.clone().expect("indexed row"),
            ),
            TargetMode::FixedOffset => {
                let fg = &ep.fixed_goals.as_ref().expect("indexed dataset")[t];
                (fg.clone(), fg.clone(), fg.clone())
            }
        };
        RowView {
            head: step.head.clone(),
            wrist: step.wrist.clone(),
            proprio: step.proprio.clone(),
            instr: ep.log.task.instruction_tokens(cfg.model.instr_len),
            decode_plan: step.desc.plan_tokens(),
            decode_pyramid: decode_pyr,
            act_plan: active.plan.clone(),
            act_goal,
            chunk: action_chunk(&ep.log, active, t, &cfg.env),
            gate_plan: seg.plan.clone(),
            gate_goal,
            gate_label: if t == seg.end { 0.0 } else { 1.0 },
        }
    }

    /// Deterministic batch for a training step (or the probe).
    pub fn sample(&self, cfg: &RunConfig, seed: u64, draw: u64) -> TrainBatch {
        let mut r = rng::stream_n(seed, "batch", draw);
        let b = cfg.train.batch;
        let mut views = Vec::with_capacity(b);
        for _ in 0..b {
            let (e, t) = self.rows[r.gen_range(0..self.rows.len())];
            views.push(self.view(cfg, e, t));
        }
        let mut drops = vec![false; b];
        if cfg.train.cond_dropout > 0.0 {
            let mut dr = rng::stream_n(seed, "drop", draw);
            for d in drops.iter_mut() {
                *d = dr.gen::<f64>() < cfg.train.cond_dropout;
            }
        }
        let mut synth_idx = Vec::new();
        if !self.ds.synth.is_empty() && cfg.train.gate_aug_per_batch > 0 {
            let mut ar = rng::stream_n(seed, "aug", draw);
            for _ in 0..cfg.train.gate_aug_per_batch {
                synth_idx.push(ar.gen_range(0..self.ds.synth.len()));
            }
        }
        TrainBatch::assemble(self.ds, views, drops, synth_idx)
    }
}

/// Fully materialized batch, ready for the loss assembly.
pub struct TrainBatch {
    pub obs: ObsBatch,
    pub decode_plans: Vec<Vec<u16>>,
    pub decode_pyramids: Vec<Vec<u16>>,
    pub act_plans: Vec<Vec<u16>>,
    pub act_goals: Vec<Vec<u16>>,
    pub act_drop: Vec<bool>,
    pub chunks: Vec<Vec<f64>>,
    pub gate_plans: Vec<Vec<u16>>,
    pub gate_goals: Vec<Vec<u16>>,
    pub gate_labels: Vec<f64>,
    pub synth_obs: ObsBatch,
    pub synth_plans: Vec<Vec<u16>>,
    pub synth_goals: Vec<Vec<u16>>,
}

impl TrainBatch {
    fn assemble(
        ds: &AnnotatedDataset,
        views: Vec<RowView>,
        drops: Vec<bool>,
        synth_idx: Vec<usize>,
    ) -> Self {
        let mut b = TrainBatch {
            obs: ObsBatch::default(),
            decode_plans: Vec::new(),
            decode_pyramids: Vec::new(),
            act_plans: Vec::new(),
            act_goals: Vec::new(),
            act_drop: drops,
            chunks: Vec::new(),
            gate_plans: Vec::new(),
            gate_goals: Vec::new(),
            gate_labels: Vec::new(),
            synth_obs: ObsBatch::default(),
            synth_plans: Vec::new(),
            synth_goals: Vec::new(),
        };
        for v in views {
            b.obs.push(&v.head, &v.wrist, &v.proprio, &v.instr);
            b.decode_plans.push(v.decode_plan);
            b.decode_pyramids.push(v.decode_pyramid);
            b.act_plans.push(v.act_plan);
            b.act_goals.push(v.act_goal);
            b.chunks.push(v.chunk);
            b.gate_plans.push(v.gate_plan);
            b.gate_goals.push(v.gate_goal);
            b.gate_labels.push(v.gate_label);
        }
        for i in synth_idx {
            let r = &ds.synth[i];
            // Synthetic rows reuse the episode's instruction-free context:
            // the gate never reads instruction tokens, but the encoder
            // forward needs some, so pad tokens stand in.
            b.synth_obs.push(&r.head, &r.wrist, &r.proprio, &vec![vocab::PAD; 4]);
            b.synth_plans.push(r.plan.clone());
            b.synth_goals.push(r.goal_pyramid.clone());
            b.gate_labels.push(r.label);
        }
        b
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub act: f64,
    pub sub: f64,
    pub img: f64,
    pub gate: f64,
}

/// Assemble all four losses on one tape and return the weighted total.
pub fn loss_total(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &RunConfig,
    batch: &TrainBatch,
    seed: u64,
    draw: u64,
) -> Result<(Var, LossParts)> {
    let t = &cfg.train;
    let kd = cfg.env.chunk * cfg.env.action_dim;
    let enc = model::encode(tape, store, cfg, &batch.obs)?;
    let b = enc.batch;

    // Sub-task decoding and imagination, teacher forced on the active
    // sub-task (run membership).
    let l_sub = subtask::loss(tape, store, cfg, &enc, &batch.decode_plans);
    let dec_pool = model::embed_plan_pooled(tape, store, &cfg.model, &batch.decode_plans);
    let l_img = imagine::loss(tape, store, cfg, &enc, dec_pool, &batch.decode_pyramids);

    // Action conditioning: locked plan and goal, with some rows dropped
    // to the instruction-only form.
    let d = cfg.model.d_model;
    let plan_pool = model::embed_plan_pooled(tape, store, &cfg.model, &batch.act_plans);
    let goal_tok = model::embed_goal_tokens(tape, store, &cfg.model, &batch.act_goals);
    let goal_pool = model::pool_rows(tape, goal_tok, goal_tok.rows / b);
    let instr_pool = enc.instr_pooled(tape);
    let mut keep = vec![0.0; b * d];
    let mut inv = vec![0.0; b * d];
    for (s, &dr) in batch.act_drop.iter().enumerate() {
        for j in 0..d {
            keep[s * d + j] = if dr { 0.0 } else { 1.0 };
            inv[s * d + j] = if dr { 1.0 } else { 0.0 };
        }
    }
    let keep = tape.leaf(Tensor::new(b, d, keep)?);
    let inv = tape.leaf(Tensor::new(b, d, inv)?);
    let plan_keep = tape.mul(plan_pool, keep);
    let instr_fill = tape.mul(instr_pool, inv);
    let plan_slot = tape.add(plan_keep, instr_fill);
    let goal_slot = tape.mul(goal_pool, keep);
    let head_pool = enc.head_pooled(tape);
    let ego_pool = enc.ego_pooled(tape);
    // The attention query is the same mixed slot the expert sees at eval
    // time: the locked plan, or the instruction on dropped rows.
    let att = model::attend_ego(tape, store, &enc, plan_slot);
    let cond = tape
        .concat_cols(&[head_pool, enc.wrist, enc.proprio, ego_pool, att, plan_slot, goal_slot]);
    let cfm = action::draw(&batch.chunks, kd, seed, draw);
    let l_act = action::loss(tape, store, cond, &cfm);

    // Gate rows: the sampled frames with their segment locks, plus any
    // synthetic disturbed frames.
    let gate_plan = model::embed_plan_pooled(tape, store, &cfg.model, &batch.gate_plans);
    let gate_goal = model::embed_goal_tokens(tape, store, &cfg.model, &batch.gate_goals);
    let logits_main = gate::logits(tape, store, &enc, gate_plan, gate_goal)?;
    let logits = if batch.synth_obs.is_empty() {
        logits_main
    } else {
        let enc_s = model::encode(tape, store, cfg, &batch.synth_obs)?;
        let sp = model::embed_plan_pooled(tape, store, &cfg.model, &batch.synth_plans);
        let sg = model::embed_goal_tokens(tape, store, &cfg.model, &batch.synth_goals);
        let logits_syn = gate::logits(tape, store, &enc_s, sp, sg)?;
        tape.concat_rows(&[logits_main, logits_syn])
    };
    let l_gate = tape.bce_logits_mean(logits, &batch.gate_labels);

    let sub_w = tape.scale(l_sub, t.lambda_sub);
    let img_w = tape.scale(l_img, t.lambda_img);
    let gate_w = tape.scale(l_gate, t.lambda_gate);
    let mut total = tape.add(l_act, sub_w);
    total = tape.add(total, img_w);
    total = tape.add(total, gate_w);

    let parts = LossParts {
        total: tape.scalar_value(total),
        act: tape.scalar_value(l_act),
        sub: tape.scalar_value(l_sub),
        img: tape.scalar_value(l_img),
        gate: tape.scalar_value(l_gate),
    };
    Ok((total, parts))
}

/// Adam with decoupled weight decay. Frozen parameters are skipped
/// entirely: no moments, no decay, no update.
pub struct AdamW {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &crate::tape::Gradients,
        cfg: &RunConfig,
        lr: f64,
    ) {
        let tr = &cfg.train;
        self.t += 1;
        let bc1 = 1.0 - tr.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tr.beta2.powi(self.t as i32);
        for name in store.names() {
            if store.get(&name).unwrap().frozen {
                continue;
            }
            let n = store.get(&name).unwrap().value.data.len();
            let zero = vec![0.0; n];
            let g = grads.get(&name).map(|t| t.data.as_slice()).unwrap_or(&zero);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = &mut store.get_mut(&name).unwrap().value.data;
            for i in 0..n {
                m[i] = tr.beta1 * m[i] + (1.0 - tr.beta1) * g[i];
                v[i] = tr.beta2 * v[i] + (1.0 - tr.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + tr.weight_decay * p[i]);
            }
        }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub parts: LossParts,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub probe_start: f64,
    pub probe_end: f64,
    pub rows: Vec<MetricsRow>,
}

pub const STAGE1_FREEZE: [&str; 2] = ["enc.", "act."];

/// Run the full curriculum and return the trained parameters. With
/// `stage2_steps == 0` this is a stage-I-only run.
pub fn train(
    cfg: &RunConfig,
    ds: &AnnotatedDataset,
    seed: u64,
    metrics_path: Option<&Path>,
) -> Result<(ParamStore, TrainReport)> {
    let data = TrainData::new(cfg, ds)?;
    let mut store = model::init_params(cfg, seed);
    let mut rows = Vec::new();

    let probe = data.sample(cfg, seed, PROBE_DRAW);
    let probe_loss = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let (_, parts) = loss_total(&mut tape, store, cfg, &probe, seed, PROBE_DRAW)?;
        Ok(parts.total)
    };
    let probe_start = probe_loss(&store)?;

    let mut global_step = 0usize;
    for (stage, steps, lr_base) in [
        (1u8, cfg.train.stage1_steps, cfg.train.lr_stage1),
        (2u8, cfg.train.stage2_steps, cfg.train.lr_stage2),
    ] {
        store.thaw_all();
        if stage == 1 {
            store.set_frozen_prefixes(&STAGE1_FREEZE, true);
        }
        let mut opt = AdamW::new();
        for i in 0..steps {
            let lr = cosine_lr(lr_base, i, steps);
            let batch = data.sample(cfg, seed, global_step as u64);
            let mut tape = Tape::new();
            let (total, parts) = loss_total(&mut tape, &store, cfg, &batch, seed, global_step as u64)?;
            let mut grads = tape.backward(total);
            let mut norm = grads.global_norm();
            if norm > cfg.train.grad_clip && norm > 0.0 {
                grads.scale_all(cfg.train.grad_clip / norm);
                norm = grads.global_norm();
            }
            opt.step(&mut store, &grads, cfg, lr);
            rows.push(MetricsRow { step: global_step, stage, lr, parts, grad_norm: norm });
            global_step += 1;
        }
    }

    let probe_end = probe_loss(&store)?;
    let report = TrainReport { probe_start, probe_end, rows };
    if let Some(p) = metrics_path {
        write_metrics(p, &report)?;
    }
    Ok((store, report))
}

pub fn write_metrics(path: &Path, report: &TrainReport) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,stage,lr,total,act,sub,img,gate,grad_norm")?;
    for r in &report.rows {
        writeln!(
            f,
            "{},{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.step, r.stage, r.lr, r.parts.total, r.parts.act, r.parts.sub, r.parts.img,
            r.parts.gate, r.grad_norm
        )?;
    }
    writeln!(f, "# probe_start={} probe_end={}", report.probe_start, report.probe_end)?;
    Ok(())
}
