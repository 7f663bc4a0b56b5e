//! Completion imagination head: decodes the goal token pyramid for the
//! locked sub-task, coarse scale to fine scale. Cells within a scale are
//! predicted in parallel; each cell conditions on the pooled context, its
//! parent cell from the previous scale, and its position in the pyramid.

use crate::config::{ModelConfig, RunConfig, PALETTE};
use crate::model::{argmax, attend_tokens, Encoded, GOAL_BOS};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Flat pyramid layout: for each scale s (side length), s*s cell ids in
/// row-major order, concatenated coarse to fine.
pub fn scale_offsets(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut off = 0;
    for &s in &cfg.scales {
        out.push((off, s));
        off += s * s;
    }
    out
}

/// Parent cell index (into the previous scale's flat block) for cell
/// (y, x) at side `s`, previous side `ps`.
fn parent_cell(y: usize, x: usize, s: usize, ps: usize) -> usize {
    (y * ps / s) * ps + x * ps / s
}

/// (B, d) imagination context: pooled perception, a plan-queried readout
/// over the head patch tokens, and the plan embedding of the sub-task
/// whose completion is being imagined. The attended slot matters: the
/// completion frame differs from the current one at a single cell pair,
/// and the mean pool alone dilutes those patches by 1/n.
pub fn imagine_context(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &Encoded,
    plan_pooled: Var,
) -> Var {
    let h = enc.head_pooled(tape);
    let att = attend_tokens(
        tape,
        store,
        ("img.att.q", "img.att.k", "img.att.v"),
        enc.head,
        enc.batch,
        plan_pooled,
    );
    let cat = tape.concat_cols(&[h, enc.wrist, enc.proprio, att, plan_pooled]);
    let w = tape.param(store, "img.ctx.w");
    let b = tape.param(store, "img.ctx.b");
    let h = tape.matmul(cat, w);
    let h = tape.add_bias(h, b);
    tape.relu(h)
}

/// Per-cell logits for a batch of (context row, parent id, position) rows.
fn cell_logits(
    tape: &mut Tape,
    store: &ParamStore,
    ctx: Var,
    ctx_rows: &[usize],
    parent_ids: &[usize],
    pos_ids: &[usize],
) -> Var {
    let c = tape.embed(ctx, ctx_rows);
    let tok_t = tape.param(store, "img.tok");
    let par = tape.embed(tok_t, parent_ids);
    let pos_t = tape.param(store, "img.pos");
    let pos = tape.embed(pos_t, pos_ids);
    let cat = tape.concat_cols(&[c, par, pos]);
    let w = tape.param(store, "img.h.w");
    let b = tape.param(store, "img.h.b");
    let h = tape.matmul(cat, w);
    let h = tape.add_bias(h, b);
    let h = tape.relu(h);
    let w = tape.param(store, "img.out.w");
    let b = tape.param(store, "img.out.b");
    let l = tape.matmul(h, w);
    tape.add_bias(l, b)
}

/// Teacher-forced mean cross-entropy over every pyramid cell; parents come
/// from the ground-truth previous scale.
pub fn loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &RunConfig,
    enc: &Encoded,
    plan_pooled: Var,
    pyramids: &[Vec<u16>],
) -> Var {
    let m = &cfg.model;
    assert_eq!(pyramids.len(), enc.batch);
    let offsets = scale_offsets(m);
    let cells = m.pyramid_cells();
    let mut ctx_rows = Vec::with_capacity(enc.batch * cells);
    let mut parent_ids = Vec::with_capacity(enc.batch * cells);
    let mut pos_ids = Vec::with_capacity(enc.batch * cells);
    let mut targets = Vec::with_capacity(enc.batch * cells);
    for (b, pyr) in pyramids.iter().enumerate() {
        assert_eq!(pyr.len(), cells, "pyramid length");
        for (k, &(off, s)) in offsets.iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    ctx_rows.push(b);
                    pos_ids.push(off + y * s + x);
                    targets.push(pyr[off + y * s + x] as usize);
                    parent_ids.push(if k == 0 {
                        GOAL_BOS
                    } else {
                        let (poff, ps) = offsets[k - 1];
                        pyr[poff + parent_cell(y, x, s, ps)] as usize
                    });
                }
            }
        }
    }
    let ctx = imagine_context(tape, store, enc, plan_pooled);
    let logits = cell_logits(tape, store, ctx, &ctx_rows, &parent_ids, &pos_ids);
    tape.cross_entropy_mean(logits, &targets)
}

/// Greedy decode of the full pyramid for each sample: scales run in
/// sequence, cells within a scale in one batched forward, parents taken
/// from the decoded previous scale.
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &RunConfig,
    enc: &Encoded,
    plan_pooled: Var,
) -> Vec<Vec<u16>> {
    let m = &cfg.model;
    let b = enc.batch;
    let offsets = scale_offsets(m);
    let ctx = imagine_context(tape, store, enc, plan_pooled);
    let mut pyramids: Vec<Vec<u16>> = vec![Vec::new(); b];
    for (k, &(off, s)) in offsets.iter().enumerate() {
        let mut ctx_rows = Vec::with_capacity(b * s * s);
        let mut parent_ids = Vec::with_capacity(b * s * s);
        let mut pos_ids = Vec::with_capacity(b * s * s);
        for (sm, pyr) in pyramids.iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    ctx_rows.push(sm);
                    pos_ids.push(off + y * s + x);
                    parent_ids.push(if k == 0 {
                        GOAL_BOS
                    } else {
                        let (poff, ps) = offsets[k - 1];
                        pyr[poff + parent_cell(y, x, s, ps)] as usize
                    });
                }
            }
        }
        let logits = cell_logits(tape, store, ctx, &ctx_rows, &parent_ids, &pos_ids);
        let vals = tape.value(logits);
        for (sm, pyr) in pyramids.iter_mut().enumerate() {
            for c in 0..s * s {
                let r = sm * s * s + c;
                pyr.push(argmax(&vals[r * PALETTE..(r + 1) * PALETTE]) as u16);
            }
        }
    }
    pyramids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::tokenize_pyramid;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use crate::letterworld::{render, reset, TaskSpec};
    use crate::model::{embed_plan_pooled, encode, init_params, ObsBatch};
    use crate::vocab;

    fn setup(cfg: &RunConfig, n: usize) -> (ObsBatch, Vec<Vec<u16>>, Vec<Vec<u16>>) {
        let task = TaskSpec::spelling(&[0, 1]);
        let mut b = ObsBatch::default();
        let mut pyrs = Vec::new();
        for seed in 0..n as u64 {
            let s = reset(&cfg.env, &task, seed).unwrap();
            let o = render(&s, &cfg.env);
            pyrs.push(tokenize_pyramid(&o.head, &cfg.env, &cfg.model));
            b.push(&o.head, &o.wrist, &o.proprio, &task.instruction_tokens(cfg.model.instr_len));
        }
        let plans = vec![vec![vocab::PICK, vocab::letter_token(0), vocab::EOS]; n];
        (b, pyrs, plans)
    }

    #[test]
    fn decode_emits_the_full_schedule_of_cells() {
        let cfg = RunConfig::default();
        let store = init_params(&cfg, 9);
        let (b, _, plans) = setup(&cfg, 2);
        let mut t = Tape::new();
        let enc = encode(&mut t, &store, &cfg, &b).unwrap();
        let p = embed_plan_pooled(&mut t, &store, &cfg.model, &plans);
        let pyrs = decode(&mut t, &store, &cfg, &enc, p);
        assert_eq!(pyrs.len(), 2);
        for pyr in &pyrs {
            assert_eq!(pyr.len(), 21);
            assert!(pyr.iter().all(|&t| (t as usize) < PALETTE));
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let cfg = RunConfig::default();
        let store = init_params(&cfg, 9);
        let (b, _, plans) = setup(&cfg, 2);
        let run = || {
            let mut t = Tape::new();
            let enc = encode(&mut t, &store, &cfg, &b).unwrap();
            let p = embed_plan_pooled(&mut t, &store, &cfg.model, &plans);
            decode(&mut t, &store, &cfg, &enc, p)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scale_offsets_partition_the_pyramid() {
        let cfg = RunConfig::default();
        let offs = scale_offsets(&cfg.model);
        assert_eq!(offs, vec![(0, 1), (1, 2), (5, 4)]);
        assert_eq!(cfg.model.pyramid_cells(), 21);
    }

    #[test]
    fn parents_map_to_the_covering_coarse_cell() {
        assert_eq!(parent_cell(0, 0, 4, 2), 0);
        assert_eq!(parent_cell(0, 3, 4, 2), 1);
        assert_eq!(parent_cell(3, 0, 4, 2), 2);
        assert_eq!(parent_cell(3, 3, 4, 2), 3);
        assert_eq!(parent_cell(1, 1, 2, 1), 0);
    }

    #[test]
    fn teacher_forced_loss_gradients_match_finite_differences() {
        let cfg = RunConfig::micro();
        let mut store = init_params(&cfg, 5);
        let (b, pyrs, plans) = {
            let task = TaskSpec::spelling(&[0, 1]);
            let mut b = ObsBatch::default();
            let mut pyrs = Vec::new();
            for seed in 0..2u64 {
                let s = reset(&cfg.env, &task, seed).unwrap();
                let o = render(&s, &cfg.env);
                pyrs.push(tokenize_pyramid(&o.head, &cfg.env, &cfg.model));
                b.push(&o.head, &o.wrist, &o.proprio, &task.instruction_tokens(cfg.model.instr_len));
            }
            let plans = vec![vec![vocab::PICK, vocab::letter_token(0), vocab::EOS]; 2];
            (b, pyrs, plans)
        };
        let report = grad_check(
            &mut store,
            |s, tape| {
                let enc = encode(tape, s, &cfg, &b).unwrap();
                let p = embed_plan_pooled(tape, s, &cfg.model, &plans);
                loss(tape, s, &cfg, &enc, p, &pyrs)
            },
            DEFAULT_EPS,
        );
        assert!(report.max_rel_err <= 1e-4, "worst {:?} err {}", report.worst, report.max_rel_err);
    }
}
