//! Sub-task text head: a small autoregressive decoder over the closed
//! plan vocabulary. Each position sees the pooled observation summary,
//! the previous emitted token, and its position; decoding is greedy and
//! stops at a terminal token or the plan length cap.

use crate::config::RunConfig;
use crate::model::{argmax, Encoded};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::vocab;

/// (B, d) decoder context from the per-source summaries.
pub fn decode_context(tape: &mut Tape, store: &ParamStore, enc: &Encoded) -> Var {
    let summary = enc.obs_summary(tape);
    let w = tape.param(store, "txt.ctx.w");
    let b = tape.param(store, "txt.ctx.b");
    let h = tape.matmul(summary, w);
    let h = tape.add_bias(h, b);
    tape.relu(h)
}

/// Logits for a batch of (context row, previous token, position) triples.
fn step_logits(
    tape: &mut Tape,
    store: &ParamStore,
    ctx: Var,
    ctx_rows: &[usize],
    prev_ids: &[usize],
    pos_ids: &[usize],
) -> Var {
    let c = tape.embed(ctx, ctx_rows);
    let tok_t = tape.param(store, "txt.tok");
    let tok = tape.embed(tok_t, prev_ids);
    let pos_t = tape.param(store, "txt.pos");
    let pos = tape.embed(pos_t, pos_ids);
    let s = tape.add(c, tok);
    let s = tape.add(s, pos);
    let s = tape.relu(s);
    let w = tape.param(store, "txt.h.w");
    let b = tape.param(store, "txt.h.b");
    let h = tape.matmul(s, w);
    let h = tape.add_bias(h, b);
    let h = tape.relu(h);
    let w = tape.param(store, "txt.out.w");
    let b = tape.param(store, "txt.out.b");
    let l = tape.matmul(h, w);
    tape.add_bias(l, b)
}

/// Teacher-forced mean cross-entropy over every position of every plan.
pub fn loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &RunConfig,
    enc: &Encoded,
    plans: &[Vec<u16>],
) -> Var {
    assert_eq!(plans.len(), enc.batch);
    let cap = cfg.model.plan_max_len;
    let mut ctx_rows = Vec::new();
    let mut prev_ids = Vec::new();
    let mut pos_ids = Vec::new();
    let mut targets = Vec::new();
    for (s, plan) in plans.iter().enumerate() {
        let n = plan.len().min(cap);
        for i in 0..n {
            ctx_rows.push(s);
            prev_ids.push(if i == 0 { vocab::BOS as usize } else { plan[i - 1] as usize });
            pos_ids.push(i);
            targets.push(plan[i] as usize);
        }
    }
    let ctx = decode_context(tape, store, enc);
    let logits = step_logits(tape, store, ctx, &ctx_rows, &prev_ids, &pos_ids);
    tape.cross_entropy_mean(logits, &targets)
}

/// Greedy decode for each sample in the batch. Ties break to the lowest
/// token id, so all-zero logits yield PAD repeated to the length cap.
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &RunConfig,
    enc: &Encoded,
) -> Vec<Vec<u16>> {
    let cap = cfg.model.plan_max_len;
    let b = enc.batch;
    let v = vocab::VOCAB as usize;
    let ctx = decode_context(tape, store, enc);
    let mut plans: Vec<Vec<u16>> = vec![Vec::new(); b];
    let mut live: Vec<usize> = (0..b).collect();
    let mut prev: Vec<usize> = vec![vocab::BOS as usize; b];
    for pos in 0..cap {
        if live.is_empty() {
            break;
        }
        let prev_ids: Vec<usize> = live.iter().map(|&s| prev[s]).collect();
        let pos_ids = vec![pos; live.len()];
        let logits = step_logits(tape, store, ctx, &live, &prev_ids, &pos_ids);
        let vals = tape.value(logits);
        let mut next_live = Vec::new();
        for (r, &s) in live.iter().enumerate() {
            let tok = argmax(&vals[r * v..(r + 1) * v]) as u16;
            plans[s].push(tok);
            prev[s] = tok as usize;
            if !vocab::is_terminal(tok) {
                next_live.push(s);
            }
        }
        live = next_live;
    }
    plans
}
