//! The reuse gate. Current head tokens attend over the locked goal
//! tokens; the attended rows, concatenated with the locked sub-task
//! embedding, are pooled and scored through a three-layer MLP. The
//! output layer starts at zero, so an untrained gate sits exactly on
//! one half: no prior toward reusing or recomputing.
//!
//! Score semantics: 1 means the locked sub-task is still in progress
//! (reuse the lock), 0 means the observation already matches the locked
//! completion (recompute).

use crate::model::{pool_rows, Encoded};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::{Error, Result};

/// Gate logits (B, 1) from current head tokens and a locked context.
///
/// `goal_tokens` is (B * cells, d) as produced by `embed_goal_tokens`;
/// `plan_pooled` is (B, d). Errors if the query and key/value widths
/// disagree, so a lock from a differently sized model cannot be scored.
pub fn logits(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &Encoded,
    plan_pooled: Var,
    goal_tokens: Var,
) -> Result<Var> {
    if goal_tokens.cols != enc.head.cols {
        return Err(Error::Shape(format!(
            "gate token width mismatch: head {} vs goal {}",
            enc.head.cols, goal_tokens.cols
        )));
    }
    if goal_tokens.rows % enc.batch != 0 {
        return Err(Error::Shape("goal token count is not per-sample".into()));
    }
    let b = enc.batch;
    let np = enc.n_patches;
    let gc = goal_tokens.rows / b;
    let d = enc.head.cols;

    let wq = tape.param(store, "gate.q.w");
    let wk = tape.param(store, "gate.k.w");
    let wv = tape.param(store, "gate.v.w");
    let q = tape.matmul(enc.head, wq);
    let k = tape.matmul(goal_tokens, wk);
    let v = tape.matmul(goal_tokens, wv);
    let scale = 1.0 / (d as f64).sqrt();

    let mut per_sample = Vec::with_capacity(b);
    for s in 0..b {
        let q_rows: Vec<usize> = (s * np..(s + 1) * np).collect();
        let kv_rows: Vec<usize> = (s * gc..(s + 1) * gc).collect();
        let qs = tape.embed(q, &q_rows);
        let ks = tape.embed(k, &kv_rows);
        let vs = tape.embed(v, &kv_rows);
        let scores = tape.matmul_tb(qs, ks);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        let att = tape.matmul(attn, vs);
        let e_row = tape.embed(plan_pooled, &[s]);
        let e = tape.broadcast_rows(e_row, np);
        per_sample.push(tape.concat_cols(&[att, e]));
    }
    let stacked = tape.concat_rows(&per_sample);
    let pooled = pool_rows(tape, stacked, np);

    let w = tape.param(store, "gate.h1.w");
    let bb = tape.param(store, "gate.h1.b");
    let h = tape.matmul(pooled, w);
    let h = tape.add_bias(h, bb);
    let h = tape.relu(h);
    let w = tape.param(store, "gate.h2.w");
    let bb = tape.param(store, "gate.h2.b");
    let h = tape.matmul(h, w);
    let h = tape.add_bias(h, bb);
    let h = tape.relu(h);
    let w = tape.param(store, "gate.out.w");
    let bb = tape.param(store, "gate.out.b");
    let l = tape.matmul(h, w);
    Ok(tape.add_bias(l, bb))
}

/// Gate scores in the open interval (0, 1), one per sample.
pub fn scores(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &Encoded,
    plan_pooled: Var,
    goal_tokens: Var,
) -> Result<Vec<f64>> {
    let l = logits(tape, store, enc, plan_pooled, goal_tokens)?;
    Ok(tape.value(l).iter().map(|&x| crate::tape::sigmoid_strict(x)).collect())
}

/// Mean binary cross-entropy against 0/1 progress labels.
pub fn loss(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &Encoded,
    plan_pooled: Var,
    goal_tokens: Var,
    labels: &[f64],
) -> Result<Var> {
    let l = logits(tape, store, enc, plan_pooled, goal_tokens)?;
    Ok(tape.bce_logits_mean(l, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::tokenize_pyramid;
    use crate::config::RunConfig;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use crate::letterworld::{render, reset, TaskSpec};
    use crate::model::{embed_goal_tokens, embed_plan_pooled, encode, init_params, ObsBatch};
    use crate::vocab;

    fn setup(cfg: &RunConfig, n: usize) -> (ObsBatch, Vec<Vec<u16>>, Vec<Vec<u16>>) {
        let task = TaskSpec::spelling(&[0, 1]);
        let mut b = ObsBatch::default();
        let mut goals = Vec::new();
        for seed in 0..n as u64 {
            let s = reset(&cfg.env, &task, seed).unwrap();
            let o = render(&s, &cfg.env);
            goals.push(tokenize_pyramid(&o.head, &cfg.env, &cfg.model));
            b.push(&o.head, &o.wrist, &o.proprio, &task.instruction_tokens(cfg.model.instr_len));
        }
        let plans = vec![vec![vocab::PLACE, vocab::letter_token(1), vocab::EOS]; n];
        (b, goals, plans)
    }

    #[test]
    fn untrained_gate_scores_exactly_one_half() {
        let cfg = RunConfig::default();
        let store = init_params(&cfg, 21);
        let (b, goals, plans) = setup(&cfg, 3);
        let mut t = Tape::new();
        let enc = encode(&mut t, &store, &cfg, &b).unwrap();
        let p = embed_plan_pooled(&mut t, &store, &cfg.model, &plans);
        let g = embed_goal_tokens(&mut t, &store, &cfg.model, &goals);
        let s = scores(&mut t, &store, &enc, p, g).unwrap();
        assert_eq!(s, vec![0.5; 3]);
    }

    #[test]
    fn scores_stay_inside_the_open_interval() {
        let cfg = RunConfig::default();
        let mut store = init_params(&cfg, 21);
        // Blow up the output layer to push logits to saturation.
        for name in ["gate.out.w", "gate.out.b"] {
            let p = store.get_mut(name).unwrap();
            p.value.data.iter_mut().for_each(|v| *v = 1e6);
        }
        let (b, goals, plans) = setup(&cfg, 2);
        let mut t = Tape::new();
        let enc = encode(&mut t, &store, &cfg, &b).unwrap();
        let p = embed_plan_pooled(&mut t, &store, &cfg.model, &plans);
        let g = embed_goal_tokens(&mut t, &store, &cfg.model, &goals);
        let s = scores(&mut t, &store, &enc, p, g).unwrap();
        for v in s {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn token_width_mismatch_is_an_error() {
        let cfg = RunConfig::default();
        let store = init_params(&cfg, 21);
        let (b, _, plans) = setup(&cfg, 1);
        let mut t = Tape::new();
        let enc = encode(&mut t, &store, &cfg, &b).unwrap();
        let p = embed_plan_pooled(&mut t, &store, &cfg.model, &plans);
        let narrow = t.leaf(crate::tensor::Tensor::zeros(
            cfg.model.goal_cells(),
            cfg.model.d_model - 1,
        ));
        assert!(logits(&mut t, &store, &enc, p, narrow).is_err());
    }

    #[test]
    fn gate_loss_gradients_match_finite_differences() {
        let cfg = RunConfig::micro();
        let mut store = init_params(&cfg, 5);
        let task = TaskSpec::spelling(&[0, 1]);
        let mut b = ObsBatch::default();
        let mut goals = Vec::new();
        for seed in 0..2u64 {
            let s = reset(&cfg.env, &task, seed).unwrap();
            let o = render(&s, &cfg.env);
            goals.push(tokenize_pyramid(&o.head, &cfg.env, &cfg.model));
            b.push(&o.head, &o.wrist, &o.proprio, &task.instruction_tokens(cfg.model.instr_len));
        }
        let plans = vec![vec![vocab::PICK, vocab::letter_token(0), vocab::EOS]; 2];
        let labels = vec![1.0, 0.0];
        // A zero output layer hides upstream gradients; nudge it first.
        store.get_mut("gate.out.w").unwrap().value.data.iter_mut().enumerate().for_each(
            |(i, v)| *v = 0.05 * ((i % 7) as f64 - 3.0),
        );
        let report = grad_check(
            &mut store,
            |s, tape| {
                let enc = encode(tape, s, &cfg, &b).unwrap();
                let p = embed_plan_pooled(tape, s, &cfg.model, &plans);
                let g = embed_goal_tokens(tape, s, &cfg.model, &goals);
                loss(tape, s, &enc, p, g, &labels).unwrap()
            },
            DEFAULT_EPS,
        );
        assert!(report.max_rel_err <= 1e-4, "worst {:?} err {}", report.worst, report.max_rel_err);
    }
}
