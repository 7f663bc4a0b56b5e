//! Central finite-difference verification of tape gradients.
//!
//! The checker is the independent oracle for every analytic backward rule:
//! it only ever calls the forward pass. Relative error uses
//! |analytic - numeric| / max(1, |numeric|), so near-zero gradients are
//! compared absolutely.

use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter name, flat element index) of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare analytic gradients against central differences for every element
/// of every unfrozen parameter. `build` must construct the loss
/// deterministically from the store (fixed inputs, fixed noise).
pub fn grad_check<F>(store: &mut ParamStore, mut build: F, eps: f64) -> GradCheckReport
where
    F: FnMut(&ParamStore, &mut Tape) -> Var,
{
    let mut tape = Tape::new();
    let loss = build(store, &mut tape);
    let grads = tape.backward(loss);

    let names = store.names();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    for name in names {
        if store.get(&name).unwrap().frozen {
            continue;
        }
        let n = store.get(&name).unwrap().value.len();
        for i in 0..n {
            let orig = store.get(&name).unwrap().value.data[i];

            store.get_mut(&name).unwrap().value.data[i] = orig + eps;
            let mut tp = Tape::new();
            let lp = build(store, &mut tp);
            let fp = tp.scalar_value(lp);

            store.get_mut(&name).unwrap().value.data[i] = orig - eps;
            let mut tm = Tape::new();
            let lm = build(store, &mut tm);
            let fm = tm.scalar_value(lm);

            store.get_mut(&name).unwrap().value.data[i] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.get(&name).map(|g| g.data[i]).unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
            report.checked += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Two-layer MLP with every op the model layer relies on: matmul, bias,
    /// relu, sigmoid, layernorm, softmax, embed, concat, pooling, and the
    /// fused losses.
    fn mlp_loss(store: &ParamStore, tape: &mut Tape) -> Var {
        let x = tape.leaf(Tensor::new(3, 4, vec![
            0.2, -0.7, 1.3, 0.5,
            -0.1, 0.9, -1.2, 0.4,
            0.8, 0.3, 0.6, -0.9,
        ]).unwrap());
        let w1 = tape.param(store, "w1");
        let b1 = tape.param(store, "b1");
        let w2 = tape.param(store, "w2");
        let tbl = tape.param(store, "tbl");

        let h = tape.matmul(x, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.relu(h);
        let h = tape.layer_norm_rows(h);
        let e = tape.embed(tbl, &[1, 0, 2]);
        let h = tape.concat_cols(&[h, e]);
        let scores = tape.matmul_tb(h, h);
        let att = tape.softmax_rows(scores);
        let mixed = tape.matmul(att, h);
        let logits = tape.matmul(mixed, w2);
        let ce = tape.cross_entropy_mean(logits, &[0, 3, 1]);

        let pooled = tape.mean_pool_rows(mixed);
        let flat = tape.flatten_rows(pooled);
        let sig = tape.sigmoid(flat);
        let reg = tape.mean_all(sig);

        tape.add(ce, reg)
    }

    fn build_store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new(seed);
        s.add_uniform("w1", 4, 5, 4);
        s.add_uniform("b1", 1, 5, 4);
        s.add_uniform("w2", 8, 6, 8);
        s.add_uniform("tbl", 4, 3, 3);
        s
    }

    #[test]
    fn composite_network_gradients_match_finite_differences() {
        for seed in [11, 12, 13] {
            let mut store = build_store(seed);
            let report = grad_check(&mut store, mlp_loss, DEFAULT_EPS);
            assert!(
                report.max_rel_err <= 1e-4,
                "seed {seed}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = build_store(1);
        let full = grad_check(&mut store, mlp_loss, DEFAULT_EPS).checked;
        store.set_frozen("w1", true);
        let reduced = grad_check(&mut store, mlp_loss, DEFAULT_EPS).checked;
        assert_eq!(full - reduced, 4 * 5);
    }

    #[test]
    fn detects_a_broken_gradient() {
        // A loss whose builder cheats between calls would show up as a large
        // relative error; emulate by comparing against a perturbed analytic
        // value through an inconsistent builder.
        let mut store = ParamStore::new(3);
        store.insert_value("w", Tensor::row(&[1.0]));
        let mut flip = 0u32;
        let report = grad_check(
            &mut store,
            move |s, t| {
                flip += 1;
                let w = t.param(s, "w");
                // Inconsistent scaling between evaluations breaks the oracle
                // equivalence on purpose.
                let c = if flip == 1 { 1.0 } else { 3.0 };
                let y = t.scale(w, c);
                t.sum_all(y)
            },
            DEFAULT_EPS,
        );
        assert!(report.max_rel_err > 0.5);
    }
}
