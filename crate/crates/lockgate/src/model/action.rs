//! Action head: conditional flow matching over K-step action chunks.
//!
//! Training regresses a velocity field v(a, u, C) toward the straight
//! displacement a1 - a0 along the linear path (1-u) a0 + u a1. Sampling
//! integrates the field from noise with a fixed-step Euler scheme written
//! in partial-sum form,
//!
//!     a_i = a0 + (v_0 + ... + v_{i-1}) / steps,
//!
//! which is algebraically the classic update but keeps one division per
//! step, so a constant field with dyadic components reproduces a0 + c
//! bitwise at any step count.

use crate::config::RunConfig;
use crate::params::ParamStore;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Velocity field logits: chunk (B, K*D), u (B, 1), cond (B, 5d) ->
/// (B, K*D).
pub fn velocity(tape: &mut Tape, store: &ParamStore, chunk: Var, u: Var, cond: Var) -> Var {
    let x = tape.concat_cols(&[chunk, u, cond]);
    let w = tape.param(store, "act.h1.w");
    let b = tape.param(store, "act.h1.b");
    let h = tape.matmul(x, w);
    let h = tape.add_bias(h, b);
    let h = tape.relu(h);
    let w = tape.param(store, "act.h2.w");
    let b = tape.param(store, "act.h2.b");
    let h = tape.matmul(h, w);
    let h = tape.add_bias(h, b);
    let h = tape.relu(h);
    let w = tape.param(store, "act.out.w");
    let b = tape.param(store, "act.out.b");
    let v = tape.matmul(h, w);
    tape.add_bias(v, b)
}

/// Noise, path time, interpolated point, and regression target for one
/// flow-matching batch; all drawn deterministically from (seed, step).
pub struct CfmDraw {
    pub phi: Tensor,
    pub u: Tensor,
    /// a1 - a0, the velocity target along the linear path.
    pub delta: Tensor,
}

pub fn draw(targets: &[Vec<f64>], kd: usize, seed: u64, step: u64) -> CfmDraw {
    let b = targets.len();
    let mut r = rng::stream_n(seed, "cfm", step);
    let mut a0 = vec![0.0; b * kd];
    rng::fill_normal(&mut r, &mut a0);
    let mut u = vec![0.0; b];
    for v in u.iter_mut() {
        *v = r.gen::<f64>();
    }
    let mut phi = vec![0.0; b * kd];
    let mut delta = vec![0.0; b * kd];
    for s in 0..b {
        debug_assert_eq!(targets[s].len(), kd);
        for k in 0..kd {
            let i = s * kd + k;
            phi[i] = (1.0 - u[s]) * a0[i] + u[s] * targets[s][k];
            delta[i] = targets[s][k] - a0[i];
        }
    }
    CfmDraw {
        phi: Tensor::new(b, kd, phi).expect("phi shape"),
        u: Tensor::new(b, 1, u).expect("u shape"),
        delta: Tensor::new(b, kd, delta).expect("delta shape"),
    }
}

/// Flow-matching loss: squared error summed over chunk dimensions,
/// averaged over the batch.
pub fn loss(tape: &mut Tape, store: &ParamStore, cond: Var, d: &CfmDraw) -> Var {
    let b = d.phi.rows;
    let phi = tape.leaf(d.phi.clone());
    let u = tape.leaf(d.u.clone());
    let target = tape.leaf(d.delta.clone());
    let v = velocity(tape, store, phi, u, cond);
    let r = tape.sub(v, target);
    let sq = tape.mul(r, r);
    let total = tape.sum_all(sq);
    tape.scale(total, 1.0 / b as f64)
}

/// Euler integration of an arbitrary field from a0, partial-sum form,
/// components clipped to [-1, 1] at the end.
pub fn sample_with<F>(a0: &[f64], steps: usize, mut field: F) -> Vec<f64>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    assert!(steps > 0, "sampler needs at least one step");
    let n = a0.len();
    let mut vsum = vec![0.0; n];
    let mut a = a0.to_vec();
    for i in 0..steps {
        let u = i as f64 / steps as f64;
        let v = field(&a, u);
        debug_assert_eq!(v.len(), n);
        for k in 0..n {
            vsum[k] += v[k];
            a[k] = a0[k] + vsum[k] / steps as f64;
        }
    }
    for x in a.iter_mut() {
        *x = x.clamp(-1.0, 1.0);
    }
    a
}

/// Sample one action chunk under the learned field for one condition row.
pub fn sample(
    store: &ParamStore,
    cfg: &RunConfig,
    cond: &[f64],
    a0: &[f64],
    steps: usize,
) -> Vec<f64> {
    let kd = cfg.env.chunk * cfg.env.action_dim;
    assert_eq!(a0.len(), kd);
    sample_with(a0, steps, |a, u| {
        let mut tape = Tape::new();
        let chunk = tape.leaf(Tensor::new(1, kd, a.to_vec()).expect("chunk row"));
        let uu = tape.leaf(Tensor::new(1, 1, vec![u]).expect("u"));
        let c = tape.leaf(Tensor::new(1, cond.len(), cond.to_vec()).expect("cond row"));
        let v = velocity(&mut tape, store, chunk, uu, c);
        tape.value(v).to_vec()
    })
}
