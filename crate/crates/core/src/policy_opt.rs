//! Policy improvement on the learned model.
//!
//! A trajectory is rolled out on one sampled dropout model, the smooth
//! robustness of the resulting state sequence is differentiated with respect
//! to the states, and co-states propagate that sensitivity backwards through
//! the model and the recurrent policy:
//!
//! ```text
//! lambda_T = d rho / d x_T
//! lambda_t = d rho / d x_t + lambda_{t+1} (I + dF/dx_t) + (cross terms through u_j, j >= t)
//! ```
//!
//! The parameter gradient is `sum_t lambda_{t+1} dF/du_t du_t/dW`. An
//! independent full unroll on a [`Tape`] checks it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{DiffError, Tape, Var};
use crate::model_learning::{DynamicsModel, LearnedModel};
use crate::nets::{AdamState, Controller, DenseNet, DropoutMask, NetError, PolicyStepCache};
use crate::world::wrap_angles;
use crate::stl::{build_smooth, robustness_classic, Formula, SmoothRobustness, StlError};

#[derive(Debug, Error)]
pub enum PolicyOptError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error("robustness gradient has {got} rows, trajectory has {expected} states")]
    Length { expected: usize, got: usize },
    #[error("invalid options: {0}")]
    Options(String),
}

/// One model rollout with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct RolloutTape {
    pub mask: DropoutMask,
    /// `x_0 ..= x_T`
    pub states: Vec<Vec<f64>>,
    /// `u_0 .. u_{T-1}`
    pub controls: Vec<Vec<f64>>,
    /// policy hidden state after each step
    pub hidden: Vec<Vec<f64>>,
    /// `dF/dx_t`, row-major `n x n`
    pub jac_x: Vec<Vec<f64>>,
    /// `dF/du_t`, row-major `n x m`
    pub jac_u: Vec<Vec<f64>>,
    caches: Vec<PolicyStepCache>,
}

impl RolloutTape {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// `x_{t+1} = x_t + F(x_t, pi(x_{0:t}); mask)` for `horizon` steps.
pub fn rollout_model(
    x0: &[f64],
    policy: &Controller,
    model: &dyn DynamicsModel,
    mask: &DropoutMask,
    horizon: usize,
) -> Result<RolloutTape, PolicyOptError> {
    let mut tape = RolloutTape {
        mask: mask.clone(),
        states: Vec::with_capacity(horizon + 1),
        controls: Vec::with_capacity(horizon),
        hidden: Vec::with_capacity(horizon),
        jac_x: Vec::with_capacity(horizon),
        jac_u: Vec::with_capacity(horizon),
        caches: Vec::with_capacity(horizon),
    };
    tape.states.push(x0.to_vec());
    let mut h = policy.initial_state();
    for t in 0..horizon {
        let x = &tape.states[t];
        let (u, h_next, cache) = policy.step_cached(x, &h)?;
        let (d, jx, ju) = model.delta_jacobians(x, &u, mask);
        let mut next: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        // wrapping shifts by a constant, so the Jacobians stay valid
        wrap_angles(&mut next, model.angle_dims());
        tape.states.push(next);
        tape.controls.push(u);
        tape.hidden.push(h_next.clone());
        tape.jac_x.push(jx);
        tape.jac_u.push(ju);
        tape.caches.push(cache);
        h = h_next;
    }
    Ok(tape)
}

/// Co-states `lambda_0 ..= lambda_T` (the first is reported but unused).
#[derive(Debug, Clone, PartialEq)]
pub struct CostateSet {
    pub lambda: Vec<Vec<f64>>,
}

/// `lambda_{t+1}^T dF/du_t`
fn control_sensitivity(tape: &RolloutTape, lambda_next: &[f64], t: usize) -> Vec<f64> {
    let n = lambda_next.len();
    let m = tape.controls[t].len();
    let ju = &tape.jac_u[t];
    (0..m).map(|j| (0..n).map(|i| lambda_next[i] * ju[i * m + j]).sum()).collect()
}

/// Backward co-state recursion. `drho[t]` is `d rho / d x_t` for every state.
/// The cross terms `d u_j / d x_t` for `j > t` travel through the hidden-state
/// cotangent of the recurrent policy.
pub fn compute_costates(tape: &RolloutTape, policy: &Controller, drho: &[Vec<f64>]) -> Result<CostateSet, PolicyOptError> {
    let big_t = tape.horizon();
    if drho.len() != big_t + 1 {
        return Err(PolicyOptError::Length {
            expected: big_t + 1,
            got: drho.len(),
        });
    }
    let n = tape.states[0].len();
    let mut lambda = vec![Vec::new(); big_t + 1];
    lambda[big_t] = drho[big_t].clone();
    let mut d_hidden = policy.initial_state();
    for t in (0..big_t).rev() {
        let next = &lambda[t + 1];
        let g = control_sensitivity(tape, next, t);
        let (dx, dh_prev) = policy.step_backward(&tape.caches[t], &g, &d_hidden, None);
        let jx = &tape.jac_x[t];
        let lam: Vec<f64> = (0..n)
            .map(|c| drho[t][c] + next[c] + (0..n).map(|r| next[r] * jx[r * n + c]).sum::<f64>() + dx[c])
            .collect();
        lambda[t] = lam;
        d_hidden = dh_prev;
    }
    Ok(CostateSet { lambda })
}

/// `delta W = sum_t lambda_{t+1}^T dF/du_t du_t/dW`, the last factor taken
/// through the recurrent unroll with states held fixed.
pub fn gradient_single(tape: &RolloutTape, policy: &Controller, costates: &CostateSet) -> Vec<f64> {
    let mut grad = vec![0.0; policy.num_params()];
    let mut d_hidden = policy.initial_state();
    for t in (0..tape.horizon()).rev() {
        let g = control_sensitivity(tape, &costates.lambda[t + 1], t);
        let (_, dh_prev) = policy.step_backward(&tape.caches[t], &g, &d_hidden, Some(&mut grad));
        d_hidden = dh_prev;
    }
    grad
}

/// Smooth robustness, classical robustness and parameter gradient of one
/// sampled trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryGradient {
    pub smooth: f64,
    pub classic: f64,
    pub grad: Vec<f64>,
    pub tape: RolloutTape,
}

pub fn trajectory_gradient(
    x0: &[f64],
    policy: &Controller,
    model: &dyn DynamicsModel,
    mask: &DropoutMask,
    phi: &Formula,
    robustness: &mut SmoothRobustness,
) -> Result<TrajectoryGradient, PolicyOptError> {
    let horizon = robustness.len() - 1;
    let tape = rollout_model(x0, policy, model, mask, horizon)?;
    let res = robustness.gradient(&tape.states)?;
    let drho = res.gradient.expect("gradient requested");
    let costates = compute_costates(&tape, policy, &drho)?;
    let grad = gradient_single(&tape, policy, &costates);
    let classic = robustness_classic(phi, &tape.states, 0)?;
    Ok(TrajectoryGradient {
        smooth: res.value,
        classic,
        grad,
        tape,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub grad: Vec<f64>,
    pub avg_smooth: f64,
    pub avg_classic: f64,
}

/// Average of the per-trajectory gradients over `(x0, mask)` samples.
pub fn gradient_batch(
    samples: &[(Vec<f64>, DropoutMask)],
    policy: &Controller,
    model: &dyn DynamicsModel,
    phi: &Formula,
    robustness: &mut SmoothRobustness,
) -> Result<BatchGradient, PolicyOptError> {
    if samples.is_empty() {
        return Err(PolicyOptError::Options("empty batch".into()));
    }
    let scale = 1.0 / samples.len() as f64;
    let mut out = BatchGradient {
        grad: vec![0.0; policy.num_params()],
        avg_smooth: 0.0,
        avg_classic: 0.0,
    };
    for (x0, mask) in samples {
        let tg = trajectory_gradient(x0, policy, model, mask, phi, robustness)?;
        for (a, b) in out.grad.iter_mut().zip(&tg.grad) {
            *a += b * scale;
        }
        out.avg_smooth += tg.smooth * scale;
        out.avg_classic += tg.classic * scale;
    }
    Ok(out)
}

/// Vector of per-element index nodes, so slices can be re-assembled with `concat`.
fn scalars(tape: &mut Tape, v: Var) -> Result<Vec<Var>, DiffError> {
    (0..tape.width(v)).map(|i| tape.index(v, i)).collect()
}

/// `W x + b` on the tape; the weights are `rows x cols` starting at `w[0]`,
/// followed by the bias.
fn tape_affine(tape: &mut Tape, w: &[Var], rows: usize, cols: usize, x: Var) -> Result<Var, DiffError> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = tape.concat(&w[r * cols..(r + 1) * cols])?;
        let d = tape.dot(row, x)?;
        out.push(tape.add(d, w[rows * cols + r])?);
    }
    tape.concat(&out)
}

fn tape_slice(tape: &mut Tape, v: Var, from: usize, to: usize) -> Result<Var, DiffError> {
    let parts = (from..to).map(|i| tape.index(v, i)).collect::<Result<Vec<_>, _>>()?;
    tape.concat(&parts)
}

/// A [`DenseNet`] with constant weights applied on the tape.
fn tape_dense(tape: &mut Tape, net: &DenseNet, mask: &DropoutMask, input: Var) -> Result<Var, PolicyOptError> {
    let layers: Vec<_> = net.layers().collect();
    let hidden = net.hidden_widths().to_vec();
    let mut x = input;
    for (l, (off, rows, cols)) in layers.iter().copied().enumerate() {
        let w = tape.constant(net.params()[off..off + rows * cols + rows].to_vec());
        let w = scalars(tape, w)?;
        x = tape_affine(tape, &w, rows, cols, x)?;
        if l + 1 < layers.len() {
            x = tape.tanh(x);
            let factors = match mask {
                DropoutMask::Deterministic => vec![1.0 - net.dropout(); hidden[l]],
                DropoutMask::Sampled(keep) => keep
                    .get(l)
                    .filter(|k| k.len() == hidden[l])
                    .ok_or(NetError::Config("dropout mask does not match the network".into()))?
                    .iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
            };
            let f = tape.constant(factors);
            x = tape.mul(x, f)?;
        }
    }
    Ok(x)
}

/// `x + F(x, u)` of the learned model on the tape.
fn tape_model_step(tape: &mut Tape, model: &LearnedModel, mask: &DropoutMask, x: Var, u: Var) -> Result<Var, PolicyOptError> {
    let z = tape.concat(&[x, u])?;
    let shift = tape.constant(model.in_shift.clone());
    let scale = tape.constant(model.in_scale.clone());
    let z = tape.sub(z, shift)?;
    let z = tape.div(z, scale)?;
    let out = tape_dense(tape, &model.net, mask, z)?;
    let os = tape.constant(model.out_scale.clone());
    let d = tape.mul(out, os)?;
    Ok(tape.add(x, d)?)
}

fn tape_squash(tape: &mut Tape, lo: &[f64], hi: &[f64], z: Var) -> Result<Var, DiffError> {
    let mid = tape.constant(lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect());
    let half = tape.constant(lo.iter().zip(hi).map(|(l, h)| 0.5 * (h - l)).collect());
    let t = tape.tanh(z);
    let s = tape.mul(half, t)?;
    tape.add(mid, s)
}

/// Value and gradient of the smooth robustness with respect to all policy
/// parameters, by building the whole closed-loop rollout on one tape and
/// running reverse mode over it. Meant for short horizons only.
pub fn unrolled_gradient_oracle(
    x0: &[f64],
    policy: &Controller,
    model: &LearnedModel,
    mask: &DropoutMask,
    phi: &Formula,
    horizon: usize,
    k: f64,
) -> Result<(f64, Vec<f64>), PolicyOptError> {
    if !model.angle_dims.is_empty() {
        return Err(PolicyOptError::Options("the unrolled oracle does not wrap angles".into()));
    }
    let mut tape = Tape::new();
    let w_leaf = tape.leaf("w", policy.num_params())?;
    let w = scalars(&mut tape, w_leaf)?;
    let bounds = policy.bounds().clone();
    let mut states = vec![tape.constant(x0.to_vec())];
    match policy {
        Controller::Recurrent(p) => {
            let h = p.hidden_width();
            let blocks = p.blocks();
            let zero = tape.constant(vec![0.0; h]);
            let mut hs = vec![zero; p.num_layers()];
            let mut cs = vec![zero; p.num_layers()];
            for _ in 0..horizon {
                let mut input = *states.last().unwrap();
                for l in 0..p.num_layers() {
                    let (_, wih, rows, cols) = blocks[3 * l];
                    let (_, whh, _, _) = blocks[3 * l + 1];
                    let (_, b, _, _) = blocks[3 * l + 2];
                    // W_ih x + W_hh h + b, gates stacked i | f | g | o
                    let mut pre = Vec::with_capacity(rows);
                    for r in 0..rows {
                        let row_i = tape.concat(&w[wih + r * cols..wih + (r + 1) * cols])?;
                        let a = tape.dot(row_i, input)?;
                        let row_h = tape.concat(&w[whh + r * h..whh + (r + 1) * h])?;
                        let c = tape.dot(row_h, hs[l])?;
                        let s = tape.add(a, c)?;
                        pre.push(tape.add(s, w[b + r])?);
                    }
                    let pre = tape.concat(&pre)?;
                    let gi = tape_slice(&mut tape, pre, 0, h)?;
                    let gf = tape_slice(&mut tape, pre, h, 2 * h)?;
                    let gg = tape_slice(&mut tape, pre, 2 * h, 3 * h)?;
                    let go = tape_slice(&mut tape, pre, 3 * h, 4 * h)?;
                    let i = tape.sigmoid(gi);
                    let f = tape.sigmoid(gf);
                    let g = tape.tanh(gg);
                    let o = tape.sigmoid(go);
                    let fc = tape.mul(f, cs[l])?;
                    let ig = tape.mul(i, g)?;
                    cs[l] = tape.add(fc, ig)?;
                    let tc = tape.tanh(cs[l]);
                    hs[l] = tape.mul(o, tc)?;
                    input = hs[l];
                }
                let (_, wout, m, _) = blocks[3 * p.num_layers()];
                let z = tape_affine(&mut tape, &w[wout..], m, h, input)?;
                let u = tape_squash(&mut tape, &bounds.lo, &bounds.hi, z)?;
                let x = *states.last().unwrap();
                let next = tape_model_step(&mut tape, model, mask, x, u)?;
                states.push(next);
            }
        }
        Controller::Feedforward(p) => {
            let net = p.net();
            let layers: Vec<_> = net.layers().collect();
            for _ in 0..horizon {
                let x = *states.last().unwrap();
                let mut a = x;
                for (l, (off, rows, cols)) in layers.iter().copied().enumerate() {
                    a = tape_affine(&mut tape, &w[off..], rows, cols, a)?;
                    if l + 1 < layers.len() {
                        a = tape.tanh(a);
                    }
                }
                let u = tape_squash(&mut tape, &bounds.lo, &bounds.hi, a)?;
                let next = tape_model_step(&mut tape, model, mask, x, u)?;
                states.push(next);
            }
        }
    }
    let rho = build_smooth(&mut tape, phi, &states, 0, k)?;
    tape.set_output(rho);
    let value = tape.forward_ordered(&[policy.params()])?[0];
    let grads = tape.backward()?;
    Ok((value, grads["w"].clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImproveOptions {
    pub lr: f64,
    /// trajectories per gradient step
    pub batch: usize,
    pub max_steps: usize,
    /// moving-average window of the convergence test
    pub window: usize,
    /// stop once a window improves on the previous one by less than this
    pub min_improvement: f64,
    /// halt when the moving average stays this far below its best ...
    pub divergence_margin: f64,
    /// ... for this many consecutive steps
    pub divergence_patience: usize,
    pub k: f64,
}

impl Default for ImproveOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 4,
            max_steps: 2000,
            window: 50,
            min_improvement: 1e-3,
            divergence_margin: 0.5,
            divergence_patience: 200,
            k: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub avg_smooth_rho: f64,
    pub avg_classic_rho: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    StepCap,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
}

impl Improvement {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,avg_smooth_rho,avg_classic_rho,grad_norm\n");
        for r in &self.trace {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.avg_smooth_rho, r.avg_classic_rho, r.grad_norm));
        }
        out
    }
}

/// Adam ascent on the average smooth robustness of `batch` model rollouts,
/// with fresh initial states and dropout masks every step.
pub fn improve_policy<R: Rng>(
    policy: &mut Controller,
    model: &dyn DynamicsModel,
    phi: &Formula,
    horizon: usize,
    sample_x0: &dyn Fn(&mut R) -> Vec<f64>,
    opts: &ImproveOptions,
    rng: &mut R,
) -> Result<Improvement, PolicyOptError> {
    if opts.batch == 0 || opts.window == 0 {
        return Err(PolicyOptError::Options("batch and window must be positive".into()));
    }
    let mut robustness = SmoothRobustness::new(phi, model.state_dim(), horizon + 1, opts.k)?;
    let mut adam = AdamState::new(policy.num_params(), opts.lr);
    let mut trace = Vec::new();
    let mut best_avg = f64::NEG_INFINITY;
    let mut best_params = policy.params().to_vec();
    let mut below = 0;
    let w = opts.window;
    for step in 0..opts.max_steps {
        let samples: Vec<(Vec<f64>, DropoutMask)> = (0..opts.batch)
            .map(|_| {
                let x0 = sample_x0(rng);
                let mask = model.sample_mask(rng);
                (x0, mask)
            })
            .collect();
        let bg = gradient_batch(&samples, policy, model, phi, &mut robustness)?;
        let grad_norm = bg.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.push(TraceRow {
            step,
            avg_smooth_rho: bg.avg_smooth,
            avg_classic_rho: bg.avg_classic,
            grad_norm,
        });
        if trace.len() >= w {
            let avg = trace[trace.len() - w..].iter().map(|r| r.avg_smooth_rho).sum::<f64>() / w as f64;
            if avg > best_avg {
                best_avg = avg;
                best_params.copy_from_slice(policy.params());
                below = 0;
            } else if avg < best_avg - opts.divergence_margin {
                below += 1;
                if below >= opts.divergence_patience {
                    policy.params_mut().copy_from_slice(&best_params);
                    return Ok(Improvement {
                        trace,
                        stop: StopReason::Diverged,
                    });
                }
            } else {
                below = 0;
            }
            if trace.len() >= 2 * w && trace.len() % w == 0 {
                let prev = trace[trace.len() - 2 * w..trace.len() - w].iter().map(|r| r.avg_smooth_rho).sum::<f64>() / w as f64;
                if avg - prev < opts.min_improvement {
                    return Ok(Improvement {
                        trace,
                        stop: StopReason::Converged,
                    });
                }
            }
        }
        if !bg.grad.iter().all(|g| g.is_finite()) {
            policy.params_mut().copy_from_slice(&best_params);
            return Ok(Improvement {
                trace,
                stop: StopReason::Diverged,
            });
        }
        adam.step(policy.params_mut(), &bg.grad, true)?;
    }
    Ok(Improvement {
        trace,
        stop: StopReason::StepCap,
    })
}

/// One random gradient-check instance and its relative disagreements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub state_dim: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub recurrent: bool,
    /// max |adjoint - unrolled| over max |unrolled|
    pub adjoint_vs_unrolled: f64,
    /// same for the unrolled gradient against central differences
    pub unrolled_vs_fd: f64,
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Compares the co-state gradient with a full unroll and with central
/// differences on `count` random small problems.
pub fn check_gradients<R: Rng>(count: usize, rng: &mut R) -> Result<Vec<GradCheck>, PolicyOptError> {
    use crate::nets::{ControlBox, FeedforwardPolicy, LstmPolicy};
    use crate::stl::{parse_formula, Predicate, PredicateTable};
    let k = 10.0;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let n = 1 + i % 3;
        let horizon = 1 + rng.gen_range(0..6);
        let hidden = rng.gen_range(2..=8);
        let recurrent = i % 4 != 3;
        let m = rng.gen_range(1..=2);
        let mut model = LearnedModel::new(n, m, &[hidden], 0.2, rng)?;
        model.out_scale = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
        let lo: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..-0.2)).collect();
        let hi: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.0)).collect();
        let bounds = ControlBox::new(lo, hi)?;
        let mut policy = if recurrent {
            Controller::Recurrent(LstmPolicy::new(n, hidden, 1 + i % 2, bounds, rng)?)
        } else {
            Controller::Feedforward(FeedforwardPolicy::new(n, &[hidden], bounds, rng)?)
        };
        let mut table = PredicateTable::new();
        for name in ["A", "B"] {
            table.insert(
                name.into(),
                Predicate::Affine {
                    coeffs: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    offset: rng.gen_range(-0.5..0.5),
                },
            );
        }
        let a = rng.gen_range(1..=horizon);
        let text = match i % 3 {
            0 => format!("F[0,{a}] A and G[0,{horizon}] B"),
            1 => format!("G[0,{a}] (A or not B)"),
            _ => format!("A U[0,{horizon}] B"),
        };
        let phi = parse_formula(&text, &table)?;
        let mask = model.net.sample_mask(rng);
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let len = phi.horizon() + 1;
        let mut sr = SmoothRobustness::new(&phi, n, len, k)?;
        let tg = trajectory_gradient(&x0, &policy, &model, &mask, &phi, &mut sr)?;
        let (_, unrolled) = unrolled_gradient_oracle(&x0, &policy, &model, &mask, &phi, len - 1, k)?;
        let h = 1e-6;
        let mut fd = vec![0.0; policy.num_params()];
        for (j, g) in fd.iter_mut().enumerate() {
            let orig = policy.params()[j];
            policy.params_mut()[j] = orig + h;
            let p = sr.value(&rollout_model(&x0, &policy, &model, &mask, len - 1)?.states)?;
            policy.params_mut()[j] = orig - h;
            let q = sr.value(&rollout_model(&x0, &policy, &model, &mask, len - 1)?.states)?;
            policy.params_mut()[j] = orig;
            *g = (p - q) / (2.0 * h);
        }
        out.push(GradCheck {
            state_dim: n,
            horizon: len - 1,
            hidden,
            recurrent,
            adjoint_vs_unrolled: rel_error(&tg.grad, &unrolled),
            unrolled_vs_fd: rel_error(&unrolled, &fd),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_learning::LinearModel;
    use crate::nets::{ControlBox, FeedforwardPolicy, LstmPolicy};
    use crate::stl::{parse_formula, Predicate, PredicateTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn table() -> PredicateTable {
        let mut t = PredicateTable::new();
        t.insert(
            "A".into(),
            Predicate::InsideBox {
                axes: [0, 1],
                lo: [0.5, 0.5],
                hi: [1.5, 1.5],
            },
        );
        t.insert(
            "B".into(),
            Predicate::InsideDisk {
                axes: [0, 1],
                center: [0.5, -0.2],
                radius: 0.4,
            },
        );
        t.insert(
            "One".into(),
            Predicate::Affine {
                coeffs: vec![0.0, 0.0],
                offset: -1.0,
            },
        );
        t
    }

    fn small_model(seed: u64) -> LearnedModel {
        let mut m = LearnedModel::new(2, 2, &[8, 8], 0.2, &mut rng(seed)).unwrap();
        m.in_shift = vec![0.1, -0.1, 0.0, 0.0];
        m.in_scale = vec![1.5, 1.2, 0.8, 0.9];
        m.out_scale = vec![0.6, 0.4];
        m
    }

    fn small_policy(seed: u64, recurrent: bool) -> Controller {
        let bounds = ControlBox::new(vec![-1.0, -0.5], vec![1.0, 1.0]).unwrap();
        if recurrent {
            Controller::Recurrent(LstmPolicy::new(2, 4, 2, bounds, &mut rng(seed)).unwrap())
        } else {
            Controller::Feedforward(FeedforwardPolicy::new(2, &[6], bounds, &mut rng(seed)).unwrap())
        }
    }

    fn smooth_objective(x0: &[f64], policy: &Controller, model: &LearnedModel, mask: &DropoutMask, phi: &Formula, horizon: usize, k: f64) -> f64 {
        let tape = rollout_model(x0, policy, model, mask, horizon).unwrap();
        SmoothRobustness::new(phi, 2, horizon + 1, k).unwrap().value(&tape.states).unwrap()
    }

    #[test]
    fn zero_model_keeps_state() {
        let mut model = small_model(1);
        model.net.params_mut().iter_mut().for_each(|w| *w = 0.0);
        let policy = small_policy(2, true);
        let tape = rollout_model(&[0.3, 0.4], &policy, &model, &DropoutMask::Deterministic, 6).unwrap();
        assert!(tape.states.iter().all(|x| x == &vec![0.3, 0.4]));
        let one = rollout_model(&[0.3, 0.4], &policy, &model, &DropoutMask::Deterministic, 1).unwrap();
        assert_eq!((one.states.len(), one.controls.len()), (2, 1));
    }

    #[test]
    fn rollouts_are_deterministic() {
        let model = small_model(3);
        let policy = small_policy(4, true);
        let mask = model.net.sample_mask(&mut rng(5));
        let a = rollout_model(&[0.1, 0.2], &policy, &model, &mask, 5).unwrap();
        let b = rollout_model(&[0.1, 0.2], &policy, &model, &mask, 5).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.controls, b.controls);
    }

    #[test]
    fn single_step_costate_is_robustness_gradient() {
        let model = small_model(6);
        let policy = small_policy(7, true);
        let tape = rollout_model(&[0.1, 0.2], &policy, &model, &DropoutMask::Deterministic, 1).unwrap();
        let drho = vec![vec![0.3, -0.2], vec![1.5, 0.25]];
        let cs = compute_costates(&tape, &policy, &drho).unwrap();
        assert_eq!(cs.lambda[1], drho[1]);
        assert!(compute_costates(&tape, &policy, &drho[..1]).is_err());
        let zero = CostateSet {
            lambda: vec![vec![0.0; 2]; 2],
        };
        assert!(gradient_single(&tape, &policy, &zero).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn costates_match_finite_differences() {
        let table = table();
        let phi = parse_formula("F[0,4] A and G[0,4] not B", &table).unwrap();
        let k = 10.0;
        for (seed, recurrent) in [(10, true), (11, false)] {
            let model = small_model(seed);
            let policy = small_policy(seed + 100, recurrent);
            let mask = model.net.sample_mask(&mut rng(seed + 200));
            let x0 = [0.2, 0.1];
            let tape = rollout_model(&x0, &policy, &model, &mask, 4).unwrap();
            let mut sr = SmoothRobustness::new(&phi, 2, 5, k).unwrap();
            let drho = sr.gradient(&tape.states).unwrap().gradient.unwrap();
            let cs = compute_costates(&tape, &policy, &drho).unwrap();
            // perturb x_t, keep the policy memory h_{t-1}, re-roll what follows
            for t in 1..=4 {
                for c in 0..2 {
                    let mut eval = |delta: f64| -> f64 {
                        let mut states = tape.states[..=t].to_vec();
                        states[t][c] += delta;
                        let mut h = if t == 0 { policy.initial_state() } else { tape.hidden[t - 1].clone() };
                        for _ in t..4 {
                            let x = states.last().unwrap().clone();
                            let (u, hn) = policy.step(&x, &h).unwrap();
                            h = hn;
                            let d = model.delta(&x, &u, &mask);
                            states.push(x.iter().zip(&d).map(|(a, b)| a + b).collect());
                        }
                        sr.value(&states).unwrap()
                    };
                    let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                    let an = cs.lambda[t][c];
                    assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "t={t} c={c}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn adjoint_matches_unrolled_oracle_and_fd() {
        let table = table();
        let phi = parse_formula("F[0,5] A and G[0,5] not B", &table).unwrap();
        let k = 10.0;
        for (seed, recurrent) in [(20, true), (21, false), (22, true)] {
            let model = small_model(seed);
            let mut policy = small_policy(seed + 100, recurrent);
            let mask = model.net.sample_mask(&mut rng(seed + 200));
            let x0 = [0.0, 0.3];
            let mut sr = SmoothRobustness::new(&phi, 2, 6, k).unwrap();
            let tg = trajectory_gradient(&x0, &policy, &model, &mask, &phi, &mut sr).unwrap();
            let (val, oracle) = unrolled_gradient_oracle(&x0, &policy, &model, &mask, &phi, 5, k).unwrap();
            assert!((val - tg.smooth).abs() < 1e-12);
            let scale = oracle.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            for (a, o) in tg.grad.iter().zip(&oracle) {
                assert!((a - o).abs() <= 1e-6 * scale.max(1e-12), "{a} vs {o}");
            }
            let h = 1e-6;
            for i in (0..policy.num_params()).step_by(5) {
                let orig = policy.params()[i];
                policy.params_mut()[i] = orig + h;
                let p = smooth_objective(&x0, &policy, &model, &mask, &phi, 5, k);
                policy.params_mut()[i] = orig - h;
                let q = smooth_objective(&x0, &policy, &model, &mask, &phi, 5, k);
                policy.params_mut()[i] = orig;
                let fd = (p - q) / (2.0 * h);
                assert!((oracle[i] - fd).abs() <= 1e-4 * scale.max(1e-8), "param {i}: {} vs {fd}", oracle[i]);
            }
        }
    }

    #[test]
    fn constant_robustness_has_zero_gradient() {
        let phi = parse_formula("G[0,3] One", &table()).unwrap();
        let model = small_model(30);
        let policy = small_policy(31, true);
        let mut sr = SmoothRobustness::new(&phi, 2, 4, 10.0).unwrap();
        let tg = trajectory_gradient(&[0.0, 0.0], &policy, &model, &DropoutMask::Deterministic, &phi, &mut sr).unwrap();
        assert!(tg.grad.iter().all(|&g| g == 0.0));
        let (_, oracle) = unrolled_gradient_oracle(&[0.0, 0.0], &policy, &model, &DropoutMask::Deterministic, &phi, 3, 10.0).unwrap();
        assert!(oracle.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_averaging() {
        let phi = parse_formula("F[0,3] A", &table()).unwrap();
        let model = small_model(40);
        let policy = small_policy(41, true);
        let mut sr = SmoothRobustness::new(&phi, 2, 4, 10.0).unwrap();
        let m1 = model.net.sample_mask(&mut rng(42));
        let m2 = model.net.sample_mask(&mut rng(43));
        let one = gradient_batch(&[(vec![0.1, 0.1], m1.clone())], &policy, &model, &phi, &mut sr).unwrap();
        let single = trajectory_gradient(&[0.1, 0.1], &policy, &model, &m1, &phi, &mut sr).unwrap();
        assert_eq!(one.grad, single.grad);
        let dup = gradient_batch(&[(vec![0.1, 0.1], m1.clone()), (vec![0.1, 0.1], m1.clone())], &policy, &model, &phi, &mut sr).unwrap();
        for (a, b) in dup.grad.iter().zip(&single.grad) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        let two = gradient_batch(&[(vec![0.1, 0.1], m1), (vec![0.4, -0.2], m2)], &policy, &model, &phi, &mut sr).unwrap();
        assert_ne!(two.grad, single.grad);
        assert!(gradient_batch(&[], &policy, &model, &phi, &mut sr).is_err());
    }

    #[test]
    fn learns_one_step_reach() {
        let mut table = PredicateTable::new();
        table.insert(
            "Goal".into(),
            Predicate::InsideDisk {
                axes: [0, 1],
                center: [1.0, 1.0],
                radius: 0.5,
            },
        );
        let phi = parse_formula("F[0,1] Goal", &table).unwrap();
        let model = LinearModel::integrator(2);
        let bounds = ControlBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let mut policy = Controller::Recurrent(LstmPolicy::new(2, 8, 2, bounds, &mut rng(50)).unwrap());
        let x0 = vec![0.0, 0.0];
        let before = robustness_classic(&phi, &rollout_model(&x0, &policy, &model, &DropoutMask::Deterministic, 1).unwrap().states, 0).unwrap();
        let opts = ImproveOptions {
            lr: 1e-2,
            max_steps: 600,
            ..ImproveOptions::default()
        };
        let sampler = |_: &mut ChaCha8Rng| vec![0.0, 0.0];
        let out = improve_policy(&mut policy, &model, &phi, 1, &sampler, &opts, &mut rng(51)).unwrap();
        let after = robustness_classic(&phi, &rollout_model(&x0, &policy, &model, &DropoutMask::Deterministic, 1).unwrap().states, 0).unwrap();
        assert!(before < 0.0 && after > 0.0, "{before} -> {after}");
        let w = 50;
        let n = out.trace.len();
        assert!(n >= 2 * w);
        let last: f64 = out.trace[n - w..].iter().map(|r| r.avg_smooth_rho).sum::<f64>() / w as f64;
        let first: f64 = out.trace[..w].iter().map(|r| r.avg_smooth_rho).sum::<f64>() / w as f64;
        assert!(last > first);
        assert!(out.trace_csv().starts_with("step,avg_smooth_rho,avg_classic_rho,grad_norm\n"));
    }

    #[test]
    fn saturated_optimum_has_small_gradient() {
        // the control box allows exactly reaching the goal center only at the corner
        let mut table = PredicateTable::new();
        table.insert(
            "Goal".into(),
            Predicate::Affine {
                coeffs: vec![1.0, 1.0],
                offset: 3.0,
            },
        );
        let phi = parse_formula("F[1,1] Goal", &table).unwrap();
        let model = LinearModel::integrator(2);
        let bounds = ControlBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let mut lstm = LstmPolicy::new(2, 4, 2, bounds, &mut rng(60)).unwrap();
        // drive the output pre-activation deep into saturation at the upper corner
        let n = lstm.params().len();
        lstm.params_mut()[n - 2..].copy_from_slice(&[40.0, 40.0]);
        let policy = Controller::Recurrent(lstm);
        let mut sr = SmoothRobustness::new(&phi, 2, 2, 10.0).unwrap();
        let tg = trajectory_gradient(&[0.0, 0.0], &policy, &model, &DropoutMask::Deterministic, &phi, &mut sr).unwrap();
        assert!(tg.grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-12);
        assert!((tg.classic - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_gradient_checks_agree() {
        let checks = check_gradients(12, &mut rng(77)).unwrap();
        for c in &checks {
            assert!(c.adjoint_vs_unrolled <= 1e-6, "{c:?}");
            assert!(c.unrolled_vs_fd <= 1e-4, "{c:?}");
        }
    }
}
