//! Discrete-time control barrier filter on the learned model.
//!
//! For a barrier `b` with decay `alpha`, a candidate control `u` at state `x`
//! is admissible when
//!
//! ```text
//! c(u) = b(x + F(x, u)) + (alpha - 1) b(x) - kappa * sigma(u) >= 0
//! ```
//!
//! where `F` is the deterministic (scaled-dropout) model and
//! `sigma(u)^2 = grad b^T Sigma grad b` at the predicted state. The filter
//! returns the admissible control closest to the policy output in a weighted
//! norm, found by sequential quadratic programming.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_learning::DynamicsModel;
use crate::nets::{ControlBox, DropoutMask};
pub use crate::world::FilterStatus;
use crate::world::{Polarity, Region, Shape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid barrier settings: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    /// `|p - c|^2 - r^2`, keeps the position out of a disk
    OutsideDisk,
    /// `r^2 - |p - c|^2`, keeps the position inside a disk
    InsideDisk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub kind: BarrierKind,
    pub center: [f64; 2],
    pub radius: f64,
    /// state coordinates holding the position
    pub axes: [usize; 2],
}

impl BarrierSpec {
    /// Barrier for a disk obstacle or a disk-shaped safe interior.
    pub fn from_region(region: &Region) -> Result<Self, SafetyError> {
        let Shape::Disk { center, radius } = region.shape else {
            return Err(SafetyError::Config(format!("region {} is not a disk", region.name)));
        };
        let kind = match region.polarity {
            Polarity::Obstacle => BarrierKind::OutsideDisk,
            Polarity::SafeInterior => BarrierKind::InsideDisk,
            Polarity::Target => return Err(SafetyError::Config(format!("region {} is a target", region.name))),
        };
        Ok(Self {
            kind,
            center,
            radius,
            axes: [0, 1],
        })
    }

    fn sign(&self) -> f64 {
        match self.kind {
            BarrierKind::OutsideDisk => 1.0,
            BarrierKind::InsideDisk => -1.0,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let dx = x[self.axes[0]] - self.center[0];
        let dy = x[self.axes[1]] - self.center[1];
        self.sign() * (dx * dx + dy * dy - self.radius * self.radius)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for k in 0..2 {
            g[self.axes[k]] = 2.0 * self.sign() * (x[self.axes[k]] - self.center[k]);
        }
        g
    }
}

/// `grad b(x)^T Sigma grad b(x)` with `Sigma` row-major `n x n`.
pub fn error_variance(barrier: &BarrierSpec, sigma: &[f64], x_pred: &[f64]) -> f64 {
    let g = barrier.gradient(x_pred);
    let n = g.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += g[i] * sigma[i * n + j] * g[j];
        }
    }
    s.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbfSettings {
    pub alpha: f64,
    /// multiple of the predicted standard deviation kept as margin
    pub margin: f64,
    /// per-control weights of the deviation norm
    pub weights: Vec<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl CbfSettings {
    pub fn new(alpha: f64, weights: Vec<f64>) -> Self {
        Self {
            alpha,
            margin: 2.0,
            weights,
            max_iter: 10,
            tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SafetyError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(SafetyError::Config("deviation weights must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(SafetyError::Config("margin multiplier must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeControlResult {
    pub u: Vec<f64>,
    /// constraint value at `u`
    pub slack: f64,
    pub iterations: usize,
    pub status: FilterStatus,
}

/// Residual accepted as satisfying the constraint.
const FEASIBILITY_TOL: f64 = 1e-6;
/// The linearized subproblems aim this far inside the constraint.
const TARGET_MARGIN: f64 = 1e-9;

/// Everything needed to filter controls at run time.
pub struct SafetyFilter<'a> {
    pub model: &'a dyn DynamicsModel,
    pub barrier: &'a BarrierSpec,
    pub bounds: &'a ControlBox,
    pub settings: &'a CbfSettings,
}

impl SafetyFilter<'_> {
    /// Constraint value at `u`.
    pub fn constraint(&self, x: &[f64], u: &[f64]) -> f64 {
        let d = self.model.delta(x, u, &DropoutMask::Deterministic);
        let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let var = error_variance(self.barrier, self.model.sigma(), &xp);
        self.barrier.value(&xp) + (self.settings.alpha - 1.0) * self.barrier.value(x) - self.settings.margin * var.sqrt()
    }

    /// Constraint value and gradient with respect to `u`.
    pub fn constraint_with_gradient(&self, x: &[f64], u: &[f64]) -> (f64, Vec<f64>) {
        let n = x.len();
        let m = u.len();
        let (d, _, ju) = self.model.delta_jacobians(x, u, &DropoutMask::Deterministic);
        let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let g = self.barrier.gradient(&xp);
        let sigma = self.model.sigma();
        let q: Vec<f64> = (0..n).map(|i| (0..n).map(|j| sigma[i * n + j] * g[j]).sum()).collect();
        let var: f64 = g.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        let sd = var.sqrt();
        let c = self.barrier.value(&xp) + (self.settings.alpha - 1.0) * self.barrier.value(x) - self.settings.margin * sd;
        // d c / d x_pred; the barrier Hessian is 2 * sign on the position axes
        let mut dc = g;
        if sd > 0.0 {
            let h = 2.0 * self.barrier.sign();
            for &a in &self.barrier.axes {
                dc[a] -= self.settings.margin * h * q[a] / sd;
            }
        }
        let du = (0..m).map(|j| (0..n).map(|i| dc[i] * ju[i * m + j]).sum()).collect();
        (c, du)
    }

    pub fn safe_control(&self, x: &[f64], raw: &[f64]) -> Result<SafeControlResult, SafetyError> {
        let (n, m) = (self.model.state_dim(), self.bounds.dim());
        for (what, expected, got) in [
            ("state", n, x.len()),
            ("control", m, raw.len()),
            ("weights", m, self.settings.weights.len()),
        ] {
            if expected != got {
                return Err(SafetyError::Dimension { what, expected, got });
            }
        }
        let mut r = raw.to_vec();
        self.bounds.clamp(&mut r);
        let (mut c, mut g) = self.constraint_with_gradient(x, &r);
        if c >= 0.0 {
            return Ok(SafeControlResult {
                u: r,
                slack: c,
                iterations: 0,
                status: FilterStatus::Unmodified,
            });
        }
        let mut u = r.clone();
        let mut iterates = Vec::with_capacity(self.settings.max_iter);
        let mut iterations = 0;
        while iterations < self.settings.max_iter {
            iterations += 1;
            // linearization: c + g.(v - u) >= TARGET_MARGIN
            let beta = TARGET_MARGIN - c + g.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
            let v = project_halfspace_box(&r, &self.settings.weights, &self.bounds.lo, &self.bounds.hi, &g, beta);
            let step = v.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            u = v;
            (c, g) = self.constraint_with_gradient(x, &u);
            iterates.push(u.clone());
            if step < self.settings.tol && c >= -FEASIBILITY_TOL {
                break;
            }
        }
        if c >= -FEASIBILITY_TOL {
            return Ok(SafeControlResult {
                u,
                slack: c,
                iterations,
                status: FilterStatus::Adjusted,
            });
        }
        let (u, slack) = self.maximize_constraint(x, &r, &iterates);
        Ok(SafeControlResult {
            u,
            slack,
            iterations,
            status: FilterStatus::InfeasibleFallback,
        })
    }

    /// Best-effort maximizer of the constraint over the control box: a grid
    /// plus the given candidates, refined by projected gradient ascent.
    fn maximize_constraint(&self, x: &[f64], raw: &[f64], extra: &[Vec<f64>]) -> (Vec<f64>, f64) {
        const GRID: usize = 11;
        let m = self.bounds.dim();
        let mut candidates: Vec<Vec<f64>> = vec![raw.to_vec(), self.bounds.center()];
        candidates.extend(extra.iter().cloned());
        let total = GRID.pow(m as u32);
        for idx in 0..total {
            let mut k = idx;
            let mut u = Vec::with_capacity(m);
            for j in 0..m {
                let s = (k % GRID) as f64 / (GRID - 1) as f64;
                k /= GRID;
                u.push(self.bounds.lo[j] + s * (self.bounds.hi[j] - self.bounds.lo[j]));
            }
            candidates.push(u);
        }
        let mut best = candidates[0].clone();
        let mut best_c = f64::NEG_INFINITY;
        for u in candidates {
            let c = self.constraint(x, &u);
            if c > best_c {
                best_c = c;
                best = u;
            }
        }
        let width: f64 = self
            .bounds
            .lo
            .iter()
            .zip(&self.bounds.hi)
            .map(|(l, h)| (h - l).powi(2))
            .sum::<f64>()
            .sqrt();
        let mut step = 0.1 * width;
        for _ in 0..30 {
            let (c, g) = self.constraint_with_gradient(x, &best);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || step < 1e-9 {
                break;
            }
            let mut trial: Vec<f64> = best.iter().zip(&g).map(|(u, d)| u + step * d / norm).collect();
            self.bounds.clamp(&mut trial);
            let ct = self.constraint(x, &trial);
            if ct > c {
                best = trial;
                best_c = ct;
            } else {
                step *= 0.5;
            }
        }
        (best, best_c)
    }
}

/// Minimizes `sum w_i (v_i - r_i)^2` over `lo <= v <= hi`, `a . v >= beta`.
/// `r` must lie in the box. When the halfspace misses the box, returns the
/// box point maximizing `a . v` closest to `r`.
pub fn project_halfspace_box(r: &[f64], w: &[f64], lo: &[f64], hi: &[f64], a: &[f64], beta: f64) -> Vec<f64> {
    let m = r.len();
    let at = |mu: f64| -> Vec<f64> { (0..m).map(|i| (r[i] + mu * a[i] / w[i]).clamp(lo[i], hi[i])).collect() };
    let dot = |v: &[f64]| -> f64 { v.iter().zip(a).map(|(x, y)| x * y).sum() };
    if dot(r) >= beta {
        return r.to_vec();
    }
    // v_i moves from r_i toward the bound in the direction of a_i and stops there
    let mut breaks: Vec<f64> = (0..m)
        .filter(|&i| a[i] != 0.0)
        .map(|i| {
            let bound = if a[i] > 0.0 { hi[i] } else { lo[i] };
            ((bound - r[i]) * w[i] / a[i]).max(0.0)
        })
        .collect();
    breaks.sort_by(f64::total_cmp);
    let mut mu0 = 0.0;
    let mut phi0 = dot(r);
    for &mu1 in &breaks {
        let phi1 = dot(&at(mu1));
        if phi1 >= beta {
            let t = if phi1 > phi0 { (beta - phi0) / (phi1 - phi0) } else { 1.0 };
            return at(mu0 + t * (mu1 - mu0));
        }
        mu0 = mu1;
        phi0 = phi1;
    }
    at(mu0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_learning::LinearModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obstacle() -> BarrierSpec {
        BarrierSpec {
            kind: BarrierKind::OutsideDisk,
            center: [3.0, 3.0],
            radius: 1.0,
            axes: [0, 1],
        }
    }

    #[test]
    fn barrier_values() {
        let b = obstacle();
        assert_eq!(b.value(&[3.0, 3.0]), -1.0);
        assert!(b.value(&[4.0, 3.0]).abs() < 1e-15);
        let s = BarrierSpec {
            kind: BarrierKind::InsideDisk,
            center: [0.0, 0.0],
            radius: 2.0,
            axes: [0, 1],
        };
        assert_eq!(s.value(&[0.0, 0.0]), 4.0);
        assert_eq!(b.gradient(&[3.0, 3.0, 0.5]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn variance_closed_form() {
        let b = obstacle();
        let zero = vec![0.0; 9];
        assert_eq!(error_variance(&b, &zero, &[1.0, 2.0, 0.0]), 0.0);
        let s0 = 0.04;
        let sigma = vec![s0, 0.0, 0.0, 0.0, s0, 0.0, 0.0, 0.0, 0.3];
        let x = [1.5, 2.25, 0.7];
        let expected = 4.0 * s0 * ((1.5f64 - 3.0).powi(2) + (2.25f64 - 3.0).powi(2));
        assert!((error_variance(&b, &sigma, &x) - expected).abs() < 1e-14);
        assert_eq!(error_variance(&b, &sigma, &[3.0, 3.0, 1.0]), 0.0);
    }

    #[test]
    fn projection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let lo = [-1.0, -2.0];
            let hi = [1.0, 0.5];
            let r = [rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..0.5)];
            let w = [rng.gen_range(0.01..2.0), rng.gen_range(0.01..2.0)];
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let beta = rng.gen_range(-1.0..1.5);
            let v = project_halfspace_box(&r, &w, &lo, &hi, &a, beta);
            let cost = |v: &[f64]| w[0] * (v[0] - r[0]).powi(2) + w[1] * (v[1] - r[1]).powi(2);
            let feasible_max = a[0] * if a[0] > 0.0 { hi[0] } else { lo[0] } + a[1] * if a[1] > 0.0 { hi[1] } else { lo[1] };
            assert!(v[0] >= lo[0] && v[0] <= hi[0] && v[1] >= lo[1] && v[1] <= hi[1]);
            if feasible_max < beta {
                continue;
            }
            assert!(a[0] * v[0] + a[1] * v[1] >= beta - 1e-9);
            let mut best = f64::INFINITY;
            for i in 0..=400 {
                for j in 0..=400 {
                    let p = [lo[0] + (hi[0] - lo[0]) * i as f64 / 400.0, lo[1] + (hi[1] - lo[1]) * j as f64 / 400.0];
                    if a[0] * p[0] + a[1] * p[1] >= beta {
                        best = best.min(cost(&p));
                    }
                }
            }
            assert!(cost(&v) <= best + 1e-9, "{} vs {best}", cost(&v));
        }
    }

    fn filter_parts(alpha: f64) -> (LinearModel, BarrierSpec, ControlBox, CbfSettings) {
        (
            LinearModel::integrator(2),
            obstacle(),
            ControlBox::new(vec![-0.5, -0.5], vec![0.5, 0.5]).unwrap(),
            CbfSettings::new(alpha, vec![1.0, 1.0]),
        )
    }

    #[test]
    fn inactive_constraint_passes_through() {
        let (model, barrier, bounds, settings) = filter_parts(0.7);
        let f = SafetyFilter {
            model: &model,
            barrier: &barrier,
            bounds: &bounds,
            settings: &settings,
        };
        let res = f.safe_control(&[0.0, 0.0], &[0.3, -0.2]).unwrap();
        assert_eq!(res.status, FilterStatus::Unmodified);
        assert_eq!(res.u, vec![0.3, -0.2]);
        assert!(res.slack > 0.0);
    }

    #[test]
    fn head_on_approach_is_deflected() {
        let (mut model, barrier, bounds, settings) = filter_parts(1.0);
        model.sigma = vec![0.01, 0.0, 0.0, 0.01];
        let f = SafetyFilter {
            model: &model,
            barrier: &barrier,
            bounds: &bounds,
            settings: &settings,
        };
        let x = [1.6, 3.0];
        let res = f.safe_control(&x, &[0.5, 0.0]).unwrap();
        assert_eq!(res.status, FilterStatus::Adjusted);
        assert!(bounds.contains(&res.u));
        let xp = [x[0] + res.u[0], x[1] + res.u[1]];
        let sd = error_variance(&barrier, &model.sigma, &xp).sqrt();
        assert!(barrier.value(&xp) - 2.0 * sd >= -1e-6);
        assert!((f.constraint(&x, &res.u) - res.slack).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut model, barrier, bounds, settings) = filter_parts(0.7);
        model.sigma = vec![0.02, 0.005, 0.005, 0.03];
        let f = SafetyFilter {
            model: &model,
            barrier: &barrier,
            bounds: &bounds,
            settings: &settings,
        };
        let x = [1.7, 2.6];
        let u = [0.3, 0.1];
        let (_, g) = f.constraint_with_gradient(&x, &u);
        for j in 0..2 {
            let mut p = u;
            p[j] += 1e-6;
            let mut q = u;
            q[j] -= 1e-6;
            let fd = (f.constraint(&x, &p) - f.constraint(&x, &q)) / 2e-6;
            assert!((g[j] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn infeasible_state_falls_back_inside_box() {
        let (model, barrier, bounds, settings) = filter_parts(1.0);
        let f = SafetyFilter {
            model: &model,
            barrier: &barrier,
            bounds: &bounds,
            settings: &settings,
        };
        // deep inside the obstacle, no control reaches b >= 0 in one step
        let res = f.safe_control(&[3.0, 3.0], &[0.1, 0.1]).unwrap();
        assert_eq!(res.status, FilterStatus::InfeasibleFallback);
        assert!(bounds.contains(&res.u));
        // maximizing |p - c| moves to a corner of the control box
        assert!((res.u[0].abs() - 0.5).abs() < 1e-6 && (res.u[1].abs() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn larger_covariance_is_more_conservative() {
        let (mut model, barrier, bounds, settings) = filter_parts(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0)];
            let u = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            model.sigma = vec![0.02, 0.0, 0.0, 0.02];
            let c1 = SafetyFilter {
                model: &model,
                barrier: &barrier,
                bounds: &bounds,
                settings: &settings,
            }
            .constraint(&x, &u);
            model.sigma = vec![0.06, 0.0, 0.0, 0.06];
            let c2 = SafetyFilter {
                model: &model,
                barrier: &barrier,
                bounds: &bounds,
                settings: &settings,
            }
            .constraint(&x, &u);
            assert!(c2 <= c1);
        }
    }

    #[test]
    fn exact_model_keeps_barrier_decay() {
        let alpha = 0.7;
        let (model, barrier, bounds, settings) = filter_parts(alpha);
        let f = SafetyFilter {
            model: &model,
            barrier: &barrier,
            bounds: &bounds,
            settings: &settings,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut x = vec![rng.gen_range(0.0..1.5), rng.gen_range(0.0..1.5)];
            let b0 = barrier.value(&x);
            for t in 1..=20 {
                // a raw policy heading for the obstacle center
                let d = [3.0 - x[0], 3.0 - x[1]];
                let raw = [d[0].clamp(-0.5, 0.5), d[1].clamp(-0.5, 0.5)];
                let res = f.safe_control(&x, &raw).unwrap();
                assert_ne!(res.status, FilterStatus::InfeasibleFallback);
                x = vec![x[0] + res.u[0], x[1] + res.u[1]];
                assert!(barrier.value(&x) >= (1.0 - alpha).powi(t) * b0 - 1e-9);
            }
        }
    }

    #[test]
    fn settings_validation() {
        assert!(CbfSettings::new(1.5, vec![1.0]).validate().is_err());
        assert!(CbfSettings::new(0.5, vec![0.0]).validate().is_err());
        assert!(CbfSettings::new(0.7, vec![1.0, 0.01]).validate().is_ok());
    }
}
