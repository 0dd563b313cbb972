//! Learning the transition model from plant data: random-control collection
//! with proximity stopping, filtered collection under the current policy,
//! dropout-net regression of state differences, and the constant predictive
//! covariance estimated from dropout spread.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{AdamState, Controller, DenseNet, DropoutMask, NetError};
use crate::safety::{SafetyError, SafetyFilter};
use crate::world::{wrap_angles, FilterRecord, PlantConfig, Trajectory, WorldError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error("dataset csv: {0}")]
    Csv(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Predicts `x_{t+1} - x_t` from `(x_t, u_t)` under a dropout mask.
/// Jacobians are row-major: `dx` is `n x n`, `du` is `n x m`.
pub trait DynamicsModel: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn delta(&self, x: &[f64], u: &[f64], mask: &DropoutMask) -> Vec<f64>;
    fn delta_jacobians(&self, x: &[f64], u: &[f64], mask: &DropoutMask) -> (Vec<f64>, Vec<f64>, Vec<f64>);
    fn sample_mask(&self, rng: &mut dyn rand::RngCore) -> DropoutMask;
    /// constant predictive covariance, `n x n` row-major
    fn sigma(&self) -> &[f64];
    /// coordinates that are angles and wrap around
    fn angle_dims(&self) -> &[usize] {
        &[]
    }
}

/// `delta = A x + B u + c` with fixed covariance. Used where the exact model
/// of a linear plant is wanted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub n: usize,
    pub m: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LinearModel {
    /// The single integrator `x + u` as a model.
    pub fn integrator(n: usize) -> Self {
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            b[i * n + i] = 1.0;
        }
        Self {
            n,
            m: n,
            a: vec![0.0; n * n],
            b,
            c: vec![0.0; n],
            sigma: vec![0.0; n * n],
        }
    }
}

impl DynamicsModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn control_dim(&self) -> usize {
        self.m
    }

    fn delta(&self, x: &[f64], u: &[f64], _mask: &DropoutMask) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.c[i]
                    + (0..self.n).map(|j| self.a[i * self.n + j] * x[j]).sum::<f64>()
                    + (0..self.m).map(|j| self.b[i * self.m + j] * u[j]).sum::<f64>()
            })
            .collect()
    }

    fn delta_jacobians(&self, x: &[f64], u: &[f64], mask: &DropoutMask) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (self.delta(x, u, mask), self.a.clone(), self.b.clone())
    }

    fn sample_mask(&self, _rng: &mut dyn rand::RngCore) -> DropoutMask {
        DropoutMask::Deterministic
    }

    fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// Dropout net on standardized inputs: `delta = out_scale * net((z - shift) / scale)`
/// with `z = [x, u]`. The affine normalization is fixed at the first fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedModel {
    pub net: DenseNet,
    pub n: usize,
    pub m: usize,
    pub in_shift: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_scale: Vec<f64>,
    pub sigma: Vec<f64>,
    pub loss_history: Vec<f64>,
    /// heading coordinates; rollouts wrap them into `(-pi, pi]`
    #[serde(default)]
    pub angle_dims: Vec<usize>,
}

impl LearnedModel {
    pub fn new<R: Rng + ?Sized>(n: usize, m: usize, hidden: &[usize], dropout: f64, rng: &mut R) -> Result<Self, NetError> {
        let mut widths = vec![n + m];
        widths.extend_from_slice(hidden);
        widths.push(n);
        Ok(Self {
            net: DenseNet::new(&widths, dropout, rng)?,
            n,
            m,
            in_shift: vec![0.0; n + m],
            in_scale: vec![1.0; n + m],
            out_scale: vec![1.0; n],
            sigma: vec![0.0; n * n],
            loss_history: Vec::new(),
            angle_dims: Vec::new(),
        })
    }

    pub fn is_normalized(&self) -> bool {
        self.in_scale.iter().any(|&s| s != 1.0) || self.in_shift.iter().any(|&s| s != 0.0)
    }

    /// Sets the normalization from dataset statistics (per-column mean and
    /// standard deviation, floored).
    pub fn fit_normalization(&mut self, data: &TransitionDataset) {
        let count = data.len().max(1) as f64;
        let mut mean = vec![0.0; self.n + self.m];
        let mut sq = vec![0.0; self.n + self.m];
        let mut out_sq = vec![0.0; self.n];
        for r in &data.records {
            for (i, v) in r.x.iter().chain(&r.u).enumerate() {
                mean[i] += v / count;
                sq[i] += v * v / count;
            }
            for (i, d) in r.dx.iter().enumerate() {
                out_sq[i] += d * d / count;
            }
        }
        for i in 0..mean.len() {
            self.in_shift[i] = mean[i];
            self.in_scale[i] = (sq[i] - mean[i] * mean[i]).max(0.0).sqrt().max(1e-3);
        }
        for i in 0..self.n {
            self.out_scale[i] = out_sq[i].sqrt().max(1e-3);
        }
    }

    fn normalize(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        x.iter()
            .chain(u)
            .zip(self.in_shift.iter().zip(&self.in_scale))
            .map(|(v, (s, c))| (v - s) / c)
            .collect()
    }
}

impl DynamicsModel for LearnedModel {
    fn angle_dims(&self) -> &[usize] {
        &self.angle_dims
    }

    fn state_dim(&self) -> usize {
        self.n
    }

    fn control_dim(&self) -> usize {
        self.m
    }

    fn delta(&self, x: &[f64], u: &[f64], mask: &DropoutMask) -> Vec<f64> {
        let z = self.normalize(x, u);
        let mut out = self.net.forward(&z, mask).expect("model input dimension");
        out.iter_mut().zip(&self.out_scale).for_each(|(o, s)| *o *= s);
        out
    }

    fn delta_jacobians(&self, x: &[f64], u: &[f64], mask: &DropoutMask) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let z = self.normalize(x, u);
        let (mut out, jac) = self.net.jacobian(&z, mask).expect("model input dimension");
        let (n, m) = (self.n, self.m);
        let mut jx = vec![0.0; n * n];
        let mut ju = vec![0.0; n * m];
        for r in 0..n {
            out[r] *= self.out_scale[r];
            for c in 0..n + m {
                let v = self.out_scale[r] * jac[r * (n + m) + c] / self.in_scale[c];
                if c < n {
                    jx[r * n + c] = v;
                } else {
                    ju[r * m + c - n] = v;
                }
            }
        }
        (out, jx, ju)
    }

    fn sample_mask(&self, rng: &mut dyn rand::RngCore) -> DropoutMask {
        self.net.sample_mask(rng)
    }

    fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// Where a transition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    /// the last transition of a random-control episode that was stopped for proximity
    InitialStopped,
    Cycle(u32),
}

impl Provenance {
    fn tag(self) -> String {
        match self {
            Provenance::Initial => "initial".into(),
            Provenance::InitialStopped => "initial_stopped".into(),
            Provenance::Cycle(c) => format!("cycle{c}"),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "initial" => Some(Provenance::Initial),
            "initial_stopped" => Some(Provenance::InitialStopped),
            _ => s.strip_prefix("cycle")?.parse().ok().map(Provenance::Cycle),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub dx: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub records: Vec<Transition>,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends the observed transitions of `traj`. Differences in the
    /// `angle_dims` coordinates are wrapped into `(-pi, pi]`.
    pub fn add_trajectory(&mut self, traj: &Trajectory, provenance: Provenance, angle_dims: &[usize]) {
        for t in 0..traj.steps() {
            let prov = match provenance {
                Provenance::Initial if traj.stop_index == Some(t + 1) => Provenance::InitialStopped,
                p => p,
            };
            let (a, b) = (&traj.observed[t], &traj.observed[t + 1]);
            let mut dx: Vec<f64> = b.iter().zip(a).map(|(p, q)| p - q).collect();
            wrap_angles(&mut dx, angle_dims);
            self.records.push(Transition {
                x: a.clone(),
                u: traj.controls[t].clone(),
                dx,
                provenance: prov,
            });
        }
    }

    /// Per-column bounds of the `[x, u]` inputs.
    pub fn input_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let first = self.records.first()?;
        let mut lo: Vec<f64> = first.x.iter().chain(&first.u).copied().collect();
        let mut hi = lo.clone();
        for r in &self.records {
            for (i, v) in r.x.iter().chain(&r.u).enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
        Some((lo, hi))
    }

    /// Columns `x1..xn,u1..um,dx1..dxn,provenance`.
    pub fn to_csv(&self) -> String {
        let (n, m) = self.records.first().map_or((0, 0), |r| (r.x.len(), r.u.len()));
        let mut out = String::new();
        let cols: Vec<String> = (1..=n)
            .map(|i| format!("x{i}"))
            .chain((1..=m).map(|i| format!("u{i}")))
            .chain((1..=n).map(|i| format!("dx{i}")))
            .chain(std::iter::once("provenance".to_string()))
            .collect();
        out.push_str(&cols.join(","));
        out.push('\n');
        for r in &self.records {
            for v in r.x.iter().chain(&r.u).chain(&r.dx) {
                write!(out, "{v},").unwrap();
            }
            out.push_str(&r.provenance.tag());
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| ModelError::Csv("empty file".into()))?.split(',').collect();
        let n = header.iter().filter(|h| h.starts_with("x")).count();
        let m = header.iter().filter(|h| h.starts_with('u')).count();
        if header.len() != 2 * n + m + 1 {
            return Err(ModelError::Csv("unexpected header".into()));
        }
        let mut data = TransitionDataset::default();
        for (row, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(ModelError::Csv(format!("row {row} has {} fields", f.len())));
            }
            let v = f[..2 * n + m]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| ModelError::Csv(format!("row {row}: bad number {s:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let provenance = Provenance::parse(f[2 * n + m])
                .ok_or_else(|| ModelError::Csv(format!("row {row}: bad provenance {:?}", f[2 * n + m])))?;
            data.records.push(Transition {
                x: v[..n].to_vec(),
                u: v[n..n + m].to_vec(),
                dx: v[n + m..].to_vec(),
                provenance,
            });
        }
        Ok(data)
    }
}

/// One random-control episode: step, observe, then stop if the new state is
/// within `stop_distance` of the unsafe area (the transition is kept).
pub fn random_episode<R: Rng + ?Sized>(plant: &PlantConfig, horizon: usize, rng: &mut R) -> Result<Trajectory, ModelError> {
    let bounds = plant.control_box();
    let x0 = plant.sample_initial(rng);
    let y0 = plant.observe(&x0, rng);
    let mut traj = Trajectory::start(x0, y0);
    for t in 0..horizon {
        let u = bounds.sample(rng);
        let x = plant.step(traj.states.last().unwrap(), &u)?;
        let y = plant.observe(&x, rng);
        let close = plant.distance_to_unsafe(&x) < plant.stop_distance;
        traj.push(u, None, x, y);
        if close {
            traj.stop_index = Some(t + 1);
            break;
        }
    }
    Ok(traj)
}

/// The initial dataset from `episodes` random-control runs.
pub fn collect_initial<R: Rng + ?Sized>(
    plant: &PlantConfig,
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<(TransitionDataset, Vec<Trajectory>), ModelError> {
    let mut data = TransitionDataset::default();
    let mut runs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let traj = random_episode(plant, horizon, rng)?;
        data.add_trajectory(&traj, Provenance::Initial, plant.kind.angle_dims());
        runs.push(traj);
    }
    Ok((data, runs))
}

/// One closed-loop run on the plant. The policy acts on noisy observations;
/// when a filter is given every control passes through it first.
pub fn policy_episode<R: Rng + ?Sized>(
    plant: &PlantConfig,
    policy: &Controller,
    filter: Option<&SafetyFilter<'_>>,
    horizon: usize,
    x0: Vec<f64>,
    rng: &mut R,
) -> Result<Trajectory, ModelError> {
    let y0 = plant.observe(&x0, rng);
    let mut traj = Trajectory::start(x0, y0);
    let mut hidden = policy.initial_state();
    for _ in 0..horizon {
        let y = traj.observed.last().unwrap();
        let (raw, h) = policy.step(y, &hidden)?;
        hidden = h;
        let (u, rec) = match filter {
            Some(f) => {
                let res = f.safe_control(y, &raw)?;
                let rec = FilterRecord {
                    raw,
                    slack: res.slack,
                    status: res.status,
                };
                (res.u, Some(rec))
            }
            None => (raw, None),
        };
        let x = plant.step(traj.states.last().unwrap(), &u)?;
        let y = plant.observe(&x, rng);
        traj.push(u, rec, x, y);
    }
    Ok(traj)
}

/// `episodes` full-horizon runs (filtered when a filter is given) appended to `data`.
pub fn collect_with_policy<R: Rng + ?Sized>(
    plant: &PlantConfig,
    policy: &Controller,
    filter: Option<&SafetyFilter<'_>>,
    episodes: usize,
    horizon: usize,
    cycle: u32,
    data: &mut TransitionDataset,
    rng: &mut R,
) -> Result<Vec<Trajectory>, ModelError> {
    let mut runs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let x0 = plant.sample_initial(rng);
        let traj = policy_episode(plant, policy, filter, horizon, x0, rng)?;
        data.add_trajectory(&traj, Provenance::Cycle(cycle), plant.kind.angle_dims());
        runs.push(traj);
    }
    Ok(runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Fits `model` to `data` by minibatch Adam on the squared error of the
/// standardized state difference, with a fresh dropout mask per sample.
/// Normalization is fitted on the first call and kept afterwards so that
/// refits warm-start from the current weights. Returns the per-epoch mean
/// training loss (also appended to `model.loss_history`).
pub fn train_model<R: Rng + ?Sized>(
    data: &TransitionDataset,
    model: &mut LearnedModel,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if opts.batch == 0 || opts.epochs == 0 {
        return Err(ModelError::Invalid("epochs and batch must be positive".into()));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(ModelError::Invalid("learning rate must be positive and finite".into()));
    }
    if !model.is_normalized() {
        model.fit_normalization(data);
    }
    let inputs: Vec<Vec<f64>> = data.records.iter().map(|r| model.normalize(&r.x, &r.u)).collect();
    let targets: Vec<Vec<f64>> = data
        .records
        .iter()
        .map(|r| r.dx.iter().zip(&model.out_scale).map(|(d, s)| d / s).collect())
        .collect();
    let mut adam = AdamState::new(model.net.params().len(), opts.lr);
    let mut grads = vec![0.0; model.net.params().len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let mask = model.net.sample_mask(rng);
                let cache = model.net.forward_cached(&inputs[i], &mask)?;
                let resid: Vec<f64> = cache.output.iter().zip(&targets[i]).map(|(p, t)| p - t).collect();
                epoch_loss += resid.iter().map(|r| r * r).sum::<f64>();
                let d: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale).collect();
                model.net.backward(&cache, &d, Some(&mut grads));
            }
            adam.step(model.net.params_mut(), &grads, false)?;
        }
        let loss = epoch_loss / data.len() as f64;
        if !loss.is_finite() {
            return Err(ModelError::Invalid(format!("training loss became {loss}")));
        }
        history.push(loss);
    }
    model.loss_history.extend_from_slice(&history);
    Ok(history)
}

/// Mean over `n_inputs` random inputs of the output covariance across
/// `n_masks` sampled dropout masks, symmetrized. Inputs are drawn uniformly
/// from the box `[lo, hi]` over `[x, u]`.
pub fn estimate_sigma<R: Rng + ?Sized>(
    model: &LearnedModel,
    lo: &[f64],
    hi: &[f64],
    n_inputs: usize,
    n_masks: usize,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    if n_masks < 2 {
        return Err(ModelError::Invalid("need at least two masks".into()));
    }
    let n = model.n;
    let mut sigma = vec![0.0; n * n];
    if n_inputs == 0 {
        return Ok(sigma);
    }
    let mut outs = vec![vec![0.0; n]; n_masks];
    for _ in 0..n_inputs {
        let z: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| if l < h { rng.gen_range(l..=h) } else { l })
            .collect();
        let (x, u) = z.split_at(n);
        for o in outs.iter_mut() {
            let mask = model.net.sample_mask(rng);
            *o = model.delta(x, u, &mask);
        }
        // shifted by the first draw so identical outputs give exactly zero
        let base = outs[0].clone();
        let dev: Vec<Vec<f64>> = outs.iter().map(|o| o.iter().zip(&base).map(|(a, b)| a - b).collect()).collect();
        let mean: Vec<f64> = (0..n).map(|i| dev.iter().map(|d| d[i]).sum::<f64>() / n_masks as f64).collect();
        let denom = ((n_masks - 1) * n_inputs) as f64;
        for i in 0..n {
            for j in 0..n {
                let s: f64 = dev.iter().map(|d| d[i] * d[j]).sum::<f64>() - n_masks as f64 * mean[i] * mean[j];
                sigma[i * n + j] += s / denom;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (sigma[i * n + j] + sigma[j * n + i]);
            sigma[i * n + j] = s;
            sigma[j * n + i] = s;
        }
    }
    Ok(sigma)
}
