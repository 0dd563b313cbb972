//! Ground-truth plants standing in for the real system, observation noise,
//! initial-state sampling, region geometry, and the recorded trajectory.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::ControlBox;
use crate::stl::{Predicate, PredicateTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("control {u:?} outside the admissible box")]
    ControlOutOfBox { u: Vec<f64> },
    #[error("state has dimension {got}, plant expects {expected}")]
    StateDimension { expected: usize, got: usize },
    #[error("invalid plant configuration: {0}")]
    Config(String),
    #[error("trajectory csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    /// `[px, py, theta]` driven by `[v, omega]`
    Unicycle,
    /// `[px, py]` driven by `[vx, vy]`
    Integrator,
}

impl PlantKind {
    pub fn state_dim(self) -> usize {
        match self {
            PlantKind::Unicycle => 3,
            PlantKind::Integrator => 2,
        }
    }

    pub fn control_dim(self) -> usize {
        2
    }

    /// State coordinates that are headings, kept in `(-pi, pi]`.
    pub fn angle_dims(self) -> &'static [usize] {
        match self {
            PlantKind::Unicycle => &[2],
            PlantKind::Integrator => &[],
        }
    }
}

/// `a` shifted by a multiple of `2 pi` into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        PI
    } else {
        w
    }
}

pub fn wrap_angles(x: &mut [f64], dims: &[usize]) {
    for &i in dims {
        x[i] = wrap_angle(x[i]);
    }
}

/// One exact unicycle step. The `v/omega` form is replaced by its limit for
/// `|omega| < 1e-6`.
pub fn unicycle_step(x: &[f64], u: &[f64]) -> [f64; 3] {
    let (px, py, th) = (x[0], x[1], x[2]);
    let (v, w) = (u[0], u[1]);
    if w.abs() < 1e-6 {
        // second-order expansion keeps the limit continuous in omega
        let c = th.cos();
        let s = th.sin();
        return [
            px + v * (c - 0.5 * w * s),
            py + v * (s + 0.5 * w * c),
            th + w,
        ];
    }
    let r = v / w;
    [
        px + r * ((th + w).sin() - th.sin()),
        py + r * (th.cos() - (th + w).cos()),
        th + w,
    ]
}

pub fn integrator_step(x: &[f64], u: &[f64]) -> [f64; 2] {
    [x[0] + u[0], x[1] + u[1]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Box { lo: [f64; 2], hi: [f64; 2] },
    Disk { center: [f64; 2], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Target,
    Obstacle,
    /// the robot must stay inside
    SafeInterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    #[serde(flatten)]
    pub shape: Shape,
    pub polarity: Polarity,
}

impl Region {
    pub fn validate(&self) -> Result<(), WorldError> {
        match &self.shape {
            Shape::Box { lo, hi } if lo[0] < hi[0] && lo[1] < hi[1] => Ok(()),
            Shape::Disk { radius, .. } if *radius > 0.0 => Ok(()),
            _ => Err(WorldError::Config(format!("degenerate region {}", self.name))),
        }
    }

    /// The STL predicate "position is inside this region".
    pub fn predicate(&self) -> Predicate {
        match &self.shape {
            Shape::Box { lo, hi } => Predicate::InsideBox {
                axes: [0, 1],
                lo: *lo,
                hi: *hi,
            },
            Shape::Disk { center, radius } => Predicate::InsideDisk {
                axes: [0, 1],
                center: *center,
                radius: *radius,
            },
        }
    }

    /// Signed Euclidean distance from `p` to the boundary, negative inside.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        match &self.shape {
            Shape::Disk { center, radius } => (p[0] - center[0]).hypot(p[1] - center[1]) - radius,
            Shape::Box { lo, hi } => {
                let dx = (lo[0] - p[0]).max(p[0] - hi[0]);
                let dy = (lo[1] - p[1]).max(p[1] - hi[1]);
                if dx <= 0.0 && dy <= 0.0 {
                    dx.max(dy)
                } else {
                    dx.max(0.0).hypot(dy.max(0.0))
                }
            }
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.signed_distance(p) < 0.0
    }
}

/// Distance from the position of `x` to the nearest unsafe area: the
/// boundary of an obstacle (negative inside it) or the boundary of a safe
/// interior (negative outside it). `+inf` when no region is unsafe.
pub fn distance_to_unsafe(x: &[f64], regions: &[Region]) -> f64 {
    let p = [x[0], x[1]];
    regions
        .iter()
        .filter_map(|r| match r.polarity {
            Polarity::Obstacle => Some(r.signed_distance(p)),
            Polarity::SafeInterior => Some(-r.signed_distance(p)),
            Polarity::Target => None,
        })
        .fold(f64::INFINITY, f64::min)
}

/// Adds `w ~ Uniform([-half_width, half_width])` per coordinate.
pub fn observe<R: Rng + ?Sized>(x: &[f64], half_width: &[f64], rng: &mut R) -> Vec<f64> {
    x.iter()
        .zip(half_width)
        .map(|(v, &h)| if h > 0.0 { v + rng.gen_range(-h..=h) } else { *v })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub kind: PlantKind,
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
    /// half-widths of the symmetric observation-noise box
    pub noise: Vec<f64>,
    /// initial position box; a unicycle heading is drawn from (-pi, pi]
    pub x0_lo: [f64; 2],
    pub x0_hi: [f64; 2],
    pub regions: Vec<Region>,
    /// random-control episodes stop once closer than this to the unsafe area
    pub stop_distance: f64,
}

impl PlantConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let m = self.kind.control_dim();
        if self.control_lo.len() != m || self.control_hi.len() != m {
            return Err(WorldError::Config(format!("control box must have {m} entries")));
        }
        if self.noise.len() != self.kind.state_dim() || self.noise.iter().any(|&h| !(h >= 0.0)) {
            return Err(WorldError::Config("noise needs one non-negative half-width per state".into()));
        }
        if self.x0_lo[0] > self.x0_hi[0] || self.x0_lo[1] > self.x0_hi[1] {
            return Err(WorldError::Config("initial box corners out of order".into()));
        }
        ControlBox::new(self.control_lo.clone(), self.control_hi.clone())
            .map_err(|e| WorldError::Config(e.to_string()))?;
        let mut names = std::collections::HashSet::new();
        for r in &self.regions {
            r.validate()?;
            if !names.insert(r.name.as_str()) {
                return Err(WorldError::Config(format!("duplicate region {}", r.name)));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn control_box(&self) -> ControlBox {
        ControlBox {
            lo: self.control_lo.clone(),
            hi: self.control_hi.clone(),
        }
    }

    pub fn predicates(&self) -> PredicateTable {
        self.regions.iter().map(|r| (r.name.clone(), r.predicate())).collect()
    }

    /// The obstacle or safe interior that the barrier protects, if any.
    pub fn unsafe_region(&self) -> Option<&Region> {
        self.regions.iter().find(|r| r.polarity != Polarity::Target)
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, WorldError> {
        if x.len() != self.state_dim() {
            return Err(WorldError::StateDimension {
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        let inside = u.len() == self.control_lo.len()
            && u.iter()
                .zip(&self.control_lo)
                .zip(&self.control_hi)
                .all(|((v, l), h)| l <= v && v <= h);
        if !inside {
            return Err(WorldError::ControlOutOfBox { u: u.to_vec() });
        }
        let mut next = match self.kind {
            PlantKind::Unicycle => unicycle_step(x, u).to_vec(),
            PlantKind::Integrator => integrator_step(x, u).to_vec(),
        };
        wrap_angles(&mut next, self.kind.angle_dims());
        Ok(next)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut x: Vec<f64> = (0..2)
            .map(|i| {
                if self.x0_lo[i] < self.x0_hi[i] {
                    rng.gen_range(self.x0_lo[i]..=self.x0_hi[i])
                } else {
                    self.x0_lo[i]
                }
            })
            .collect();
        if self.kind == PlantKind::Unicycle {
            // (-pi, pi]
            x.push(PI - rng.gen_range(0.0..2.0 * PI));
        }
        x
    }

    pub fn observe<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut y = observe(x, &self.noise, rng);
        wrap_angles(&mut y, self.kind.angle_dims());
        y
    }

    pub fn distance_to_unsafe(&self, x: &[f64]) -> f64 {
        distance_to_unsafe(x, &self.regions)
    }

    pub fn in_unsafe_area(&self, x: &[f64]) -> bool {
        self.distance_to_unsafe(x) < 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Unmodified,
    Adjusted,
    InfeasibleFallback,
}

impl FilterStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterStatus::Unmodified => "unmodified",
            FilterStatus::Adjusted => "adjusted",
            FilterStatus::InfeasibleFallback => "infeasible_fallback",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "unmodified" => Some(FilterStatus::Unmodified),
            "adjusted" => Some(FilterStatus::Adjusted),
            "infeasible_fallback" => Some(FilterStatus::InfeasibleFallback),
            _ => None,
        }
    }
}

/// What the safety filter did at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub raw: Vec<f64>,
    pub slack: f64,
    pub status: FilterStatus,
}

/// One run on a plant. `states` are true states; `observed` are the noisy
/// readings the controller acted on (one per state).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub observed: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub filter: Vec<Option<FilterRecord>>,
    /// step at which the run was stopped for proximity, if it was
    pub stop_index: Option<usize>,
}

impl Trajectory {
    pub fn start(x0: Vec<f64>, y0: Vec<f64>) -> Self {
        Self {
            states: vec![x0],
            observed: vec![y0],
            ..Self::default()
        }
    }

    pub fn push(&mut self, u: Vec<f64>, filter: Option<FilterRecord>, x: Vec<f64>, y: Vec<f64>) {
        self.controls.push(u);
        self.filter.push(filter);
        self.states.push(x);
        self.observed.push(y);
    }

    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    /// Row counts differ by one and the stop index, when set, is the last step.
    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.controls.len() + 1
            && self.observed.len() == self.states.len()
            && self.filter.len() == self.controls.len()
            && self.stop_index.map_or(true, |s| s == self.controls.len())
    }

    pub fn filtered_steps(&self) -> usize {
        self.filter
            .iter()
            .flatten()
            .filter(|r| r.status != FilterStatus::Unmodified)
            .count()
    }

    /// Header `t,px,py[,theta],u1,u2,filtered,stopped` followed by the filter
    /// log columns `raw_u1,raw_u2,slack,status`. The final state row carries
    /// empty control fields.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(2, Vec::len);
        let m = self.controls.first().map_or(2, Vec::len);
        let mut out = String::from("t,px,py");
        if n == 3 {
            out.push_str(",theta");
        }
        for j in 1..=m {
            write!(out, ",u{j}").unwrap();
        }
        out.push_str(",filtered,stopped");
        for j in 1..=m {
            write!(out, ",raw_u{j}").unwrap();
        }
        out.push_str(",slack,status\n");
        for (t, x) in self.states.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for v in x {
                write!(out, ",{v}").unwrap();
            }
            let stopped = self.stop_index == Some(t);
            match self.controls.get(t) {
                Some(u) => {
                    for v in u {
                        write!(out, ",{v}").unwrap();
                    }
                    let rec = self.filter[t].as_ref();
                    let filtered = rec.is_some_and(|r| r.status != FilterStatus::Unmodified);
                    write!(out, ",{},{}", filtered as u8, stopped as u8).unwrap();
                    match rec {
                        Some(r) => {
                            for v in &r.raw {
                                write!(out, ",{v}").unwrap();
                            }
                            write!(out, ",{},{}", r.slack, r.status.as_str()).unwrap();
                        }
                        None => out.push_str(&",".repeat(m + 2)),
                    }
                }
                None => {
                    out.push_str(&",".repeat(m));
                    write!(out, ",0,{}", stopped as u8).unwrap();
                    out.push_str(&",".repeat(m + 2));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`Trajectory::to_csv`]. Observations are not stored in the
    /// file; they are set equal to the states.
    pub fn from_csv(text: &str) -> Result<Self, WorldError> {
        let bad = |msg: String| WorldError::Csv(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
        let n = if header.contains(&"theta") { 3 } else { 2 };
        let m = header.iter().filter(|h| h.starts_with('u') && h[1..].parse::<usize>().is_ok()).count();
        let expected = 1 + n + m + 2 + m + 2;
        if header.len() != expected {
            return Err(bad(format!("expected {expected} columns, header has {}", header.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("not a number: {s:?}")));
        let mut traj = Trajectory::default();
        for (row, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != expected {
                return Err(bad(format!("row {row} has {} fields", f.len())));
            }
            let x = f[1..=n].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
            traj.observed.push(x.clone());
            traj.states.push(x);
            let stopped = f[n + m + 2] == "1";
            if stopped {
                traj.stop_index = Some(row);
            }
            if f[n + 1].is_empty() {
                continue;
            }
            traj.controls.push(f[n + 1..=n + m].iter().map(|s| num(s)).collect::<Result<_, _>>()?);
            let rec = if f[n + m + 3].is_empty() {
                None
            } else {
                Some(FilterRecord {
                    raw: f[n + m + 3..n + 2 * m + 3].iter().map(|s| num(s)).collect::<Result<_, _>>()?,
                    slack: num(f[n + 2 * m + 3])?,
                    status: FilterStatus::parse(f[n + 2 * m + 4])
                        .ok_or_else(|| bad(format!("unknown status {:?}", f[n + 2 * m + 4])))?,
                })
            };
            traj.filter.push(rec);
        }
        if !traj.is_consistent() {
            return Err(bad("inconsistent row counts".into()));
        }
        Ok(traj)
    }
}
