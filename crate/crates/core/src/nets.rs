//! Network building blocks: the dropout feedforward net used as the dynamics
//! model, the recurrent (LSTM) policy with a box-squashed output, a
//! feedforward policy for ablations, and Adam.
//!
//! All parameters live in one flat `Vec<f64>` per network (weights row-major,
//! `out x in`, followed by the bias), so optimizers and checkpoints only see
//! slices. Gradients are written by hand; the `policy_opt` oracle re-derives
//! them independently on a [`Tape`](crate::diffgraph::Tape).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid network configuration: {0}")]
    Config(String),
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), NetError> {
    if expected == got {
        Ok(())
    } else {
        Err(NetError::Dimension { what, expected, got })
    }
}

/// `out = W x + b` with `W` row-major `rows x cols` stored at `w`, `b` right after.
#[inline]
fn affine(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    let (weights, bias) = w.split_at(rows * cols);
    for r in 0..rows {
        let row = &weights[r * cols..(r + 1) * cols];
        out[r] = bias[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates `dW += dy x^T`, `db += dy` and returns... nothing; `dx` gets `W^T dy` added.
#[inline]
fn affine_backward(
    w: &[f64],
    rows: usize,
    cols: usize,
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: Option<&mut [f64]>,
) {
    let weights = &w[..rows * cols];
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &weights[r * cols..(r + 1) * cols];
        for (d, a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
    if let Some(dw) = dw {
        let (gw, gb) = dw.split_at_mut(rows * cols);
        for r in 0..rows {
            let g = dy[r];
            if g == 0.0 {
                continue;
            }
            for (d, v) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *d += g * v;
            }
            gb[r] += g;
        }
    }
}

fn uniform_init<R: Rng + ?Sized>(buf: &mut [f64], fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for w in buf {
        *w = rng.gen_range(-bound..bound);
    }
}

/// Dropout masks for the hidden layers of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DropoutMask {
    /// All units active; hidden outputs scaled by `1 - p`.
    Deterministic,
    /// One keep-flag per hidden unit.
    Sampled(Vec<Vec<bool>>),
}

impl DropoutMask {
    /// Each unit is kept independently with probability `1 - p`.
    pub fn sample<R: Rng + ?Sized>(hidden_widths: &[usize], p: f64, rng: &mut R) -> Self {
        DropoutMask::Sampled(
            hidden_widths
                .iter()
                .map(|&w| (0..w).map(|_| rng.gen::<f64>() >= p).collect())
                .collect(),
        )
    }

    pub fn all_active(hidden_widths: &[usize]) -> Self {
        DropoutMask::Sampled(hidden_widths.iter().map(|&w| vec![true; w]).collect())
    }

    pub fn active_fraction(&self) -> f64 {
        match self {
            DropoutMask::Deterministic => 1.0,
            DropoutMask::Sampled(layers) => {
                let total: usize = layers.iter().map(Vec::len).sum();
                let on: usize = layers.iter().flatten().filter(|&&b| b).count();
                on as f64 / total.max(1) as f64
            }
        }
    }

    fn factors(&self, layer: usize, width: usize, p: f64, out: &mut Vec<f64>) -> Result<(), NetError> {
        out.clear();
        match self {
            DropoutMask::Deterministic => out.resize(width, 1.0 - p),
            DropoutMask::Sampled(layers) => {
                let keep = layers.get(layer).ok_or(NetError::Dimension {
                    what: "dropout mask layers",
                    expected: layer + 1,
                    got: layers.len(),
                })?;
                check_dim("dropout mask width", width, keep.len())?;
                out.extend(keep.iter().map(|&k| if k { 1.0 } else { 0.0 }));
            }
        }
        Ok(())
    }
}

/// Fully connected net with tanh hidden layers, dropout after every hidden
/// activation, and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    widths: Vec<usize>,
    dropout: f64,
    params: Vec<f64>,
}

/// Intermediate values of one [`DenseNet`] forward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Vec<f64>,
    /// tanh activations per hidden layer (before dropout)
    activations: Vec<Vec<f64>>,
    /// dropout multipliers per hidden layer
    factors: Vec<Vec<f64>>,
    /// masked activations, the inputs of the next layer
    outputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl DenseNet {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], dropout: f64, rng: &mut R) -> Result<Self, NetError> {
        let mut net = Self::zeros(widths, dropout)?;
        let mut off = 0;
        for l in 0..widths.len() - 1 {
            let (cols, rows) = (widths[l], widths[l + 1]);
            uniform_init(&mut net.params[off..off + rows * cols + rows], cols, rng);
            off += rows * cols + rows;
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], dropout: f64) -> Result<Self, NetError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NetError::Config(format!("bad layer widths {widths:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(NetError::Config(format!("dropout probability {dropout} not in [0, 1)")));
        }
        let n = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            dropout,
            params: vec![0.0; n],
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> DropoutMask {
        DropoutMask::sample(self.hidden_widths(), self.dropout, rng)
    }

    /// Offsets of `(weights, rows, cols)` for every layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.widths.windows(2).scan(0usize, |off, w| {
            let start = *off;
            *off += w[0] * w[1] + w[1];
            Some((start, w[1], w[0]))
        })
    }

    pub fn forward(&self, input: &[f64], mask: &DropoutMask) -> Result<Vec<f64>, NetError> {
        Ok(self.forward_cached(input, mask)?.output)
    }

    pub fn forward_cached(&self, input: &[f64], mask: &DropoutMask) -> Result<DenseCache, NetError> {
        check_dim("network input", self.input_dim(), input.len())?;
        let depth = self.widths.len() - 1;
        let mut cache = DenseCache {
            input: input.to_vec(),
            activations: Vec::with_capacity(depth - 1),
            factors: Vec::with_capacity(depth - 1),
            outputs: Vec::with_capacity(depth - 1),
            output: Vec::new(),
        };
        for (l, (off, rows, cols)) in self.layers().enumerate() {
            let x = if l == 0 { &cache.input } else { &cache.outputs[l - 1] };
            let mut z = vec![0.0; rows];
            affine(&self.params[off..], rows, cols, x, &mut z);
            if l + 1 == depth {
                cache.output = z;
            } else {
                z.iter_mut().for_each(|v| *v = v.tanh());
                let mut f = Vec::with_capacity(rows);
                mask.factors(l, rows, self.dropout, &mut f)?;
                let out = z.iter().zip(&f).map(|(a, b)| a * b).collect();
                cache.activations.push(z);
                cache.factors.push(f);
                cache.outputs.push(out);
            }
        }
        Ok(cache)
    }

    /// Reverse pass. Returns `d input`; parameter gradients are added to
    /// `grads` when given.
    pub fn backward(&self, cache: &DenseCache, d_out: &[f64], mut grads: Option<&mut [f64]>) -> Vec<f64> {
        let layers: Vec<_> = self.layers().collect();
        let mut dy = d_out.to_vec();
        for l in (0..layers.len()).rev() {
            let (off, rows, cols) = layers[l];
            let x = if l == 0 { &cache.input } else { &cache.outputs[l - 1] };
            let mut dx = vec![0.0; cols];
            let dw = grads.as_deref_mut().map(|g| &mut g[off..off + rows * cols + rows]);
            affine_backward(&self.params[off..], rows, cols, x, &dy, &mut dx, dw);
            if l > 0 {
                // through dropout and tanh of the previous hidden layer
                let a = &cache.activations[l - 1];
                let f = &cache.factors[l - 1];
                for j in 0..cols {
                    dx[j] *= f[j] * (1.0 - a[j] * a[j]);
                }
            }
            dy = dx;
        }
        dy
    }

    /// Output and Jacobian `d out / d input` (row-major, `out x in`).
    pub fn jacobian(&self, input: &[f64], mask: &DropoutMask) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        let cache = self.forward_cached(input, mask)?;
        let (n_out, n_in) = (self.output_dim(), self.input_dim());
        let mut jac = Vec::with_capacity(n_out * n_in);
        let mut e = vec![0.0; n_out];
        for r in 0..n_out {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[r] = 1.0;
            jac.extend(self.backward(&cache, &e, None));
        }
        Ok((cache.output, jac))
    }
}

/// Per-dimension control bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ControlBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, NetError> {
        check_dim("control box", lo.len(), hi.len())?;
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(NetError::Config(format!("control box lo {lo:?} exceeds hi {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim() && u.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| l <= v && v <= h)
    }

    pub fn clamp(&self, u: &mut [f64]) {
        for ((v, l), h) in u.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l < h { rng.gen_range(l..=h) } else { l })
            .collect()
    }

    /// `lo + (hi - lo) (tanh z + 1) / 2` and its derivative per dimension.
    pub fn squash(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut u = Vec::with_capacity(z.len());
        let mut du = Vec::with_capacity(z.len());
        for ((zi, l), h) in z.iter().zip(&self.lo).zip(&self.hi) {
            let t = zi.tanh();
            u.push((l + (h - l) * (t + 1.0) * 0.5).clamp(*l, *h));
            du.push((h - l) * 0.5 * (1.0 - t * t));
        }
        (u, du)
    }
}

/// Two-or-more-layer LSTM followed by one affine map and the box squash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmPolicy {
    input_dim: usize,
    hidden: usize,
    layers: usize,
    bounds: ControlBox,
    params: Vec<f64>,
}

/// Cached values of a single LSTM layer at one step.
#[derive(Debug, Clone)]
struct LstmLayerCache {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// activated gates, i | f | g | o
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    layers: Vec<LstmLayerCache>,
    squash_grad: Vec<f64>,
}

impl LstmPolicy {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        layers: usize,
        bounds: ControlBox,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let mut p = Self::zeros(input_dim, hidden, layers, bounds)?;
        let h = hidden;
        for l in 0..layers {
            let in_l = p.layer_input(l);
            let (off, _) = p.layer_offset(l);
            let len = 4 * h * (in_l + h) + 4 * h;
            uniform_init(&mut p.params[off..off + len], in_l + h, rng);
            // forget gate bias
            let b = off + 4 * h * (in_l + h);
            p.params[b + h..b + 2 * h].iter_mut().for_each(|v| *v = 1.0);
        }
        let off = p.output_offset();
        let m = p.bounds.dim();
        uniform_init(&mut p.params[off..off + m * h + m], h, rng);
        Ok(p)
    }

    pub fn zeros(input_dim: usize, hidden: usize, layers: usize, bounds: ControlBox) -> Result<Self, NetError> {
        if input_dim == 0 || hidden == 0 || layers == 0 || bounds.dim() == 0 {
            return Err(NetError::Config("LSTM sizes must be positive".into()));
        }
        let mut n = 0;
        for l in 0..layers {
            let in_l = if l == 0 { input_dim } else { hidden };
            n += 4 * hidden * (in_l + hidden) + 4 * hidden;
        }
        n += bounds.dim() * hidden + bounds.dim();
        Ok(Self {
            input_dim,
            hidden,
            layers,
            bounds,
            params: vec![0.0; n],
        })
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    /// Start of layer `l` parameters and the offset of its `W_hh` block.
    fn layer_offset(&self, l: usize) -> (usize, usize) {
        let h = self.hidden;
        let mut off = 0;
        for k in 0..l {
            off += 4 * h * (self.layer_input(k) + h) + 4 * h;
        }
        (off, off + 4 * h * self.layer_input(l))
    }

    fn output_offset(&self) -> usize {
        self.layer_offset(self.layers).0
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn bounds(&self) -> &ControlBox {
        &self.bounds
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Hidden state layout: `[h_0, c_0, h_1, c_1, ...]`, each of width `hidden`.
    pub fn state_len(&self) -> usize {
        2 * self.layers * self.hidden
    }

    /// Splits the parameter vector into named blocks:
    /// per layer `(W_ih, W_hh, b)` then `(W_out, b_out)`.
    pub fn blocks(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let h = self.hidden;
        let mut out = Vec::new();
        for l in 0..self.layers {
            let (off, whh) = self.layer_offset(l);
            out.push(("w_ih", off, 4 * h, self.layer_input(l)));
            out.push(("w_hh", whh, 4 * h, h));
            out.push(("b", whh + 4 * h * h, 4 * h, 1));
        }
        let o = self.output_offset();
        let m = self.bounds.dim();
        out.push(("w_out", o, m, h));
        out.push(("b_out", o + m * h, m, 1));
        out
    }

    pub fn step_cached(&self, x: &[f64], state: &[f64]) -> Result<(Vec<f64>, Vec<f64>, LstmStepCache), NetError> {
        check_dim("policy input", self.input_dim, x.len())?;
        check_dim("policy hidden state", self.state_len(), state.len())?;
        let h = self.hidden;
        let mut next = vec![0.0; self.state_len()];
        let mut caches = Vec::with_capacity(self.layers);
        let mut input = x.to_vec();
        let mut pre = vec![0.0; 4 * h];
        for l in 0..self.layers {
            let in_l = self.layer_input(l);
            let (off, whh) = self.layer_offset(l);
            let h_prev = &state[2 * l * h..(2 * l + 1) * h];
            let c_prev = &state[(2 * l + 1) * h..(2 * l + 2) * h];
            let w_ih = &self.params[off..whh];
            let w_hh = &self.params[whh..whh + 4 * h * h];
            let bias = &self.params[whh + 4 * h * h..whh + 4 * h * h + 4 * h];
            for r in 0..4 * h {
                let a: f64 = w_ih[r * in_l..(r + 1) * in_l].iter().zip(&input).map(|(w, v)| w * v).sum();
                let b: f64 = w_hh[r * h..(r + 1) * h].iter().zip(h_prev).map(|(w, v)| w * v).sum();
                pre[r] = a + b + bias[r];
            }
            let mut gates = vec![0.0; 4 * h];
            for j in 0..h {
                gates[j] = sigmoid(pre[j]);
                gates[h + j] = sigmoid(pre[h + j]);
                gates[2 * h + j] = pre[2 * h + j].tanh();
                gates[3 * h + j] = sigmoid(pre[3 * h + j]);
            }
            let mut tanh_c = vec![0.0; h];
            for j in 0..h {
                let c = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
                next[(2 * l + 1) * h + j] = c;
                tanh_c[j] = c.tanh();
                next[2 * l * h + j] = gates[3 * h + j] * tanh_c[j];
            }
            let out = next[2 * l * h..(2 * l + 1) * h].to_vec();
            caches.push(LstmLayerCache {
                input: std::mem::replace(&mut input, out),
                h_prev: h_prev.to_vec(),
                c_prev: c_prev.to_vec(),
                gates,
                tanh_c,
            });
        }
        let m = self.bounds.dim();
        let mut z = vec![0.0; m];
        affine(&self.params[self.output_offset()..], m, h, &input, &mut z);
        let (u, squash_grad) = self.bounds.squash(&z);
        Ok((
            u,
            next,
            LstmStepCache {
                layers: caches,
                squash_grad,
            },
        ))
    }

    /// Back-propagates one step. `du` is the cotangent of the control,
    /// `d_state` that of the returned hidden state. Returns `(dx, d_state_prev)`.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache,
        du: &[f64],
        d_state: &[f64],
        mut dparams: Option<&mut [f64]>,
    ) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let m = self.bounds.dim();
        let dz: Vec<f64> = du.iter().zip(&cache.squash_grad).map(|(a, b)| a * b).collect();
        let top = &cache.layers[self.layers - 1];
        // h of top layer = o * tanh(c)
        let h_top: Vec<f64> = (0..h).map(|j| top.gates[3 * h + j] * top.tanh_c[j]).collect();
        let mut dh = d_state[2 * (self.layers - 1) * h..(2 * self.layers - 1) * h].to_vec();
        let oo = self.output_offset();
        affine_backward(
            &self.params[oo..],
            m,
            h,
            &h_top,
            &dz,
            &mut dh,
            dparams.as_deref_mut().map(|g| &mut g[oo..oo + m * h + m]),
        );
        let mut d_prev = vec![0.0; self.state_len()];
        let mut dx = Vec::new();
        for l in (0..self.layers).rev() {
            let lc = &cache.layers[l];
            let in_l = self.layer_input(l);
            let (off, whh) = self.layer_offset(l);
            let mut dc = d_state[(2 * l + 1) * h..(2 * l + 2) * h].to_vec();
            let mut da = vec![0.0; 4 * h];
            for j in 0..h {
                let (i, f, g, o) = (lc.gates[j], lc.gates[h + j], lc.gates[2 * h + j], lc.gates[3 * h + j]);
                let tc = lc.tanh_c[j];
                let d_o = dh[j] * tc;
                dc[j] += dh[j] * o * (1.0 - tc * tc);
                da[j] = dc[j] * g * i * (1.0 - i);
                da[h + j] = dc[j] * lc.c_prev[j] * f * (1.0 - f);
                da[2 * h + j] = dc[j] * i * (1.0 - g * g);
                da[3 * h + j] = d_o * o * (1.0 - o);
                d_prev[(2 * l + 1) * h + j] = dc[j] * f;
            }
            let mut d_in = vec![0.0; in_l];
            let mut d_hprev = vec![0.0; h];
            let w_ih = &self.params[off..whh];
            let w_hh = &self.params[whh..whh + 4 * h * h];
            for r in 0..4 * h {
                let g = da[r];
                if g == 0.0 {
                    continue;
                }
                for (d, w) in d_in.iter_mut().zip(&w_ih[r * in_l..(r + 1) * in_l]) {
                    *d += g * w;
                }
                for (d, w) in d_hprev.iter_mut().zip(&w_hh[r * h..(r + 1) * h]) {
                    *d += g * w;
                }
            }
            if let Some(gp) = dparams.as_deref_mut() {
                for r in 0..4 * h {
                    let g = da[r];
                    if g == 0.0 {
                        continue;
                    }
                    for (d, v) in gp[off + r * in_l..off + (r + 1) * in_l].iter_mut().zip(&lc.input) {
                        *d += g * v;
                    }
                    for (d, v) in gp[whh + r * h..whh + (r + 1) * h].iter_mut().zip(&lc.h_prev) {
                        *d += g * v;
                    }
                    gp[whh + 4 * h * h + r] += g;
                }
            }
            d_prev[2 * l * h..(2 * l + 1) * h].copy_from_slice(&d_hprev);
            if l > 0 {
                // input of layer l is h of layer l-1 at this step
                dh = d_state[2 * (l - 1) * h..(2 * l - 1) * h].to_vec();
                for (a, b) in dh.iter_mut().zip(&d_in) {
                    *a += b;
                }
            } else {
                dx = d_in;
            }
        }
        (dx, d_prev)
    }
}

/// Memoryless policy: a [`DenseNet`] (no dropout) followed by the box squash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardPolicy {
    net: DenseNet,
    bounds: ControlBox,
}

#[derive(Debug, Clone)]
pub struct FeedforwardStepCache {
    dense: DenseCache,
    squash_grad: Vec<f64>,
}

impl FeedforwardPolicy {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], bounds: ControlBox, rng: &mut R) -> Result<Self, NetError> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(bounds.dim());
        Ok(Self {
            net: DenseNet::new(&widths, 0.0, rng)?,
            bounds,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn bounds(&self) -> &ControlBox {
        &self.bounds
    }
}

/// A policy network, recurrent or memoryless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    Recurrent(LstmPolicy),
    Feedforward(FeedforwardPolicy),
}

#[derive(Debug, Clone)]
pub enum PolicyStepCache {
    Recurrent(LstmStepCache),
    Feedforward(FeedforwardStepCache),
}

impl Controller {
    pub fn bounds(&self) -> &ControlBox {
        match self {
            Controller::Recurrent(p) => &p.bounds,
            Controller::Feedforward(p) => &p.bounds,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Controller::Recurrent(p) => p.input_dim,
            Controller::Feedforward(p) => p.net.input_dim(),
        }
    }

    pub fn control_dim(&self) -> usize {
        self.bounds().dim()
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Controller::Recurrent(p) => &p.params,
            Controller::Feedforward(p) => &p.net.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Controller::Recurrent(p) => &mut p.params,
            Controller::Feedforward(p) => &mut p.net.params,
        }
    }

    pub fn state_len(&self) -> usize {
        match self {
            Controller::Recurrent(p) => p.state_len(),
            Controller::Feedforward(_) => 0,
        }
    }

    /// The zero hidden state `h_{-1}`.
    pub fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.state_len()]
    }

    /// One control step: `(u_t, h_t)` from `(x_t, h_{t-1})`.
    pub fn step(&self, x: &[f64], state: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        let (u, h, _) = self.step_cached(x, state)?;
        Ok((u, h))
    }

    pub fn step_cached(&self, x: &[f64], state: &[f64]) -> Result<(Vec<f64>, Vec<f64>, PolicyStepCache), NetError> {
        match self {
            Controller::Recurrent(p) => {
                let (u, h, c) = p.step_cached(x, state)?;
                Ok((u, h, PolicyStepCache::Recurrent(c)))
            }
            Controller::Feedforward(p) => {
                check_dim("policy hidden state", 0, state.len())?;
                let dense = p.net.forward_cached(x, &DropoutMask::Deterministic)?;
                let (u, squash_grad) = p.bounds.squash(&dense.output);
                Ok((u, Vec::new(), PolicyStepCache::Feedforward(FeedforwardStepCache { dense, squash_grad })))
            }
        }
    }

    /// Vector-Jacobian product of one step; see [`LstmPolicy::step_backward`].
    pub fn step_backward(
        &self,
        cache: &PolicyStepCache,
        du: &[f64],
        d_state: &[f64],
        dparams: Option<&mut [f64]>,
    ) -> (Vec<f64>, Vec<f64>) {
        match (self, cache) {
            (Controller::Recurrent(p), PolicyStepCache::Recurrent(c)) => p.step_backward(c, du, d_state, dparams),
            (Controller::Feedforward(p), PolicyStepCache::Feedforward(c)) => {
                let dz: Vec<f64> = du.iter().zip(&c.squash_grad).map(|(a, b)| a * b).collect();
                (p.net.backward(&c.dense, &dz, dparams), Vec::new())
            }
            _ => panic!("policy cache does not match the policy kind"),
        }
    }
}

/// Adam moments and hyperparameters for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update. With `maximize` the gradient is
    /// treated as an ascent direction.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], maximize: bool) -> Result<(), NetError> {
        check_dim("adam params", self.m.len(), params.len())?;
        check_dim("adam grads", self.m.len(), grads.len())?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let sign = if maximize { -1.0 } else { 1.0 };
        for i in 0..params.len() {
            let g = sign * grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_network_outputs_bias() {
        let mut net = DenseNet::zeros(&[5, 32, 32, 3], 0.1).unwrap();
        let out = net.forward(&[1.0, 2.0, 3.0, 0.5, -0.5], &DropoutMask::Deterministic).unwrap();
        assert_eq!(out, vec![0.0; 3]);
        let n = net.params().len();
        net.params_mut()[n - 3..].copy_from_slice(&[0.1, 0.2, 0.3]);
        let out = net.forward(&[1.0, 2.0, 3.0, 0.5, -0.5], &DropoutMask::Deterministic).unwrap();
        assert_eq!(out, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn mask_sampling() {
        let m = DropoutMask::sample(&[32, 32], 0.0, &mut rng(1));
        assert_eq!(m, DropoutMask::all_active(&[32, 32]));
        let m = DropoutMask::sample(&[10_000], 0.1, &mut rng(2));
        assert!((m.active_fraction() - 0.9).abs() < 0.01);
        assert_eq!(DropoutMask::sample(&[8, 8], 0.3, &mut rng(5)), DropoutMask::sample(&[8, 8], 0.3, &mut rng(5)));
    }

    #[test]
    fn no_dropout_sampled_equals_deterministic() {
        let net = DenseNet::new(&[4, 16, 16, 2], 0.0, &mut rng(3)).unwrap();
        let x = [0.3, -0.2, 1.0, 0.7];
        let m = net.sample_mask(&mut rng(4));
        assert_eq!(net.forward(&x, &m).unwrap(), net.forward(&x, &DropoutMask::Deterministic).unwrap());
    }

    #[test]
    fn dropout_expectation_single_hidden_layer() {
        // one hidden layer; with a linear activation the identity is exact,
        // with tanh the deterministic form scales the same activations so
        // the expectation identity still holds exactly for the output layer
        let net = DenseNet::new(&[3, 8, 2], 0.2, &mut rng(9)).unwrap();
        let x = [0.5, -1.0, 0.25];
        let det = net.forward(&x, &DropoutMask::Deterministic).unwrap();
        let mut r = rng(10);
        let draws = 100_000;
        let mut mean = vec![0.0; 2];
        for _ in 0..draws {
            let m = net.sample_mask(&mut r);
            for (a, b) in mean.iter_mut().zip(net.forward(&x, &m).unwrap()) {
                *a += b / draws as f64;
            }
        }
        for (a, b) in mean.iter().zip(&det) {
            assert!((a - b).abs() < 0.01 * b.abs().max(0.1), "{a} vs {b}");
        }
    }

    #[test]
    fn dense_jacobian_matches_fd() {
        let net = DenseNet::new(&[5, 8, 8, 3], 0.1, &mut rng(11)).unwrap();
        let mask = net.sample_mask(&mut rng(12));
        let x = vec![0.2, -0.5, 1.1, 0.3, 0.0];
        let (_, jac) = net.jacobian(&x, &mask).unwrap();
        let h = 1e-6;
        for c in 0..5 {
            let mut p = x.clone();
            p[c] += h;
            let plus = net.forward(&p, &mask).unwrap();
            p[c] -= 2.0 * h;
            let minus = net.forward(&p, &mask).unwrap();
            for r in 0..3 {
                let fd = (plus[r] - minus[r]) / (2.0 * h);
                assert!((jac[r * 5 + c] - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dense_param_gradient_matches_fd() {
        let mut net = DenseNet::new(&[3, 6, 2], 0.2, &mut rng(13)).unwrap();
        let mask = net.sample_mask(&mut rng(14));
        let x = [0.4, -0.3, 0.8];
        let w = [0.7, -1.3];
        let loss = |n: &DenseNet| -> f64 { n.forward(&x, &mask).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let cache = net.forward_cached(&x, &mask).unwrap();
        let mut g = vec![0.0; net.params().len()];
        net.backward(&cache, &w, Some(&mut g));
        let h = 1e-6;
        for i in 0..g.len() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let plus = loss(&net);
            net.params_mut()[i] = orig - h;
            let minus = loss(&net);
            net.params_mut()[i] = orig;
            assert!((g[i] - (plus - minus) / (2.0 * h)).abs() < 1e-8);
        }
    }

    fn policy(seed: u64) -> Controller {
        let bounds = ControlBox::new(vec![0.0, -std::f64::consts::FRAC_PI_2], vec![0.75, std::f64::consts::FRAC_PI_2]).unwrap();
        Controller::Recurrent(LstmPolicy::new(3, 6, 2, bounds, &mut rng(seed)).unwrap())
    }

    #[test]
    fn policy_output_within_box() {
        let mut p = policy(21);
        // exaggerate weights to push into saturation
        p.params_mut().iter_mut().for_each(|w| *w *= 25.0);
        let mut r = rng(22);
        let mut state = p.initial_state();
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| r.gen_range(-50.0..50.0)).collect();
            let (u, h) = p.step(&x, &state).unwrap();
            assert!(p.bounds().contains(&u), "{u:?}");
            state = h;
        }
    }

    #[test]
    fn policy_is_deterministic_from_zero_state() {
        let p = policy(23);
        let x = [1.0, 1.5, 0.3];
        let a = p.step(&x, &p.initial_state()).unwrap();
        let b = p.step(&x, &p.initial_state()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn policy_input_jacobian_matches_fd() {
        let p = policy(24);
        let x = vec![1.0, 1.5, 0.3];
        let (state0, _) = {
            let (_, h) = p.step(&[0.5, 0.5, 0.0], &p.initial_state()).unwrap();
            (h, ())
        };
        let (_, _, cache) = p.step_cached(&x, &state0).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            let mut du = vec![0.0; 2];
            du[r] = 1.0;
            let (dx, dprev) = p.step_backward(&cache, &du, &vec![0.0; p.state_len()], None);
            for c in 0..3 {
                let mut q = x.clone();
                q[c] += h;
                let plus = p.step(&q, &state0).unwrap().0[r];
                q[c] -= 2.0 * h;
                let minus = p.step(&q, &state0).unwrap().0[r];
                let fd = (plus - minus) / (2.0 * h);
                assert!((dx[c] - fd).abs() <= 1e-4 * fd.abs().max(1e-6), "{} vs {fd}", dx[c]);
            }
            for c in 0..p.state_len() {
                let mut s = state0.clone();
                s[c] += h;
                let plus = p.step(&x, &s).unwrap().0[r];
                s[c] -= 2.0 * h;
                let minus = p.step(&x, &s).unwrap().0[r];
                let fd = (plus - minus) / (2.0 * h);
                assert!((dprev[c] - fd).abs() <= 1e-4 * fd.abs().max(1e-6), "state {c}: {} vs {fd}", dprev[c]);
            }
        }
    }

    #[test]
    fn bptt_matches_fd_over_unroll() {
        // loss = sum_t w_t . u_t over a 5-step unroll; compare d loss / d params and d loss / d x_t
        let mut p = policy(25);
        let xs: Vec<Vec<f64>> = (0..5).map(|t| vec![0.3 * t as f64, 1.0 - 0.2 * t as f64, 0.1 * t as f64]).collect();
        let ws: Vec<Vec<f64>> = (0..5).map(|t| vec![1.0 - 0.3 * t as f64, 0.5]).collect();
        let loss = |p: &Controller, xs: &[Vec<f64>]| -> f64 {
            let mut s = p.initial_state();
            let mut total = 0.0;
            for (x, w) in xs.iter().zip(&ws) {
                let (u, h) = p.step(x, &s).unwrap();
                total += u.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                s = h;
            }
            total
        };
        let mut caches = Vec::new();
        let mut s = p.initial_state();
        for x in &xs {
            let (_, h, c) = p.step_cached(x, &s).unwrap();
            caches.push(c);
            s = h;
        }
        let mut grads = vec![0.0; p.num_params()];
        let mut d_state = vec![0.0; p.state_len()];
        let mut dxs = vec![Vec::new(); 5];
        for t in (0..5).rev() {
            let (dx, dprev) = p.step_backward(&caches[t], &ws[t], &d_state, Some(&mut grads));
            dxs[t] = dx;
            d_state = dprev;
        }
        let h = 1e-6;
        for i in (0..p.num_params()).step_by(7) {
            let orig = p.params()[i];
            p.params_mut()[i] = orig + h;
            let plus = loss(&p, &xs);
            p.params_mut()[i] = orig - h;
            let minus = loss(&p, &xs);
            p.params_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            assert!((grads[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-4), "param {i}: {} vs {fd}", grads[i]);
        }
        for t in 0..5 {
            for c in 0..3 {
                let mut q = xs.clone();
                q[t][c] += h;
                let plus = loss(&p, &q);
                q[t][c] -= 2.0 * h;
                let minus = loss(&p, &q);
                let fd = (plus - minus) / (2.0 * h);
                assert!((dxs[t][c] - fd).abs() <= 1e-4 * fd.abs().max(1e-4));
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut a = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        a.step(&mut p, &[0.0; 3], false).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut a = AdamState::new(3, 1e-3);
        let mut p = vec![0.0; 3];
        let g = [0.3, -20.0, 1e-3];
        a.step(&mut p, &g, false).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-12);
            assert!((pi.abs() - 1e-3).abs() < 1e-7);
        }
        assert!(a.step(&mut p, &[0.0; 2], false).is_err());
    }

    #[test]
    fn adam_ascends_concave_quadratic() {
        // maximize -(w - 0.3)^2
        let mut a = AdamState::new(1, 1e-2);
        let mut w = vec![-0.5];
        for _ in 0..500 {
            let g = -2.0 * (w[0] - 0.3);
            a.step(&mut w, &[g], true).unwrap();
        }
        assert!((w[0] - 0.3).abs() < 1e-2, "{}", w[0]);
    }

    #[test]
    fn checkpoint_json_round_trip_is_bit_exact() {
        let p = policy(30);
        let text = serde_json::to_string(&p).unwrap();
        let back: Controller = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
        let net = DenseNet::new(&[5, 32, 32, 3], 0.1, &mut rng(31)).unwrap();
        let back: DenseNet = serde_json::from_str(&serde_json::to_string(&net).unwrap()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn rejects_bad_shapes() {
        let p = policy(32);
        assert!(p.step(&[1.0, 2.0], &p.initial_state()).is_err());
        assert!(p.step(&[1.0, 2.0, 3.0], &[0.0; 3]).is_err());
        assert!(DenseNet::zeros(&[3, 4, 2], 1.0).is_err());
        let net = DenseNet::zeros(&[3, 4, 2], 0.5).unwrap();
        assert!(net.forward(&[1.0], &DropoutMask::Deterministic).is_err());
        assert!(net.forward(&[1.0, 2.0, 3.0], &DropoutMask::all_active(&[5])).is_err());
    }
}
