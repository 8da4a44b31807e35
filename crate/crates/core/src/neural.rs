//! The cost predictor: a residual MLP mapping pair features to a cost matrix,
//! with hand-written reverse-mode gradients and an Adam optimizer.
//!
//! Layout: `input (f_in -> width)`, `hidden` layers of `width` with an
//! identity skip added after every second hidden layer, then a linear output
//! layer. All activations are rectifiers. Batches are row-major matrices with
//! one row per pair.

use matrixmultiply::dgemm;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases alike.
    fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut l = Self::zeros(inputs, outputs);
        l.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-bound..bound));
        l
    }

    /// `out = x W^T + b` for `rows` rows.
    fn forward(&self, x: &[f64], rows: usize, out: &mut [f64]) {
        for r in 0..rows {
            out[r * self.outputs..(r + 1) * self.outputs].copy_from_slice(&self.bias);
        }
        unsafe {
            dgemm(
                rows,
                self.inputs,
                self.outputs,
                1.0,
                x.as_ptr(),
                self.inputs as isize,
                1,
                self.weight.as_ptr(),
                1,
                self.inputs as isize,
                1.0,
                out.as_mut_ptr(),
                self.outputs as isize,
                1,
            );
        }
    }

    /// Accumulates `dW += dz^T x`, `db += colsum(dz)`, and, when `dx` is
    /// given, `dx += dz W`.
    fn backward(&self, x: &[f64], dz: &[f64], rows: usize, grad: &mut Linear, dx: Option<&mut [f64]>) {
        unsafe {
            dgemm(
                self.outputs,
                rows,
                self.inputs,
                1.0,
                dz.as_ptr(),
                1,
                self.outputs as isize,
                x.as_ptr(),
                self.inputs as isize,
                1,
                1.0,
                grad.weight.as_mut_ptr(),
                self.inputs as isize,
                1,
            );
        }
        for r in 0..rows {
            for (b, g) in grad.bias.iter_mut().zip(&dz[r * self.outputs..(r + 1) * self.outputs]) {
                *b += g;
            }
        }
        if let Some(dx) = dx {
            unsafe {
                dgemm(
                    rows,
                    self.outputs,
                    self.inputs,
                    1.0,
                    dz.as_ptr(),
                    self.outputs as isize,
                    1,
                    self.weight.as_ptr(),
                    self.inputs as isize,
                    1,
                    1.0,
                    dx.as_mut_ptr(),
                    self.inputs as isize,
                    1,
                );
            }
        }
    }
}

/// How raw network outputs become a cost matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    /// `d * d` outputs read row-major as the matrix.
    Matrix { d: usize },
    /// One output `r`; the matrix is `softplus(r) * pattern`.
    ScaledPattern { rows: usize, cols: usize, pattern: Vec<f64> },
}

impl Head {
    pub fn outputs(&self) -> usize {
        match self {
            Head::Matrix { d } => d * d,
            Head::ScaledPattern { .. } => 1,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Head::Matrix { d } => (*d, *d),
            Head::ScaledPattern { rows, cols, .. } => (*rows, *cols),
        }
    }

    /// Writes the cost matrix for one raw output row.
    pub fn costs(&self, raw: &[f64], out: &mut [f64]) {
        match self {
            Head::Matrix { .. } => out.copy_from_slice(raw),
            Head::ScaledPattern { pattern, .. } => {
                let c = softplus(raw[0]);
                for (o, p) in out.iter_mut().zip(pattern) {
                    *o = c * p;
                }
            }
        }
    }

    /// Chain rule through [`Head::costs`]: `d_raw` from `d_costs`.
    pub fn raw_upstream(&self, raw: &[f64], d_costs: &[f64], d_raw: &mut [f64]) {
        match self {
            Head::Matrix { .. } => d_raw.copy_from_slice(d_costs),
            Head::ScaledPattern { pattern, .. } => {
                let dc: f64 = d_costs.iter().zip(pattern).map(|(g, p)| g * p).sum();
                d_raw[0] = dc * sigmoid(raw[0]);
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub f_in: usize,
    pub width: usize,
    pub hidden: usize,
    pub head: Head,
    /// `hidden + 2` layers: input, hidden..., output.
    pub layers: Vec<Linear>,
}

/// Activations kept by [`Network::forward_batch`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    rows: usize,
    input: Vec<f64>,
    /// Rectifier outputs of the input and hidden layers.
    relu: Vec<Vec<f64>>,
    /// Block outputs (rectifier output plus skip where one applies).
    hidden: Vec<Vec<f64>>,
    raw: Vec<f64>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Raw network outputs, `rows x head.outputs()`.
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }
}

/// Parameter gradients, shaped like [`Network::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Linear>,
}

impl Gradients {
    pub fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }
}

impl Network {
    pub fn new<R: Rng + ?Sized>(f_in: usize, width: usize, hidden: usize, head: Head, rng: &mut R) -> Result<Self> {
        Self::check_shape(f_in, width, hidden)?;
        let mut layers = vec![Linear::init(f_in, width, rng)];
        for _ in 0..hidden {
            layers.push(Linear::init(width, width, rng));
        }
        layers.push(Linear::init(width, head.outputs(), rng));
        Ok(Network { f_in, width, hidden, head, layers })
    }

    pub fn zeros(f_in: usize, width: usize, hidden: usize, head: Head) -> Result<Self> {
        Self::check_shape(f_in, width, hidden)?;
        let mut layers = vec![Linear::zeros(f_in, width)];
        for _ in 0..hidden {
            layers.push(Linear::zeros(width, width));
        }
        layers.push(Linear::zeros(width, head.outputs()));
        Ok(Network { f_in, width, hidden, head, layers })
    }

    fn check_shape(f_in: usize, width: usize, hidden: usize) -> Result<()> {
        if f_in == 0 || width == 0 {
            return Err(Error::input("network input and width must be positive"));
        }
        if hidden % 2 != 0 {
            return Err(Error::input(format!("hidden layer count must be even for skip blocks, got {hidden}")));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(|l| Linear::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Runs `rows` feature vectors (row-major, `rows x f_in`) through the
    /// network. Returns the raw outputs inside the tape.
    pub fn forward_batch(&self, input: &[f64], rows: usize) -> Result<Tape> {
        if input.len() != rows * self.f_in {
            return Err(Error::input(format!(
                "feature batch has {} values, expected {rows} x {}",
                input.len(),
                self.f_in
            )));
        }
        let w = self.width;
        let mut relu = Vec::with_capacity(self.hidden + 1);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.hidden + 1);
        let mut a = vec![0.0; rows * w];
        self.layers[0].forward(input, rows, &mut a);
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        hidden.push(a.clone());
        relu.push(a);
        for l in 1..=self.hidden {
            let mut a = vec![0.0; rows * w];
            self.layers[l].forward(&hidden[l - 1], rows, &mut a);
            a.iter_mut().for_each(|v| *v = v.max(0.0));
            let h = if l % 2 == 0 {
                a.iter().zip(&hidden[l - 2]).map(|(x, s)| x + s).collect()
            } else {
                a.clone()
            };
            relu.push(a);
            hidden.push(h);
        }
        let mut raw = vec![0.0; rows * self.outputs()];
        self.layers[self.hidden + 1].forward(&hidden[self.hidden], rows, &mut raw);
        Ok(Tape {
            rows,
            input: input.to_vec(),
            relu,
            hidden,
            raw,
        })
    }

    /// Forward pass for one feature vector, returning its cost matrix.
    pub fn forward(&self, features: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let tape = self.forward_batch(features, 1)?;
        let (r, c) = self.head.shape();
        let mut costs = vec![0.0; r * c];
        self.head.costs(tape.raw(), &mut costs);
        Ok((costs, tape))
    }

    /// Accumulates into `grads` the parameter gradient for `d_raw`, the loss
    /// gradient with respect to the raw outputs of `tape`.
    pub fn backward_raw(&self, tape: &Tape, d_raw: &[f64], grads: &mut Gradients) -> Result<()> {
        let rows = tape.rows;
        if d_raw.len() != rows * self.outputs() {
            return Err(Error::input("upstream gradient does not match the tape"));
        }
        if tape.hidden.len() != self.hidden + 1 || tape.input.len() != rows * self.f_in {
            return Err(Error::input("tape was not produced by this network"));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::input("gradient buffer does not match the network"));
        }
        let w = self.width;
        let mut dh: Vec<Vec<f64>> = (0..=self.hidden).map(|_| vec![0.0; rows * w]).collect();
        let out = self.hidden + 1;
        self.layers[out].backward(&tape.hidden[self.hidden], d_raw, rows, &mut grads.layers[out], Some(&mut dh[self.hidden]));
        for l in (1..=self.hidden).rev() {
            let dcur = std::mem::take(&mut dh[l]);
            if l % 2 == 0 {
                dh[l - 2].iter_mut().zip(&dcur).for_each(|(a, b)| *a += b);
            }
            let dz: Vec<f64> = dcur
                .iter()
                .zip(&tape.relu[l])
                .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                .collect();
            let (lo, _) = dh.split_at_mut(l);
            self.layers[l].backward(&tape.hidden[l - 1], &dz, rows, &mut grads.layers[l], Some(&mut lo[l - 1]));
        }
        let dz: Vec<f64> = dh[0]
            .iter()
            .zip(&tape.relu[0])
            .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
            .collect();
        self.layers[0].backward(&tape.input, &dz, rows, &mut grads.layers[0], None);
        Ok(())
    }

    /// Backward from cost-matrix gradients (`rows x (r*c)`) through the head.
    pub fn backward(&self, tape: &Tape, d_costs: &[f64]) -> Result<Gradients> {
        let mut g = self.zero_gradients();
        self.backward_costs_into(tape, d_costs, &mut g)?;
        Ok(g)
    }

    pub fn backward_costs_into(&self, tape: &Tape, d_costs: &[f64], grads: &mut Gradients) -> Result<()> {
        let (r, c) = self.head.shape();
        let k = self.outputs();
        if d_costs.len() != tape.rows * r * c {
            return Err(Error::input("upstream cost gradient does not match the tape"));
        }
        let mut d_raw = vec![0.0; tape.rows * k];
        for row in 0..tape.rows {
            self.head.raw_upstream(
                &tape.raw[row * k..(row + 1) * k],
                &d_costs[row * r * c..(row + 1) * r * c],
                &mut d_raw[row * k..(row + 1) * k],
            );
        }
        self.backward_raw(tape, &d_raw, grads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of adding it to
    /// the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.tensors().map(|t| vec![0.0; t.len()]).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.layers.len() != net.layers.len() || state.m.len() != 2 * net.layers.len() {
        return Err(Error::input("optimizer state does not match the network"));
    }
    if let Some((k, g)) = grads.tensors().flatten().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient {g} at parameter {k}")));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let tensors = net.tensors_mut().zip(grads.tensors()).zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for ((theta, g), (m, v)) in tensors {
        for k in 0..theta.len() {
            let mut gk = g[k];
            if cfg.decoupled {
                theta[k] -= cfg.lr * cfg.weight_decay * theta[k];
            } else {
                gk += cfg.weight_decay * theta[k];
            }
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            theta[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub task: crate::tasks::TaskKind,
    pub f_in: usize,
    pub d: usize,
    pub layer_dims: Vec<(usize, usize)>,
    pub network: Network,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamState>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(task: crate::tasks::TaskKind, network: Network, adam: Option<AdamState>, seed: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            task,
            f_in: network.f_in,
            d: network.head.shape().0,
            layer_dims: network.layers.iter().map(|l| (l.inputs, l.outputs)).collect(),
            network,
            adam,
            seed,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(f)
            .map_err(|e| Error::parse(format!("{}:{}:{}", path.display(), e.line(), e.column()), e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::parse(path.display().to_string(), format!("unsupported checkpoint version {}", ck.version)));
        }
        let dims: Vec<(usize, usize)> = ck.network.layers.iter().map(|l| (l.inputs, l.outputs)).collect();
        let shapes_ok = ck.network.layers.iter().all(|l| l.weight.len() == l.inputs * l.outputs && l.bias.len() == l.outputs);
        if dims != ck.layer_dims || !shapes_ok || ck.network.layers.len() != ck.network.hidden + 2 {
            return Err(Error::parse(path.display().to_string(), "layer shapes are inconsistent"));
        }
        Ok(ck)
    }
}
