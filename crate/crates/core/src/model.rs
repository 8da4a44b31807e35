//! Pair features and assembly of predicted networks.
//!
//! Many pairs share the same feature vector (every Sudoku grid has the same
//! 3240 coordinate pairs, cut instances have three bridge categories), so a
//! dataset is encoded as a table of unique feature rows plus, per sample, the
//! list of declared pairs and the table row of each. The predictor then runs
//! once per unique row.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gm::{CostFunctionNetwork, DEFAULT_TOP};
use crate::neural::{Head, Network};
use crate::tasks::{sudoku, Instance, Sample};

pub const WIDTH: usize = 64;
pub const HIDDEN: usize = 4;

/// Length of the feature vector of a pair for `sample`'s task.
pub fn feature_dim(sample: &Sample) -> usize {
    match &sample.instance {
        Instance::Sudoku { .. } => 4 * sudoku::DIGITS,
        Instance::Futoshiki { size, .. } => 4 * size + 1,
        Instance::Cut(_) => 3,
    }
}

/// Pairs that receive a predicted matrix, each with `i < j`.
pub fn declared_pairs(sample: &Sample) -> Vec<(usize, usize)> {
    match &sample.instance {
        Instance::Cut(g) => g.edges.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect(),
        _ => {
            let n = sample.n();
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
        }
    }
}

fn one_hot(out: &mut [f64], offset: usize, k: usize) {
    out[offset + k] = 1.0;
}

/// Sudoku: one-hot row and column of both cells. Futoshiki: the same plus
/// `+1`/`-1` when cell `i` must be greater/smaller than cell `j`. Cut: one-hot
/// bridge category of the edge.
pub fn encode_pair_features(sample: &Sample, i: usize, j: usize) -> Result<Vec<f64>> {
    if i >= j || j >= sample.n() {
        return Err(Error::input(format!("pair features need i < j < n, got ({i}, {j})")));
    }
    let mut f = vec![0.0; feature_dim(sample)];
    match &sample.instance {
        Instance::Sudoku { .. } => {
            let d = sudoku::DIGITS;
            for (k, x) in [i / d, i % d, j / d, j % d].into_iter().enumerate() {
                one_hot(&mut f, k * d, x);
            }
        }
        Instance::Futoshiki { size, inequalities } => {
            let s = *size;
            for (k, x) in [i / s, i % s, j / s, j % s].into_iter().enumerate() {
                one_hot(&mut f, k * s, x);
            }
            if let Some(q) = inequalities.iter().find(|q| q.a == i && q.b == j) {
                f[4 * s] = if q.a_greater { 1.0 } else { -1.0 };
            }
        }
        Instance::Cut(g) => {
            let e = g
                .edges
                .iter()
                .position(|&(u, v)| (u.min(v), u.max(v)) == (i, j))
                .ok_or_else(|| Error::input(format!("({i}, {j}) is not an edge")))?;
            one_hot(&mut f, 0, g.bridges[e].index());
        }
    }
    Ok(f)
}

/// Output head of the predictor for a task.
pub fn head_for(sample: &Sample) -> Head {
    match &sample.instance {
        Instance::Cut(g) => Head::ScaledPattern { rows: 2, cols: 2, pattern: g.mode.pattern().to_vec() },
        _ => Head::Matrix { d: sample.domain() },
    }
}

/// A freshly initialised predictor sized for `sample`'s task.
pub fn new_network<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Result<Network> {
    Network::new(feature_dim(sample), WIDTH, HIDDEN, head_for(sample), rng)
}

fn check_compatible(net: &Network, sample: &Sample) -> Result<()> {
    if net.f_in != feature_dim(sample) || net.head.shape() != (sample.domain(), sample.domain()) {
        return Err(Error::input(format!(
            "network ({} features, {:?} outputs) does not fit a {} sample",
            net.f_in,
            net.head.shape(),
            sample.task
        )));
    }
    Ok(())
}

/// Declared pairs of one sample and the feature-table row of each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLayout {
    pub n: usize,
    pub d: usize,
    pub pairs: Vec<(usize, usize)>,
    pub rows: Vec<usize>,
}

/// Unique feature rows of a dataset and one layout per distinct pair
/// structure.
#[derive(Clone, Debug, Default)]
pub struct EncodedDataset {
    pub dim: usize,
    pub features: Vec<f64>,
    pub layouts: Vec<PairLayout>,
    /// Layout of each sample.
    pub sample_layout: Vec<usize>,
    row_index: HashMap<Vec<u64>, usize>,
    layout_index: HashMap<Vec<usize>, usize>,
}

impl EncodedDataset {
    pub fn new(samples: &[Sample]) -> Result<Self> {
        let mut enc = EncodedDataset::default();
        for s in samples {
            enc.push(s)?;
        }
        Ok(enc)
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.features.len() / self.dim
        }
    }

    pub fn push(&mut self, sample: &Sample) -> Result<usize> {
        let dim = feature_dim(sample);
        if self.dim == 0 {
            self.dim = dim;
        } else if self.dim != dim {
            return Err(Error::input("samples of one dataset must share a feature layout"));
        }
        let pairs = declared_pairs(sample);
        let mut rows = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            let f = encode_pair_features(sample, i, j)?;
            let key: Vec<u64> = f.iter().map(|x| x.to_bits()).collect();
            let next = self.row_index.len();
            let r = *self.row_index.entry(key).or_insert_with(|| {
                self.features.extend_from_slice(&f);
                next
            });
            rows.push(r);
        }
        let id = match self.layout_index.get(&rows) {
            Some(&id) if self.layouts[id].pairs == pairs => id,
            _ => {
                let id = self.layouts.len();
                self.layout_index.insert(rows.clone(), id);
                self.layouts.push(PairLayout { n: sample.n(), d: sample.domain(), pairs, rows });
                id
            }
        };
        self.sample_layout.push(id);
        Ok(id)
    }
}

/// Cost matrices for every row of an encoded dataset.
pub fn table_costs(net: &Network, enc: &EncodedDataset) -> Result<(Vec<f64>, crate::neural::Tape)> {
    let tape = net.forward_batch(&enc.features, enc.rows())?;
    let (r, c) = net.head.shape();
    let mut costs = vec![0.0; enc.rows() * r * c];
    let k = net.head.outputs();
    for (row, out) in costs.chunks_mut(r * c).enumerate() {
        net.head.costs(&tape.raw()[row * k..(row + 1) * k], out);
    }
    Ok((costs, tape))
}

/// Network over a layout with each declared pair set to its row's matrix.
pub fn assemble(layout: &PairLayout, costs: &[f64], top: f64) -> Result<CostFunctionNetwork> {
    let mut gm = CostFunctionNetwork::uniform(layout.n, layout.d, top)?;
    let m = layout.d * layout.d;
    for (&(i, j), &r) in layout.pairs.iter().zip(&layout.rows) {
        gm.set_pair(i, j, costs[r * m..(r + 1) * m].to_vec())?;
    }
    Ok(gm)
}

/// The predicted network of one instance, before conditioning.
pub fn predict_unconditioned(net: &Network, sample: &Sample) -> Result<CostFunctionNetwork> {
    check_compatible(net, sample)?;
    let enc = EncodedDataset::new(std::slice::from_ref(sample))?;
    let (costs, _) = table_costs(net, &enc)?;
    assemble(&enc.layouts[0], &costs, DEFAULT_TOP)
}

/// The predicted network of one instance, conditioned on its evidence.
pub fn predict_gm(net: &Network, sample: &Sample) -> Result<CostFunctionNetwork> {
    predict_unconditioned(net, sample)?.condition(&sample.evidence())
}

/// Predictions for a whole dataset, assembling each distinct layout once.
pub struct Predictions {
    enc: EncodedDataset,
    gms: Vec<CostFunctionNetwork>,
}

impl Predictions {
    pub fn new(net: &Network, samples: &[Sample]) -> Result<Self> {
        if let Some(s) = samples.first() {
            check_compatible(net, s)?;
        }
        let enc = EncodedDataset::new(samples)?;
        let (costs, _) = table_costs(net, &enc)?;
        let gms = enc.layouts.iter().map(|l| assemble(l, &costs, DEFAULT_TOP)).collect::<Result<_>>()?;
        Ok(Predictions { enc, gms })
    }

    /// Unconditioned network of sample `k`.
    pub fn gm(&self, k: usize) -> &CostFunctionNetwork {
        &self.gms[self.enc.sample_layout[k]]
    }
}
