//! Decision-focused baseline for the cut tasks: regret and the SPO+ loss.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gm::{Assignment, DEFAULT_TOP};
use crate::neural::{Head, Network};
use crate::solver::solve_default;
use crate::tasks::{cut, CutGraph, CutMode, GenConfig, Instance, Sample};
use crate::train::{LossKind, TrainConfig, Trainer};

/// Minimiser of `costs . phi(y)` with source and sink pinned.
pub fn optimize(graph: &CutGraph, costs: &[f64]) -> Result<Assignment> {
    let r = solve_default(&graph.gm(costs, DEFAULT_TOP)?);
    Ok(r.solution()?.clone())
}

/// True-cost value of the decision taken under `c_pred`, minus the true
/// optimum.
pub fn regret(graph: &CutGraph, c_true: &[f64], c_pred: &[f64]) -> Result<f64> {
    if c_true.len() != c_pred.len() {
        return Err(Error::input("true and predicted costs differ in length"));
    }
    let best = graph.value(c_true, &optimize(graph, c_true)?);
    let taken = graph.value(c_true, &optimize(graph, c_pred)?);
    Ok((taken - best).abs())
}

/// SPO+ loss and its subgradient with respect to `c_pred`:
/// `max_y (c - 2c')·phi(y) + 2c'·phi(y*) - c·phi(y*)`, whose subgradient is
/// `2 (phi(y*) - phi(y°))` with `y°` minimising `(2c' - c)·phi`.
pub fn spo_plus(graph: &CutGraph, c_pred: &[f64], c_true: &[f64], y_true: &Assignment) -> Result<(f64, Vec<f64>)> {
    if c_pred.len() != graph.edges.len() || c_true.len() != graph.edges.len() {
        return Err(Error::input("cost vectors must have one entry per edge"));
    }
    let shifted: Vec<f64> = c_pred.iter().zip(c_true).map(|(p, t)| 2.0 * p - t).collect();
    let y_o = optimize(graph, &shifted)?;
    let (phi_t, phi_o) = (graph.phi(y_true), graph.phi(&y_o));
    let loss = -graph.value(&shifted, &y_o) + graph.value(&shifted, y_true);
    let grad = phi_t.iter().zip(&phi_o).map(|(t, o)| 2.0 * (t - o)).collect();
    Ok((loss, grad))
}

pub fn spo_plus_grad(graph: &CutGraph, c_pred: &[f64], c_true: &[f64], y_true: &Assignment) -> Result<Vec<f64>> {
    Ok(spo_plus(graph, c_pred, c_true, y_true)?.1)
}

/// Predicted capacity of each bridge category.
pub fn category_costs(net: &Network) -> Result<[f64; 3]> {
    let Head::ScaledPattern { pattern, .. } = &net.head else {
        return Err(Error::input("cut predictors use the scalar head"));
    };
    let norm: f64 = pattern.iter().map(|p| p * p).sum();
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut f = [0.0; 3];
        f[k] = 1.0;
        let (m, _) = net.forward(&f)?;
        *o = m.iter().zip(pattern).map(|(x, p)| x * p).sum::<f64>() / norm;
    }
    Ok(out)
}

/// Per-edge predicted capacities of a cut instance.
pub fn edge_costs(net: &Network, graph: &CutGraph) -> Result<Vec<f64>> {
    let c = category_costs(net)?;
    Ok(graph.bridges.iter().map(|b| c[b.index()]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DflConfig {
    pub mode: CutMode,
    pub loss: LossKind,
    pub seed: u64,
    pub epochs: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Evaluate after this many training samples (counting flipped copies).
    pub eval_every: usize,
    pub k: usize,
    /// Defaults to 1e-3 for E-PLL and 1e-4 for SPO+.
    pub lr: Option<f64>,
    pub l1: f64,
}

impl Default for DflConfig {
    fn default() -> Self {
        DflConfig {
            mode: CutMode::Min,
            loss: LossKind::Epll,
            seed: 0,
            epochs: 10,
            train_size: 50,
            test_size: 50,
            eval_every: 25,
            k: 10,
            lr: None,
            l1: 2e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub samples_seen: usize,
    pub mean_test_regret: f64,
    pub seed: u64,
    pub loss_name: String,
}

struct TestSet {
    graphs: Vec<CutGraph>,
    costs: Vec<Vec<f64>>,
    best: Vec<f64>,
}

impl TestSet {
    fn new(samples: &[Sample]) -> Result<Self> {
        let mut t = TestSet { graphs: Vec::new(), costs: Vec::new(), best: Vec::new() };
        for s in samples {
            let Instance::Cut(g) = &s.instance else {
                return Err(Error::input("test set must hold cut samples"));
            };
            let c = s.costs.clone().ok_or_else(|| Error::input("cut sample has no capacities"))?;
            t.best.push(g.value(&c, &optimize(g, &c)?));
            t.graphs.push(g.clone());
            t.costs.push(c);
        }
        Ok(t)
    }

    fn mean_regret(&self, net: &Network) -> Result<f64> {
        let cat = category_costs(net)?;
        let mut total = 0.0;
        for ((g, c), best) in self.graphs.iter().zip(&self.costs).zip(&self.best) {
            let pred: Vec<f64> = g.bridges.iter().map(|b| cat[b.index()]).collect();
            total += (g.value(c, &optimize(g, &pred)?) - best).abs();
        }
        Ok(total / self.graphs.len().max(1) as f64)
    }
}

/// Trains a cut predictor with the chosen loss and records the mean test
/// regret before training and after every `eval_every` samples.
pub fn run_dfl_experiment(cfg: &DflConfig) -> Result<Vec<CurvePoint>> {
    if cfg.loss == LossKind::Npll {
        return Err(Error::input("cut experiments compare epll and spo+"));
    }
    if cfg.eval_every == 0 {
        return Err(Error::input("eval_every must be positive"));
    }
    let train = cut::generate(&GenConfig { count: cfg.train_size, seed: 2 * cfg.seed, ..Default::default() }, cfg.mode)?;
    let test = cut::generate(&GenConfig { count: cfg.test_size, seed: 2 * cfg.seed + 1, ..Default::default() }, cfg.mode)?;
    let train = cut::augment_flip(&train)?;
    let test = TestSet::new(&test)?;
    let default_lr = if cfg.loss == LossKind::SpoPlus { 1e-4 } else { 1e-3 };
    let tcfg = TrainConfig {
        loss: cfg.loss,
        k: cfg.k,
        lr: cfg.lr.unwrap_or(default_lr),
        l1: if cfg.loss == LossKind::SpoPlus { 0.0 } else { cfg.l1 },
        epochs: cfg.epochs,
        batch_size: 1,
        seed: cfg.seed,
        early_stop: false,
        ..TrainConfig::for_task(cfg.mode.task())
    };
    let mut trainer = Trainer::new(&train, tcfg)?;
    let point = |seen: usize, net: &Network| -> Result<CurvePoint> {
        Ok(CurvePoint {
            samples_seen: seen,
            mean_test_regret: test.mean_regret(net)?,
            seed: cfg.seed,
            loss_name: cfg.loss.name().to_string(),
        })
    };
    let mut curve = vec![point(0, &trainer.network)?];
    for _ in 0..cfg.epochs {
        trainer.epoch(&mut |t: &Trainer| {
            if t.samples_seen % cfg.eval_every == 0 {
                curve.push(point(t.samples_seen, &t.network)?);
            }
            Ok(())
        })?;
    }
    Ok(curve)
}

/// Mean regret over the evaluation points of a curve.
pub fn area_under_curve(curve: &[CurvePoint]) -> f64 {
    curve.iter().map(|p| p.mean_test_regret).sum::<f64>() / curve.len().max(1) as f64
}

pub fn write_curve_csv<W: Write>(sink: W, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
