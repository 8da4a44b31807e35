//! Training the pair predictor and measuring its accuracy.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dfl;
use crate::error::{Error, Result};
use crate::gm::{Assignment, CostFunctionNetwork, PartialAssignment, DEFAULT_TOP};
use crate::harden::threshold;
use crate::loss::{sample_masks_with, total_loss_and_grad, HoleCount, MaskSet};
use crate::model::{assemble, new_network, table_costs, EncodedDataset, Predictions};
use crate::neural::{adam_step, AdamConfig, AdamState, Head, Network};
use crate::solver::{impute_with, solve, SolveOptions, SolverResult};
use crate::tasks::{Instance, Sample, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "epll")]
    Epll,
    #[serde(rename = "npll")]
    Npll,
    #[serde(rename = "spo+")]
    SpoPlus,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Epll => "epll",
            LossKind::Npll => "npll",
            LossKind::SpoPlus => "spo+",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epll" => Ok(LossKind::Epll),
            "npll" => Ok(LossKind::Npll),
            "spo+" | "spo" => Ok(LossKind::SpoPlus),
            _ => Err(Error::input(format!("unknown loss '{s}' (expected epll, npll or spo+)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Holes per variable.
    pub k: usize,
    /// Holes as a fraction of the other variables; overrides `k`.
    pub k_fraction: Option<f64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub l1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of each training solution's free cells hidden and recovered
    /// by imputation with the current model.
    pub mask_solution_frac: f64,
    /// Stop once validation accuracy has been 100% at `patience`
    /// consecutive validations.
    pub early_stop: bool,
    pub patience: usize,
    /// Validate after every this many epochs (and after the last one).
    pub validate_every: usize,
    /// Threshold applied to predicted networks before validation solves.
    pub threshold: Option<f64>,
    /// Node budget of every solver call made during training.
    pub node_limit: Option<u64>,
    /// Many-solution samples: how many of the stored solutions training
    /// draws from.
    pub max_solutions_per_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Epll,
            k: 10,
            k_fraction: None,
            lr: 1e-3,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            l1: 2e-4,
            epochs: 100,
            batch_size: 10,
            seed: 0,
            mask_solution_frac: 0.0,
            early_stop: true,
            patience: 1,
            validate_every: 1,
            threshold: None,
            node_limit: Some(200_000),
            max_solutions_per_sample: 5,
        }
    }
}

impl TrainConfig {
    /// Defaults for a task. Sudoku trains in batches of 5 and stops early only
    /// after three perfect validations 20 epochs apart; a single perfect check
    /// on a small validation set comes too soon.
    pub fn for_task(task: TaskKind) -> Self {
        let mut cfg = TrainConfig::default();
        match task {
            TaskKind::Futoshiki => cfg.threshold = Some(1.0),
            TaskKind::MinCut | TaskKind::MaxCut => {
                cfg.epochs = 10;
                cfg.batch_size = 1;
                cfg.early_stop = false;
            }
            TaskKind::Sudoku | TaskKind::SudokuMany => {
                cfg.batch_size = 5;
                cfg.validate_every = 20;
                cfg.patience = 3;
                // Learned Sudoku networks are solved by the threshold dives;
                // the remaining search rarely proves anything.
                cfg.node_limit = Some(20_000);
            }
        }
        cfg
    }

    fn holes(&self) -> HoleCount {
        match (self.loss, self.k_fraction) {
            (LossKind::Npll, _) => HoleCount::Count(0),
            (_, Some(f)) => HoleCount::Fraction(f),
            (_, None) => HoleCount::Count(self.k),
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.validate_every == 0 || self.patience == 0 {
            return Err(Error::input("batch size, validation interval and patience must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.mask_solution_frac) {
            return Err(Error::input("mask_solution_frac must be in [0, 1)"));
        }
        if !(self.lr > 0.0) || !(self.l1 >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::input("lr must be positive, l1 and weight decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_accuracy: Option<f64>,
    pub samples_seen: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub network: Network,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub imputations: usize,
    /// Imputed solutions that disagreed with their observed cells.
    pub imputation_mismatches: usize,
    /// Samples skipped because imputation failed.
    pub skipped: usize,
}

impl Trained {
    pub fn final_validation_accuracy(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.validation_accuracy)
    }
}

/// Training state over one dataset.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    samples: &'a [Sample],
    enc: EncodedDataset,
    scopes: Vec<Vec<usize>>,
    observed: Vec<PartialAssignment>,
    pub network: Network,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    pub samples_seen: usize,
    pub imputations: usize,
    pub imputation_mismatches: usize,
    pub skipped: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(samples: &'a [Sample], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let first = samples.first().ok_or_else(|| Error::input("training set is empty"))?;
        if cfg.loss == LossKind::SpoPlus && !first.task.is_cut() {
            return Err(Error::input("the SPO+ loss applies to cut tasks only"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let network = new_network(first, &mut rng)?;
        let adam = AdamState::new(&network);
        let enc = EncodedDataset::new(samples)?;
        let scopes: Vec<Vec<usize>> = samples.iter().map(Sample::free_variables).collect();
        let mut observed = Vec::with_capacity(samples.len());
        for (s, scope) in samples.iter().zip(&scopes) {
            let mut partial = s.solution.clone();
            let hide = (cfg.mask_solution_frac * scope.len() as f64).round() as usize;
            for k in index::sample(&mut rng, scope.len(), hide.min(scope.len())) {
                partial.set(scope[k], None);
            }
            observed.push(partial);
        }
        Ok(Trainer {
            cfg,
            samples,
            enc,
            scopes,
            observed,
            network,
            adam,
            rng,
            samples_seen: 0,
            imputations: 0,
            imputation_mismatches: 0,
            skipped: 0,
        })
    }

    /// The observed solution of sample `k` after hiding cells.
    pub fn observed(&self, k: usize) -> &PartialAssignment {
        &self.observed[k]
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions { node_limit: self.cfg.node_limit, ..Default::default() }
    }

    /// Target assignment of sample `k` for this visit.
    fn target(&mut self, k: usize, gm: &CostFunctionNetwork) -> Result<Option<Assignment>> {
        let s = &self.samples[k];
        if s.task == TaskKind::SudokuMany && !s.solutions.is_empty() {
            let m = s.solutions.len().min(self.cfg.max_solutions_per_sample.max(1));
            return Ok(Some(s.solutions[self.rng.gen_range(0..m)].clone()));
        }
        let partial = &self.observed[k];
        if let Some(y) = partial.to_complete() {
            return Ok(Some(y));
        }
        let mut evidence = s.evidence();
        for (i, v) in partial.0.iter().enumerate() {
            if v.is_some() {
                evidence.set(i, *v);
            }
        }
        self.imputations += 1;
        match impute_with(gm, &evidence, &self.solve_options()) {
            Ok(y) => {
                if !partial.is_consistent_with(&y) {
                    self.imputation_mismatches += 1;
                }
                Ok(Some(y))
            }
            Err(Error::Infeasible(msg)) => {
                log::debug!("sample {k} skipped: {msg}");
                self.skipped += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// One optimizer step on the given samples; returns their mean loss.
    pub fn step(&mut self, batch: &[usize]) -> Result<f64> {
        let (costs, tape) = table_costs(&self.network, &self.enc)?;
        let (r, c) = self.network.head.shape();
        let m = r * c;
        let mut d_table = vec![0.0; costs.len()];
        let mut gms: HashMap<usize, CostFunctionNetwork> = HashMap::new();
        let mut total = 0.0;
        let mut used = 0usize;
        for &k in batch {
            let lid = self.enc.sample_layout[k];
            if !gms.contains_key(&lid) {
                gms.insert(lid, assemble(&self.enc.layouts[lid], &costs, DEFAULT_TOP)?);
            }
            let gm = &gms[&lid];
            let loss = match self.cfg.loss {
                LossKind::Epll | LossKind::Npll => {
                    let Some(y) = self.target(k, gm)? else { continue };
                    let masks = match self.cfg.holes() {
                        HoleCount::Count(0) => MaskSet::empty(gm.n()),
                        h => sample_masks_with(gm.n(), h, &mut self.rng)?,
                    };
                    let (loss, g) = total_loss_and_grad(gm, &y, &masks, &self.scopes[k], self.cfg.l1)?;
                    let layout = &self.enc.layouts[lid];
                    for (&(i, j), &row) in layout.pairs.iter().zip(&layout.rows) {
                        let p = gm.pair_index(i, j).expect("declared pair is present");
                        for (d, gv) in d_table[row * m..(row + 1) * m].iter_mut().zip(&g.pairwise[p]) {
                            *d += gv;
                        }
                    }
                    loss
                }
                LossKind::SpoPlus => {
                    let s = &self.samples[k];
                    let Instance::Cut(graph) = &s.instance else {
                        return Err(Error::input("the SPO+ loss applies to cut tasks only"));
                    };
                    let Head::ScaledPattern { pattern, .. } = &self.network.head else {
                        return Err(Error::input("the SPO+ loss needs the scalar cut head"));
                    };
                    let norm: f64 = pattern.iter().map(|p| p * p).sum();
                    let layout = &self.enc.layouts[lid];
                    let c_pred: Vec<f64> = layout
                        .rows
                        .iter()
                        .map(|&row| costs[row * m..(row + 1) * m].iter().zip(pattern).map(|(x, p)| x * p).sum::<f64>() / norm)
                        .collect();
                    let c_true = s.costs.as_ref().ok_or_else(|| Error::input("cut sample has no capacities"))?;
                    let y_true = s.solution.to_complete().ok_or_else(|| Error::input("SPO+ needs complete solutions"))?;
                    let (loss, grad) = dfl::spo_plus(graph, &c_pred, c_true, &y_true)?;
                    for (&row, g) in layout.rows.iter().zip(&grad) {
                        for (d, p) in d_table[row * m..(row + 1) * m].iter_mut().zip(pattern) {
                            *d += g * p / norm;
                        }
                    }
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss on sample {k}")));
            }
            total += loss;
            used += 1;
        }
        self.samples_seen += batch.len();
        if used == 0 {
            return Ok(0.0);
        }
        let scale = 1.0 / used as f64;
        d_table.iter_mut().for_each(|d| *d *= scale);
        let mut grads = self.network.zero_gradients();
        self.network.backward_costs_into(&tape, &d_table, &mut grads)?;
        adam_step(&mut self.network, &grads, &mut self.adam, &self.cfg.adam())?;
        Ok(total * scale)
    }

    /// One pass over the data in random order; returns the mean batch loss.
    /// `on_step` runs after every optimizer step.
    pub fn epoch(&mut self, on_step: &mut dyn FnMut(&Trainer) -> Result<()>) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            total += self.step(batch)?;
            batches += 1;
            on_step(self)?;
        }
        Ok(total / batches as f64)
    }
}

/// Trains a fresh predictor. Validation runs after every epoch when
/// `validation` is non-empty.
pub fn train(
    samples: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&Trainer) -> Result<()>,
) -> Result<Trained> {
    let mut t = Trainer::new(samples, cfg.clone())?;
    let eval_cfg = EvalConfig { threshold: cfg.threshold, node_limit: cfg.node_limit, ..Default::default() };
    let mut history = Vec::new();
    let start = Instant::now();
    let mut perfect = 0;
    for epoch in 1..=cfg.epochs {
        let mean_loss = t.epoch(on_step)?;
        let validation_accuracy = if validation.is_empty() || (epoch % cfg.validate_every != 0 && epoch != cfg.epochs) {
            None
        } else {
            Some(evaluate(&t.network, validation, &eval_cfg)?.accuracy)
        };
        let rec = EpochRecord {
            epoch,
            mean_loss,
            validation_accuracy,
            samples_seen: t.samples_seen,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {mean_loss:.4}, validation accuracy {}",
            validation_accuracy.map_or("-".into(), |a| format!("{:.1}%", 100.0 * a))
        );
        history.push(rec);
        match validation_accuracy {
            Some(a) if a == 1.0 => perfect += 1,
            Some(_) => perfect = 0,
            None => {}
        }
        if cfg.early_stop && perfect >= cfg.patience {
            break;
        }
    }
    Ok(Trained {
        network: t.network,
        adam: t.adam,
        history,
        imputations: t.imputations,
        imputation_mismatches: t.imputation_mismatches,
        skipped: t.skipped,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalConfig {
    pub threshold: Option<f64>,
    pub node_limit: Option<u64>,
    pub time_limit: Option<Duration>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Instances whose solve hit a limit before proving optimality.
    pub unproven: usize,
    /// Cut tasks: mean regret of the predicted decisions.
    pub mean_regret: Option<f64>,
}

/// Solves the predicted network of `sample` (unconditioned `gm`), after
/// optional thresholding.
pub fn solve_prediction(gm: &CostFunctionNetwork, sample: &Sample, cfg: &EvalConfig) -> Result<SolverResult> {
    let gm = match cfg.threshold {
        Some(t) => threshold(gm, t)?,
        None => gm.clone(),
    };
    let conditioned = gm.condition(&sample.evidence())?;
    Ok(solve(
        &conditioned,
        &SolveOptions { node_limit: cfg.node_limit, time_limit: cfg.time_limit, ..Default::default() },
    ))
}

/// Fraction of instances answered correctly: exact grid match for Sudoku,
/// membership in the stored solution set for many-solution Sudoku, a valid
/// grid for Futoshiki, zero regret for cuts.
pub fn evaluate(net: &Network, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    let preds = Predictions::new(net, samples)?;
    let mut correct = 0;
    let mut unproven = 0;
    let mut regrets = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        let r = solve_prediction(preds.gm(k), s, cfg)?;
        if !r.proven_optimal() {
            unproven += 1;
        }
        let Some(y) = r.assignment else { continue };
        if s.task.is_cut() {
            let rules = s.rules(DEFAULT_TOP)?;
            let best = solve(&rules, &SolveOptions::default()).cost;
            let regret = (rules.evaluate(&y)? - best).max(0.0);
            if regret <= 1e-9 {
                correct += 1;
            }
            regrets.push(regret);
        } else if s.accepts(&y)? {
            correct += 1;
        }
    }
    let total = samples.len();
    Ok(EvalReport {
        total,
        correct,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        unproven,
        mean_regret: if regrets.is_empty() && !samples.first().is_some_and(|s| s.task.is_cut()) {
            None
        } else {
            Some(regrets.iter().sum::<f64>() / total.max(1) as f64)
        },
    })
}

/// Fits unary and pairwise costs of `template` directly (no predictor) by
/// full-batch gradient descent on the weighted pseudo-likelihood of `data`.
pub fn fit_pseudo_likelihood(
    template: &CostFunctionNetwork,
    data: &[(Assignment, f64)],
    steps: usize,
    lr: f64,
) -> Result<CostFunctionNetwork> {
    let weight: f64 = data.iter().map(|d| d.1).sum();
    if data.is_empty() || !(weight > 0.0) {
        return Err(Error::input("fitting needs data with positive total weight"));
    }
    let scope: Vec<usize> = (0..template.n()).collect();
    let mut gm = template.clone();
    for _ in 0..steps {
        let mut g = crate::loss::LossGradients::zeros(&gm);
        for (y, w) in data {
            let gy = crate::loss::npll_grad(&gm, y, &scope)?;
            for (a, b) in g.unary.iter_mut().flatten().zip(gy.unary.iter().flatten()) {
                *a += w * b;
            }
            for (a, b) in g.pairwise.iter_mut().flatten().zip(gy.pairwise.iter().flatten()) {
                *a += w * b;
            }
        }
        for i in 0..gm.n() {
            let u: Vec<f64> = gm.unary(i).iter().zip(&g.unary[i]).map(|(c, d)| c - lr * d / weight).collect();
            gm.set_unary(i, u)?;
        }
        for p in 0..gm.pair_count() {
            for (c, d) in gm.pair_costs_mut(p).iter_mut().zip(&g.pairwise[p]) {
                *c -= lr * d / weight;
            }
        }
    }
    Ok(gm)
}
