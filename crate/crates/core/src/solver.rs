//! Exact minimisation and enumeration over cost function networks.
//!
//! The main engine is a depth-first branch and bound. Before searching, costs
//! are shifted between pair and unary functions by min-sum diffusion, which
//! leaves the cost of every assignment unchanged but makes pair costs
//! non-negative and moves most of their information into the unary costs.
//! The lower bound at a node is then the cost of the assigned prefix, plus
//! for every unassigned variable the cheapest value given the assigned ones,
//! plus the negative part of the minimum of every pair function between two
//! unassigned variables. Values that cannot beat the incumbent under that
//! bound are filtered before branching, which reduces to forward checking on
//! hard constraints.
//!
//! Networks whose interaction graph has a small elimination width are solved
//! by min-sum variable elimination instead.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::gm::{Assignment, CostFunctionNetwork, PartialAssignment};

/// Largest intermediate table variable elimination will build.
const ELIMINATION_TABLE_LIMIT: f64 = (1u64 << 20) as f64;

/// Largest search space [`brute_force`] accepts.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Strategy {
    /// Variable elimination when the network is sparse and narrow enough,
    /// branch and bound otherwise.
    #[default]
    Auto,
    BranchAndBound,
    Elimination,
}

#[derive(Clone, Debug, Default)]
pub struct SolveOptions {
    /// Only solutions strictly cheaper than this are reported.
    pub upper_bound: Option<f64>,
    pub time_limit: Option<Duration>,
    pub node_limit: Option<u64>,
    pub strategy: Strategy,
}

impl SolveOptions {
    pub fn with_node_limit(nodes: u64) -> Self {
        SolveOptions { node_limit: Some(nodes), ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    /// The assignment is a proven minimum.
    Optimal,
    /// A limit was hit; the assignment is the best found.
    Feasible,
    /// No assignment is cheaper than `top` (or the given upper bound).
    Infeasible,
    /// A limit was hit before any solution was found.
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverResult {
    pub assignment: Option<Assignment>,
    /// `evaluate(assignment)`, or `top` when there is no assignment.
    pub cost: f64,
    pub status: Status,
    pub nodes: u64,
    pub backtracks: u64,
}

impl SolverResult {
    pub fn proven_optimal(&self) -> bool {
        self.status == Status::Optimal
    }

    pub fn is_infeasible(&self) -> bool {
        self.status == Status::Infeasible
    }

    pub fn solution(&self) -> Result<&Assignment> {
        self.assignment
            .as_ref()
            .ok_or_else(|| Error::Infeasible(format!("no solution ({:?})", self.status)))
    }
}

pub fn solve(gm: &CostFunctionNetwork, options: &SolveOptions) -> SolverResult {
    match options.strategy {
        Strategy::BranchAndBound => branch_and_bound(gm, options),
        Strategy::Elimination => {
            eliminate(gm, options, f64::INFINITY).unwrap_or_else(|| branch_and_bound(gm, options))
        }
        Strategy::Auto => {
            let order = min_fill_order(gm);
            if order.width + 1 < gm.n() && order.max_table <= ELIMINATION_TABLE_LIMIT {
                eliminate_with(gm, options, &order.order)
            } else {
                branch_and_bound(gm, options)
            }
        }
    }
}

/// Solves with default options.
pub fn solve_default(gm: &CostFunctionNetwork) -> SolverResult {
    solve(gm, &SolveOptions::default())
}

/// Up to `limit` distinct assignments with cost below `cost_bound` (capped at
/// `top`), in depth-first order. When fewer than `limit` are returned the
/// list is exhaustive.
pub fn enumerate(gm: &CostFunctionNetwork, cost_bound: f64, limit: usize) -> Result<Vec<Assignment>> {
    if limit == 0 {
        return Err(Error::input("enumeration limit must be at least 1"));
    }
    let mut s = Search::new(gm, Mode::Enumerate { limit }, cost_bound.min(gm.top()), &SolveOptions::default());
    s.dfs(usize::MAX);
    Ok(s.found)
}

/// Exhaustive scan in lexicographic order; ties keep the first assignment.
pub fn brute_force(gm: &CostFunctionNetwork) -> Result<SolverResult> {
    let space = gm.search_space_size();
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::input(format!("search space of {space:e} assignments is too large for brute force")));
    }
    let n = gm.n();
    let mut y = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut nodes = 0u64;
    loop {
        nodes += 1;
        let c = gm.evaluate_unchecked(&y);
        if c < gm.top() && best.as_ref().map_or(true, |(b, _)| c < *b) {
            best = Some((c, y.clone()));
        }
        let mut k = n;
        loop {
            if k == 0 {
                return Ok(match best {
                    Some((cost, y)) => SolverResult {
                        assignment: Some(Assignment(y)),
                        cost,
                        status: Status::Optimal,
                        nodes,
                        backtracks: 0,
                    },
                    None => infeasible(gm, nodes, 0),
                });
            }
            k -= 1;
            y[k] += 1;
            if y[k] < gm.domain(k) {
                break;
            }
            y[k] = 0;
        }
    }
}

/// Completes `partial` with a minimum-cost assignment of the unobserved
/// variables; observed variables keep their values.
pub fn impute(gm: &CostFunctionNetwork, partial: &PartialAssignment) -> Result<Assignment> {
    impute_with(gm, partial, &SolveOptions::default())
}

pub fn impute_with(gm: &CostFunctionNetwork, partial: &PartialAssignment, options: &SolveOptions) -> Result<Assignment> {
    gm.check_partial(partial)?;
    if let Some(full) = partial.to_complete() {
        return Ok(full);
    }
    let conditioned = gm.condition(partial)?;
    let r = solve(&conditioned, options);
    match r.assignment {
        Some(y) if r.cost < gm.top() => Ok(y),
        _ => Err(Error::Infeasible(format!("imputation found no completion ({:?})", r.status))),
    }
}

fn infeasible(gm: &CostFunctionNetwork, nodes: u64, backtracks: u64) -> SolverResult {
    SolverResult {
        assignment: None,
        cost: gm.top(),
        status: Status::Infeasible,
        nodes,
        backtracks,
    }
}

fn branch_and_bound(gm: &CostFunctionNetwork, options: &SolveOptions) -> SolverResult {
    let ub = options.upper_bound.unwrap_or(f64::INFINITY).min(gm.top());
    let mut s = Search::new(gm, Mode::Optimize, ub, options);
    let (seed, dive_nodes) = threshold_dives(gm, options, ub);
    s.nodes += dive_nodes;
    if let Some((values, cost)) = seed {
        s.best = Some(values);
        s.ub = cost;
    }
    // Limited discrepancy passes find good incumbents early; the final
    // unrestricted pass proves optimality.
    for budget in LDS_SCHEDULE {
        s.discrepancy_cut = false;
        s.dfs(budget);
        if s.stopped || !s.discrepancy_cut {
            break;
        }
    }
    if !s.stopped && s.discrepancy_cut {
        s.dfs(usize::MAX);
    }
    let status = match (s.best.is_some(), s.stopped) {
        (true, false) => Status::Optimal,
        (true, true) => Status::Feasible,
        (false, false) => Status::Infeasible,
        (false, true) => Status::Unknown,
    };
    SolverResult {
        cost: s.best.as_ref().map_or(gm.top(), |_| s.ub),
        assignment: s.best.map(Assignment),
        status,
        nodes: s.nodes,
        backtracks: s.backtracks,
    }
}

/// Fractions of the largest pair cost used as thresholds by the dives.
const DIVE_FRACTIONS: [f64; 4] = [0.5, 0.25, 0.125, 0.0625];

/// Node budget of one threshold dive when the caller sets no limit.
const DIVE_NODES: u64 = 5_000;

/// Primal heuristic for soft networks: for a few thresholds `t`, pair costs
/// of at least `t` are made hard and the others ignored, and the resulting
/// constraint network is searched briefly. The cheapest assignment found,
/// scored on the original costs, seeds the exact search.
fn threshold_dives(gm: &CostFunctionNetwork, options: &SolveOptions, ub: f64) -> (Option<(Vec<usize>, f64)>, u64) {
    let top = gm.top();
    let largest = gm.pairs().iter().flat_map(|f| f.costs.iter().copied()).filter(|&c| c < top).fold(0.0, f64::max);
    if largest <= 0.0 {
        return (None, 0);
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut nodes = 0;
    let mut previous: Option<CostFunctionNetwork> = None;
    for (k, fraction) in DIVE_FRACTIONS.iter().enumerate() {
        let budget = match options.node_limit {
            // Two thirds of the caller's budget, shared by the remaining dives.
            Some(limit) => (limit / 3 * 2).saturating_sub(nodes) / (DIVE_FRACTIONS.len() - k) as u64,
            None => DIVE_NODES,
        };
        // A dive that cannot reach a leaf only wastes budget.
        if budget <= gm.n() as u64 {
            break;
        }
        let t = fraction * largest;
        let Some(hard) = hard_part(gm, t) else { continue };
        if previous.as_ref() == Some(&hard) {
            continue;
        }
        let dive = SolveOptions { node_limit: Some(budget), time_limit: options.time_limit, ..Default::default() };
        let mut s = Search::with_costs(&hard, hard.clone(), Mode::Optimize, top, &dive);
        s.conflicts = Some(vec![0.0; gm.n()]);
        s.dfs(0);
        if !s.stopped {
            s.dfs(usize::MAX);
        }
        nodes += s.nodes;
        if let Some(values) = s.best {
            let cost = gm.evaluate_unchecked(&values);
            if cost < ub && best.as_ref().map_or(true, |b| cost < b.1) {
                best = Some((values, cost));
            }
        }
        previous = Some(hard);
    }
    (best, nodes)
}

/// Unary costs of `gm` plus, for every pair with a cost of at least `t`, a
/// hard constraint forbidding exactly those entries.
fn hard_part(gm: &CostFunctionNetwork, t: f64) -> Option<CostFunctionNetwork> {
    let top = gm.top();
    let mut out = CostFunctionNetwork::new(gm.domains().to_vec(), top).ok()?;
    for i in 0..gm.n() {
        out.set_unary(i, gm.unary(i).to_vec()).ok()?;
    }
    for f in gm.pairs() {
        if f.costs.iter().any(|&c| c >= t) {
            let costs = f.costs.iter().map(|&c| if c >= t { top } else { 0.0 }).collect();
            out.set_pair(f.i, f.j, costs).ok()?;
        }
    }
    Some(out)
}

/// Discrepancy budgets of the passes run before the unrestricted search.
const LDS_SCHEDULE: [usize; 6] = [0, 1, 2, 4, 8, 16];

/// Sweeps of min-sum diffusion run before branch and bound.
const DIFFUSION_SWEEPS: usize = 10;

/// Equivalent network with non-negative pair costs, obtained by min-sum
/// diffusion followed by projecting pair rows and columns into the unary
/// costs. Every assignment keeps its cost up to rounding; hard entries stay
/// hard. `None` when there is nothing to gain or shifted costs would come
/// close to `top`.
fn reparametrize(gm: &CostFunctionNetwork) -> Option<CostFunctionNetwork> {
    if gm.pair_count() == 0 {
        return None;
    }
    let top = gm.top();
    let hard = |c: f64| if c >= top { f64::INFINITY } else { c };
    let mut unary: Vec<Vec<f64>> = (0..gm.n()).map(|i| gm.unary(i).iter().map(|&c| hard(c)).collect()).collect();
    let mut pairs: Vec<Vec<f64>> = gm.pairs().iter().map(|f| f.costs.iter().map(|&c| hard(c)).collect()).collect();

    // Min of row `a` of pair `p` seen from variable `x`.
    let row_min = |costs: &[f64], rows: usize, cols: usize, from_i: bool, a: usize| -> f64 {
        if from_i {
            costs[a * cols..(a + 1) * cols].iter().copied().fold(f64::INFINITY, f64::min)
        } else {
            (0..rows).map(|r| costs[r * cols + a]).fold(f64::INFINITY, f64::min)
        }
    };
    let shift = |costs: &mut [f64], rows: usize, cols: usize, from_i: bool, a: usize, delta: f64| {
        let mut apply = |c: &mut f64| *c = if delta == f64::INFINITY { f64::INFINITY } else { *c + delta };
        if from_i {
            costs[a * cols..(a + 1) * cols].iter_mut().for_each(&mut apply);
        } else {
            (0..rows).for_each(|r| apply(&mut costs[r * cols + a]));
        }
    };
    let bound = |unary: &[Vec<f64>], pairs: &[Vec<f64>]| -> f64 {
        unary.iter().chain(pairs).map(|t| t.iter().copied().fold(f64::INFINITY, f64::min)).sum()
    };

    let mut last = bound(&unary, &pairs);
    let mut phi = Vec::new();
    for _ in 0..DIFFUSION_SWEEPS {
        for x in 0..gm.n() {
            let nbs = gm.neighbors(x);
            if nbs.is_empty() {
                continue;
            }
            let dx = gm.domain(x);
            phi.clear();
            for nb in nbs {
                let f = &gm.pairs()[nb.pair];
                let from_i = f.i == x;
                for a in 0..dx {
                    phi.push(row_min(&pairs[nb.pair], f.rows, f.cols, from_i, a));
                }
            }
            let parts = (nbs.len() + 1) as f64;
            for a in 0..dx {
                let total = unary[x][a] + (0..nbs.len()).map(|k| phi[k * dx + a]).sum::<f64>();
                let share = total / parts;
                for (k, nb) in nbs.iter().enumerate() {
                    let f = &gm.pairs()[nb.pair];
                    let delta = if share == f64::INFINITY { f64::INFINITY } else { share - phi[k * dx + a] };
                    if delta != 0.0 {
                        shift(&mut pairs[nb.pair], f.rows, f.cols, f.i == x, a, delta);
                    }
                }
                unary[x][a] = share;
            }
        }
        let b = bound(&unary, &pairs);
        if !(b > last + 1e-6 * last.abs().max(1.0)) {
            break;
        }
        last = b;
    }

    // Project pair rows, then columns, into the unary costs.
    for (p, f) in gm.pairs().iter().enumerate() {
        for (x, from_i, d) in [(f.i, true, f.rows), (f.j, false, f.cols)] {
            for a in 0..d {
                let m = row_min(&pairs[p], f.rows, f.cols, from_i, a);
                if m.is_finite() && m != 0.0 {
                    shift(&mut pairs[p], f.rows, f.cols, from_i, a, -m);
                }
                unary[x][a] += m;
            }
        }
    }

    let limit = 0.5 * top;
    let finite_too_large = unary.iter().chain(&pairs).flatten().any(|&c| c.is_finite() && c.abs() >= limit);
    if finite_too_large || unary.iter().chain(&pairs).flatten().any(|c| c.is_nan()) {
        return None;
    }
    let mut out = gm.clone();
    for (i, u) in unary.into_iter().enumerate() {
        let u = u.into_iter().map(|c| c.min(top)).collect();
        out.set_unary(i, u).ok()?;
    }
    for (p, costs) in pairs.into_iter().enumerate() {
        for (dst, c) in out.pair_costs_mut(p).iter_mut().zip(costs) {
            *dst = c.min(top);
        }
    }
    Some(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Optimize,
    Enumerate { limit: usize },
}

const UNASSIGNED: usize = usize::MAX;

struct Search<'a> {
    /// Reparametrized copy used for bounds and value ordering.
    gm: CostFunctionNetwork,
    /// The network being solved; leaf costs are computed on it.
    orig: &'a CostFunctionNetwork,
    mode: Mode,
    dmax: usize,
    /// `inc[i * dmax + v]`: unary cost plus costs towards assigned variables.
    inc: Vec<f64>,
    values: Vec<usize>,
    unassigned: usize,
    prefix: f64,
    /// Sum of the negative parts of pair minima over pairs with both ends
    /// unassigned.
    neg: f64,
    pair_min_neg: Vec<f64>,
    degree: Vec<usize>,
    /// Wipeout counts per variable; when present, branching prefers small
    /// live domains relative to these weights.
    conflicts: Option<Vec<f64>>,
    trail: Vec<f64>,
    /// Strict threshold: solutions must cost less than this.
    ub: f64,
    best: Option<Vec<usize>>,
    found: Vec<Assignment>,
    nodes: u64,
    backtracks: u64,
    stopped: bool,
    /// Set when a discrepancy budget cut a branch in the current pass.
    discrepancy_cut: bool,
    deadline: Option<Instant>,
    node_limit: Option<u64>,
}

impl<'a> Search<'a> {
    fn new(orig: &'a CostFunctionNetwork, mode: Mode, ub: f64, options: &SolveOptions) -> Self {
        Self::with_costs(orig, reparametrize(orig).unwrap_or_else(|| orig.clone()), mode, ub, options)
    }

    /// Search over `orig` with bounds computed on the equivalent `gm`.
    fn with_costs(
        orig: &'a CostFunctionNetwork,
        gm: CostFunctionNetwork,
        mode: Mode,
        ub: f64,
        options: &SolveOptions,
    ) -> Self {
        let n = gm.n();
        let dmax = gm.max_domain();
        let mut inc = vec![0.0; n * dmax];
        for i in 0..n {
            inc[i * dmax..i * dmax + gm.domain(i)].copy_from_slice(gm.unary(i));
        }
        let pair_min_neg: Vec<f64> = gm.pairs().iter().map(|f| f.min_cost().min(0.0)).collect();
        let degree = (0..n).map(|i| gm.neighbors(i).len()).collect();
        Search {
            gm,
            orig,
            mode,
            dmax,
            inc,
            values: vec![UNASSIGNED; n],
            unassigned: n,
            prefix: 0.0,
            neg: pair_min_neg.iter().sum(),
            pair_min_neg,
            degree,
            conflicts: None,
            trail: Vec::new(),
            ub,
            best: None,
            found: Vec::new(),
            nodes: 0,
            backtracks: 0,
            stopped: false,
            discrepancy_cut: false,
            deadline: options.time_limit.map(|t| Instant::now() + t),
            node_limit: options.node_limit,
        }
    }

    fn tolerance(&self) -> f64 {
        match self.mode {
            Mode::Optimize if self.best.is_some() => 1e-9 * self.ub.abs().max(1.0),
            _ => 0.0,
        }
    }

    /// Nodes whose bound reaches this are pruned. Without an incumbent the
    /// threshold is loosened slightly so rounding in the reparametrized
    /// bound never discards a solution the caller asked for.
    fn prune_at(&self) -> f64 {
        let slack = 1e-9 * self.ub.abs().max(1.0);
        match self.mode {
            Mode::Optimize if self.best.is_some() => self.ub - slack,
            _ => self.ub + slack,
        }
    }

    fn out_of_budget(&mut self) -> bool {
        if self.stopped {
            return true;
        }
        if let Some(limit) = self.node_limit {
            if self.nodes >= limit {
                self.stopped = true;
            }
        }
        if let Some(deadline) = self.deadline {
            if self.nodes % 256 == 0 && Instant::now() >= deadline {
                self.stopped = true;
            }
        }
        self.stopped
    }

    fn done(&self) -> bool {
        match self.mode {
            Mode::Enumerate { limit } => self.found.len() >= limit,
            Mode::Optimize => false,
        }
    }

    /// Depth-first search from the current node. Taking the k-th cheapest
    /// value (0-based) spends k of `budget`.
    fn dfs(&mut self, budget: usize) {
        if self.out_of_budget() || self.done() {
            return;
        }
        self.nodes += 1;
        let top = self.gm.top();
        if self.unassigned == 0 {
            let cost = self.orig.evaluate_unchecked(&self.values);
            let threshold = self.ub - self.tolerance();
            if cost < threshold && cost < top {
                match self.mode {
                    Mode::Optimize => {
                        self.ub = cost;
                        self.best = Some(self.values.clone());
                    }
                    Mode::Enumerate { .. } => self.found.push(Assignment(self.values.clone())),
                }
            }
            return;
        }

        // Per-variable minima and the node bound.
        let n = self.gm.n();
        let mut mins = vec![f64::INFINITY; n];
        let mut sum_min = 0.0;
        for i in 0..n {
            if self.values[i] != UNASSIGNED {
                continue;
            }
            let row = &self.inc[i * self.dmax..i * self.dmax + self.gm.domain(i)];
            let m = row.iter().copied().filter(|&c| c < top).fold(f64::INFINITY, f64::min);
            if m == f64::INFINITY {
                if let Some(w) = &mut self.conflicts {
                    w[i] += 1.0;
                }
                return;
            }
            mins[i] = m;
            sum_min += m;
        }
        let lb = self.prefix + sum_min + self.neg;
        if lb >= self.prune_at() {
            return;
        }

        // Smallest live domain, then the largest gap between the two cheapest
        // live values, then largest degree, then lowest index.
        let mut pick = None;
        let mut best_key = (usize::MAX, f64::NEG_INFINITY, 0usize);
        let mut best_ratio = f64::INFINITY;
        for i in 0..n {
            if self.values[i] != UNASSIGNED {
                continue;
            }
            let slack = self.prune_at() - (lb - mins[i]);
            let row = &self.inc[i * self.dmax..i * self.dmax + self.gm.domain(i)];
            let mut live = 0;
            let mut second = f64::INFINITY;
            let mut seen_min = false;
            for &c in row {
                if c < top && c < slack {
                    live += 1;
                    if c == mins[i] && !seen_min {
                        seen_min = true;
                    } else {
                        second = second.min(c);
                    }
                }
            }
            if live == 0 {
                if let Some(w) = &mut self.conflicts {
                    w[i] += 1.0;
                }
                return;
            }
            let gap = if live == 1 { f64::INFINITY } else { second - mins[i] };
            let key = (live, gap, self.degree[i]);
            let better = match &self.conflicts {
                Some(w) => {
                    let ratio = live as f64 / (1.0 + self.degree[i] as f64 + w[i]);
                    let b = ratio < best_ratio;
                    if b {
                        best_ratio = ratio;
                    }
                    b
                }
                None => {
                    key.0 < best_key.0
                        || (key.0 == best_key.0 && (key.1 > best_key.1 || (key.1 == best_key.1 && key.2 > best_key.2)))
                }
            };
            if better {
                best_key = key;
                pick = Some(i);
            }
        }
        let x = pick.expect("an unassigned variable exists");
        let dx = self.gm.domain(x);
        let mut order: Vec<usize> = (0..dx).collect();
        let row_start = x * self.dmax;
        order.sort_by(|&a, &b| self.inc[row_start + a].total_cmp(&self.inc[row_start + b]).then(a.cmp(&b)));
        let rest = lb - mins[x];
        let mut tried = 0;
        for v in order {
            let c = self.inc[row_start + v];
            if c >= top || rest + c >= self.prune_at() {
                break;
            }
            if tried > budget {
                self.discrepancy_cut = true;
                break;
            }
            if tried > 0 {
                self.backtracks += 1;
            }
            let mark = self.assign(x, v);
            self.dfs(budget.saturating_sub(tried));
            tried += 1;
            self.unassign(x, mark);
            if self.stopped || self.done() {
                return;
            }
        }
    }

    fn assign(&mut self, x: usize, v: usize) -> (usize, f64, f64) {
        let mark = (self.trail.len(), self.prefix, self.neg);
        self.prefix += self.inc[x * self.dmax + v];
        for nb in self.gm.neighbors(x) {
            let j = nb.var;
            if self.values[j] != UNASSIGNED {
                continue;
            }
            self.neg -= self.pair_min_neg[nb.pair];
            let f = &self.gm.pairs()[nb.pair];
            let dj = self.gm.domain(j);
            let row = &mut self.inc[j * self.dmax..j * self.dmax + dj];
            self.trail.extend_from_slice(row);
            if f.i == x {
                for (w, r) in row.iter_mut().enumerate() {
                    *r += f.costs[v * f.cols + w];
                }
            } else {
                for (w, r) in row.iter_mut().enumerate() {
                    *r += f.costs[w * f.cols + v];
                }
            }
        }
        self.values[x] = v;
        self.unassigned -= 1;
        mark
    }

    fn unassign(&mut self, x: usize, mark: (usize, f64, f64)) {
        self.values[x] = UNASSIGNED;
        self.unassigned += 1;
        // Restore neighbour rows in reverse order of saving.
        let mut end = self.trail.len();
        for nb in self.gm.neighbors(x).iter().rev() {
            let j = nb.var;
            if self.values[j] != UNASSIGNED {
                continue;
            }
            let dj = self.gm.domain(j);
            let start = end - dj;
            self.inc[j * self.dmax..j * self.dmax + dj].copy_from_slice(&self.trail[start..end]);
            end = start;
        }
        debug_assert_eq!(end, mark.0);
        self.trail.truncate(mark.0);
        self.prefix = mark.1;
        self.neg = mark.2;
    }
}

struct EliminationOrder {
    order: Vec<usize>,
    width: usize,
    max_table: f64,
}

/// Greedy min-fill ordering (ties: fewest neighbours, then lowest index).
fn min_fill_order(gm: &CostFunctionNetwork) -> EliminationOrder {
    let n = gm.n();
    let mut adj: Vec<Vec<bool>> = vec![vec![false; n]; n];
    for f in gm.pairs() {
        adj[f.i][f.j] = true;
        adj[f.j][f.i] = true;
    }
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    let mut width = 0;
    let mut max_table: f64 = 1.0;
    for _ in 0..n {
        let mut best: Option<(usize, usize, usize)> = None;
        for x in (0..n).filter(|&x| alive[x]) {
            let nbrs: Vec<usize> = (0..n).filter(|&y| alive[y] && adj[x][y]).collect();
            let mut fill = 0;
            for a in 0..nbrs.len() {
                for b in a + 1..nbrs.len() {
                    if !adj[nbrs[a]][nbrs[b]] {
                        fill += 1;
                    }
                }
            }
            let key = (fill, nbrs.len(), x);
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
        let (_, _, x) = best.expect("a live variable remains");
        let nbrs: Vec<usize> = (0..n).filter(|&y| alive[y] && adj[x][y]).collect();
        width = width.max(nbrs.len());
        let table: f64 = nbrs.iter().map(|&y| gm.domain(y) as f64).product::<f64>() * gm.domain(x) as f64;
        max_table = max_table.max(table);
        for a in 0..nbrs.len() {
            for b in a + 1..nbrs.len() {
                adj[nbrs[a]][nbrs[b]] = true;
                adj[nbrs[b]][nbrs[a]] = true;
            }
        }
        alive[x] = false;
        order.push(x);
    }
    EliminationOrder { order, width, max_table }
}

struct Factor {
    vars: Vec<usize>,
    strides: Vec<usize>,
    table: Vec<f64>,
}

impl Factor {
    fn new(vars: Vec<usize>, gm: &CostFunctionNetwork) -> Self {
        let mut strides = vec![0; vars.len()];
        let mut s = 1;
        for k in (0..vars.len()).rev() {
            strides[k] = s;
            s *= gm.domain(vars[k]);
        }
        Factor { vars, strides, table: vec![0.0; s] }
    }

    #[inline]
    fn at(&self, values: &[usize]) -> f64 {
        let mut idx = 0;
        for (v, s) in self.vars.iter().zip(&self.strides) {
            idx += values[*v] * s;
        }
        self.table[idx]
    }
}

fn eliminate(gm: &CostFunctionNetwork, options: &SolveOptions, table_limit: f64) -> Option<SolverResult> {
    let order = min_fill_order(gm);
    if order.max_table > table_limit.min(ELIMINATION_TABLE_LIMIT * 16.0) {
        return None;
    }
    Some(eliminate_with(gm, options, &order.order))
}

/// Min-sum bucket elimination along `order`, then argmin backtracking.
fn eliminate_with(gm: &CostFunctionNetwork, options: &SolveOptions, order: &[usize]) -> SolverResult {
    let n = gm.n();
    let mut position = vec![0; n];
    for (k, &x) in order.iter().enumerate() {
        position[x] = k;
    }
    let mut buckets: Vec<Vec<Factor>> = (0..n).map(|_| Vec::new()).collect();
    let place = |f: Factor, buckets: &mut Vec<Vec<Factor>>| {
        let first = f.vars.iter().copied().min_by_key(|&v| position[v]).expect("non-empty scope");
        buckets[position[first]].push(f);
    };
    for i in 0..n {
        let mut f = Factor::new(vec![i], gm);
        f.table.copy_from_slice(gm.unary(i));
        place(f, &mut buckets);
    }
    for p in gm.pairs() {
        let mut f = Factor::new(vec![p.i, p.j], gm);
        f.table.copy_from_slice(&p.costs);
        place(f, &mut buckets);
    }

    // For each eliminated variable: its separator and argmin table.
    let mut argmins: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = Vec::with_capacity(n);
    let mut values = vec![0usize; n];
    let mut constant = 0.0;
    for (k, &x) in order.iter().enumerate() {
        let bucket = std::mem::take(&mut buckets[k]);
        let mut sep: Vec<usize> = bucket.iter().flat_map(|f| f.vars.iter().copied()).filter(|&v| v != x).collect();
        sep.sort_unstable();
        sep.dedup();
        let mut out = Factor::new(sep.clone(), gm);
        let mut arg = vec![0usize; out.table.len()];
        let dx = gm.domain(x);
        for idx in 0..out.table.len() {
            let mut rem = idx;
            for (v, s) in sep.iter().zip(&out.strides) {
                values[*v] = rem / s;
                rem %= s;
            }
            let mut best = f64::INFINITY;
            let mut best_v = 0;
            for v in 0..dx {
                values[x] = v;
                let c: f64 = bucket.iter().map(|f| f.at(&values)).sum();
                if c < best {
                    best = c;
                    best_v = v;
                }
            }
            out.table[idx] = best;
            arg[idx] = best_v;
        }
        argmins.push((sep.clone(), out.strides.clone(), arg));
        if sep.is_empty() {
            constant += out.table[0];
        } else {
            place(out, &mut buckets);
        }
    }
    let _ = constant;
    for (k, &x) in order.iter().enumerate().rev() {
        let (sep, strides, arg) = &argmins[k];
        let idx: usize = sep.iter().zip(strides).map(|(v, s)| values[*v] * s).sum();
        values[x] = arg[idx];
    }
    let cost = gm.evaluate_unchecked(&values);
    let ub = options.upper_bound.unwrap_or(f64::INFINITY).min(gm.top());
    if cost < ub {
        SolverResult {
            assignment: Some(Assignment(values)),
            cost,
            status: Status::Optimal,
            nodes: 0,
            backtracks: 0,
        }
    } else {
        infeasible(gm, 0, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm::tests::example_one;
    use crate::gm::DEFAULT_TOP;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gm(rng: &mut ChaCha8Rng, n: usize, d: usize, density: f64) -> CostFunctionNetwork {
        let mut gm = CostFunctionNetwork::uniform(n, d, DEFAULT_TOP).unwrap();
        for i in 0..n {
            gm.set_unary(i, (0..d).map(|_| rng.gen_range(-1.0..2.0)).collect()).unwrap();
            for j in i + 1..n {
                if rng.gen_bool(density) {
                    gm.set_pair(i, j, (0..d * d).map(|_| rng.gen_range(-1.0..3.0)).collect()).unwrap();
                }
            }
        }
        gm
    }

    #[test]
    fn zero_network_is_trivially_optimal() {
        let gm = CostFunctionNetwork::uniform(4, 3, DEFAULT_TOP).unwrap();
        let r = solve_default(&gm);
        assert!(r.proven_optimal());
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn example_one_solution() {
        let gm = example_one(10.0);
        for strategy in [Strategy::Auto, Strategy::BranchAndBound, Strategy::Elimination] {
            let r = solve(&gm, &SolveOptions { strategy, ..Default::default() });
            assert_eq!(r.assignment, Some(Assignment(vec![0, 1, 1, 0])), "{strategy:?}");
            assert_eq!(r.cost, 0.0);
        }
        let b = brute_force(&gm).unwrap();
        assert_eq!(b.assignment, Some(Assignment(vec![0, 1, 1, 0])));
        assert_eq!(enumerate(&gm, 10.0, 10).unwrap(), vec![Assignment(vec![0, 1, 1, 0])]);
    }

    #[test]
    fn enumerate_zero_network() {
        let gm = CostFunctionNetwork::uniform(2, 2, DEFAULT_TOP).unwrap();
        assert_eq!(enumerate(&gm, 1.0, 100).unwrap().len(), 4);
        assert_eq!(enumerate(&gm, 1.0, 2).unwrap().len(), 2);
        assert!(enumerate(&gm, 1.0, 0).is_err());
    }

    #[test]
    fn single_variable_brute_force() {
        let mut gm = CostFunctionNetwork::uniform(1, 4, DEFAULT_TOP).unwrap();
        gm.set_unary(0, vec![3.0, -1.0, 2.0, -1.0]).unwrap();
        let r = brute_force(&gm).unwrap();
        assert_eq!(r.assignment, Some(Assignment(vec![1])));
        assert_eq!(r.cost, -1.0);
    }

    #[test]
    fn infeasible_network() {
        let mut gm = CostFunctionNetwork::uniform(3, 2, 10.0).unwrap();
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            gm.set_pair(i, j, vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        }
        for strategy in [Strategy::BranchAndBound, Strategy::Elimination] {
            let r = solve(&gm, &SolveOptions { strategy, ..Default::default() });
            assert!(r.is_infeasible());
            assert_eq!(r.cost, 10.0);
        }
        assert!(brute_force(&gm).unwrap().is_infeasible());
        assert!(impute(&gm, &PartialAssignment(vec![Some(0), None, None])).is_err());
    }

    #[test]
    fn imputation() {
        let gm = example_one(10.0);
        let y = impute(&gm, &PartialAssignment(vec![Some(0), None, None, None])).unwrap();
        assert_eq!(y, Assignment(vec![0, 1, 1, 0]));
        let full = PartialAssignment(vec![Some(1), Some(1), Some(0), Some(0)]);
        assert_eq!(impute(&gm, &full).unwrap(), Assignment(vec![1, 1, 0, 0]));
    }

    #[test]
    fn node_limit_returns_anytime_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gm = random_gm(&mut rng, 12, 3, 1.0);
        let r = solve(&gm, &SolveOptions { node_limit: Some(20), strategy: Strategy::BranchAndBound, ..Default::default() });
        assert_eq!(r.status, Status::Feasible);
        let y = r.assignment.unwrap();
        assert_eq!(gm.evaluate(&y).unwrap(), r.cost);
    }

    #[test]
    fn strategies_agree_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..60 {
            let n = rng.gen_range(1..8);
            let d = rng.gen_range(1..4);
            let density = rng.gen_range(0.2..1.0);
            let gm = random_gm(&mut rng, n, d, density);
            let truth = brute_force(&gm).unwrap().cost;
            for strategy in [Strategy::Auto, Strategy::BranchAndBound, Strategy::Elimination] {
                let r = solve(&gm, &SolveOptions { strategy, ..Default::default() });
                assert!((r.cost - truth).abs() < 1e-9, "{strategy:?}: {} vs {truth}", r.cost);
                assert!(r.proven_optimal());
            }
        }
    }

    #[test]
    fn upper_bound_is_strict() {
        let gm = example_one(10.0);
        let r = solve(&gm, &SolveOptions { upper_bound: Some(0.0), strategy: Strategy::BranchAndBound, ..Default::default() });
        assert!(r.is_infeasible());
    }
}
