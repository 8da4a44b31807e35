//! Discrete pairwise cost function networks.
//!
//! A [`CostFunctionNetwork`] holds one cost vector per variable and a sparse
//! set of pairwise cost matrices. Matrices are stored once, in canonical
//! `i < j` orientation; reading pair `(j, i)` goes through a transposed view.
//! Costs are plain reals. The finite value `top` stands for an infinite cost:
//! any tuple priced at `top` is forbidden.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cost cap used as the surrogate for an infinite cost.
pub const DEFAULT_TOP: f64 = 1e6;

/// A complete assignment: one value index per variable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn new(values: Vec<usize>) -> Self {
        Assignment(values)
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_partial(&self) -> PartialAssignment {
        PartialAssignment(self.0.iter().map(|&v| Some(v)).collect())
    }
}

impl std::ops::Index<usize> for Assignment {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// An assignment where some variables may be unobserved (`None`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartialAssignment(pub Vec<Option<usize>>);

impl PartialAssignment {
    pub fn unobserved(n: usize) -> Self {
        PartialAssignment(vec![None; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, value: Option<usize>) {
        self.0[i] = value;
    }

    pub fn observed_count(&self) -> usize {
        self.0.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }

    /// Returns the complete assignment if every variable is observed.
    pub fn to_complete(&self) -> Option<Assignment> {
        self.0.iter().copied().collect::<Option<Vec<_>>>().map(Assignment)
    }

    /// True when every observed entry agrees with `full`.
    pub fn is_consistent_with(&self, full: &Assignment) -> bool {
        self.0.len() == full.len()
            && self
                .0
                .iter()
                .zip(full.values())
                .all(|(o, &v)| o.map_or(true, |o| o == v))
    }
}

/// One pairwise cost function, stored for `i < j` as a row-major
/// `rows x cols` matrix indexed by `(value of i, value of j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFunction {
    pub i: usize,
    pub j: usize,
    pub rows: usize,
    pub cols: usize,
    pub costs: Vec<f64>,
}

impl PairFunction {
    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.costs[a * self.cols + b]
    }

    /// Cost seen from variable `var`'s side: `var` takes `own`, the other
    /// endpoint takes `other`.
    #[inline]
    pub fn get_from(&self, var: usize, own: usize, other: usize) -> f64 {
        if var == self.i {
            self.get(own, other)
        } else {
            self.get(other, own)
        }
    }

    pub fn other(&self, var: usize) -> usize {
        if var == self.i {
            self.j
        } else {
            self.i
        }
    }

    pub fn min_cost(&self) -> f64 {
        self.costs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Adjacency entry: the neighbouring variable and the index of the shared
/// pair function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub var: usize,
    pub pair: usize,
}

#[derive(Clone, Debug)]
pub struct CostFunctionNetwork {
    domains: Vec<usize>,
    unary: Vec<Vec<f64>>,
    pairs: Vec<PairFunction>,
    pair_index: HashMap<(usize, usize), usize>,
    neighbors: Vec<Vec<Neighbor>>,
    top: f64,
}

impl PartialEq for CostFunctionNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.domains == other.domains
            && self.unary == other.unary
            && self.top.to_bits() == other.top.to_bits()
            && self.pairs == other.pairs
    }
}

impl CostFunctionNetwork {
    /// An all-zero network over variables with the given domain sizes.
    pub fn new(domains: Vec<usize>, top: f64) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::input("a cost function network needs at least one variable"));
        }
        if let Some(i) = domains.iter().position(|&d| d == 0) {
            return Err(Error::input(format!("variable {i} has an empty domain")));
        }
        if !(top.is_finite() && top > 0.0) {
            return Err(Error::input(format!("top must be finite and positive, got {top}")));
        }
        let unary = domains.iter().map(|&d| vec![0.0; d]).collect();
        let n = domains.len();
        Ok(CostFunctionNetwork {
            domains,
            unary,
            pairs: Vec::new(),
            pair_index: HashMap::new(),
            neighbors: vec![Vec::new(); n],
            top,
        })
    }

    pub fn uniform(n: usize, d: usize, top: f64) -> Result<Self> {
        Self::new(vec![d; n], top)
    }

    pub fn n(&self) -> usize {
        self.domains.len()
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn domain(&self, i: usize) -> usize {
        self.domains[i]
    }

    pub fn max_domain(&self) -> usize {
        self.domains.iter().copied().max().unwrap_or(0)
    }

    pub fn top(&self) -> f64 {
        self.top
    }

    pub fn unary(&self, i: usize) -> &[f64] {
        &self.unary[i]
    }

    pub fn unary_all(&self) -> &[Vec<f64>] {
        &self.unary
    }

    pub fn pairs(&self) -> &[PairFunction] {
        &self.pairs
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn neighbors(&self, i: usize) -> &[Neighbor] {
        &self.neighbors[i]
    }

    /// Index of the pair function over `{i, j}`, in either orientation.
    pub fn pair_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.pair_index.get(&key).copied()
    }

    pub fn pair(&self, i: usize, j: usize) -> Option<&PairFunction> {
        self.pair_index(i, j).map(|p| &self.pairs[p])
    }

    /// `M[i,j](a,b)`; absent pairs read as zero. Works for either orientation.
    pub fn pair_cost(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        match self.pair(i, j) {
            Some(f) => f.get_from(i, a, b),
            None => 0.0,
        }
    }

    pub fn set_unary(&mut self, i: usize, costs: Vec<f64>) -> Result<()> {
        self.check_var(i)?;
        if costs.len() != self.domains[i] {
            return Err(Error::input(format!(
                "unary cost vector for variable {i} has length {}, domain size is {}",
                costs.len(),
                self.domains[i]
            )));
        }
        self.unary[i] = costs.into_iter().map(|c| self.cap(c)).collect();
        Ok(())
    }

    /// Sets (or replaces) the cost matrix over `{i, j}`. `costs` is row-major
    /// over `(value of i, value of j)`; when `i > j` it is transposed into the
    /// canonical orientation.
    pub fn set_pair(&mut self, i: usize, j: usize, costs: Vec<f64>) -> Result<()> {
        self.check_var(i)?;
        self.check_var(j)?;
        if i == j {
            return Err(Error::input(format!("pair ({i}, {j}) is not over two distinct variables")));
        }
        let (di, dj) = (self.domains[i], self.domains[j]);
        if costs.len() != di * dj {
            return Err(Error::input(format!(
                "pair ({i}, {j}) matrix has {} entries, expected {di}x{dj}",
                costs.len()
            )));
        }
        let (lo, hi, canonical) = if i < j {
            (i, j, costs)
        } else {
            let mut t = vec![0.0; di * dj];
            for a in 0..di {
                for b in 0..dj {
                    t[b * di + a] = costs[a * dj + b];
                }
            }
            (j, i, t)
        };
        let canonical: Vec<f64> = canonical.into_iter().map(|c| self.cap(c)).collect();
        let f = PairFunction {
            i: lo,
            j: hi,
            rows: self.domains[lo],
            cols: self.domains[hi],
            costs: canonical,
        };
        match self.pair_index.get(&(lo, hi)) {
            Some(&p) => self.pairs[p] = f,
            None => {
                let p = self.pairs.len();
                self.pairs.push(f);
                self.pair_index.insert((lo, hi), p);
                self.neighbors[lo].push(Neighbor { var: hi, pair: p });
                self.neighbors[hi].push(Neighbor { var: lo, pair: p });
            }
        }
        Ok(())
    }

    /// Mutable access to the canonical cost matrix of pair `p`. Written costs
    /// are not re-capped; callers keep them within `[-top, top]`.
    pub fn pair_costs_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.pairs[p].costs
    }

    fn cap(&self, c: f64) -> f64 {
        c.clamp(-self.top, self.top)
    }

    fn check_var(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            Err(Error::input(format!("variable {i} out of range (n = {})", self.n())))
        } else {
            Ok(())
        }
    }

    pub fn check_assignment(&self, y: &Assignment) -> Result<()> {
        if y.len() != self.n() {
            return Err(Error::input(format!(
                "assignment has {} values for {} variables",
                y.len(),
                self.n()
            )));
        }
        for (i, (&v, &d)) in y.values().iter().zip(&self.domains).enumerate() {
            if v >= d {
                return Err(Error::input(format!(
                    "value {v} of variable {i} is outside its domain of size {d}"
                )));
            }
        }
        Ok(())
    }

    pub fn check_partial(&self, y: &PartialAssignment) -> Result<()> {
        if y.len() != self.n() {
            return Err(Error::input(format!(
                "partial assignment has {} entries for {} variables",
                y.len(),
                self.n()
            )));
        }
        for (i, (v, &d)) in y.0.iter().zip(&self.domains).enumerate() {
            if let Some(v) = *v {
                if v >= d {
                    return Err(Error::input(format!(
                        "value {v} of variable {i} is outside its domain of size {d}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Joint cost of a complete assignment. Any term at `top` makes the
    /// result `top`; finite sums are capped at `top`.
    pub fn evaluate(&self, y: &Assignment) -> Result<f64> {
        self.check_assignment(y)?;
        Ok(self.evaluate_unchecked(y.values()))
    }

    pub(crate) fn evaluate_unchecked(&self, y: &[usize]) -> f64 {
        let top = self.top;
        let mut total = 0.0;
        for (u, &v) in self.unary.iter().zip(y) {
            let c = u[v];
            if c >= top {
                return top;
            }
            total += c;
        }
        for f in &self.pairs {
            let c = f.get(y[f.i], y[f.j]);
            if c >= top {
                return top;
            }
            total += c;
        }
        total.min(top)
    }

    /// Incoming messages of variable `i` under `y`: for every value `v`,
    /// `unary[i](v) + sum_{j != i, j not muted} M[i,j](v, y_j)`.
    pub fn messages(&self, y: &Assignment, i: usize, muted: &[usize]) -> Result<Vec<f64>> {
        self.check_assignment(y)?;
        self.check_var(i)?;
        if muted.contains(&i) {
            return Err(Error::input(format!("variable {i} cannot be muted in its own messages")));
        }
        if let Some(&j) = muted.iter().find(|&&j| j >= self.n()) {
            return Err(Error::input(format!("muted variable {j} out of range")));
        }
        let mut mask = vec![false; self.n()];
        for &j in muted {
            mask[j] = true;
        }
        let mut out = vec![0.0; self.domains[i]];
        self.messages_into(y.values(), i, &mask, &mut out);
        Ok(out)
    }

    /// Unchecked message computation; `mask[j]` mutes variable `j`. An empty
    /// mask mutes nothing. The summation order (unary, then neighbours in
    /// insertion order) is fixed, so equal inputs give bit-equal outputs.
    pub(crate) fn messages_into(&self, y: &[usize], i: usize, mask: &[bool], out: &mut [f64]) {
        out.copy_from_slice(&self.unary[i]);
        for nb in &self.neighbors[i] {
            if !mask.is_empty() && mask[nb.var] {
                continue;
            }
            let f = &self.pairs[nb.pair];
            let yj = y[nb.var];
            if f.i == i {
                let row_stride = f.cols;
                for (v, o) in out.iter_mut().enumerate() {
                    *o += f.costs[v * row_stride + yj];
                }
            } else {
                let row = &f.costs[yj * f.cols..(yj + 1) * f.cols];
                for (o, c) in out.iter_mut().zip(row) {
                    *o += c;
                }
            }
        }
    }

    /// `P(Y_i | y_-i)` under the network with the variables in `muted`
    /// silenced: `softmax(-messages)`.
    pub fn conditional_distribution(
        &self,
        y: &Assignment,
        i: usize,
        muted: &[usize],
    ) -> Result<Vec<f64>> {
        let m = self.messages(y, i, muted)?;
        Ok(softmin(&m))
    }

    /// Returns a copy where every observed variable is pinned to its observed
    /// value: unary cost 0 there and `top` elsewhere.
    pub fn condition(&self, partial: &PartialAssignment) -> Result<Self> {
        self.check_partial(partial)?;
        let mut out = self.clone();
        for (i, v) in partial.0.iter().enumerate() {
            if let Some(v) = *v {
                let u = &mut out.unary[i];
                u.iter_mut().for_each(|c| *c = self.top);
                u[v] = 0.0;
            }
        }
        Ok(out)
    }

    /// The same network with every pairwise matrix replaced by `f(matrix)`.
    pub(crate) fn map_pairs(&self, mut f: impl FnMut(&PairFunction) -> Vec<f64>) -> Self {
        let mut out = self.clone();
        for (p, pf) in self.pairs.iter().enumerate() {
            out.pairs[p].costs = f(pf);
        }
        out
    }

    /// Product of domain sizes, saturating.
    pub fn search_space_size(&self) -> f64 {
        self.domains.iter().map(|&d| d as f64).product()
    }

    pub fn to_document(&self) -> CfnDocument {
        CfnDocument {
            n: self.n(),
            domains: self.domains.clone(),
            top: self.top,
            unary: self.unary.clone(),
            pairwise: self
                .pairs
                .iter()
                .map(|f| PairDocument {
                    i: f.i,
                    j: f.j,
                    costs: f.costs.chunks(f.cols).map(<[f64]>::to_vec).collect(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &CfnDocument) -> Result<Self> {
        if doc.domains.len() != doc.n {
            return Err(Error::parse("domains", format!("{} domain sizes for n = {}", doc.domains.len(), doc.n)));
        }
        if doc.unary.len() != doc.n {
            return Err(Error::parse("unary", format!("{} unary vectors for n = {}", doc.unary.len(), doc.n)));
        }
        let mut gm = Self::new(doc.domains.clone(), doc.top).map_err(|e| Error::parse("root", e.to_string()))?;
        for (i, u) in doc.unary.iter().enumerate() {
            check_costs(u, doc.top).map_err(|m| Error::parse(format!("unary[{i}]"), m))?;
            gm.set_unary(i, u.clone())
                .map_err(|e| Error::parse(format!("unary[{i}]"), e.to_string()))?;
        }
        for (k, p) in doc.pairwise.iter().enumerate() {
            let loc = format!("pairwise[{k}]");
            if p.i >= p.j {
                return Err(Error::parse(loc, format!("requires i < j, got i = {}, j = {}", p.i, p.j)));
            }
            if p.j >= doc.n {
                return Err(Error::parse(loc, format!("variable {} out of range", p.j)));
            }
            if gm.pair_index(p.i, p.j).is_some() {
                return Err(Error::parse(loc, format!("duplicate pair ({}, {})", p.i, p.j)));
            }
            let (di, dj) = (doc.domains[p.i], doc.domains[p.j]);
            if p.costs.len() != di || p.costs.iter().any(|r| r.len() != dj) {
                return Err(Error::parse(loc, format!("cost matrix shape does not match {di}x{dj}")));
            }
            let flat: Vec<f64> = p.costs.concat();
            check_costs(&flat, doc.top).map_err(|m| Error::parse(loc.clone(), m))?;
            gm.set_pair(p.i, p.j, flat).map_err(|e| Error::parse(loc, e.to_string()))?;
        }
        Ok(gm)
    }

    pub fn export_cfn<W: std::io::Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer_pretty(sink, &self.to_document())?;
        Ok(())
    }

    pub fn import_cfn<R: std::io::Read>(source: R) -> Result<Self> {
        let doc: CfnDocument = serde_json::from_reader(source).map_err(|e| {
            Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        Self::from_document(&doc)
    }
}

fn check_costs(costs: &[f64], top: f64) -> std::result::Result<(), String> {
    match costs.iter().find(|c| !c.is_finite() || c.abs() > top) {
        Some(c) => Err(format!("cost {c} is not within [-top, top]")),
        None => Ok(()),
    }
}

/// `softmax(-m)` with max-subtraction.
pub fn softmin(m: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    softmin_into(m, &mut out);
    out
}

pub(crate) fn softmin_into(m: &[f64], out: &mut [f64]) {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (o, &c) in out.iter_mut().zip(m) {
        *o = (lo - c).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Interchange document for a cost function network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfnDocument {
    pub n: usize,
    pub domains: Vec<usize>,
    pub top: f64,
    pub unary: Vec<Vec<f64>>,
    pub pairwise: Vec<PairDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDocument {
    pub i: usize,
    pub j: usize,
    pub costs: Vec<Vec<f64>>,
}
