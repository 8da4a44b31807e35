//! Pseudo-loglikelihood losses over cost function networks.
//!
//! `npll` sums `-log P(Y_i = y_i | y_-i)` over a scope of variables. The
//! Emmental variant `epll` computes variable `i`'s conditional after muting
//! the pair functions between `i` and a random hole set `H_i`. Both come with
//! exact gradients with respect to every unary and pairwise cost of the
//! network.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gm::{softmin_into, Assignment, CostFunctionNetwork};

/// Per-variable hole sets `H_i`, with `i` never in `H_i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    holes: Vec<Vec<usize>>,
}

impl MaskSet {
    /// No holes: the E-PLL then reduces to the NPLL.
    pub fn empty(n: usize) -> Self {
        MaskSet { holes: vec![Vec::new(); n] }
    }

    pub fn from_holes(holes: Vec<Vec<usize>>) -> Result<Self> {
        let n = holes.len();
        for (i, h) in holes.iter().enumerate() {
            if let Some(&j) = h.iter().find(|&&j| j >= n || j == i) {
                return Err(Error::input(format!("hole {j} is invalid for variable {i} (n = {n})")));
            }
        }
        Ok(MaskSet { holes })
    }

    pub fn n(&self) -> usize {
        self.holes.len()
    }

    pub fn holes(&self, i: usize) -> &[usize] {
        &self.holes[i]
    }

    pub fn is_empty(&self) -> bool {
        self.holes.iter().all(Vec::is_empty)
    }
}

/// How many holes each variable gets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HoleCount {
    /// Exactly `k` holes per variable.
    Count(usize),
    /// `round(fraction * (n - 1))` holes per variable.
    Fraction(f64),
}

impl HoleCount {
    pub fn resolve(self, n: usize) -> Result<usize> {
        match self {
            HoleCount::Count(k) => Ok(k),
            HoleCount::Fraction(f) if (0.0..=1.0).contains(&f) => {
                Ok((f * n.saturating_sub(1) as f64).round() as usize)
            }
            HoleCount::Fraction(f) => Err(Error::input(format!("hole fraction {f} is outside [0, 1]"))),
        }
    }
}

/// Draws, independently for every variable `i`, a uniform `k`-subset of the
/// other variables.
pub fn sample_masks<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<MaskSet> {
    if n == 0 || k > n - 1 {
        return Err(Error::input(format!("hole count {k} out of range for {n} variables")));
    }
    let mut holes = Vec::with_capacity(n);
    for i in 0..n {
        let mut h: Vec<usize> = if k == 0 {
            Vec::new()
        } else {
            index::sample(rng, n - 1, k)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        };
        h.sort_unstable();
        holes.push(h);
    }
    Ok(MaskSet { holes })
}

pub fn sample_masks_with<R: Rng + ?Sized>(n: usize, count: HoleCount, rng: &mut R) -> Result<MaskSet> {
    sample_masks(n, count.resolve(n)?, rng)
}

/// Gradients of a loss with respect to the costs of a network, laid out like
/// the network: one vector per variable and one canonical matrix per stored
/// pair (same order as [`CostFunctionNetwork::pairs`]).
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    pub unary: Vec<Vec<f64>>,
    pub pairwise: Vec<Vec<f64>>,
}

impl LossGradients {
    pub fn zeros(gm: &CostFunctionNetwork) -> Self {
        LossGradients {
            unary: gm.domains().iter().map(|&d| vec![0.0; d]).collect(),
            pairwise: gm.pairs().iter().map(|f| vec![0.0; f.costs.len()]).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.unary
            .iter()
            .chain(&self.pairwise)
            .flatten()
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn check_inputs(gm: &CostFunctionNetwork, y: &Assignment, masks: Option<&MaskSet>, scope: &[usize]) -> Result<()> {
    gm.check_assignment(y)?;
    if let Some(&i) = scope.iter().find(|&&i| i >= gm.n()) {
        return Err(Error::input(format!("scope variable {i} out of range")));
    }
    if let Some(m) = masks {
        if m.n() != gm.n() {
            return Err(Error::input(format!("mask set is for {} variables, network has {}", m.n(), gm.n())));
        }
    }
    Ok(())
}

/// Shared kernel. `masks = None` is the plain pseudo-likelihood.
fn pseudo_nll(
    gm: &CostFunctionNetwork,
    y: &Assignment,
    masks: Option<&MaskSet>,
    scope: &[usize],
    mut grads: Option<&mut LossGradients>,
) -> f64 {
    let n = gm.n();
    let y = y.values();
    let dmax = gm.max_domain();
    let mut m = vec![0.0; dmax];
    let mut p = vec![0.0; dmax];
    let mut mask = Vec::new();
    let mut total = 0.0;
    for &i in scope {
        let d = gm.domain(i);
        let (m, p) = (&mut m[..d], &mut p[..d]);
        if let Some(ms) = masks {
            mask.clear();
            mask.resize(n, false);
            for &j in ms.holes(i) {
                mask[j] = true;
            }
        }
        gm.messages_into(y, i, &mask, m);
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let z: f64 = m.iter().map(|&c| (lo - c).exp()).sum();
        total += (m[y[i]] - lo) + z.ln();

        if let Some(g) = grads.as_deref_mut() {
            softmin_into(m, p);
            let yi = y[i];
            let gu = &mut g.unary[i];
            for v in 0..d {
                gu[v] -= p[v];
            }
            gu[yi] += 1.0;
            for nb in gm.neighbors(i) {
                if !mask.is_empty() && mask[nb.var] {
                    continue;
                }
                let f = &gm.pairs()[nb.pair];
                let yj = y[nb.var];
                let gp = &mut g.pairwise[nb.pair];
                if f.i == i {
                    for v in 0..d {
                        gp[v * f.cols + yj] -= p[v];
                    }
                    gp[yi * f.cols + yj] += 1.0;
                } else {
                    let row = &mut gp[yj * f.cols..(yj + 1) * f.cols];
                    for v in 0..d {
                        row[v] -= p[v];
                    }
                    row[yi] += 1.0;
                }
            }
        }
    }
    total
}

/// Negative pseudo-loglikelihood of `y` restricted to `scope`.
pub fn npll(gm: &CostFunctionNetwork, y: &Assignment, scope: &[usize]) -> Result<f64> {
    check_inputs(gm, y, None, scope)?;
    Ok(pseudo_nll(gm, y, None, scope, None))
}

pub fn npll_grad(gm: &CostFunctionNetwork, y: &Assignment, scope: &[usize]) -> Result<LossGradients> {
    check_inputs(gm, y, None, scope)?;
    let mut g = LossGradients::zeros(gm);
    pseudo_nll(gm, y, None, scope, Some(&mut g));
    Ok(g)
}

/// Emmental pseudo-loglikelihood: variable `i`'s conditional ignores the
/// pair functions shared with the variables in `masks.holes(i)`.
pub fn epll(gm: &CostFunctionNetwork, y: &Assignment, masks: &MaskSet, scope: &[usize]) -> Result<f64> {
    check_inputs(gm, y, Some(masks), scope)?;
    Ok(pseudo_nll(gm, y, Some(masks), scope, None))
}

pub fn epll_grad(gm: &CostFunctionNetwork, y: &Assignment, masks: &MaskSet, scope: &[usize]) -> Result<LossGradients> {
    Ok(epll_with_grad(gm, y, masks, scope)?.1)
}

pub fn epll_with_grad(
    gm: &CostFunctionNetwork,
    y: &Assignment,
    masks: &MaskSet,
    scope: &[usize],
) -> Result<(f64, LossGradients)> {
    check_inputs(gm, y, Some(masks), scope)?;
    let mut g = LossGradients::zeros(gm);
    let loss = pseudo_nll(gm, y, Some(masks), scope, Some(&mut g));
    Ok((loss, g))
}

/// `epll + l1 * sum |pairwise costs|`. Unary costs are not regularized; the
/// subgradient of `|0|` is taken as 0.
pub fn total_loss_and_grad(
    gm: &CostFunctionNetwork,
    y: &Assignment,
    masks: &MaskSet,
    scope: &[usize],
    l1: f64,
) -> Result<(f64, LossGradients)> {
    if !(l1 >= 0.0) {
        return Err(Error::input(format!("L1 multiplier must be non-negative, got {l1}")));
    }
    let (mut loss, mut g) = epll_with_grad(gm, y, masks, scope)?;
    if l1 > 0.0 {
        let mut norm = 0.0;
        for (f, gp) in gm.pairs().iter().zip(g.pairwise.iter_mut()) {
            for (c, gc) in f.costs.iter().zip(gp.iter_mut()) {
                norm += c.abs();
                *gc += l1 * sign(*c);
            }
        }
        loss += l1 * norm;
    }
    Ok((loss, g))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
