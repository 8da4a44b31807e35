//! Turning learned soft costs into explicit hard constraints.

use std::fmt;

use crate::error::{Error, Result};
use crate::gm::{Assignment, CostFunctionNetwork};

/// Pairwise costs below `t` become 0, the others `top`. Unary costs are kept.
pub fn threshold(gm: &CostFunctionNetwork, t: f64) -> Result<CostFunctionNetwork> {
    if !(t > 0.0) {
        return Err(Error::input(format!("threshold must be positive, got {t}")));
    }
    let top = gm.top();
    Ok(gm.map_pairs(|f| f.costs.iter().map(|&c| if c < t { 0.0 } else { top }).collect()))
}

/// One pairwise table entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub i: usize,
    pub j: usize,
    pub a: usize,
    pub b: usize,
    pub cost: f64,
}

#[derive(Clone, Debug)]
pub struct HardenOutcome {
    pub gm: CostFunctionNetwork,
    /// Entries set to `top`, in the order they were hardened.
    pub hardened: Vec<Entry>,
    /// The entry that ended the pass because a training solution uses it.
    pub stopped_at: Option<Entry>,
}

/// How many hardenings are applied between two consistency checks.
pub const CHECK_EVERY: usize = 100;

/// Hardens positive entries in decreasing cost order (ties by `(i, j, a, b)`)
/// as long as no training solution uses them. The pass ends at the first
/// entry some training solution uses. Every [`CHECK_EVERY`] hardenings all
/// training solutions are re-evaluated; a failing batch is bisected and cut
/// back to its last consistent prefix.
pub fn harden(gm: &CostFunctionNetwork, training_solutions: &[Assignment]) -> Result<HardenOutcome> {
    let top = gm.top();
    harden_with_check(gm, training_solutions, |h| {
        Ok(training_solutions.iter().all(|y| h.evaluate(y).is_ok_and(|c| c < top)))
    })
}

/// [`harden`] with a caller-supplied consistency check.
pub fn harden_with_check(
    gm: &CostFunctionNetwork,
    training_solutions: &[Assignment],
    mut consistent: impl FnMut(&CostFunctionNetwork) -> Result<bool>,
) -> Result<HardenOutcome> {
    if training_solutions.is_empty() {
        return Err(Error::input("hardening needs at least one training solution"));
    }
    for y in training_solutions {
        gm.check_assignment(y)?;
    }
    let top = gm.top();
    let mut seen: Vec<Vec<bool>> = gm.pairs().iter().map(|f| vec![false; f.costs.len()]).collect();
    for y in training_solutions {
        for (f, s) in gm.pairs().iter().zip(seen.iter_mut()) {
            s[y[f.i] * f.cols + y[f.j]] = true;
        }
    }
    let mut candidates: Vec<(usize, usize, Entry)> = Vec::new();
    for (p, f) in gm.pairs().iter().enumerate() {
        for (k, &c) in f.costs.iter().enumerate() {
            if c > 0.0 && c < top {
                candidates.push((p, k, Entry { i: f.i, j: f.j, a: k / f.cols, b: k % f.cols, cost: c }));
            }
        }
    }
    candidates.sort_by(|x, y| {
        y.2.cost
            .total_cmp(&x.2.cost)
            .then((x.2.i, x.2.j, x.2.a, x.2.b).cmp(&(y.2.i, y.2.j, y.2.a, y.2.b)))
    });

    let mut out = gm.clone();
    let mut hardened: Vec<(usize, usize, Entry)> = Vec::new();
    let mut stopped_at = None;
    let mut checked = 0;
    for &(p, k, e) in &candidates {
        if seen[p][k] {
            stopped_at = Some(e);
            break;
        }
        out.pair_costs_mut(p)[k] = top;
        hardened.push((p, k, e));
        if hardened.len() - checked == CHECK_EVERY {
            if !consistent(&out)? {
                break;
            }
            checked = hardened.len();
        }
    }
    if hardened.len() > checked && !consistent(&out)? {
        // Largest consistent prefix of the unchecked batch.
        let undo = |out: &mut CostFunctionNetwork, from: usize, to: usize, hardened: &[(usize, usize, Entry)]| {
            for &(p, k, _) in &hardened[from..to] {
                out.pair_costs_mut(p)[k] = gm.pairs()[p].costs[k];
            }
        };
        let (mut lo, mut hi) = (checked, hardened.len() - 1);
        undo(&mut out, checked, hardened.len(), &hardened);
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            for &(p, k, _) in &hardened[lo..mid] {
                out.pair_costs_mut(p)[k] = top;
            }
            if consistent(&out)? {
                lo = mid;
            } else {
                undo(&mut out, lo, mid, &hardened);
                hi = mid - 1;
            }
        }
        stopped_at = Some(hardened[lo].2);
        hardened.truncate(lo);
    }
    Ok(HardenOutcome { gm: out, hardened: hardened.into_iter().map(|h| h.2).collect(), stopped_at })
}

/// Hard-tuple statistics of a network, optionally against a reference set of
/// pairs that should carry all-different constraints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintReport {
    /// `(i, j, number of top entries)` for every pair with at least one.
    pub forbidden: Vec<(usize, usize, usize)>,
    /// Pairs whose forbidden tuples are exactly the diagonal.
    pub difference_constraints: usize,
    /// Present only when a reference was given.
    pub comparison: Option<Comparison>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Comparison {
    pub expected: usize,
    /// Reference pairs constrained to exactly all-different.
    pub exact: usize,
    /// Reference pairs with some forbidden tuple.
    pub true_constraints: usize,
    /// Non-reference pairs with some forbidden tuple.
    pub false_constraints: usize,
    /// Reference pairs without any forbidden tuple.
    pub missed: usize,
}

pub fn constraint_report(gm: &CostFunctionNetwork, reference: Option<&[(usize, usize)]>) -> ConstraintReport {
    let top = gm.top();
    let mut forbidden = Vec::new();
    let mut difference_constraints = 0;
    let mut exact_pairs = std::collections::HashSet::new();
    for f in gm.pairs() {
        let hard: Vec<bool> = f.costs.iter().map(|&c| c >= top).collect();
        let count = hard.iter().filter(|&&h| h).count();
        if count == 0 {
            continue;
        }
        forbidden.push((f.i, f.j, count));
        let is_difference = f.rows == f.cols && hard.iter().enumerate().all(|(k, &h)| h == (k / f.cols == k % f.cols));
        if is_difference {
            difference_constraints += 1;
            exact_pairs.insert((f.i, f.j));
        }
    }
    let comparison = reference.map(|r| {
        let expected: std::collections::HashSet<(usize, usize)> = r.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        let constrained: std::collections::HashSet<(usize, usize)> = forbidden.iter().map(|&(i, j, _)| (i, j)).collect();
        let true_constraints = constrained.intersection(&expected).count();
        Comparison {
            expected: expected.len(),
            exact: exact_pairs.intersection(&expected).count(),
            true_constraints,
            false_constraints: constrained.len() - true_constraints,
            missed: expected.len() - true_constraints,
        }
    });
    ConstraintReport { forbidden, difference_constraints, comparison }
}

impl fmt::Display for ConstraintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tuples: usize = self.forbidden.iter().map(|x| x.2).sum();
        writeln!(f, "pairs with forbidden tuples: {}", self.forbidden.len())?;
        writeln!(f, "forbidden tuples: {tuples}")?;
        writeln!(f, "all-different pairs: {}", self.difference_constraints)?;
        if let Some(c) = &self.comparison {
            writeln!(f, "reference pairs: {}", c.expected)?;
            writeln!(f, "exact matches: {}", c.exact)?;
            writeln!(f, "true constraints: {}", c.true_constraints)?;
            writeln!(f, "false constraints: {}", c.false_constraints)?;
            writeln!(f, "missed constraints: {}", c.missed)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::sudoku;

    #[test]
    fn threshold_rule() {
        let mut gm = CostFunctionNetwork::uniform(2, 2, 10.0).unwrap();
        gm.set_pair(0, 1, vec![0.3, 2.1, 1.8, 0.0]).unwrap();
        gm.set_unary(0, vec![0.5, 3.0]).unwrap();
        let t = threshold(&gm, 1.0).unwrap();
        assert_eq!(t.pair(0, 1).unwrap().costs, vec![0.0, 10.0, 10.0, 0.0]);
        assert_eq!(t.unary(0), &[0.5, 3.0]);
        assert_eq!(threshold(&t, 1.0).unwrap(), t);
        assert!(threshold(&gm, 0.0).is_err());
        let zero = CostFunctionNetwork::uniform(3, 2, 10.0).unwrap();
        assert_eq!(threshold(&zero, 1.0).unwrap(), zero);
    }

    #[test]
    fn harden_stops_at_first_used_entry() {
        let mut gm = CostFunctionNetwork::uniform(2, 2, 10.0).unwrap();
        gm.set_pair(0, 1, vec![5.0, 1.0, 3.0, 0.5]).unwrap();
        let ys = [Assignment(vec![1, 0])];
        let h = harden(&gm, &ys).unwrap();
        assert_eq!(h.gm.pair(0, 1).unwrap().costs, vec![10.0, 1.0, 3.0, 0.5]);
        assert_eq!(h.hardened.len(), 1);
        assert_eq!(h.stopped_at.unwrap().cost, 3.0);
        let again = harden(&h.gm, &ys).unwrap();
        assert_eq!(again.gm, h.gm);
        assert!(harden(&gm, &[]).is_err());
    }

    #[test]
    fn failing_check_rolls_back_to_consistent_prefix() {
        let mut gm = CostFunctionNetwork::uniform(30, 2, 100.0).unwrap();
        for i in 0..29 {
            gm.set_pair(i, i + 1, vec![1.0 + i as f64, 0.0, 0.0, 0.0]).unwrap();
        }
        let ys = [Assignment(vec![1; 30])];
        // Accept at most 7 hardened entries.
        let h = harden_with_check(&gm, &ys, |g| {
            Ok(g.pairs().iter().filter(|f| f.costs[0] == 100.0).count() <= 7)
        })
        .unwrap();
        assert_eq!(h.hardened.len(), 7);
        let costs: Vec<f64> = h.hardened.iter().map(|e| e.cost).collect();
        assert_eq!(costs, vec![29.0, 28.0, 27.0, 26.0, 25.0, 24.0, 23.0]);
        assert_eq!(h.gm.pairs().iter().filter(|f| f.costs[0] == 100.0).count(), 7);
    }

    #[test]
    fn sudoku_reference_counts() {
        let reference = sudoku::reference_pairs();
        let empty = CostFunctionNetwork::uniform(81, 9, 10.0).unwrap();
        let r = constraint_report(&empty, Some(&reference));
        assert_eq!(r.comparison.unwrap().missed, 810);
        let rules = sudoku::rules_gm(10.0).unwrap();
        let c = constraint_report(&rules, Some(&reference)).comparison.unwrap();
        assert_eq!((c.exact, c.false_constraints, c.missed), (810, 0, 0));
    }
}
