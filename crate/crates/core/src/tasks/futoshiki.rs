//! Futoshiki: Latin squares with inequalities between adjacent cells.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_rng, GenConfig, Instance, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::gm::{Assignment, CostFunctionNetwork, PartialAssignment, DEFAULT_TOP};
use crate::solver::{solve, SolveOptions, Strategy};

/// `value(a) > value(b)` when `a_greater`, `value(a) < value(b)` otherwise.
/// Cells are row-major indices with `a < b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inequality {
    pub a: usize,
    pub b: usize,
    pub a_greater: bool,
}

impl Inequality {
    /// Normalises to `a < b`.
    pub fn new(a: usize, b: usize, a_greater: bool) -> Self {
        if a < b {
            Inequality { a, b, a_greater }
        } else {
            Inequality { a: b, b: a, a_greater: !a_greater }
        }
    }
}

pub fn adjacent(size: usize, a: usize, b: usize) -> bool {
    let (ra, ca, rb, cb) = (a / size, a % size, b / size, b % size);
    (ra == rb && ca.abs_diff(cb) == 1) || (ca == cb && ra.abs_diff(rb) == 1)
}

/// Row/column all-different plus the inequalities, as `0`/`top` matrices.
pub fn rules_gm(size: usize, inequalities: &[Inequality], top: f64) -> Result<CostFunctionNetwork> {
    if size < 2 {
        return Err(Error::input("Futoshiki grids need a side of at least 2"));
    }
    let n = size * size;
    let mut gm = CostFunctionNetwork::uniform(n, size, top)?;
    let mut m = vec![0.0; size * size];
    for i in 0..n {
        for j in i + 1..n {
            let same_line = i / size == j / size || i % size == j % size;
            let q = inequalities.iter().find(|q| q.a == i && q.b == j);
            if !same_line && q.is_none() {
                continue;
            }
            for va in 0..size {
                for vb in 0..size {
                    let bad = (same_line && va == vb)
                        || q.is_some_and(|q| if q.a_greater { va <= vb } else { va >= vb });
                    m[va * size + vb] = if bad { top } else { 0.0 };
                }
            }
            gm.set_pair(i, j, m.clone())?;
        }
    }
    Ok(gm)
}

pub(super) fn sample_from_parts(
    size: usize,
    inequalities: &[(usize, usize, i8)],
    solution: &[usize],
) -> std::result::Result<Sample, String> {
    let n = size * size;
    if size < 2 {
        return Err("size must be at least 2".into());
    }
    let mut ineqs = Vec::with_capacity(inequalities.len());
    for &(a, b, dir) in inequalities {
        if a >= n || b >= n || !adjacent(size, a, b) {
            return Err(format!("inequality ({a}, {b}) is not between adjacent cells"));
        }
        if dir != 1 && dir != -1 {
            return Err(format!("inequality direction must be 1 or -1, got {dir}"));
        }
        ineqs.push(Inequality::new(a, b, dir == 1));
    }
    if solution.len() != n {
        return Err(format!("solution has {} cells, expected {n}", solution.len()));
    }
    if let Some(v) = solution.iter().find(|&&v| v > size) {
        return Err(format!("cell value {v} exceeds grid size {size}"));
    }
    let solution = PartialAssignment(solution.iter().map(|&v| v.checked_sub(1)).collect());
    if let Some(y) = solution.to_complete() {
        let rules = rules_gm(size, &ineqs, DEFAULT_TOP).map_err(|e| e.to_string())?;
        if rules.evaluate(&y).map_err(|e| e.to_string())? >= rules.top() {
            return Err("solution breaks the grid constraints".into());
        }
    }
    Ok(Sample {
        task: TaskKind::Futoshiki,
        instance: Instance::Futoshiki { size, inequalities: ineqs },
        solution,
        solutions: Vec::new(),
        costs: None,
    })
}

fn random_inequalities<R: Rng>(size: usize, p: f64, rng: &mut R) -> Vec<Inequality> {
    let mut out = Vec::new();
    for r in 0..size {
        for c in 0..size {
            let a = r * size + c;
            let mut right_down = Vec::new();
            if c + 1 < size {
                right_down.push(a + 1);
            }
            if r + 1 < size {
                right_down.push(a + size);
            }
            for b in right_down {
                if rng.gen_bool(p) {
                    out.push(Inequality::new(a, b, rng.gen_bool(0.5)));
                }
            }
        }
    }
    out
}

/// Grids with random inequalities; each solution minimises random unary
/// costs under the rules.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&cfg.p_ineq) {
        return Err(Error::input(format!("p_ineq must be in [0, 1], got {}", cfg.p_ineq)));
    }
    let size = cfg.size;
    let options = SolveOptions {
        node_limit: Some(100_000),
        strategy: Strategy::BranchAndBound,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        let mut rng = sample_rng(cfg.seed, k as u64);
        let (inequalities, solution) = loop {
            let ineqs = random_inequalities(size, cfg.p_ineq, &mut rng);
            let mut gm = rules_gm(size, &ineqs, DEFAULT_TOP)?;
            for i in 0..size * size {
                gm.set_unary(i, (0..size).map(|_| rng.gen::<f64>()).collect())?;
            }
            if let Some(y) = solve(&gm, &options).assignment {
                break (ineqs, y);
            }
        };
        out.push(Sample {
            task: TaskKind::Futoshiki,
            instance: Instance::Futoshiki { size, inequalities },
            solution: solution.to_partial(),
            solutions: Vec::new(),
            costs: None,
        });
    }
    Ok(out)
}

/// Whether `y` is a Latin square satisfying the inequalities.
pub fn is_valid(size: usize, inequalities: &[Inequality], y: &Assignment) -> bool {
    rules_gm(size, inequalities, DEFAULT_TOP).is_ok_and(|gm| gm.evaluate(y).is_ok_and(|c| c < gm.top()))
}
