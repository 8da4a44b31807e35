//! 9x9 Sudoku: rules, grid strings and puzzle generation.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{sample_rng, GenConfig, Instance, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::gm::{Assignment, CostFunctionNetwork, PartialAssignment, DEFAULT_TOP};
use crate::solver::{enumerate, solve, SolveOptions, Strategy};

pub const DIGITS: usize = 9;
pub const CELLS: usize = 81;

pub fn row(cell: usize) -> usize {
    cell / DIGITS
}

pub fn col(cell: usize) -> usize {
    cell % DIGITS
}

pub fn boxed(cell: usize) -> usize {
    (row(cell) / 3) * 3 + col(cell) / 3
}

/// Same row, column or box.
pub fn is_peer(a: usize, b: usize) -> bool {
    a != b && (row(a) == row(b) || col(a) == col(b) || boxed(a) == boxed(b))
}

/// The 810 pairs `i < j` that must hold different digits.
pub fn reference_pairs() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..CELLS {
        for j in i + 1..CELLS {
            if is_peer(i, j) {
                out.push((i, j));
            }
        }
    }
    out
}

/// All-different constraints between peers, as `0`/`top` matrices.
pub fn rules_gm(top: f64) -> Result<CostFunctionNetwork> {
    let mut gm = CostFunctionNetwork::uniform(CELLS, DIGITS, top)?;
    let mut diff = vec![0.0; DIGITS * DIGITS];
    for v in 0..DIGITS {
        diff[v * DIGITS + v] = top;
    }
    for (i, j) in reference_pairs() {
        gm.set_pair(i, j, diff.clone())?;
    }
    Ok(gm)
}

pub fn is_valid(y: &Assignment) -> bool {
    y.len() == CELLS
        && y.values().iter().all(|&v| v < DIGITS)
        && reference_pairs().iter().all(|&(i, j)| y[i] != y[j])
}

/// 81 characters, `1`-`9` for digits and `0` for empty cells.
pub fn grid_string(grid: &PartialAssignment) -> String {
    grid.0
        .iter()
        .map(|v| match v {
            Some(v) => char::from(b'1' + *v as u8),
            None => '0',
        })
        .collect()
}

pub fn parse_grid(s: &str) -> std::result::Result<PartialAssignment, String> {
    let s = s.trim();
    if s.chars().count() != CELLS {
        return Err(format!("grid has {} characters, expected {CELLS}", s.chars().count()));
    }
    s.chars()
        .map(|c| match c {
            '0' | '.' => Ok(None),
            '1'..='9' => Ok(Some(c as usize - '1' as usize)),
            other => Err(format!("unexpected character '{other}' in grid")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(PartialAssignment)
}

/// `puzzle,solution` line; anything whose first field is not a grid is taken
/// as a header and skipped.
pub(super) fn parse_csv_line(task: TaskKind, line: &str) -> std::result::Result<Option<Sample>, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 2 {
        return Err("expected 'puzzle,solution'".into());
    }
    let hints = match parse_grid(fields[0]) {
        Ok(h) => h,
        Err(_) if fields[0].chars().any(|c| c.is_ascii_alphabetic()) => return Ok(None),
        Err(e) => return Err(e),
    };
    let solution = parse_grid(fields[1])?;
    sample(task, hints, solution, Vec::new()).map(Some)
}

pub(super) fn sample(
    task: TaskKind,
    hints: PartialAssignment,
    solution: PartialAssignment,
    solutions: Vec<Assignment>,
) -> std::result::Result<Sample, String> {
    let full = solution.to_complete().ok_or("solution grid has empty cells")?;
    if !is_valid(&full) {
        return Err("solution grid breaks the Sudoku rules".into());
    }
    if !hints.is_consistent_with(&full) {
        return Err("hints disagree with the solution".into());
    }
    for y in &solutions {
        if !is_valid(y) || !hints.is_consistent_with(y) {
            return Err("an alternative solution is invalid or disagrees with the hints".into());
        }
    }
    Ok(Sample {
        task,
        instance: Instance::Sudoku { hints },
        solution,
        solutions,
        costs: None,
    })
}

fn count_solutions(rules: &CostFunctionNetwork, hints: &PartialAssignment, limit: usize) -> Result<usize> {
    Ok(enumerate(&rules.condition(hints)?, rules.top(), limit)?.len())
}

/// A complete grid, chosen by minimising random unary costs under the rules.
pub fn random_grid<R: Rng>(rules: &CostFunctionNetwork, rng: &mut R) -> Result<Assignment> {
    let options = SolveOptions {
        node_limit: Some(2_000),
        strategy: Strategy::BranchAndBound,
        ..Default::default()
    };
    for _ in 0..100 {
        let mut gm = rules.clone();
        for i in 0..CELLS {
            gm.set_unary(i, (0..DIGITS).map(|_| rng.gen::<f64>()).collect())?;
        }
        if let Some(y) = solve(&gm, &options).assignment {
            return Ok(y);
        }
    }
    Err(Error::Infeasible("could not sample a complete grid".into()))
}

/// Removes hints from `grid` in random order, keeping a removal only while
/// the puzzle has at most `max_solutions` solutions. Stops once the hint
/// count is at most `target` and (for `max_solutions > 1`) the puzzle has
/// several solutions.
fn dig<R: Rng>(
    rules: &CostFunctionNetwork,
    grid: &Assignment,
    target: usize,
    max_solutions: usize,
    rng: &mut R,
) -> Result<(PartialAssignment, usize)> {
    let mut hints = grid.to_partial();
    let mut order: Vec<usize> = (0..CELLS).collect();
    order.shuffle(rng);
    let mut count = 1;
    for cell in order {
        if hints.observed_count() <= target && (max_solutions == 1 || count >= 2) {
            break;
        }
        hints.set(cell, None);
        let c = count_solutions(rules, &hints, max_solutions + 1)?;
        if c <= max_solutions {
            count = c;
        } else {
            hints.set(cell, Some(grid[cell]));
        }
    }
    Ok((hints, count))
}

/// Puzzles with a unique solution and (when reachable) `target_hints` hints.
pub fn generate_unique(cfg: &GenConfig) -> Result<Vec<Sample>> {
    if !(17..=CELLS).contains(&cfg.target_hints) {
        return Err(Error::input(format!("target_hints must be in 17..=81, got {}", cfg.target_hints)));
    }
    let rules = rules_gm(DEFAULT_TOP)?;
    let mut out = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        let mut rng = sample_rng(cfg.seed, k as u64);
        let grid = random_grid(&rules, &mut rng)?;
        let (hints, _) = dig(&rules, &grid, cfg.target_hints, 1, &mut rng)?;
        if hints.observed_count() > cfg.target_hints {
            log::warn!("puzzle {k}: stopped at {} hints, target {}", hints.observed_count(), cfg.target_hints);
        }
        out.push(Sample {
            task: TaskKind::Sudoku,
            instance: Instance::Sudoku { hints },
            solution: grid.to_partial(),
            solutions: Vec::new(),
            costs: None,
        });
    }
    Ok(out)
}

/// Puzzles with between 2 and `max_solutions` solutions. Each sample keeps
/// `keep_solutions` of them in random order (all when 0).
pub fn generate_many(cfg: &GenConfig) -> Result<Vec<Sample>> {
    if cfg.max_solutions < 2 {
        return Err(Error::input("max_solutions must be at least 2"));
    }
    let rules = rules_gm(DEFAULT_TOP)?;
    let mut out = Vec::with_capacity(cfg.count);
    let mut k = 0u64;
    while out.len() < cfg.count {
        let mut rng = sample_rng(cfg.seed, k);
        k += 1;
        let grid = random_grid(&rules, &mut rng)?;
        let (hints, count) = dig(&rules, &grid, cfg.target_hints, cfg.max_solutions, &mut rng)?;
        if count < 2 {
            continue;
        }
        let mut all = enumerate(&rules.condition(&hints)?, rules.top(), cfg.max_solutions + 1)?;
        all.shuffle(&mut rng);
        if cfg.keep_solutions > 0 {
            all.truncate(cfg.keep_solutions);
        }
        out.push(Sample {
            task: TaskKind::SudokuMany,
            instance: Instance::Sudoku { hints },
            solution: all[0].to_partial(),
            solutions: all,
            costs: None,
        });
    }
    Ok(out)
}

/// Removes hints from a unique puzzle until no single hint can be removed
/// without losing uniqueness.
pub fn minimize_hints<R: Rng>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    let Instance::Sudoku { hints } = &sample.instance else {
        return Err(Error::input("not a Sudoku sample"));
    };
    let rules = rules_gm(DEFAULT_TOP)?;
    let mut hints = hints.clone();
    let mut cells: Vec<usize> = (0..CELLS).filter(|&c| hints.get(c).is_some()).collect();
    cells.shuffle(rng);
    for c in cells {
        let v = hints.get(c);
        hints.set(c, None);
        if count_solutions(&rules, &hints, 2)? != 1 {
            hints.set(c, v);
        }
    }
    let mut out = sample.clone();
    out.instance = Instance::Sudoku { hints };
    Ok(out)
}
