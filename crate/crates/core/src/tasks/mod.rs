//! Benchmark tasks: instance types, ground-truth networks, generators and
//! JSONL datasets.

pub mod cut;
pub mod futoshiki;
pub mod sudoku;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gm::{Assignment, CostFunctionNetwork, PartialAssignment};

pub use cut::{Bridge, CutGraph, CutMode};
pub use futoshiki::Inequality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "sudoku")]
    Sudoku,
    #[serde(rename = "sudoku-many")]
    SudokuMany,
    #[serde(rename = "futoshiki")]
    Futoshiki,
    #[serde(rename = "mincut")]
    MinCut,
    #[serde(rename = "maxcut")]
    MaxCut,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Sudoku,
        TaskKind::SudokuMany,
        TaskKind::Futoshiki,
        TaskKind::MinCut,
        TaskKind::MaxCut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Sudoku => "sudoku",
            TaskKind::SudokuMany => "sudoku-many",
            TaskKind::Futoshiki => "futoshiki",
            TaskKind::MinCut => "mincut",
            TaskKind::MaxCut => "maxcut",
        }
    }

    pub fn is_cut(self) -> bool {
        matches!(self, TaskKind::MinCut | TaskKind::MaxCut)
    }

    pub fn is_sudoku(self) -> bool {
        matches!(self, TaskKind::Sudoku | TaskKind::SudokuMany)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::input(format!("unknown task '{s}' (expected sudoku, sudoku-many, futoshiki, mincut or maxcut)")))
    }
}

/// The observable part of an instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Instance {
    /// Hint grid; unobserved cells are `None`.
    Sudoku { hints: PartialAssignment },
    Futoshiki { size: usize, inequalities: Vec<Inequality> },
    Cut(CutGraph),
}

/// One instance with its (possibly partial) solution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub task: TaskKind,
    pub instance: Instance,
    pub solution: PartialAssignment,
    /// Known complete solutions besides or including `solution`; for
    /// many-solution Sudoku this is the stored solution set.
    pub solutions: Vec<Assignment>,
    /// True edge capacities of a cut instance.
    pub costs: Option<Vec<f64>>,
}

impl Sample {
    pub fn n(&self) -> usize {
        self.solution.len()
    }

    pub fn domain(&self) -> usize {
        match &self.instance {
            Instance::Sudoku { .. } => sudoku::DIGITS,
            Instance::Futoshiki { size, .. } => *size,
            Instance::Cut(_) => 2,
        }
    }

    /// Variables whose value is given as input (hints, source and sink).
    pub fn evidence(&self) -> PartialAssignment {
        match &self.instance {
            Instance::Sudoku { hints } => hints.clone(),
            Instance::Futoshiki { size, .. } => PartialAssignment::unobserved(size * size),
            Instance::Cut(g) => g.evidence(),
        }
    }

    /// Variables the loss is summed over: everything not given as evidence.
    pub fn free_variables(&self) -> Vec<usize> {
        let e = self.evidence();
        (0..self.n()).filter(|&i| e.get(i).is_none()).collect()
    }

    /// The ground-truth network of the instance with its evidence applied.
    pub fn rules(&self, top: f64) -> Result<CostFunctionNetwork> {
        let gm = match &self.instance {
            Instance::Sudoku { .. } => sudoku::rules_gm(top)?,
            Instance::Futoshiki { size, inequalities } => futoshiki::rules_gm(*size, inequalities, top)?,
            Instance::Cut(g) => {
                let c = self.costs.as_ref().ok_or_else(|| Error::input("cut sample has no capacities"))?;
                return g.gm(c, top);
            }
        };
        gm.condition(&self.evidence())
    }

    /// Whether `y` is a correct answer for this instance.
    pub fn accepts(&self, y: &Assignment) -> Result<bool> {
        match (&self.instance, self.task) {
            (Instance::Sudoku { .. }, TaskKind::SudokuMany) if !self.solutions.is_empty() => {
                Ok(self.solutions.contains(y))
            }
            (Instance::Sudoku { .. }, _) => Ok(self.solution.to_complete().as_ref() == Some(y)),
            (Instance::Futoshiki { .. }, _) => {
                let rules = self.rules(crate::gm::DEFAULT_TOP)?;
                Ok(rules.evaluate(y)? < rules.top())
            }
            (Instance::Cut(_), _) => {
                let rules = self.rules(crate::gm::DEFAULT_TOP)?;
                let best = crate::solver::solve_default(&rules);
                Ok((rules.evaluate(y)? - best.cost).abs() <= 1e-9 * best.cost.abs().max(1.0))
            }
        }
    }
}

/// Per-sample random stream derived from the run seed and sample index.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// JSONL line layouts, one per task family.
#[derive(Serialize, Deserialize)]
struct SudokuLine {
    puzzle: String,
    solution: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    solutions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FutoshikiLine {
    size: usize,
    inequalities: Vec<(usize, usize, i8)>,
    solution: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CutLine {
    mode: CutMode,
    source: usize,
    sink: usize,
    edges: Vec<(usize, usize, Bridge)>,
    capacities: Vec<f64>,
    #[serde(default)]
    solution: Option<Vec<Option<usize>>>,
}

fn to_line(s: &Sample) -> Result<String> {
    let json = match &s.instance {
        Instance::Sudoku { hints } => serde_json::to_string(&SudokuLine {
            puzzle: sudoku::grid_string(hints),
            solution: sudoku::grid_string(&s.solution),
            solutions: s.solutions.iter().map(|y| sudoku::grid_string(&y.to_partial())).collect(),
        })?,
        Instance::Futoshiki { size, inequalities } => serde_json::to_string(&FutoshikiLine {
            size: *size,
            inequalities: inequalities.iter().map(|q| (q.a, q.b, if q.a_greater { 1 } else { -1 })).collect(),
            solution: s.solution.0.iter().map(|v| v.map_or(0, |v| v + 1)).collect(),
        })?,
        Instance::Cut(g) => serde_json::to_string(&CutLine {
            mode: g.mode,
            source: g.source,
            sink: g.sink,
            edges: g.edges.iter().zip(&g.bridges).map(|(&(u, v), &b)| (u, v, b)).collect(),
            capacities: s.costs.clone().unwrap_or_default(),
            solution: Some(s.solution.0.clone()),
        })?,
    };
    Ok(json)
}

fn from_line(task: TaskKind, line: &str) -> std::result::Result<Option<Sample>, String> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    match task {
        TaskKind::Sudoku | TaskKind::SudokuMany => {
            if !trimmed.starts_with('{') {
                return sudoku::parse_csv_line(task, trimmed);
            }
            let l: SudokuLine = serde_json::from_str(trimmed).map_err(|e| e.to_string())?;
            let hints = sudoku::parse_grid(&l.puzzle)?;
            let solution = sudoku::parse_grid(&l.solution)?;
            let solutions = l
                .solutions
                .iter()
                .map(|s| sudoku::parse_grid(s)?.to_complete().ok_or_else(|| "incomplete grid in solutions".to_string()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            sudoku::sample(task, hints, solution, solutions).map(Some)
        }
        TaskKind::Futoshiki => {
            let l: FutoshikiLine = serde_json::from_str(trimmed).map_err(|e| e.to_string())?;
            futoshiki::sample_from_parts(l.size, &l.inequalities, &l.solution).map(Some)
        }
        TaskKind::MinCut | TaskKind::MaxCut => {
            let l: CutLine = serde_json::from_str(trimmed).map_err(|e| e.to_string())?;
            let want = if task == TaskKind::MinCut { CutMode::Min } else { CutMode::Max };
            if l.mode != want {
                return Err(format!("mode {:?} does not match task {task}", l.mode));
            }
            let (edges, bridges): (Vec<_>, Vec<_>) = l.edges.iter().map(|&(u, v, b)| ((u, v), b)).unzip();
            let graph = CutGraph::new(cut::VERTICES, edges, bridges, l.source, l.sink, l.mode).map_err(|e| e.to_string())?;
            cut::sample_from_parts(graph, l.capacities, l.solution).map(Some)
        }
    }
}

pub fn write_dataset<W: Write>(mut sink: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        writeln!(sink, "{}", to_line(s)?)?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(f, samples)
}

/// Reads JSONL samples of one task. Sudoku files may also hold plain
/// `puzzle,solution` lines of 81 characters each, with `0` or `.` for empty
/// cells; a header line is skipped.
pub fn read_dataset<R: BufRead>(source: R, task: TaskKind) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (k, line) in source.lines().enumerate() {
        let line = line?;
        match from_line(task, &line) {
            Ok(Some(s)) => out.push(s),
            Ok(None) => {}
            Err(msg) => return Err(Error::parse(format!("line {}", k + 1), msg)),
        }
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, task: TaskKind) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f), task)
        .map_err(|e| match e {
            Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
            other => other,
        })
}

/// Parameters shared by the generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    /// Sudoku: stop removing hints at this count.
    pub target_hints: usize,
    /// Many-solution Sudoku: largest solution set kept per grid.
    pub max_solutions: usize,
    /// Many-solution Sudoku: how many solutions each sample stores
    /// (`0` keeps all).
    pub keep_solutions: usize,
    /// Futoshiki grid side.
    pub size: usize,
    /// Futoshiki: probability of an inequality between adjacent cells.
    pub p_ineq: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 100,
            seed: 0,
            target_hints: 25,
            max_solutions: 16,
            keep_solutions: 5,
            size: 5,
            p_ineq: 0.3,
        }
    }
}

pub fn generate(task: TaskKind, cfg: &GenConfig) -> Result<Vec<Sample>> {
    match task {
        TaskKind::Sudoku => sudoku::generate_unique(cfg),
        TaskKind::SudokuMany => sudoku::generate_many(cfg),
        TaskKind::Futoshiki => futoshiki::generate(cfg),
        TaskKind::MinCut => cut::generate(cfg, CutMode::Min),
        TaskKind::MaxCut => cut::generate(cfg, CutMode::Max),
    }
}
