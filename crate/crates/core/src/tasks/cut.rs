//! Min-Cut and Max-Cut on the truncated icosahedron.
//!
//! Each edge is a bridge of one of three materials with a fixed capacity.
//! Vertices are binary variables (side 0 holds the source, side 1 the sink).
//! Min-Cut pays an edge's capacity when its endpoints differ, Max-Cut pays
//! it when they agree, so both are minimisation problems over the same
//! variables.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_rng, GenConfig, Instance, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::gm::{Assignment, CostFunctionNetwork, PartialAssignment, DEFAULT_TOP};
use crate::solver::solve_default;

pub const VERTICES: usize = 60;
pub const EDGES: usize = 90;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutMode {
    Min,
    Max,
}

impl CutMode {
    /// 2x2 cost pattern, row-major over (side of u, side of v).
    pub fn pattern(self) -> [f64; 4] {
        match self {
            CutMode::Min => [0.0, 1.0, 1.0, 0.0],
            CutMode::Max => [1.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            CutMode::Min => TaskKind::MinCut,
            CutMode::Max => TaskKind::MaxCut,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bridge {
    Stone,
    Wood,
    Rope,
}

impl Bridge {
    pub const ALL: [Bridge; 3] = [Bridge::Stone, Bridge::Wood, Bridge::Rope];

    pub fn capacity(self) -> f64 {
        match self {
            Bridge::Stone => 5.0,
            Bridge::Wood => 2.0,
            Bridge::Rope => 1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutGraph {
    pub vertices: usize,
    pub edges: Vec<(usize, usize)>,
    pub bridges: Vec<Bridge>,
    pub source: usize,
    pub sink: usize,
    pub mode: CutMode,
}

impl CutGraph {
    pub fn new(
        vertices: usize,
        edges: Vec<(usize, usize)>,
        bridges: Vec<Bridge>,
        source: usize,
        sink: usize,
        mode: CutMode,
    ) -> Result<Self> {
        if edges.len() != bridges.len() {
            return Err(Error::input(format!("{} edges but {} bridge categories", edges.len(), bridges.len())));
        }
        if source >= vertices || sink >= vertices || source == sink {
            return Err(Error::input(format!("invalid source/sink ({source}, {sink})")));
        }
        let mut seen = std::collections::HashSet::new();
        for &(u, v) in &edges {
            if u >= vertices || v >= vertices || u == v {
                return Err(Error::input(format!("invalid edge ({u}, {v})")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::input(format!("duplicate edge ({u}, {v})")));
            }
        }
        Ok(CutGraph { vertices, edges, bridges, source, sink, mode })
    }

    pub fn evidence(&self) -> PartialAssignment {
        let mut e = PartialAssignment::unobserved(self.vertices);
        e.set(self.source, Some(0));
        e.set(self.sink, Some(1));
        e
    }

    /// The instance network for edge costs `costs`, with source and sink
    /// pinned.
    pub fn gm(&self, costs: &[f64], top: f64) -> Result<CostFunctionNetwork> {
        if costs.len() != self.edges.len() {
            return Err(Error::input(format!("{} costs for {} edges", costs.len(), self.edges.len())));
        }
        let mut gm = CostFunctionNetwork::uniform(self.vertices, 2, top)?;
        let p = self.mode.pattern();
        for (&(u, v), &c) in self.edges.iter().zip(costs) {
            gm.set_pair(u, v, p.iter().map(|x| x * c).collect())?;
        }
        gm.condition(&self.evidence())
    }

    /// Per-edge pattern value of `y`: the indicator of paying the edge.
    pub fn phi(&self, y: &Assignment) -> Vec<f64> {
        let p = self.mode.pattern();
        self.edges.iter().map(|&(u, v)| p[y[u] * 2 + y[v]]).collect()
    }

    /// Objective value `costs . phi(y)`.
    pub fn value(&self, costs: &[f64], y: &Assignment) -> f64 {
        costs.iter().zip(self.phi(y)).map(|(c, f)| c * f).sum()
    }

    /// Total capacity of edges whose endpoints differ.
    pub fn cut_capacity(&self, costs: &[f64], y: &Assignment) -> f64 {
        self.edges.iter().zip(costs).filter(|(&(u, v), _)| y[u] != y[v]).map(|(_, c)| c).sum()
    }

    pub fn with_swapped_terminals(&self) -> Self {
        CutGraph { source: self.sink, sink: self.source, ..self.clone() }
    }
}

/// Vertex coordinates and edges of the truncated icosahedron, built by
/// cutting every icosahedron edge at one and two thirds.
pub fn truncated_icosahedron() -> (Vec<[f64; 3]>, Vec<(usize, usize)>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut ico: Vec<[f64; 3]> = Vec::new();
    for s1 in [-1.0, 1.0] {
        for s2 in [-phi, phi] {
            ico.push([0.0, s1, s2]);
            ico.push([s1, s2, 0.0]);
            ico.push([s2, 0.0, s1]);
        }
    }
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let linked = |a: usize, b: usize| a != b && (dist2(&ico[a], &ico[b]) - 4.0).abs() < 1e-9;

    // One new vertex per directed icosahedron edge (u, w), near u.
    let mut coords = Vec::new();
    let mut id = std::collections::HashMap::new();
    for u in 0..12 {
        for w in 0..12 {
            if linked(u, w) {
                id.insert((u, w), coords.len());
                coords.push([0, 1, 2].map(|k| ico[u][k] + (ico[w][k] - ico[u][k]) / 3.0));
            }
        }
    }
    let mut edges = Vec::new();
    for u in 0..12 {
        for w in u + 1..12 {
            if !linked(u, w) {
                continue;
            }
            // The middle third of the original edge.
            edges.push((id[&(u, w)], id[&(w, u)]));
        }
        // Pentagon around u: neighbours w, x of u that are linked themselves.
        for w in 0..12 {
            for x in w + 1..12 {
                if linked(u, w) && linked(u, x) && linked(w, x) {
                    let (a, b) = (id[&(u, w)], id[&(u, x)]);
                    edges.push((a.min(b), a.max(b)));
                }
            }
        }
    }
    edges.sort_unstable();
    assert_eq!(coords.len(), VERTICES, "truncated icosahedron vertex count");
    assert_eq!(edges.len(), EDGES, "truncated icosahedron edge count");
    (coords, edges)
}

/// The vertex at the negated coordinates.
pub fn antipode(coords: &[[f64; 3]], v: usize) -> usize {
    let target = coords[v].map(|x| -x);
    (0..coords.len())
        .min_by(|&a, &b| {
            let da: f64 = (0..3).map(|k| (coords[a][k] - target[k]).powi(2)).sum();
            let db: f64 = (0..3).map(|k| (coords[b][k] - target[k]).powi(2)).sum();
            da.total_cmp(&db)
        })
        .expect("non-empty vertex set")
}

pub(super) fn sample_from_parts(
    graph: CutGraph,
    capacities: Vec<f64>,
    solution: Option<Vec<Option<usize>>>,
) -> std::result::Result<Sample, String> {
    if capacities.len() != graph.edges.len() {
        return Err(format!("{} capacities for {} edges", capacities.len(), graph.edges.len()));
    }
    if capacities.iter().any(|c| !c.is_finite()) {
        return Err("capacities must be finite".into());
    }
    let solution = match solution {
        Some(s) => {
            if s.len() != graph.vertices {
                return Err(format!("solution has {} entries, expected {}", s.len(), graph.vertices));
            }
            if s.iter().flatten().any(|&b| b > 1) {
                return Err("solution entries must be 0 or 1".into());
            }
            let s = PartialAssignment(s);
            if s.get(graph.source) == Some(1) || s.get(graph.sink) == Some(0) {
                return Err("solution puts the source on side 1 or the sink on side 0".into());
            }
            s
        }
        None => graph.evidence(),
    };
    Ok(Sample {
        task: graph.mode.task(),
        instance: Instance::Cut(graph),
        solution,
        solutions: Vec::new(),
        costs: Some(capacities),
    })
}

/// Random instances: random source, antipodal sink, stone bridges around
/// both, uniformly random materials elsewhere, solved exactly.
pub fn generate(cfg: &GenConfig, mode: CutMode) -> Result<Vec<Sample>> {
    let (coords, edges) = truncated_icosahedron();
    let mut out = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        let mut rng = sample_rng(cfg.seed, k as u64);
        let source = rng.gen_range(0..VERTICES);
        let sink = antipode(&coords, source);
        let bridges: Vec<Bridge> = edges
            .iter()
            .map(|&(u, v)| {
                if [u, v].iter().any(|&x| x == source || x == sink) {
                    Bridge::Stone
                } else {
                    Bridge::ALL[rng.gen_range(0..3)]
                }
            })
            .collect();
        let graph = CutGraph::new(VERTICES, edges.clone(), bridges, source, sink, mode)?;
        let costs: Vec<f64> = graph.bridges.iter().map(|b| b.capacity()).collect();
        let r = solve_default(&graph.gm(&costs, DEFAULT_TOP)?);
        let y = r.solution()?.clone();
        out.push(Sample {
            task: mode.task(),
            instance: Instance::Cut(graph),
            solution: y.to_partial(),
            solutions: Vec::new(),
            costs: Some(costs),
        });
    }
    Ok(out)
}

/// Each sample followed by its mirror: bits flipped, source and sink
/// swapped.
pub fn augment_flip(samples: &[Sample]) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let Instance::Cut(g) = &s.instance else {
            return Err(Error::input("flip augmentation applies to cut samples only"));
        };
        let mut flipped = s.clone();
        flipped.instance = Instance::Cut(g.with_swapped_terminals());
        flipped.solution = PartialAssignment(s.solution.0.iter().map(|v| v.map(|b| 1 - b)).collect());
        out.push(s.clone());
        out.push(flipped);
    }
    Ok(out)
}
