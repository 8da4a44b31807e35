use emmental::dfl::{optimize, regret, spo_plus};
use emmental::loss::{epll, epll_grad, npll_grad, sample_masks, total_loss_and_grad};
use emmental::solver::{brute_force, solve, Strategy};
use emmental::tasks::{self, cut, Bridge, CutGraph, CutMode, GenConfig, TaskKind};
use emmental::{Assignment, CostFunctionNetwork, MaskSet, SolveOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense_gm(n: usize, d: usize, rng: &mut ChaCha8Rng) -> CostFunctionNetwork {
    let mut gm = CostFunctionNetwork::uniform(n, d, 1e6).unwrap();
    for i in 0..n {
        gm.set_unary(i, (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        for j in i + 1..n {
            gm.set_pair(i, j, (0..d * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        }
    }
    gm
}

/// Central differences of `f` over every pairwise entry.
fn numeric_pair_grad(gm: &CostFunctionNetwork, f: impl Fn(&CostFunctionNetwork) -> f64) -> Vec<Vec<f64>> {
    let eps = 1e-5;
    let mut out = Vec::new();
    for (p, pf) in gm.pairs().iter().enumerate() {
        let mut g = vec![0.0; pf.costs.len()];
        for (k, gk) in g.iter_mut().enumerate() {
            let mut hi = gm.clone();
            hi.pair_costs_mut(p)[k] += eps;
            let mut lo = gm.clone();
            lo.pair_costs_mut(p)[k] -= eps;
            *gk = (f(&hi) - f(&lo)) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

#[test]
fn masked_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (n, d) = (rng.gen_range(2..=5), rng.gen_range(2..=3));
        let gm = dense_gm(n, d, &mut rng);
        let y = Assignment((0..n).map(|_| rng.gen_range(0..d)).collect());
        let masks = sample_masks(n, rng.gen_range(0..n), &mut rng).unwrap();
        let scope: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.7)).collect();
        let g = epll_grad(&gm, &y, &masks, &scope).unwrap();
        let num = numeric_pair_grad(&gm, |h| epll(h, &y, &masks, &scope).unwrap());
        for (a, b) in g.pairwise.iter().flatten().zip(num.iter().flatten()) {
            assert!((a - b).abs() < 1e-6, "analytic {a}, numeric {b}");
        }
    }
}

#[test]
fn l1_term_adds_sign_of_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gm = dense_gm(4, 3, &mut rng);
    let y = Assignment(vec![0, 2, 1, 1]);
    let scope = [0, 1, 2, 3];
    let masks = MaskSet::empty(4);
    let (loss, g) = total_loss_and_grad(&gm, &y, &masks, &scope, 0.5).unwrap();
    let num = numeric_pair_grad(&gm, |h| total_loss_and_grad(h, &y, &masks, &scope, 0.5).unwrap().0);
    for (a, b) in g.pairwise.iter().flatten().zip(num.iter().flatten()) {
        assert!((a - b).abs() < 1e-6);
    }
    let l1: f64 = gm.pairs().iter().flat_map(|f| &f.costs).map(|c| c.abs()).sum();
    assert!((loss - epll(&gm, &y, &masks, &scope).unwrap() - 0.5 * l1).abs() < 1e-9);
}

#[test]
fn pair_gradient_formula_by_hand() {
    // Two binary variables, only a pair function: the gradient of each
    // conditional is 1(y) minus its probability along the observed row.
    let mut gm = CostFunctionNetwork::uniform(2, 2, 1e6).unwrap();
    gm.set_pair(0, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = Assignment(vec![1, 0]);
    let g = npll_grad(&gm, &y, &[0]).unwrap();
    // P(Y0 | y1 = 0) = softmax(-[0, 2]).
    let p1 = (-2.0f64).exp() / (1.0 + (-2.0f64).exp());
    let expected = [-(1.0 - p1), 0.0, 1.0 - p1, 0.0];
    for (a, b) in g.pairwise[0].iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn elimination_and_search_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..40 {
        let n = rng.gen_range(3..=9);
        let mut gm = CostFunctionNetwork::uniform(n, 3, 1e6).unwrap();
        // A chain plus a few chords keeps the width low enough to eliminate.
        for i in 0..n {
            gm.set_unary(i, (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            if i + 1 < n {
                gm.set_pair(i, i + 1, (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            }
        }
        if n > 4 {
            gm.set_pair(0, n - 1, (0..9).map(|_| if rng.gen_bool(0.2) { 1e6 } else { 0.0 }).collect()).unwrap();
        }
        let exact = brute_force(&gm).unwrap().cost;
        for strategy in [Strategy::Auto, Strategy::BranchAndBound, Strategy::Elimination] {
            let r = solve(&gm, &SolveOptions { strategy, ..Default::default() });
            assert!((r.cost - exact).abs() < 1e-9, "{strategy:?}: {} vs {exact}", r.cost);
        }
    }
}

/// A six-vertex cut instance small enough to enumerate.
fn small_cut(mode: CutMode) -> (CutGraph, Vec<f64>) {
    let edges = vec![(0, 1), (0, 2), (1, 2), (1, 3), (2, 4), (3, 4), (3, 5), (4, 5)];
    let bridges = vec![
        Bridge::Stone,
        Bridge::Wood,
        Bridge::Rope,
        Bridge::Rope,
        Bridge::Stone,
        Bridge::Wood,
        Bridge::Wood,
        Bridge::Rope,
    ];
    let g = CutGraph::new(6, edges, bridges, 0, 5, mode).unwrap();
    let c = g.bridges.iter().map(|b| b.capacity()).collect();
    (g, c)
}

#[test]
fn cut_optimum_matches_subset_enumeration() {
    for mode in [CutMode::Min, CutMode::Max] {
        let (g, c) = small_cut(mode);
        let best = optimize(&g, &c).unwrap();
        let mut values = Vec::new();
        for mask in 0..16u32 {
            let mut y = vec![0; 6];
            y[5] = 1;
            for k in 0..4 {
                y[k + 1] = ((mask >> k) & 1) as usize;
            }
            values.push(g.cut_capacity(&c, &Assignment(y)));
        }
        let cap = g.cut_capacity(&c, &best);
        let target = match mode {
            CutMode::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            CutMode::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        assert_eq!(cap, target, "{mode:?}");
        assert_eq!((best[0], best[5]), (0, 1));
    }
}

#[test]
fn regret_is_nonnegative_and_zero_for_optimal_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for mode in [CutMode::Min, CutMode::Max] {
        let (g, c) = small_cut(mode);
        for _ in 0..30 {
            let pred: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(0.1..6.0)).collect();
            let r = regret(&g, &c, &pred).unwrap();
            assert!(r >= 0.0);
            let same = g.value(&c, &optimize(&g, &pred).unwrap()) == g.value(&c, &optimize(&g, &c).unwrap());
            assert_eq!(r == 0.0, same);
        }
    }
}

#[test]
fn spo_plus_subgradient_is_a_supporting_slope() {
    // SPO+ is convex in the prediction, so its subgradient underestimates
    // every other point: L(c2) >= L(c1) + g1 . (c2 - c1).
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (g, c) = small_cut(CutMode::Min);
    let y = optimize(&g, &c).unwrap();
    for _ in 0..30 {
        let p1: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(0.1..6.0)).collect();
        let p2: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(0.1..6.0)).collect();
        let (l1, g1) = spo_plus(&g, &p1, &c, &y).unwrap();
        let (l2, _) = spo_plus(&g, &p2, &c, &y).unwrap();
        let lin: f64 = g1.iter().zip(p2.iter().zip(&p1)).map(|(gi, (a, b))| gi * (a - b)).sum();
        assert!(l1 >= -1e-9);
        assert!(l2 + 1e-9 >= l1 + lin);
    }
}

#[test]
fn generated_samples_are_optimal_under_their_rules() {
    let cfg = GenConfig { count: 3, seed: 5, target_hints: 30, ..Default::default() };
    for task in [TaskKind::Sudoku, TaskKind::Futoshiki, TaskKind::MinCut, TaskKind::MaxCut] {
        let samples = tasks::generate(task, &cfg).unwrap();
        assert_eq!(samples, tasks::generate(task, &cfg).unwrap(), "{task:?} is not deterministic");
        for s in &samples {
            let y = s.solution.to_complete().unwrap();
            assert!(s.accepts(&y).unwrap(), "{task:?}");
            let rules = s.rules(1e6).unwrap();
            let best = emmental::solver::solve_default(&rules);
            assert!((rules.evaluate(&y).unwrap() - best.cost).abs() < 1e-9);
        }
    }
}

#[test]
fn datasets_round_trip_through_jsonl() {
    let cfg = GenConfig { count: 2, seed: 9, target_hints: 30, ..Default::default() };
    for task in [TaskKind::Sudoku, TaskKind::SudokuMany, TaskKind::Futoshiki, TaskKind::MinCut] {
        let samples = tasks::generate(task, &cfg).unwrap();
        let mut buf = Vec::new();
        tasks::write_dataset(&mut buf, &samples).unwrap();
        let back = tasks::read_dataset(std::io::Cursor::new(buf), task).unwrap();
        assert_eq!(back, samples, "{task:?}");
    }
}

#[test]
fn flipped_cut_samples_swap_terminals() {
    let cfg = GenConfig { count: 2, seed: 1, ..Default::default() };
    let s = cut::generate(&cfg, CutMode::Max).unwrap();
    let both = cut::augment_flip(&s).unwrap();
    assert_eq!(both.len(), 4);
}
