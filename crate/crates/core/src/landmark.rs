//! Landmark selection (coverage by farthest point sampling, novelty by
//! random network distillation), value-weighted graphs, shortest-path
//! subgoal planning and the landmark-guided actor losses.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjacency::AdjacencyNet;
use crate::approx::{Activation, Adam, DenseNet, FinalInit, Head};
use crate::error::{config, usage, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkParams {
    pub n_cov: usize,
    pub n_nov: usize,
    /// Buffer states drawn per rebuild.
    pub sample_size: usize,
    /// Edges whose low-level value falls below this are removed.
    pub cut: f64,
    pub delta_pseudo: f64,
    /// `+1` follows the printed shift (away from the current state), `−1`
    /// shifts toward it.
    pub pseudo_sign: f64,
    pub lambda_adj: f64,
    pub lambda_landmark: f64,
    pub rnd_hidden: Vec<usize>,
    pub rnd_out: usize,
    pub rnd_lr: f64,
}

impl Default for LandmarkParams {
    fn default() -> Self {
        Self {
            n_cov: 60,
            n_nov: 60,
            sample_size: 2000,
            cut: -25.0,
            delta_pseudo: 2.0,
            pseudo_sign: 1.0,
            lambda_adj: 20.0,
            lambda_landmark: 1.0,
            rnd_hidden: vec![64, 64],
            rnd_out: 16,
            rnd_lr: 1e-3,
        }
    }
}

impl LandmarkParams {
    pub fn validate(&self) -> Result<()> {
        if self.pseudo_sign.abs() != 1.0 {
            return config("pseudo_sign must be +1 or -1");
        }
        if self.lambda_adj < 0.0 || self.lambda_landmark < 0.0 || self.delta_pseudo < 0.0 {
            return config("landmark loss weights and delta_pseudo must be non-negative");
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Greedy farthest point sampling. Returns indices into `points`; ties pick
/// the lowest index.
pub fn fps(points: &[Vec<f64>], m: usize, start_index: usize) -> Result<Vec<usize>> {
    if m > points.len() {
        return usage(format!("cannot pick {m} of {} points", points.len()));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start_index >= points.len() {
        return usage("fps start index out of range");
    }
    let mut chosen = vec![start_index];
    let mut taken = vec![false; points.len()];
    taken[start_index] = true;
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[start_index])).collect();
    while chosen.len() < m {
        let mut best = usize::MAX;
        for i in 0..points.len() {
            if !taken[i] && (best == usize::MAX || min_d[i] > min_d[best]) {
                best = i;
            }
        }
        taken[best] = true;
        chosen.push(best);
        for i in 0..points.len() {
            let d = sq_dist(&points[i], &points[best]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Random network distillation over goal-space points.
#[derive(Clone, Debug)]
pub struct Rnd {
    target: DenseNet,
    predictor: DenseNet,
    opt: Adam,
    /// Inputs are divided by this before entering either net.
    pub input_scale: f64,
}

impl Rnd {
    pub fn new(input_dim: usize, hidden: &[usize], out: usize, lr: f64, input_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = DenseNet::new(input_dim, hidden, out, Activation::Relu, Head::Identity, FinalInit::FanIn, &mut rng);
        let predictor = DenseNet::new(input_dim, hidden, out, Activation::Relu, Head::Identity, FinalInit::FanIn, &mut rng);
        Self {
            opt: Adam::new(predictor.num_params(), lr),
            target,
            predictor,
            input_scale,
        }
    }

    pub fn target(&self) -> &DenseNet {
        &self.target
    }

    fn scaled(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v / self.input_scale).collect()
    }

    /// Squared prediction error per row.
    pub fn scores(&self, x: &[f64], n: usize) -> Vec<f64> {
        if n == 0 {
            return Vec::new();
        }
        let xs = self.scaled(x);
        let t = self.target.forward(&xs, n).unwrap();
        let p = self.predictor.forward(&xs, n).unwrap();
        let o = self.target.output_dim();
        (0..n).map(|r| sq_dist(&t[r * o..(r + 1) * o], &p[r * o..(r + 1) * o])).collect()
    }

    /// One predictor step; returns the mean score before the step.
    pub fn train(&mut self, x: &[f64], n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let xs = self.scaled(x);
        let t = self.target.forward(&xs, n).unwrap();
        let tape = self.predictor.forward_tape(&xs, n).unwrap();
        let mut loss = 0.0;
        let g: Vec<f64> = tape
            .output
            .iter()
            .zip(&t)
            .map(|(p, t)| {
                loss += (p - t).powi(2);
                2.0 * (p - t) / n as f64
            })
            .collect();
        let mut grad = vec![0.0; self.predictor.num_params()];
        self.predictor.backward(&tape, &g, Some(&mut grad), false);
        self.opt.step(self.predictor.params_mut(), &grad);
        loss / n as f64
    }

    /// Indices of the `m` highest-scoring rows (ties keep the lower index).
    pub fn novelty_select(&self, x: &[f64], n: usize, m: usize) -> Vec<usize> {
        let s = self.scores(x, n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        idx.truncate(m);
        idx
    }
}

/// Dense single-source shortest path. `weights[i * n + j]` is the cost of
/// edge `i → j`, `None` when absent. Returns the cost and node path.
pub fn dijkstra(n: usize, weights: &[Option<f64>], src: usize, dst: usize) -> Option<(f64, Vec<usize>)> {
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    dist[src] = 0.0;
    for _ in 0..n {
        let mut u = usize::MAX;
        for i in 0..n {
            if !done[i] && dist[i].is_finite() && (u == usize::MAX || dist[i] < dist[u]) {
                u = i;
            }
        }
        if u == usize::MAX {
            break;
        }
        done[u] = true;
        if u == dst {
            break;
        }
        for v in 0..n {
            if let Some(w) = weights[u * n + v] {
                if !done[v] && dist[u] + w < dist[v] {
                    dist[v] = dist[u] + w;
                    prev[v] = u;
                }
            }
        }
    }
    if !dist[dst].is_finite() {
        return None;
    }
    let mut path = vec![dst];
    while *path.last().unwrap() != src {
        path.push(prev[*path.last().unwrap()]);
    }
    path.reverse();
    Some((dist[dst], path))
}

/// Landmarks plus value-derived edge weights among them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LandmarkGraph {
    /// Full states the landmarks were taken from.
    pub states: Vec<Vec<f64>>,
    /// Their goal-space projections.
    pub points: Vec<Vec<f64>>,
    /// `values[i * L + j]`: low-level value of reaching `points[j]` from `states[i]`.
    pub values: Vec<f64>,
    pub cut: f64,
    /// Constant added to `−V` so retained weights are non-negative.
    pub shift: f64,
}

/// Result of planning from one state toward one goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Goal-space point of the first hop.
    pub subgoal: Vec<f64>,
    /// Node path: `0` is the current state, `1..=L` landmarks, `L+1` the goal.
    pub path: Vec<usize>,
    pub cost: f64,
    pub reachable: bool,
}

impl LandmarkGraph {
    pub fn new(states: Vec<Vec<f64>>, points: Vec<Vec<f64>>, values: Vec<f64>, cut: f64) -> Self {
        let l = points.len();
        let mut shift: f64 = 0.0;
        for i in 0..l {
            for j in 0..l {
                let v = values[i * l + j];
                if i != j && v >= cut {
                    shift = shift.max(v);
                }
            }
        }
        Self {
            states,
            points,
            values,
            cut,
            shift,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn weight(&self, v: f64) -> Option<f64> {
        if v < self.cut {
            None
        } else {
            Some((self.shift - v).max(0.0))
        }
    }

    /// Edge matrix over `[current, landmarks…, goal]` given the current
    /// state's values toward each landmark (`from_start`) and toward the goal
    /// (`direct`), and each landmark's value toward the goal (`to_goal`).
    pub fn augmented_weights(&self, from_start: &[f64], to_goal: &[f64], direct: f64) -> Vec<Option<f64>> {
        let l = self.len();
        let n = l + 2;
        let mut w = vec![None; n * n];
        for j in 0..l {
            w[j + 1] = self.weight(from_start[j]);
            w[(j + 1) * n + n - 1] = self.weight(to_goal[j]);
            for k in 0..l {
                if j != k {
                    w[(j + 1) * n + k + 1] = self.weight(self.values[j * l + k]);
                }
            }
        }
        w[n - 1] = self.weight(direct);
        w
    }

    /// Shortest path from the current state to the goal; falls back to the
    /// goal clipped into `bounds` when no path survives the cut.
    pub fn plan(&self, goal: &[f64], from_start: &[f64], to_goal: &[f64], direct: f64, bounds: (&[f64], &[f64])) -> Plan {
        let n = self.len() + 2;
        let w = self.augmented_weights(from_start, to_goal, direct);
        match dijkstra(n, &w, 0, n - 1) {
            Some((cost, path)) => {
                let hop = path[1];
                let subgoal = if hop == n - 1 {
                    goal.to_vec()
                } else {
                    self.points[hop - 1].clone()
                };
                Plan {
                    subgoal,
                    path,
                    cost,
                    reachable: true,
                }
            }
            None => Plan {
                subgoal: goal
                    .iter()
                    .enumerate()
                    .map(|(j, g)| g.clamp(bounds.0[j], bounds.1[j]))
                    .collect(),
                path: Vec::new(),
                cost: f64::INFINITY,
                reachable: false,
            },
        }
    }

    /// Writes the landmarks, retained edges and an optional plan as JSON.
    pub fn dump(&self, path: &Path, plan: Option<&Plan>) -> Result<()> {
        let l = self.len();
        let mut edges = Vec::new();
        for i in 0..l {
            for j in 0..l {
                if i != j {
                    if let Some(w) = self.weight(self.values[i * l + j]) {
                        edges.push(serde_json::json!({"from": i, "to": j, "weight": w}));
                    }
                }
            }
        }
        let doc = serde_json::json!({
            "nodes": self.points,
            "edges": edges,
            "cut": self.cut,
            "shift": self.shift,
            "plan": plan,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}

/// `sg_plan + sign·δ·(sg_plan − φ(s_t))/‖·‖`; unchanged when the two coincide.
pub fn pseudo_shift(sg_plan: &[f64], s_goal: &[f64], delta: f64, sign: f64) -> Vec<f64> {
    let d: Vec<f64> = sg_plan.iter().zip(s_goal).map(|(p, s)| p - s).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || delta == 0.0 {
        return sg_plan.to_vec();
    }
    sg_plan.iter().zip(&d).map(|(p, v)| p + sign * delta * v / norm).collect()
}

/// Per-row landmark-guided loss and its gradient with respect to the
/// predicted (absolute) subgoals. Rows with `pseudo[r] == None` only carry
/// the adjacency term. Returns the mean loss over rows.
pub fn aclg_loss(
    adj: &AdjacencyNet,
    sg_pred: &[f64],
    s_goal: &[f64],
    pseudo: &[Option<Vec<f64>>],
    lambda_adj: f64,
    lambda_landmark: f64,
    grad: &mut [f64],
) -> f64 {
    let n = pseudo.len();
    let gd = sg_pred.len() / n.max(1);
    let mut total = 0.0;
    if lambda_adj > 0.0 {
        let (v, g) = adj.hinge_with_grad(s_goal, sg_pred, n);
        total += lambda_adj * v.iter().sum::<f64>();
        for (o, gi) in grad.iter_mut().zip(&g) {
            *o += lambda_adj * gi / n as f64;
        }
    }
    for (r, p) in pseudo.iter().enumerate() {
        if let Some(p) = p {
            for j in 0..gd {
                let e = sg_pred[r * gd + j] - p[j];
                total += lambda_landmark * e * e;
                grad[r * gd + j] += 2.0 * lambda_landmark * e / n as f64;
            }
        }
    }
    total / n.max(1) as f64
}

/// Landmark loss measured in embedding space:
/// `λ·max(‖ψ(pseudo) − ψ(sg_pred)‖ − ζ_c, 0)`.
pub fn higl_loss(adj: &AdjacencyNet, sg_pred: &[f64], pseudo: &[Option<Vec<f64>>], lambda: f64, grad: &mut [f64]) -> f64 {
    let n = pseudo.len();
    let gd = sg_pred.len() / n.max(1);
    let rows: Vec<usize> = (0..n).filter(|&r| pseudo[r].is_some()).collect();
    if rows.is_empty() || lambda == 0.0 {
        return 0.0;
    }
    let mut anchors = Vec::with_capacity(rows.len() * gd);
    let mut pts = Vec::with_capacity(rows.len() * gd);
    for &r in &rows {
        anchors.extend_from_slice(pseudo[r].as_ref().unwrap());
        pts.extend_from_slice(&sg_pred[r * gd..(r + 1) * gd]);
    }
    let (v, g) = adj.hinge_with_grad(&anchors, &pts, rows.len());
    for (k, &r) in rows.iter().enumerate() {
        for j in 0..gd {
            grad[r * gd + j] += lambda * g[k * gd + j] / n as f64;
        }
    }
    lambda * v.iter().sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjacency::AdjacencyParams;
    use rand::Rng;

    #[test]
    fn fps_examples() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![10.0, 0.0]];
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 2]);
        assert_eq!(fps(&pts, 3, 0).unwrap().len(), 3);
        assert!(fps(&pts, 4, 0).is_err());
        let same = vec![vec![1.0, 1.0]; 5];
        assert_eq!(fps(&same, 3, 0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn line_graph_plans_through_the_middle() {
        // current → B → goal cheap; current → goal cut.
        let g = LandmarkGraph::new(vec![vec![0.0; 4]], vec![vec![5.0, 5.0]], vec![0.0], -10.0);
        let plan = g.plan(&[9.0, 9.0], &[-1.0], &[-1.0], -100.0, (&[-2.0, -2.0], &[10.0, 10.0]));
        assert_eq!(plan.subgoal, vec![5.0, 5.0]);
        assert_eq!(plan.path, vec![0, 1, 2]);
    }

    #[test]
    fn cheap_direct_edge_returns_the_goal() {
        let g = LandmarkGraph::new(vec![vec![0.0; 4]], vec![vec![5.0, 5.0]], vec![0.0], -10.0);
        let plan = g.plan(&[9.0, 9.0], &[-5.0], &[-5.0], -1.0, (&[-2.0, -2.0], &[10.0, 10.0]));
        assert_eq!(plan.subgoal, vec![9.0, 9.0]);
    }

    #[test]
    fn unreachable_goal_falls_back_to_clipped_goal() {
        let g = LandmarkGraph::new(vec![vec![0.0; 4]], vec![vec![5.0, 5.0]], vec![0.0], -10.0);
        let plan = g.plan(&[20.0, 9.0], &[-50.0], &[-50.0], -50.0, (&[-2.0, -2.0], &[10.0, 10.0]));
        assert!(!plan.reachable);
        assert_eq!(plan.subgoal, vec![10.0, 9.0]);
    }

    #[test]
    fn pseudo_shift_examples() {
        assert_eq!(pseudo_shift(&[3.0, 4.0], &[0.0, 0.0], 0.0, 1.0), vec![3.0, 4.0]);
        assert_eq!(pseudo_shift(&[3.0, 4.0], &[0.0, 0.0], 5.0, 1.0), vec![6.0, 8.0]);
        assert_eq!(pseudo_shift(&[1.0, 1.0], &[1.0, 1.0], 5.0, 1.0), vec![1.0, 1.0]);
        assert_eq!(pseudo_shift(&[3.0, 4.0], &[0.0, 0.0], 5.0, -1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn rnd_ranks_rare_points_as_novel() {
        let mut rnd = Rnd::new(2, &[32, 32], 8, 1e-3, 10.0, 0);
        let common = [1.0, 1.0];
        let rare = [8.0, -1.0];
        let untrained = rnd.scores(&[common, rare].concat(), 2);
        assert!(untrained.iter().all(|v| v.is_finite()));
        let mut x = Vec::new();
        for _ in 0..999 {
            x.extend_from_slice(&common);
        }
        x.extend_from_slice(&rare);
        for _ in 0..300 {
            rnd.train(&x, 1000);
        }
        let s = rnd.scores(&[common, rare].concat(), 2);
        assert!(s[1] > s[0]);
        assert_eq!(rnd.novelty_select(&[common, rare].concat(), 2, 1), vec![1]);
        assert!(rnd.novelty_select(&x, 1000, 0).is_empty());
    }

    #[test]
    fn rnd_target_is_frozen() {
        let mut rnd = Rnd::new(2, &[8], 4, 1e-2, 1.0, 0);
        let before = rnd.target().clone();
        rnd.train(&[0.5, 0.5, -0.5, 1.0], 2);
        assert_eq!(rnd.target(), &before);
    }

    #[test]
    fn satisfied_aclg_loss_is_zero() {
        let adj = AdjacencyNet::new(2, 10, AdjacencyParams::default(), 0).unwrap();
        let sg = [1.0, 2.0];
        let mut g = vec![0.0; 2];
        let l = aclg_loss(&adj, &sg, &sg, &[Some(sg.to_vec())], 20.0, 1.0, &mut g);
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn aclg_loss_without_adjacency_is_the_landmark_term() {
        let adj = AdjacencyNet::new(2, 10, AdjacencyParams::default(), 0).unwrap();
        let mut g = vec![0.0; 2];
        let l = aclg_loss(&adj, &[1.0, 2.0], &[50.0, 50.0], &[Some(vec![3.0, 2.0])], 0.0, 1.0, &mut g);
        assert!((l - 4.0).abs() < 1e-12);
        assert_eq!(g, vec![-4.0, 0.0]);
    }

    #[test]
    fn dijkstra_small_cases() {
        let n = 3;
        let mut w = vec![None; 9];
        w[1] = Some(1.0);
        w[n + 2] = Some(1.0);
        w[2] = Some(5.0);
        assert_eq!(dijkstra(n, &w, 0, 2), Some((2.0, vec![0, 1, 2])));
        assert_eq!(dijkstra(n, &w, 2, 0), None);
    }

    proptest::proptest! {
        #[test]
        fn fps_is_permutation_covariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
            let picked = fps(&pts, 6, 0).unwrap();
            let rev: Vec<Vec<f64>> = pts.iter().rev().cloned().collect();
            let picked_rev = fps(&rev, 6, pts.len() - 1).unwrap();
            let mapped: Vec<usize> = picked_rev.iter().map(|&i| pts.len() - 1 - i).collect();
            proptest::prop_assert_eq!(picked, mapped);
        }
    }
}
