//! c-step adjacency memory over a discretized goal space and the embedding
//! network whose distances approximate transition counts.

use indexmap::{IndexMap, IndexSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, Adam, DenseNet, FinalInit, Head};
use crate::error::{config, usage, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyParams {
    pub cell_size: f64,
    pub zeta_c: f64,
    pub delta_adj: f64,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Cap on minibatches per epoch.
    pub max_batches_per_epoch: usize,
    /// Negatives drawn per positive.
    pub neg_ratio: usize,
    /// Per-label cap on stored pairs; oldest evicted first.
    pub capacity: usize,
}

impl Default for AdjacencyParams {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            zeta_c: 1.0,
            delta_adj: 0.2,
            embed_dim: 32,
            hidden: vec![128, 128],
            lr: 2e-4,
            batch_size: 64,
            epochs: 25,
            max_batches_per_epoch: 100,
            neg_ratio: 3,
            capacity: 200_000,
        }
    }
}

impl AdjacencyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !(self.zeta_c > 0.0) || !(self.delta_adj >= 0.0) {
            return config("adjacency cell size and zeta_c must be positive, delta_adj non-negative");
        }
        if self.embed_dim == 0 || self.batch_size == 0 {
            return config("adjacency embedding dim and batch size must be positive");
        }
        Ok(())
    }
}

type Cell = Vec<i64>;

/// Labelled cell pairs harvested from trajectories.
#[derive(Clone, Debug)]
pub struct AdjacencyMemory {
    cell_size: f64,
    c: usize,
    capacity: usize,
    cells: IndexMap<Cell, u32>,
    positive: IndexSet<(u32, u32)>,
    negative: IndexSet<(u32, u32)>,
}

fn ordered(a: u32, b: u32) -> (u32, u32) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl AdjacencyMemory {
    pub fn new(cell_size: f64, c: usize, capacity: usize) -> Self {
        Self {
            cell_size,
            c,
            capacity,
            cells: IndexMap::new(),
            positive: IndexSet::new(),
            negative: IndexSet::new(),
        }
    }

    pub fn cell_of(&self, g: &[f64]) -> Cell {
        g.iter().map(|v| (v / self.cell_size).floor() as i64).collect()
    }

    fn key(&mut self, g: &[f64]) -> u32 {
        let cell = self.cell_of(g);
        let next = self.cells.len() as u32;
        *self.cells.entry(cell).or_insert(next)
    }

    /// Goal-space center of a stored cell.
    pub fn center(&self, key: u32) -> Vec<f64> {
        let (cell, _) = self.cells.get_index(key as usize).expect("known key");
        cell.iter().map(|&k| (k as f64 + 0.5) * self.cell_size).collect()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_positive(&self) -> usize {
        self.positive.len()
    }

    pub fn num_negative(&self) -> usize {
        self.negative.len()
    }

    /// Label of the cell pair containing `a` and `b`, if either was seen.
    pub fn label(&self, a: &[f64], b: &[f64]) -> Option<bool> {
        let ka = *self.cells.get(&self.cell_of(a))?;
        let kb = *self.cells.get(&self.cell_of(b))?;
        let p = ordered(ka, kb);
        if self.positive.contains(&p) {
            Some(true)
        } else if self.negative.contains(&p) {
            Some(false)
        } else {
            None
        }
    }

    /// Records every index pair of a trajectory of goal-space points: pairs
    /// at most `c` steps apart are adjacent, the rest are candidates for
    /// negatives unless adjacent somewhere else.
    pub fn record(&mut self, trajectory: &[Vec<f64>]) {
        let keys: Vec<u32> = trajectory.iter().map(|g| self.key(g)).collect();
        for i in 0..keys.len() {
            for j in i..keys.len() {
                let p = ordered(keys[i], keys[j]);
                if j - i <= self.c {
                    self.negative.shift_remove(&p);
                    if self.positive.insert(p) && self.positive.len() > self.capacity {
                        self.positive.shift_remove_index(0);
                    }
                } else if !self.positive.contains(&p)
                    && self.negative.insert(p)
                    && self.negative.len() > self.capacity
                {
                    self.negative.shift_remove_index(0);
                }
            }
        }
    }

    /// Positives plus `neg_ratio` negatives per positive (fewer if the
    /// memory holds fewer), as `(g_i, g_j, label)` rows.
    pub fn sample(&self, n_pos: usize, neg_ratio: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, Vec<f64>, bool)> {
        let mut out = Vec::new();
        if !self.positive.is_empty() {
            for _ in 0..n_pos {
                let (a, b) = self.positive[rng.random_range(0..self.positive.len())];
                out.push((self.center(a), self.center(b), true));
            }
        }
        if !self.negative.is_empty() {
            for _ in 0..n_pos * neg_ratio {
                let (a, b) = self.negative[rng.random_range(0..self.negative.len())];
                out.push((self.center(a), self.center(b), false));
            }
        }
        out
    }
}

/// Contrastive hinge for one pair at embedding distance `d`.
pub fn pair_loss(d: f64, adjacent: bool, zeta_c: f64, delta_adj: f64) -> f64 {
    if adjacent {
        (d - zeta_c).max(0.0)
    } else {
        (zeta_c + delta_adj - d).max(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct AdjacencyNet {
    pub params: AdjacencyParams,
    pub c: usize,
    psi: DenseNet,
    opt: Adam,
    rng: ChaCha8Rng,
    trained: bool,
}

impl AdjacencyNet {
    pub fn new(goal_dim: usize, c: usize, params: AdjacencyParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = DenseNet::new(
            goal_dim,
            &params.hidden,
            params.embed_dim,
            Activation::Relu,
            Head::Identity,
            FinalInit::FanIn,
            &mut rng,
        );
        Ok(Self {
            opt: Adam::new(psi.num_params(), params.lr),
            psi,
            c,
            rng,
            trained: false,
            params,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn psi(&self) -> &DenseNet {
        &self.psi
    }

    pub fn psi_mut(&mut self) -> &mut DenseNet {
        &mut self.psi
    }

    pub fn embed(&self, g: &[f64], n: usize) -> Vec<f64> {
        self.psi.forward(g, n).expect("goal width")
    }

    /// One contrastive step on labelled pairs; returns the mean loss.
    pub fn train_step(&mut self, batch: &[(Vec<f64>, Vec<f64>, bool)]) -> Result<f64> {
        if batch.is_empty() {
            return usage("adjacency training batch is empty");
        }
        let n = batch.len();
        let e = self.params.embed_dim;
        let mut x = Vec::with_capacity(2 * n * self.psi.input_dim());
        for (a, _, _) in batch {
            x.extend_from_slice(a);
        }
        for (_, b, _) in batch {
            x.extend_from_slice(b);
        }
        let tape = self.psi.forward_tape(&x, 2 * n)?;
        let out = &tape.output;
        let mut grad_out = vec![0.0; 2 * n * e];
        let mut loss = 0.0;
        for (r, (_, _, l)) in batch.iter().enumerate() {
            let (ea, eb) = (&out[r * e..(r + 1) * e], &out[(n + r) * e..(n + r + 1) * e]);
            let d = ea.iter().zip(eb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            loss += pair_loss(d, *l, self.params.zeta_c, self.params.delta_adj);
            let slope = if *l {
                if d > self.params.zeta_c {
                    1.0
                } else {
                    0.0
                }
            } else if d < self.params.zeta_c + self.params.delta_adj {
                -1.0
            } else {
                0.0
            };
            if slope != 0.0 && d > 0.0 {
                for k in 0..e {
                    let g = slope * (ea[k] - eb[k]) / d / n as f64;
                    grad_out[r * e + k] = g;
                    grad_out[(n + r) * e + k] = -g;
                }
            }
        }
        let mut grad = vec![0.0; self.psi.num_params()];
        self.psi.backward(&tape, &grad_out, Some(&mut grad), false);
        self.opt.step(self.psi.params_mut(), &grad);
        self.trained = true;
        Ok(loss / n as f64)
    }

    /// Full training pass over the memory; returns the last epoch's mean loss.
    pub fn train(&mut self, memory: &AdjacencyMemory) -> Result<f64> {
        if memory.num_positive() == 0 {
            return usage("adjacency memory holds no pairs");
        }
        let per_batch = (self.params.batch_size / (1 + self.params.neg_ratio)).max(1);
        let batches = memory
            .num_positive()
            .div_ceil(per_batch)
            .min(self.params.max_batches_per_epoch)
            .max(1);
        let mut last = 0.0;
        for _ in 0..self.params.epochs {
            let mut total = 0.0;
            for _ in 0..batches {
                let batch = memory.sample(per_batch, self.params.neg_ratio, &mut self.rng);
                total += self.train_step(&batch)?;
            }
            last = total / batches as f64;
        }
        Ok(last)
    }

    /// Estimated transition count between goal-space points.
    pub fn d_st(&self, a: &[f64], b: &[f64]) -> f64 {
        let ea = self.embed(a, 1);
        let eb = self.embed(b, 1);
        let d = ea.iter().zip(&eb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        self.c as f64 / self.params.zeta_c * d
    }

    /// Per-row hinge `max(‖ψ(anchor) − ψ(point)‖ − ζ_c, 0)` and its gradient
    /// with respect to `points` (anchors are held fixed).
    pub fn hinge_with_grad(&self, anchors: &[f64], points: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let e = self.params.embed_dim;
        let gd = self.psi.input_dim();
        let ea = self.embed(anchors, n);
        let tape = self.psi.forward_tape(points, n).expect("goal width");
        let ep = &tape.output;
        let mut vals = Vec::with_capacity(n);
        let mut grad_out = vec![0.0; n * e];
        let mut any = false;
        for r in 0..n {
            let d = (0..e).map(|k| (ea[r * e + k] - ep[r * e + k]).powi(2)).sum::<f64>().sqrt();
            let v = (d - self.params.zeta_c).max(0.0);
            vals.push(v);
            if v > 0.0 {
                any = true;
                for k in 0..e {
                    grad_out[r * e + k] = (ep[r * e + k] - ea[r * e + k]) / d;
                }
            }
        }
        let grad = if any {
            self.psi.backward(&tape, &grad_out, None, true).unwrap()
        } else {
            vec![0.0; n * gd]
        };
        (vals, grad)
    }

    /// `max(‖ψ(φ(s_t)) − ψ(sg)‖ − ζ_c, 0)` for an absolute goal-space subgoal.
    pub fn adj_penalty(&self, sg_abs: &[f64], s_goal: &[f64]) -> f64 {
        self.hinge_with_grad(s_goal, sg_abs, 1).0[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64) -> Vec<f64> {
        vec![x, 0.5]
    }

    #[test]
    fn window_boundary_is_inclusive() {
        let mut m = AdjacencyMemory::new(1.0, 3, 1000);
        let traj: Vec<Vec<f64>> = (0..5).map(|i| pt(i as f64 + 0.5)).collect();
        m.record(&traj);
        assert_eq!(m.label(&pt(0.5), &pt(3.5)), Some(true));
        assert_eq!(m.label(&pt(0.5), &pt(4.5)), Some(false));
    }

    #[test]
    fn repeated_cell_is_one_key_and_self_adjacent() {
        let mut m = AdjacencyMemory::new(1.0, 3, 1000);
        m.record(&[pt(0.2), pt(0.7)]);
        assert_eq!(m.num_cells(), 1);
        assert_eq!(m.label(&pt(0.2), &pt(0.9)), Some(true));
    }

    #[test]
    fn adjacency_elsewhere_overrides_negative() {
        let mut m = AdjacencyMemory::new(1.0, 1, 1000);
        m.record(&[pt(0.5), pt(1.5), pt(2.5)]);
        assert_eq!(m.label(&pt(0.5), &pt(2.5)), Some(false));
        m.record(&[pt(2.5), pt(0.5)]);
        assert_eq!(m.label(&pt(0.5), &pt(2.5)), Some(true));
        m.record(&[pt(0.5), pt(1.5), pt(2.5)]);
        assert_eq!(m.label(&pt(0.5), &pt(2.5)), Some(true));
    }

    #[test]
    fn pair_loss_cases() {
        assert_eq!(pair_loss(0.5, true, 1.0, 0.2), 0.0);
        assert_eq!(pair_loss(1.5, false, 1.0, 0.2), 0.0);
        assert!((pair_loss(0.0, false, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((pair_loss(1.5, true, 1.0, 0.2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn d_st_is_zero_on_the_diagonal_and_symmetric() {
        let net = AdjacencyNet::new(2, 10, AdjacencyParams::default(), 0).unwrap();
        assert_eq!(net.d_st(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let (a, b) = ([0.3, -1.0], [4.0, 2.5]);
        assert_eq!(net.d_st(&a, &b), net.d_st(&b, &a));
    }

    #[test]
    fn satisfied_penalty_has_zero_gradient() {
        let net = AdjacencyNet::new(2, 10, AdjacencyParams::default(), 0).unwrap();
        let (v, g) = net.hinge_with_grad(&[1.0, 1.0], &[1.0, 1.0], 1);
        assert_eq!(v, vec![0.0]);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        let p = AdjacencyParams {
            zeta_c: 0.01,
            ..Default::default()
        };
        let net = AdjacencyNet::new(2, 10, p, 1).unwrap();
        let anchor = [0.0, 0.0];
        let x = [3.0, -2.0];
        let (_, g) = net.hinge_with_grad(&anchor, &x, 1);
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let fd = (net.adj_penalty(&xp, &anchor) - net.adj_penalty(&xm, &anchor)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "{fd} vs {}", g[k]);
        }
    }

    #[test]
    fn training_separates_adjacent_from_distant_pairs() {
        let mut m = AdjacencyMemory::new(1.0, 3, 100_000);
        let traj: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 * 0.5, 0.5]).collect();
        m.record(&traj);
        let p = AdjacencyParams {
            hidden: vec![32, 32],
            lr: 1e-3,
            epochs: 60,
            ..Default::default()
        };
        let mut net = AdjacencyNet::new(2, 3, p, 2).unwrap();
        net.train(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = m.sample(200, 1, &mut rng);
        let (mut pos, mut np, mut neg, mut nn) = (0.0, 0, 0.0, 0);
        for (a, b, l) in pairs {
            let d = net.d_st(&a, &b);
            if l {
                pos += d;
                np += 1;
            } else {
                neg += d;
                nn += 1;
            }
        }
        assert!(pos / (np as f64) < neg / (nn as f64));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut net = AdjacencyNet::new(2, 10, AdjacencyParams::default(), 0).unwrap();
        assert!(net.train_step(&[]).is_err());
        assert!(net.train(&AdjacencyMemory::new(1.0, 10, 10)).is_err());
    }
}
