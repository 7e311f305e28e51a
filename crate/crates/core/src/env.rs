//! Deterministic point-mass mazes and a tabular chain used as an oracle.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};
use crate::hierarchy::{GoalVec, StateVec};

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`. Its interior is blocked;
/// the boundary is walkable. Layout files may write it as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RectRepr")]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains_open(&self, x: f64, y: f64) -> bool {
        x > self.x0 && x < self.x1 && y > self.y0 && y < self.y1
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RectRepr {
    Quad([f64; 4]),
    Named { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl From<RectRepr> for Rect {
    fn from(r: RectRepr) -> Self {
        match r {
            RectRepr::Quad(q) => q.into(),
            RectRepr::Named { x0, y0, x1, y1 } => Rect::new(x0, y0, x1, y1),
        }
    }
}

impl From<[f64; 4]> for Rect {
    fn from(v: [f64; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSampler {
    Fixed([f64; 2]),
    /// Uniform over the free part of the bounds.
    UniformFree,
    /// Uniform over the free part of an explicit box.
    UniformBox([f64; 4]),
    /// One of the listed points, uniformly.
    Choice(Vec<[f64; 2]>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeLayout {
    pub name: String,
    pub bounds: Rect,
    pub walls: Vec<Rect>,
    pub start: PointSampler,
    pub eval_start: [f64; 2],
    pub eval_goal: [f64; 2],
    pub train_goals: PointSampler,
}

impl MazeLayout {
    /// 12×12 '⊐'-shaped corridor, start bottom-left, goal top-left.
    pub fn u_shape() -> Self {
        Self {
            name: "point_maze_u".into(),
            bounds: Rect::new(-2.0, -2.0, 10.0, 10.0),
            walls: vec![Rect::new(-2.0, 2.0, 6.0, 6.0)],
            start: PointSampler::Fixed([0.0, 0.0]),
            eval_start: [0.0, 0.0],
            eval_goal: [0.0, 8.0],
            train_goals: PointSampler::UniformFree,
        }
    }

    /// 20×20 '∃'-shaped corridor; random start, goal at the middle left.
    pub fn w_shape() -> Self {
        Self {
            name: "point_maze_w".into(),
            bounds: Rect::new(-2.0, -2.0, 18.0, 18.0),
            walls: vec![
                Rect::new(-2.0, 2.0, 14.0, 6.0),
                Rect::new(-2.0, 10.0, 14.0, 14.0),
            ],
            start: PointSampler::UniformFree,
            eval_start: [0.0, 0.0],
            eval_goal: [0.0, 8.0],
            train_goals: PointSampler::UniformFree,
        }
    }

    /// The U-shape scaled ×2 (24×24).
    pub fn large_u() -> Self {
        Self {
            name: "point_maze_large_u".into(),
            bounds: Rect::new(-4.0, -4.0, 20.0, 20.0),
            walls: vec![Rect::new(-4.0, 4.0, 12.0, 12.0)],
            start: PointSampler::Fixed([0.0, 0.0]),
            eval_start: [0.0, 0.0],
            eval_goal: [0.0, 16.0],
            train_goals: PointSampler::UniformFree,
        }
    }

    /// U-shape with a 1-unit gap across the right-hand corridor.
    pub fn bottleneck() -> Self {
        Self {
            name: "point_maze_bottleneck".into(),
            bounds: Rect::new(-2.0, -2.0, 10.0, 10.0),
            walls: vec![
                Rect::new(-2.0, 2.0, 6.0, 6.0),
                Rect::new(6.0, 3.5, 9.0, 4.5),
            ],
            start: PointSampler::Fixed([0.0, 0.0]),
            eval_start: [0.0, 0.0],
            eval_goal: [0.0, 8.0],
            train_goals: PointSampler::UniformBox([-2.0, -2.0, 10.0, 10.0]),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "point_maze_u" | "u" => Ok(Self::u_shape()),
            "point_maze_w" | "w" => Ok(Self::w_shape()),
            "point_maze_large_u" | "large_u" => Ok(Self::large_u()),
            "point_maze_bottleneck" | "bottleneck" => Ok(Self::bottleneck()),
            other => config(format!("unknown environment '{other}'")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let layout: MazeLayout = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn is_free(&self, x: f64, y: f64) -> bool {
        let b = &self.bounds;
        x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1 && !self.walls.iter().any(|w| w.contains_open(x, y))
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        if !(b.x1 > b.x0 && b.y1 > b.y0) {
            return config("layout bounds are empty");
        }
        for w in &self.walls {
            if w.x0 < b.x0 || w.x1 > b.x1 || w.y0 < b.y0 || w.y1 > b.y1 || w.x1 <= w.x0 || w.y1 <= w.y0 {
                return config(format!("wall {w:?} is degenerate or outside the bounds"));
            }
        }
        for (what, p) in [("eval start", self.eval_start), ("eval goal", self.eval_goal)] {
            if !self.is_free(p[0], p[1]) {
                return config(format!("{what} {p:?} is not in free space"));
            }
        }
        if let PointSampler::Fixed(p) = self.start {
            if !self.is_free(p[0], p[1]) {
                return config("start is not in free space");
            }
        }
        Ok(())
    }

    /// Goal-space box used as the range of absolute subgoals.
    pub fn goal_bounds(&self) -> ([f64; 2], [f64; 2]) {
        ([self.bounds.x0, self.bounds.y0], [self.bounds.x1, self.bounds.y1])
    }

    fn sample_point<R: Rng>(&self, sampler: &PointSampler, rng: &mut R) -> [f64; 2] {
        let rejection = |bx: Rect, rng: &mut R| loop {
            let x = rng.random_range(bx.x0..=bx.x1);
            let y = rng.random_range(bx.y0..=bx.y1);
            if self.is_free(x, y) {
                return [x, y];
            }
        };
        match sampler {
            PointSampler::Fixed(p) => *p,
            PointSampler::UniformFree => rejection(self.bounds, rng),
            PointSampler::UniformBox(b) => rejection(Rect::from(*b), rng),
            PointSampler::Choice(points) => points[rng.random_range(0..points.len())],
        }
    }

    /// Moves along one axis from `from` to `to` while the other coordinate is
    /// `other`, stopping at the first wall face or bound. Returns the final
    /// coordinate and whether the motion was blocked.
    fn sweep_axis(&self, horizontal: bool, from: f64, to: f64, other: f64) -> (f64, bool) {
        let (lo, hi) = if horizontal {
            (self.bounds.x0, self.bounds.x1)
        } else {
            (self.bounds.y0, self.bounds.y1)
        };
        let mut end = to;
        let mut blocked = false;
        for w in &self.walls {
            let (a0, a1, b0, b1) = if horizontal {
                (w.x0, w.x1, w.y0, w.y1)
            } else {
                (w.y0, w.y1, w.x0, w.x1)
            };
            if !(other > b0 && other < b1) {
                continue;
            }
            if to > from && from <= a0 && end > a0 {
                end = a0;
                blocked = true;
            } else if to < from && from >= a1 && end < a1 {
                end = a1;
                blocked = true;
            }
        }
        if end > hi {
            end = hi;
            blocked = true;
        } else if end < lo {
            end = lo;
            blocked = true;
        }
        (end, blocked)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// 1 inside the success radius, 0 elsewhere.
    Sparse,
    /// Negative Euclidean distance to the goal.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub dt: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub max_steps: usize,
    pub success_radius: f64,
    pub action_noise_prob: f64,
    pub reward: RewardKind,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            v_max: 2.0,
            a_max: 1.0,
            max_steps: 600,
            success_radius: 2.5,
            action_noise_prob: 0.0,
            reward: RewardKind::Sparse,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub state: StateVec,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct PointMazeEnv {
    pub layout: MazeLayout,
    pub params: EnvParams,
    state: [f64; 4],
    goal: [f64; 2],
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl PointMazeEnv {
    pub const STATE_DIM: usize = 4;
    pub const ACTION_DIM: usize = 2;
    pub const GOAL_DIM: usize = 2;

    pub fn new(layout: MazeLayout, params: EnvParams, seed: u64) -> Result<Self> {
        layout.validate()?;
        if !(0.0..=1.0).contains(&params.action_noise_prob) {
            return config("action_noise_prob must lie in [0, 1]");
        }
        let start = layout.eval_start;
        Ok(Self {
            layout,
            params,
            state: [start[0], start[1], 0.0, 0.0],
            goal: [0.0, 0.0],
            steps: 0,
            done: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn reset_with_seed(&mut self, seed: u64, eval_mode: bool) -> (StateVec, GoalVec) {
        self.reseed(seed);
        self.reset(eval_mode)
    }

    pub fn reset(&mut self, eval_mode: bool) -> (StateVec, GoalVec) {
        let (start, goal) = if eval_mode {
            (self.layout.eval_start, self.layout.eval_goal)
        } else {
            let s = self.layout.sample_point(&self.layout.start, &mut self.rng);
            let g = self.layout.sample_point(&self.layout.train_goals, &mut self.rng);
            (s, g)
        };
        self.state = [start[0], start[1], 0.0, 0.0];
        self.goal = goal;
        self.steps = 0;
        self.done = false;
        (self.state(), GoalVec(goal.to_vec()))
    }

    pub fn state(&self) -> StateVec {
        StateVec(self.state.to_vec())
    }

    pub fn goal(&self) -> GoalVec {
        GoalVec(self.goal.to_vec())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn distance_to_goal(&self) -> f64 {
        ((self.state[0] - self.goal[0]).powi(2) + (self.state[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// Sets the full state directly; used by tests and model-quality checks.
    pub fn set_state(&mut self, s: [f64; 4]) -> Result<()> {
        if !self.layout.is_free(s[0], s[1]) {
            return usage("state is not in free space");
        }
        self.state = s;
        Ok(())
    }

    pub fn set_goal(&mut self, g: [f64; 2]) {
        self.goal = g;
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return usage("step called on a finished episode");
        }
        if action.len() != Self::ACTION_DIM {
            return usage(format!("action has {} components, expected 2", action.len()));
        }
        let p = &self.params;
        let mut a = [
            action[0].clamp(-p.a_max, p.a_max),
            action[1].clamp(-p.a_max, p.a_max),
        ];
        if p.action_noise_prob > 0.0 && self.rng.random::<f64>() < p.action_noise_prob {
            a = [
                self.rng.random_range(-p.a_max..=p.a_max),
                self.rng.random_range(-p.a_max..=p.a_max),
            ];
        }
        let [x, y, vx, vy] = self.state;
        let mut vx = (vx + a[0] * p.dt).clamp(-p.v_max, p.v_max);
        let mut vy = (vy + a[1] * p.dt).clamp(-p.v_max, p.v_max);
        let (nx, bx) = self.layout.sweep_axis(true, x, x + vx * p.dt, y);
        if bx {
            vx = 0.0;
        }
        let (ny, by) = self.layout.sweep_axis(false, y, y + vy * p.dt, nx);
        if by {
            vy = 0.0;
        }
        self.state = [nx, ny, vx, vy];
        self.steps += 1;

        let dist = self.distance_to_goal();
        let success = dist <= p.success_radius;
        let reward = match p.reward {
            RewardKind::Sparse => {
                if success {
                    1.0
                } else {
                    0.0
                }
            }
            RewardKind::Dense => -dist,
        };
        self.done = success || self.steps >= p.max_steps;
        Ok(StepResult {
            state: self.state(),
            reward,
            done: self.done,
            success,
        })
    }
}

/// Deterministic chain `s' = clamp(s + a, 0, n−1)` with `a ∈ {−1, 0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainMdp {
    pub n_states: usize,
    pub goal: usize,
}

impl ChainMdp {
    pub const ACTIONS: [i64; 3] = [-1, 0, 1];

    pub fn new(n_states: usize, goal: usize) -> Result<Self> {
        if n_states == 0 || goal >= n_states {
            return config("chain needs at least one state and a goal inside it");
        }
        Ok(Self { n_states, goal })
    }

    pub fn step(&self, s: usize, a: i64) -> usize {
        (s as i64 + a).clamp(0, self.n_states as i64 - 1) as usize
    }

    pub fn all_transitions(&self) -> Vec<(usize, i64, usize)> {
        (0..self.n_states)
            .flat_map(|s| Self::ACTIONS.iter().map(move |&a| (s, a)))
            .map(|(s, a)| (s, a, self.step(s, a)))
            .collect()
    }
}
