//! Training loop, evaluation protocol, configuration and run logging.

pub mod config;
pub mod log;
pub mod trainer;

use std::path::Path;

use serde::Serialize;

use crate::dynamics::Policy;
use crate::env::PointMazeEnv;
use crate::error::Result;
use crate::hierarchy::{GoalVec, HierarchyParams};
use crate::td3::concat_rows;

pub use config::{Algo, Profile, RunConfig};
pub use trainer::Trainer;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_final_distance: f64,
}

/// Runs `episodes` noise-free episodes toward the fixed evaluation goal.
pub fn evaluate(
    env: &mut PointMazeEnv,
    high: &dyn Policy,
    low: &dyn Policy,
    hier: &HierarchyParams,
    episodes: usize,
    seed: u64,
) -> EvalResult {
    let sd = PointMazeEnv::STATE_DIM;
    let gd = PointMazeEnv::GOAL_DIM;
    let mut successes = 0usize;
    let mut ret = 0.0;
    let mut dist = 0.0;
    for ep in 0..episodes {
        let (mut s, g) = env.reset_with_seed(seed.wrapping_add(ep as u64), true);
        let mut sg = GoalVec(vec![0.0; gd]);
        let mut k = 0usize;
        let mut success = false;
        while !env.is_done() {
            if k % hier.c == 0 {
                sg = GoalVec(high.act_batch(&concat_rows(&s, sd, &g, gd, 1), 1));
            }
            let a = low.act_batch(&concat_rows(&s, sd, &sg, gd, 1), 1);
            let res = env.step(&a).expect("action width");
            ret += res.reward;
            sg = hier.subgoal_transition(&sg, &s, &res.state);
            s = res.state;
            success |= res.success;
            k += 1;
        }
        successes += success as usize;
        dist += env.distance_to_goal();
    }
    let n = episodes.max(1) as f64;
    EvalResult {
        success_rate: successes as f64 / n,
        mean_return: ret / n,
        mean_final_distance: dist / n,
    }
}

/// Trains one configuration to completion, writing outputs under `out`.
pub fn train(cfg: RunConfig, out: Option<&Path>) -> Result<Trainer> {
    let total = cfg.total_steps;
    let mut t = Trainer::new(cfg, out)?;
    t.run_until(total)?;
    t.finish()?;
    Ok(t)
}
