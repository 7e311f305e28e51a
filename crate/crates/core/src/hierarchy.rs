//! Goal-conditioned hierarchy primitives: state/goal/action vectors, the
//! goal-space projection, the fixed subgoal transition, level rewards and
//! replay storage.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};

macro_rules! vector_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain(format!(
                        "{} has a non-finite component",
                        stringify!($name)
                    )));
                }
                Ok(Self(values))
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

vector_newtype!(
    /// Full environment state; for the point maze `(x, y, vx, vy)`.
    StateVec
);
vector_newtype!(
    /// A point (absolute scheme) or displacement (relative scheme) in goal space.
    GoalVec
);
vector_newtype!(
    /// Low-level control action.
    ActionVec
);

/// Whether subgoals are desired displacements or absolute targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgoalScheme {
    Relative,
    Absolute,
}

impl SubgoalScheme {
    /// The 0/1 flag multiplying `φ(s)` in the intrinsic reward.
    pub fn eta(self) -> f64 {
        match self {
            SubgoalScheme::Relative => 0.0,
            SubgoalScheme::Absolute => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyParams {
    /// High-level action period in environment steps.
    pub c: usize,
    pub scheme: SubgoalScheme,
    pub goal_indices: Vec<usize>,
    pub reward_scale_hi: f64,
    pub reward_scale_lo: f64,
}

impl Default for HierarchyParams {
    fn default() -> Self {
        Self {
            c: 10,
            scheme: SubgoalScheme::Relative,
            goal_indices: vec![0, 1],
            reward_scale_hi: 0.1,
            reward_scale_lo: 1.0,
        }
    }
}

impl HierarchyParams {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.c == 0 {
            return config("c must be at least 1");
        }
        if self.goal_indices.is_empty() {
            return config("goal_indices must not be empty");
        }
        if let Some(&i) = self.goal_indices.iter().find(|&&i| i >= state_dim) {
            return config(format!("goal index {i} out of range for state dim {state_dim}"));
        }
        Ok(())
    }

    pub fn goal_dim(&self) -> usize {
        self.goal_indices.len()
    }

    pub fn project(&self, s: &[f64]) -> GoalVec {
        GoalVec(self.goal_indices.iter().map(|&i| s[i]).collect())
    }

    pub fn subgoal_transition(&self, sg_prev: &[f64], s_prev: &[f64], s_cur: &[f64]) -> GoalVec {
        subgoal_transition_raw(sg_prev, s_prev, s_cur, &self.goal_indices, self.scheme)
    }

    pub fn intrinsic_reward(&self, sg_next: &[f64], s_next: &[f64]) -> f64 {
        intrinsic_reward_raw(sg_next, s_next, &self.goal_indices, self.scheme) * self.reward_scale_lo
    }

    pub fn high_reward(&self, env_rewards: &[f64]) -> f64 {
        high_reward(env_rewards, self.reward_scale_hi)
    }

    /// Absolute goal-space target encoded by subgoal `sg` issued at state `s`.
    pub fn absolute_target(&self, sg: &[f64], s: &[f64]) -> Vec<f64> {
        match self.scheme {
            SubgoalScheme::Absolute => sg.to_vec(),
            SubgoalScheme::Relative => self
                .goal_indices
                .iter()
                .zip(sg)
                .map(|(&i, g)| s[i] + g)
                .collect(),
        }
    }

    /// Inverse of [`absolute_target`](Self::absolute_target).
    pub fn subgoal_for_target(&self, target: &[f64], s: &[f64]) -> Vec<f64> {
        match self.scheme {
            SubgoalScheme::Absolute => target.to_vec(),
            SubgoalScheme::Relative => self
                .goal_indices
                .iter()
                .zip(target)
                .map(|(&i, t)| t - s[i])
                .collect(),
        }
    }
}

/// Selects `indices` from `s`, order preserved.
pub fn project(s: &[f64], indices: &[usize]) -> Result<GoalVec> {
    if let Some(&i) = indices.iter().find(|&&i| i >= s.len()) {
        return config(format!("goal index {i} out of range for state dim {}", s.len()));
    }
    Ok(GoalVec(indices.iter().map(|&i| s[i]).collect()))
}

/// `sg_prev + φ(s_prev) − φ(s_cur)` for the relative scheme; `sg_prev` for the
/// absolute scheme.
pub fn subgoal_transition_raw(
    sg_prev: &[f64],
    s_prev: &[f64],
    s_cur: &[f64],
    indices: &[usize],
    scheme: SubgoalScheme,
) -> GoalVec {
    match scheme {
        SubgoalScheme::Absolute => GoalVec(sg_prev.to_vec()),
        SubgoalScheme::Relative => GoalVec(
            sg_prev
                .iter()
                .zip(indices)
                .map(|(g, &i)| g + (s_prev[i] - s_cur[i]))
                .collect(),
        ),
    }
}

/// `−‖sg_next − η·φ(s_next)‖₂` (unscaled).
pub fn intrinsic_reward_raw(
    sg_next: &[f64],
    s_next: &[f64],
    indices: &[usize],
    scheme: SubgoalScheme,
) -> f64 {
    let eta = scheme.eta();
    -sg_next
        .iter()
        .zip(indices)
        .map(|(g, &i)| {
            let d = g - eta * s_next[i];
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn high_reward(env_rewards: &[f64], scale: f64) -> f64 {
    scale * env_rewards.iter().sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowTransition {
    pub s: StateVec,
    pub sg: GoalVec,
    pub a: ActionVec,
    pub r: f64,
    pub s_next: StateVec,
    pub sg_next: GoalVec,
    pub done: bool,
}

/// One high-level decision interval. `states` has one more entry than
/// `subgoals` and `actions`; the interval is `c` steps long unless the
/// episode terminated inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighTransition {
    pub states: Vec<StateVec>,
    pub goal: GoalVec,
    pub subgoals: Vec<GoalVec>,
    pub actions: Vec<ActionVec>,
    pub r: f64,
    pub done: bool,
}

impl HighTransition {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn first_state(&self) -> &StateVec {
        &self.states[0]
    }

    pub fn last_state(&self) -> &StateVec {
        self.states.last().unwrap()
    }

    pub fn subgoal(&self) -> &GoalVec {
        &self.subgoals[0]
    }
}

/// Fixed-capacity FIFO replay with seeded uniform sampling (with replacement).
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    entries: VecDeque<T>,
    rng: ChaCha8Rng,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, item: T) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(item);
    }

    pub fn get(&self, i: usize) -> &T {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter()
    }

    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return usage("cannot sample from an empty replay buffer");
        }
        if n > self.entries.len() {
            return usage(format!(
                "requested {n} samples from a buffer holding {}",
                self.entries.len()
            ));
        }
        let len = self.entries.len();
        Ok((0..n).map(|_| self.rng.random_range(0..len)).collect())
    }

    pub fn sample(&mut self, n: usize) -> Result<Vec<&T>> {
        let idx = self.sample_indices(n)?;
        Ok(idx.into_iter().map(|i| &self.entries[i]).collect())
    }

    /// Generator used for sampling, exposed for components that subsample
    /// the buffer in other ways.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(scheme: SubgoalScheme) -> HierarchyParams {
        HierarchyParams {
            scheme,
            ..HierarchyParams::default()
        }
    }

    #[test]
    fn project_selects_components_in_order() {
        assert_eq!(project(&[3.0, 4.0, 0.1, -0.2], &[0, 1]).unwrap().0, vec![3.0, 4.0]);
        assert_eq!(project(&[0.0; 4], &[0, 1]).unwrap().0, vec![0.0, 0.0]);
        assert_eq!(project(&[1.0, 2.0, 3.0, 4.0], &[1]).unwrap().0, vec![2.0]);
    }

    #[test]
    fn project_out_of_range_is_config_error() {
        assert!(matches!(project(&[1.0, 2.0], &[0, 2]), Err(Error::Config(_))));
        let mut p = HierarchyParams::default();
        p.goal_indices = vec![0, 7];
        assert!(p.validate(4).is_err());
    }

    #[test]
    fn subgoal_transition_examples() {
        let rel = params(SubgoalScheme::Relative);
        // φ(s_prev) = (1,1), φ(s_cur) = (2,1)
        let got = rel.subgoal_transition(&[2.0, 0.0], &[1.0, 1.0, 0.0, 0.0], &[2.0, 1.0, 0.0, 0.0]);
        assert_eq!(got.0, vec![1.0, 0.0]);
        let s = [0.3, -0.4, 1.0, 1.0];
        assert_eq!(rel.subgoal_transition(&[2.0, 0.5], &s, &s).0, vec![2.0, 0.5]);

        let abs = params(SubgoalScheme::Absolute);
        let got = abs.subgoal_transition(&[5.0, 5.0], &[0.0; 4], &[3.0, -2.0, 1.0, 1.0]);
        assert_eq!(got.0, vec![5.0, 5.0]);
    }

    #[test]
    fn intrinsic_reward_examples() {
        let abs = params(SubgoalScheme::Absolute);
        assert_eq!(abs.intrinsic_reward(&[3.0, 4.0], &[0.0; 4]), -5.0);
        assert_eq!(abs.intrinsic_reward(&[1.5, -2.0], &[1.5, -2.0, 9.0, 9.0]), 0.0);
        let rel = params(SubgoalScheme::Relative);
        assert_eq!(rel.intrinsic_reward(&[0.0, 0.0], &[7.0, 7.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn high_reward_examples() {
        assert_eq!(high_reward(&[0.0; 10], 0.1), 0.0);
        assert!((high_reward(&[1.0, 1.0], 0.1) - 0.2).abs() < 1e-15);
        assert_eq!(high_reward(&[-1.0, 1.0], 1.0), 0.0);
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut b = ReplayBuffer::new(2, 0);
        b.push(1);
        b.push(2);
        b.push(3);
        assert_eq!(b.len(), 2);
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn buffer_single_entry_and_empty() {
        let mut b: ReplayBuffer<u32> = ReplayBuffer::new(4, 0);
        assert!(matches!(b.sample(1), Err(Error::Usage(_))));
        b.push(42);
        assert_eq!(*b.sample(1).unwrap()[0], 42);
    }

    #[test]
    fn buffer_sampling_is_seed_deterministic() {
        let fill = |seed| {
            let mut b = ReplayBuffer::new(100, seed);
            for i in 0..50 {
                b.push(i);
            }
            (0..5)
                .map(|_| b.sample(8).unwrap().into_iter().copied().collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(fill(7), fill(7));
        assert_ne!(fill(7), fill(8));
    }

    proptest! {
        #[test]
        fn intrinsic_reward_is_nonpositive_and_zero_only_at_target(
            sg in proptest::collection::vec(-10.0f64..10.0, 2),
            s in proptest::collection::vec(-10.0f64..10.0, 4),
            absolute in any::<bool>(),
        ) {
            let scheme = if absolute { SubgoalScheme::Absolute } else { SubgoalScheme::Relative };
            let p = params(scheme);
            let r = p.intrinsic_reward(&sg, &s);
            prop_assert!(r <= 0.0);
            let at = match scheme {
                SubgoalScheme::Absolute => p.project(&s).0,
                SubgoalScheme::Relative => vec![0.0, 0.0],
            };
            prop_assert_eq!(p.intrinsic_reward(&at, &s), 0.0);
        }

        #[test]
        fn relative_transition_keeps_absolute_target_fixed(
            sg0 in proptest::collection::vec(-5.0f64..5.0, 2),
            steps in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..15),
        ) {
            let p = params(SubgoalScheme::Relative);
            let mut s = vec![0.0, 0.0, 0.0, 0.0];
            let mut sg = sg0.clone();
            let target0 = p.absolute_target(&sg, &s);
            for d in steps {
                let next: Vec<f64> = s.iter().zip(&d).map(|(a, b)| a + b).collect();
                sg = p.subgoal_transition(&sg, &s, &next).0;
                s = next;
                let t = p.absolute_target(&sg, &s);
                for k in 0..2 {
                    prop_assert!((t[k] - target0[k]).abs() < 1e-9);
                }
            }
        }
    }
}
