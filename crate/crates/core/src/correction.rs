//! Off-policy correction of stored high-level actions by model-based rollout
//! scoring, with a bounded ("soft") shift toward the best candidate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rollout, Blend, Policy, TransitionModel};
use crate::error::{config, Result};
use crate::hierarchy::{HierarchyParams, HighTransition, SubgoalScheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionParams {
    pub k: usize,
    pub rho: f64,
    pub delta_sg: f64,
    pub sigma_cand: f64,
    /// Weight each step's action error by `ρ^i` instead of blending states.
    /// Off by default.
    pub weight_actions: bool,
}

impl Default for CorrectionParams {
    fn default() -> Self {
        Self {
            k: 10,
            rho: 0.95,
            delta_sg: 20.0,
            sigma_cand: 1.0,
            weight_actions: false,
        }
    }
}

impl CorrectionParams {
    /// Plain argmax relabeling over recorded states.
    pub fn hiro() -> Self {
        Self {
            rho: 1.0,
            delta_sg: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return config("correction needs k >= 3 candidates");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return config("rho must lie in (0, 1]");
        }
        if !(self.delta_sg >= 0.0) || !(self.sigma_cand >= 0.0) {
            return config("delta_sg and sigma_cand must be non-negative");
        }
        Ok(())
    }
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Moves `sg` toward `best` by at most `delta_sg`. A zero `delta_sg` returns
/// `best` outright; a `best` closer than `delta_sg` is returned exactly.
pub fn soft_shift(sg: &[f64], best: &[f64], delta_sg: f64) -> Vec<f64> {
    if delta_sg == 0.0 {
        return best.to_vec();
    }
    let diff: Vec<f64> = best.iter().zip(sg).map(|(b, s)| b - s).collect();
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 {
        return sg.to_vec();
    }
    if norm <= delta_sg {
        return best.to_vec();
    }
    sg.iter().zip(&diff).map(|(s, d)| s + delta_sg * d / norm).collect()
}

/// Goal-space quantity the interval actually achieved, expressed in the
/// subgoal scheme.
pub fn achieved_subgoal(ht: &HighTransition, hier: &HierarchyParams) -> Vec<f64> {
    let last = hier.project(ht.last_state());
    match hier.scheme {
        SubgoalScheme::Absolute => last.0,
        SubgoalScheme::Relative => {
            let first = hier.project(ht.first_state());
            last.iter().zip(first.iter()).map(|(a, b)| a - b).collect()
        }
    }
}

/// Scores every candidate of every transition: `−Σ_i ‖a_i − â_i‖²` over
/// the recorded steps, with rollout states blended toward the recorded ones
/// by `ρ^i`. Returns one score vector per transition.
pub fn score_candidates(
    transitions: &[&HighTransition],
    candidates: &[Vec<Vec<f64>>],
    model: &mut dyn TransitionModel,
    policy: &dyn Policy,
    hier: &HierarchyParams,
    params: &CorrectionParams,
) -> Result<Vec<Vec<f64>>> {
    let sd = model.state_dim();
    let horizon = transitions.iter().map(|t| t.len()).max().unwrap_or(0);
    if horizon == 0 {
        return Ok(candidates.iter().map(|c| vec![0.0; c.len()]).collect());
    }
    let mut owners = Vec::new();
    let mut s0 = Vec::new();
    let mut sg0 = Vec::new();
    let mut recorded = vec![Vec::new(); horizon + 1];
    for (j, (ht, cands)) in transitions.iter().zip(candidates).enumerate() {
        for cand in cands {
            owners.push(j);
            s0.extend_from_slice(ht.first_state());
            sg0.extend_from_slice(cand);
            for (i, rec) in recorded.iter_mut().enumerate() {
                rec.extend_from_slice(&ht.states[i.min(ht.len())]);
            }
        }
    }
    let n = owners.len();
    // The action-weighted variant scores against pure model rollouts.
    let rho = if params.weight_actions { 0.0 } else { params.rho };
    let blend = Blend {
        rho,
        recorded: &recorded,
    };
    let blend_ref = if params.weight_actions { None } else { Some(&blend) };
    let roll = rollout(model, policy, hier, &s0, &sg0, n, horizon, blend_ref)?;
    debug_assert_eq!(roll.states[0].len(), n * sd);

    let ad = transitions[0].actions[0].len();
    let mut out: Vec<Vec<f64>> = candidates.iter().map(|c| Vec::with_capacity(c.len())).collect();
    for (row, &j) in owners.iter().enumerate() {
        let ht = transitions[j];
        let mut score = 0.0;
        for i in 0..ht.len() {
            let pred = &roll.actions[i][row * ad..(row + 1) * ad];
            let err: f64 = ht.actions[i].iter().zip(pred).map(|(a, p)| (a - p).powi(2)).sum();
            let w = if params.weight_actions { params.rho.powi(i as i32) } else { 1.0 };
            score -= w * err;
        }
        out[j].push(score);
    }
    Ok(out)
}

pub struct Corrector {
    pub params: CorrectionParams,
    rng: ChaCha8Rng,
}

impl Corrector {
    pub fn new(params: CorrectionParams, seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `k − 2` Gaussian draws around the achieved subgoal (clipped to the
    /// subgoal range), then the original subgoal, then the achieved one.
    pub fn candidates(&mut self, ht: &HighTransition, hier: &HierarchyParams, low: &[f64], high: &[f64]) -> Vec<Vec<f64>> {
        let center = achieved_subgoal(ht, hier);
        let mut out = Vec::with_capacity(self.params.k);
        let normal = Normal::new(0.0, self.params.sigma_cand).unwrap();
        for _ in 0..self.params.k - 2 {
            out.push(
                center
                    .iter()
                    .enumerate()
                    .map(|(j, c)| (c + normal.sample(&mut self.rng)).clamp(low[j], high[j]))
                    .collect(),
            );
        }
        out.push(ht.subgoal().0.clone());
        out.push(center);
        out
    }

    /// Relabeled subgoals for a batch of sampled high-level transitions.
    #[allow(clippy::too_many_arguments)]
    pub fn relabel_batch(
        &mut self,
        transitions: &[&HighTransition],
        model: &mut dyn TransitionModel,
        policy: &dyn Policy,
        hier: &HierarchyParams,
        low: &[f64],
        high: &[f64],
        delta_sg: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let cands: Vec<Vec<Vec<f64>>> = transitions.iter().map(|t| self.candidates(t, hier, low, high)).collect();
        let scores = score_candidates(transitions, &cands, model, policy, hier, &self.params)?;
        Ok(transitions
            .iter()
            .zip(&cands)
            .zip(&scores)
            .map(|((t, c), s)| soft_shift(t.subgoal(), &c[argmax_lowest(s)], delta_sg))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{ActionVec, GoalVec, StateVec};

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn soft_shift_examples() {
        assert_eq!(soft_shift(&[0.0, 0.0], &[6.0, 8.0], 5.0), vec![3.0, 4.0]);
        assert_eq!(soft_shift(&[1.0, 2.0], &[1.0, 2.0], 5.0), vec![1.0, 2.0]);
        assert_eq!(soft_shift(&[0.0, 0.0], &[6.0, 8.0], 0.0), vec![6.0, 8.0]);
        assert_eq!(soft_shift(&[0.0, 0.0], &[0.3, 0.4], 5.0), vec![0.3, 0.4]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0, 0.0]), 0);
    }

    #[test]
    fn params_are_validated() {
        let bad = [
            CorrectionParams { k: 2, ..Default::default() },
            CorrectionParams { rho: 0.0, ..Default::default() },
            CorrectionParams { rho: 1.5, ..Default::default() },
            CorrectionParams { delta_sg: -1.0, ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err());
        }
        assert!(CorrectionParams::hiro().validate().is_ok());
    }

    fn transition() -> HighTransition {
        let states: Vec<StateVec> = (0..=10).map(|i| StateVec(vec![i as f64 * 0.5, 1.0, 0.0, 0.0])).collect();
        HighTransition {
            states,
            goal: GoalVec(vec![0.0, 8.0]),
            subgoals: vec![GoalVec(vec![3.0, -1.0]); 10],
            actions: vec![ActionVec(vec![1.0, 0.0]); 10],
            r: 0.0,
            done: false,
        }
    }

    #[test]
    fn candidate_layout() {
        let hier = HierarchyParams::default();
        let mut c = Corrector::new(CorrectionParams::default(), 0).unwrap();
        let ht = transition();
        let cands = c.candidates(&ht, &hier, &[-4.0, -4.0], &[4.0, 4.0]);
        assert_eq!(cands.len(), 10);
        assert_eq!(cands[8], vec![3.0, -1.0]);
        assert_eq!(cands[9], vec![5.0, 0.0]);
        for cand in &cands[..8] {
            assert!(cand.iter().all(|v| (-4.0..=4.0).contains(v)));
        }
    }

    #[test]
    fn zero_sigma_candidates_sit_on_the_center() {
        let hier = HierarchyParams::default();
        let p = CorrectionParams {
            sigma_cand: 0.0,
            ..Default::default()
        };
        let mut c = Corrector::new(p, 0).unwrap();
        let cands = c.candidates(&transition(), &hier, &[-10.0, -10.0], &[10.0, 10.0]);
        for cand in &cands[..8] {
            assert_eq!(cand, &vec![5.0, 0.0]);
        }
    }

    #[test]
    fn candidates_are_seed_determined() {
        let hier = HierarchyParams::default();
        let mut a = Corrector::new(CorrectionParams::default(), 7).unwrap();
        let mut b = Corrector::new(CorrectionParams::default(), 7).unwrap();
        let ht = transition();
        assert_eq!(
            a.candidates(&ht, &hier, &[-9.0; 2], &[9.0; 2]),
            b.candidates(&ht, &hier, &[-9.0; 2], &[9.0; 2])
        );
    }

    proptest::proptest! {
        #[test]
        fn shift_never_exceeds_delta(
            sg in proptest::collection::vec(-20.0f64..20.0, 2),
            best in proptest::collection::vec(-20.0f64..20.0, 2),
            delta in 0.01f64..30.0,
        ) {
            let out = soft_shift(&sg, &best, delta);
            let moved: Vec<f64> = out.iter().zip(&sg).map(|(a, b)| a - b).collect();
            let gap: Vec<f64> = best.iter().zip(&sg).map(|(a, b)| a - b).collect();
            let m = norm(&moved);
            proptest::prop_assert!(m <= delta + 1e-9);
            if norm(&gap) > delta {
                proptest::prop_assert!((m - delta).abs() < 1e-9);
            }
        }
    }
}
