//! Model-guided losses for the lower level: a gradient penalty on the
//! critic's action gradient with a bound inferred from the learned dynamics,
//! and one-step rollout planning scored by the higher-level critic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::approx::DenseNet;
use crate::dynamics::DynamicsEnsemble;
use crate::error::{config, Error, Result};
use crate::hierarchy::HierarchyParams;
use crate::td3::{concat_rows, ActorAux, CriticPenalty, Td3Agent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcmrParams {
    pub lambda_gp: f64,
    pub lambda_osrp: f64,
    /// Penalty applied on steps divisible by this.
    pub gp_every: usize,
    /// Critic iterations per actor iteration on penalty steps.
    pub gp_critic_iters: usize,
    /// Planning applied every `op_every · H_c` steps.
    pub op_every: usize,
    /// Replicas of each sampled pair in the planning pool.
    pub osrp_replicas: usize,
    /// Pairs drawn from the high-level buffer per planning step.
    pub osrp_pairs: usize,
    /// Policy Lipschitz constant for the tight bound; unused by the penalty.
    pub l_pi_assumed: Option<f64>,
    pub use_conservative_bound: bool,
}

impl Default for GcmrParams {
    fn default() -> Self {
        Self {
            lambda_gp: 1.0,
            lambda_osrp: 5e-4,
            gp_every: 5,
            gp_critic_iters: 5,
            op_every: 10,
            osrp_replicas: 10,
            osrp_pairs: 128,
            l_pi_assumed: None,
            use_conservative_bound: true,
        }
    }
}

impl GcmrParams {
    pub fn off() -> Self {
        Self {
            lambda_gp: 0.0,
            lambda_osrp: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0) || !(self.lambda_osrp >= 0.0) {
            return config("gcmr weights must be non-negative");
        }
        if self.gp_every == 0 || self.op_every == 0 || self.gp_critic_iters == 0 || self.osrp_replicas == 0 {
            return config("gcmr cadences must be at least 1");
        }
        if let Some(l) = self.l_pi_assumed {
            if !(0.0..1.0).contains(&l) {
                return config("l_pi_assumed must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Domain(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(())
}

/// `1 − x` rounded to 15 significant digits, so decimal discounts such as
/// 0.95 give their exact complement instead of carrying binary error.
fn complement(x: f64) -> f64 {
    format!("{:.14e}", 1.0 - x).parse().unwrap()
}

/// `√N·L_r / (1 − γ·L_π)`.
pub fn bound_tight(n: usize, l_r: f64, gamma: f64, l_pi: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if gamma * l_pi >= 1.0 {
        return Err(Error::Domain(format!("γ·L_π = {} must be below 1", gamma * l_pi)));
    }
    Ok((n as f64).sqrt() * l_r / complement(gamma * l_pi))
}

/// `√N·L_r / (1 − γ)`.
pub fn bound_conservative(n: usize, l_r: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok((n as f64).sqrt() * l_r / complement(gamma))
}

/// Largest norm over the batch of the intrinsic reward's action gradient
/// under model predictions. `obs` rows are `(s, sg)`; `members[r]` picks the
/// ensemble member for row `r`.
pub fn lr_hat(
    obs: &[f64],
    n: usize,
    ensemble: &DynamicsEnsemble,
    low_actor: &DenseNet,
    hier: &HierarchyParams,
    members: &[usize],
) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    let gd = hier.goal_dim();
    let od = low_actor.input_dim();
    let sd = od - gd;
    let a = low_actor.forward(obs, n)?;
    let mut s = Vec::with_capacity(n * sd);
    for r in 0..n {
        s.extend_from_slice(&obs[r * od..r * od + sd]);
    }
    let tape = ensemble.predict_tape(&s, &a, n, members)?;
    let eta = hier.scheme.eta();
    let mut cot = vec![0.0; n * sd];
    for r in 0..n {
        let sg = &obs[r * od + sd..(r + 1) * od];
        let cur = &s[r * sd..(r + 1) * sd];
        let next = &tape.next_states[r * sd..(r + 1) * sd];
        let v: Vec<f64> = hier
            .goal_indices
            .iter()
            .zip(sg)
            .map(|(&i, g)| g + (1.0 - eta) * (cur[i] - next[i]) - eta * next[i])
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            // r̂ = −scale·‖v‖ and ∂v/∂ŝ′ = −P_φ in both schemes.
            for (k, &i) in hier.goal_indices.iter().enumerate() {
                cot[r * sd + i] = hier.reward_scale_lo * v[k] / norm;
            }
        }
    }
    let g = ensemble.action_vjp(&tape, &cot);
    let ad = ensemble.action_dim();
    Ok((0..n)
        .map(|r| g[r * ad..(r + 1) * ad].iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

/// Frobenius norms of `∂Q/∂a` per row.
pub fn action_grad_norms(critic: &DenseNet, obs: &[f64], actions: &[f64], n: usize, obs_dim: usize, act_dim: usize) -> Result<Vec<f64>> {
    let x = concat_rows(obs, obs_dim, actions, act_dim, n);
    let g = critic.input_gradient(&x, n, 0, obs_dim..obs_dim + act_dim)?;
    Ok((0..n)
        .map(|r| g[r * act_dim..(r + 1) * act_dim].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PenaltyStats {
    pub mean_norm: f64,
    pub max_norm: f64,
    pub loss: f64,
}

/// `λ·mean ReLU(‖∇_a Q(o, a)‖ − threshold)²` on fixed `(o, a)` rows.
pub struct GradientPenalty {
    pub lambda: f64,
    pub threshold: f64,
    x: Vec<f64>,
    n: usize,
    obs_dim: usize,
    act_dim: usize,
    /// Statistics from the most recent application to critic 0.
    pub stats: PenaltyStats,
}

impl GradientPenalty {
    pub fn new(lambda: f64, threshold: f64, obs: &[f64], actions: &[f64], n: usize, obs_dim: usize, act_dim: usize) -> Self {
        Self {
            lambda,
            threshold,
            x: concat_rows(obs, obs_dim, actions, act_dim, n),
            n,
            obs_dim,
            act_dim,
            stats: PenaltyStats::default(),
        }
    }

    /// Loss value and, when `grad` is given, its parameter gradient.
    pub fn evaluate(&self, critic: &DenseNet, grad: Option<&mut [f64]>) -> (f64, PenaltyStats) {
        let tape = critic.input_grad_tape(&self.x, self.n).expect("critic input width");
        let gx = tape.input_gradient();
        let d = self.obs_dim + self.act_dim;
        let mut cot = vec![0.0; self.n * d];
        let mut stats = PenaltyStats::default();
        let mut loss = 0.0;
        for r in 0..self.n {
            let ga = &gx[r * d + self.obs_dim..(r + 1) * d];
            let norm = ga.iter().map(|v| v * v).sum::<f64>().sqrt();
            stats.mean_norm += norm / self.n as f64;
            stats.max_norm = stats.max_norm.max(norm);
            let excess = norm - self.threshold;
            if excess > 0.0 {
                loss += self.lambda * excess * excess / self.n as f64;
                for k in 0..self.act_dim {
                    cot[r * d + self.obs_dim + k] = 2.0 * self.lambda * excess * ga[k] / norm / self.n as f64;
                }
            }
        }
        stats.loss = loss;
        if let Some(g) = grad {
            if loss > 0.0 {
                critic.input_grad_param_grad(&tape, &cot, g);
            }
        }
        (loss, stats)
    }
}

impl CriticPenalty for GradientPenalty {
    fn apply(&mut self, critic_index: usize, critic: &DenseNet, grad: &mut [f64]) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let (loss, stats) = self.evaluate(critic, Some(grad));
        if critic_index == 0 {
            self.stats = stats;
        }
        loss
    }
}

/// Evaluation pool: each `(s, g)` pair replicated `replicas` times with the
/// goals of replicas after the first shuffled across pairs, then the whole
/// pool duplicated once more.
pub fn osrp_pool(states: &[f64], goals: &[f64], n: usize, sd: usize, gd: usize, replicas: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize) {
    let mut ps = Vec::with_capacity(2 * replicas * n * sd);
    let mut pg = Vec::with_capacity(2 * replicas * n * gd);
    for rep in 0..replicas {
        let mut perm: Vec<usize> = (0..n).collect();
        if rep > 0 {
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
        }
        for r in 0..n {
            ps.extend_from_slice(&states[r * sd..(r + 1) * sd]);
            pg.extend_from_slice(&goals[perm[r] * gd..(perm[r] + 1) * gd]);
        }
    }
    let m = replicas * n;
    ps.extend_from_within(..);
    pg.extend_from_within(..);
    (ps, pg, 2 * m)
}

/// One-step rollout planning term for the lower actor, evaluated on its own
/// pool of `(s_t, g, sg_t)` rows.
pub struct OsrpTerm<'a> {
    pub lambda: f64,
    pub states: Vec<f64>,
    pub goals: Vec<f64>,
    pub subgoals: Vec<f64>,
    pub n: usize,
    pub members: Vec<usize>,
    /// Target-policy smoothing noise for the second branch, `n × goal_dim`.
    pub noise: Vec<f64>,
    pub ensemble: &'a DynamicsEnsemble,
    pub high: &'a Td3Agent,
    pub hier: &'a HierarchyParams,
    pub last_loss: f64,
}

impl<'a> OsrpTerm<'a> {
    /// Builds the pool: subgoals drawn around the high policy with std
    /// `sigma_sg` per axis and clipped to the high action range; branch noise
    /// from the high agent's smoothing parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        lambda: f64,
        states: Vec<f64>,
        goals: Vec<f64>,
        n: usize,
        sigma_sg: &[f64],
        ensemble: &'a DynamicsEnsemble,
        high: &'a Td3Agent,
        hier: &'a HierarchyParams,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let sd = states.len() / n.max(1);
        let gd = hier.goal_dim();
        let obs = concat_rows(&states, sd, &goals, goals.len() / n.max(1), n);
        let mean = high.act_batch(&obs, n);
        let p = &high.params;
        let mut subgoals = Vec::with_capacity(n * gd);
        let mut noise = Vec::with_capacity(n * gd);
        for r in 0..n {
            for j in 0..gd {
                let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
                subgoals.push((mean[r * gd + j] + sigma_sg[j] * z).clamp(p.act_low[j], p.act_high[j]));
            }
        }
        for _ in 0..n {
            for j in 0..gd {
                let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
                let sigma = p.target_noise * p.half_range(j);
                let clip = p.noise_clip * p.half_range(j);
                noise.push((sigma * z).clamp(-clip, clip));
            }
        }
        let members = ensemble.members().len();
        let members = (0..n).map(|_| rng.random_range(0..members)).collect();
        Self {
            lambda,
            states,
            goals,
            subgoals,
            n,
            members,
            noise,
            ensemble,
            high,
            hier,
            last_loss: 0.0,
        }
    }

    /// Loss and its gradient with respect to the lower actor's parameters.
    pub fn loss_and_grad(&self, actor: &DenseNet, param_grad: Option<&mut [f64]>) -> Result<f64> {
        let n = self.n;
        let gd = self.hier.goal_dim();
        let sd = self.states.len() / n;
        let hp = &self.high.params;
        let hod = hp.obs_dim;
        let obs_lo = concat_rows(&self.states, sd, &self.subgoals, gd, n);
        let tape_lo = actor.forward_tape(&obs_lo, n)?;
        let pred = self.ensemble.predict_tape(&self.states, &tape_lo.output, n, &self.members)?;
        let next = &pred.next_states;
        let eta = self.hier.scheme.eta();

        // Branch 1: the subgoal carried forward by the fixed transition.
        let mut h = Vec::with_capacity(n * gd);
        for r in 0..n {
            h.extend_from_slice(&self.hier.subgoal_transition(
                &self.subgoals[r * gd..(r + 1) * gd],
                &self.states[r * sd..(r + 1) * sd],
                &next[r * sd..(r + 1) * sd],
            ));
        }
        let obs_hi = concat_rows(next, sd, &self.goals, hod - sd, n);
        let critic = &self.high.critics[0];
        let x1 = concat_rows(&obs_hi, hod, &h, gd, n);
        let t1 = critic.forward_tape(&x1, n)?;
        // Branch 2: the high policy's own (smoothed) choice at the new state.
        let tape_pi = self.high.actor.forward_tape(&obs_hi, n)?;
        let mut a2 = Vec::with_capacity(n * gd);
        let mut inside = Vec::with_capacity(n * gd);
        for r in 0..n {
            for j in 0..gd {
                let raw = tape_pi.output[r * gd + j] + self.noise[r * gd + j];
                let c = raw.clamp(hp.act_low[j], hp.act_high[j]);
                inside.push(if c == raw { 1.0 } else { 0.0 });
                a2.push(c);
            }
        }
        let x2 = concat_rows(&obs_hi, hod, &a2, gd, n);
        let t2 = critic.forward_tape(&x2, n)?;
        let q_sum: f64 = t1.output.iter().chain(&t2.output).sum();
        let scale = -self.lambda / 2.0 / n as f64;
        let loss = scale * q_sum;

        let Some(param_grad) = param_grad else {
            return Ok(loss);
        };
        if self.lambda == 0.0 {
            return Ok(loss);
        }
        let seed = vec![scale; n];
        let g1 = critic.backward(&t1, &seed, None, true).unwrap();
        let g2 = critic.backward(&t2, &seed, None, true).unwrap();
        let w = hod + gd;
        let mut pi_out = vec![0.0; n * gd];
        for r in 0..n {
            for j in 0..gd {
                pi_out[r * gd + j] = g2[r * w + hod + j] * inside[r * gd + j];
            }
        }
        let g_pi = self.high.actor.backward(&tape_pi, &pi_out, None, true).unwrap();
        let mut cot = vec![0.0; n * sd];
        for r in 0..n {
            for i in 0..sd {
                cot[r * sd + i] = g1[r * w + i] + g2[r * w + i] + g_pi[r * hod + i];
            }
            for (k, &i) in self.hier.goal_indices.iter().enumerate() {
                cot[r * sd + i] -= (1.0 - eta) * g1[r * w + hod + k];
            }
        }
        let ga = self.ensemble.action_vjp(&pred, &cot);
        actor.backward(&tape_lo, &ga, Some(param_grad), false);
        Ok(loss)
    }
}

impl ActorAux for OsrpTerm<'_> {
    fn apply(&mut self, actor: &DenseNet, _obs: &[f64], _actions: &[f64], _action_grad: &mut [f64], param_grad: &mut [f64]) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        self.last_loss = self.loss_and_grad(actor, Some(param_grad)).expect("osrp shapes");
        self.last_loss
    }
}
