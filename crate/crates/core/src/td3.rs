//! Twin-critic deterministic actor-critic agent shared by both levels.
//!
//! Auxiliary objectives plug in through [`CriticPenalty`] (added to each
//! critic's loss before its optimizer step) and [`ActorAux`] (added to the
//! actor loss before its step).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, Adam, DenseNet, FinalInit, Head};
use crate::error::{usage, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Td3Params {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub act_low: Vec<f64>,
    pub act_high: Vec<f64>,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Target smoothing std as a fraction of the action half-range.
    pub target_noise: f64,
    /// Target noise clip as a fraction of the action half-range.
    pub noise_clip: f64,
    /// Exploration std in action units.
    pub expl_noise: f64,
}

impl Td3Params {
    pub fn new(obs_dim: usize, act_low: Vec<f64>, act_high: Vec<f64>) -> Self {
        Self {
            obs_dim,
            act_dim: act_low.len(),
            hidden: vec![300, 300],
            act_low,
            act_high,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            target_noise: 0.2,
            noise_clip: 0.5,
            expl_noise: 1.0,
        }
    }

    pub fn half_range(&self, j: usize) -> f64 {
        0.5 * (self.act_high[j] - self.act_low[j])
    }

    pub fn clip_action(&self, a: &mut [f64]) {
        for (j, v) in a.iter_mut().enumerate() {
            *v = v.clamp(self.act_low[j], self.act_high[j]);
        }
    }
}

/// A batch of `(o, a, r, o′, done)` rows, stored row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub reward: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub done: Vec<f64>,
}

impl Batch {
    pub fn with_capacity(n: usize, obs_dim: usize, act_dim: usize) -> Self {
        Self {
            n: 0,
            obs: Vec::with_capacity(n * obs_dim),
            act: Vec::with_capacity(n * act_dim),
            reward: Vec::with_capacity(n),
            next_obs: Vec::with_capacity(n * obs_dim),
            done: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, obs: &[f64], act: &[f64], reward: f64, next_obs: &[f64], done: bool) {
        self.obs.extend_from_slice(obs);
        self.act.extend_from_slice(act);
        self.reward.push(reward);
        self.next_obs.extend_from_slice(next_obs);
        self.done.push(if done { 1.0 } else { 0.0 });
        self.n += 1;
    }
}

/// Extra critic loss, e.g. a gradient penalty. Returns the loss value and
/// adds its parameter gradient into `grad`.
pub trait CriticPenalty {
    fn apply(&mut self, critic_index: usize, critic: &DenseNet, grad: &mut [f64]) -> f64;
}

/// Extra actor loss. `actions` are the actor outputs on the update batch;
/// implementations add `∂L/∂actions` into `action_grad` and any gradient they
/// compute independently (on other inputs) into `param_grad`.
pub trait ActorAux {
    fn apply(
        &mut self,
        actor: &DenseNet,
        obs: &[f64],
        actions: &[f64],
        action_grad: &mut [f64],
        param_grad: &mut [f64],
    ) -> f64;
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticStats {
    pub td_loss: [f64; 2],
    pub extra: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActorStats {
    pub q_loss: f64,
    pub extra: f64,
}

#[derive(Clone, Debug)]
pub struct Td3Agent {
    pub params: Td3Params,
    pub actor: DenseNet,
    pub actor_target: DenseNet,
    pub critics: [DenseNet; 2],
    pub critic_targets: [DenseNet; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    params: Td3Params,
    actor: DenseNet,
    actor_target: DenseNet,
    critics: [DenseNet; 2],
    critic_targets: [DenseNet; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
}

/// Concatenates `n` rows of `a` (width `da`) with `n` rows of `b` (width `db`).
pub fn concat_rows(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (da + db));
    for r in 0..n {
        out.extend_from_slice(&a[r * da..(r + 1) * da]);
        out.extend_from_slice(&b[r * db..(r + 1) * db]);
    }
    out
}

impl Td3Agent {
    pub fn new(params: Td3Params, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = DenseNet::new(
            params.obs_dim,
            &params.hidden,
            params.act_dim,
            Activation::Relu,
            Head::ScaledTanh {
                low: params.act_low.clone(),
                high: params.act_high.clone(),
            },
            FinalInit::Uniform(3e-3),
            &mut rng,
        );
        let make_critic = |rng: &mut ChaCha8Rng| {
            DenseNet::new(
                params.obs_dim + params.act_dim,
                &params.hidden,
                1,
                Activation::Relu,
                Head::Identity,
                FinalInit::FanIn,
                rng,
            )
        };
        let c1 = make_critic(&mut rng);
        let c2 = make_critic(&mut rng);
        Self {
            actor_opt: Adam::new(actor.num_params(), params.actor_lr),
            critic_opts: [
                Adam::new(c1.num_params(), params.critic_lr),
                Adam::new(c2.num_params(), params.critic_lr),
            ],
            actor_target: actor.clone(),
            critic_targets: [c1.clone(), c2.clone()],
            actor,
            critics: [c1, c2],
            params,
            rng,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.params.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.params.act_dim
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Policy output, optionally with Gaussian exploration noise, clipped to
    /// the action range.
    pub fn act(&mut self, obs: &[f64], explore: bool) -> Vec<f64> {
        let mut a = self.actor.forward(obs, 1).expect("observation width");
        if explore && self.params.expl_noise > 0.0 {
            let normal = Normal::new(0.0, self.params.expl_noise).unwrap();
            for v in a.iter_mut() {
                *v += normal.sample(&mut self.rng);
            }
        }
        self.params.clip_action(&mut a);
        a
    }

    pub fn act_batch(&self, obs: &[f64], n: usize) -> Vec<f64> {
        self.actor.forward(obs, n).expect("observation width")
    }

    pub fn q_value(&self, obs: &[f64], act: &[f64], n: usize) -> Vec<f64> {
        let x = concat_rows(obs, self.obs_dim(), act, self.act_dim(), n);
        self.critics[0].forward(&x, n).expect("critic input width")
    }

    /// Draws clipped target-smoothing noise for `n` actions.
    pub fn sample_target_noise(&mut self, n: usize) -> Vec<f64> {
        let d = self.act_dim();
        let mut eps = vec![0.0; n * d];
        for j in 0..d {
            let half = self.params.half_range(j);
            let sigma = self.params.target_noise * half;
            if sigma <= 0.0 {
                continue;
            }
            let clip = self.params.noise_clip * half;
            let normal = Normal::new(0.0, sigma).unwrap();
            for r in 0..n {
                eps[r * d + j] = normal.sample(&mut self.rng).clamp(-clip, clip);
            }
        }
        eps
    }

    /// Adds `noise` to target-policy actions at `obs` and clips to the range.
    pub fn smoothed_target_actions(&self, obs: &[f64], n: usize, noise: &[f64]) -> Vec<f64> {
        let mut a = self.actor_target.forward(obs, n).expect("observation width");
        for (v, e) in a.iter_mut().zip(noise) {
            *v += e;
        }
        for row in a.chunks_mut(self.act_dim()) {
            self.params.clip_action(row);
        }
        a
    }

    pub fn target_value_with_noise(&self, batch: &Batch, noise: &[f64]) -> Vec<f64> {
        let n = batch.n;
        let a = self.smoothed_target_actions(&batch.next_obs, n, noise);
        let x = concat_rows(&batch.next_obs, self.obs_dim(), &a, self.act_dim(), n);
        let q1 = self.critic_targets[0].forward(&x, n).unwrap();
        let q2 = self.critic_targets[1].forward(&x, n).unwrap();
        (0..n)
            .map(|r| batch.reward[r] + (1.0 - batch.done[r]) * self.params.gamma * q1[r].min(q2[r]))
            .collect()
    }

    pub fn target_value(&mut self, batch: &Batch) -> Vec<f64> {
        let noise = self.sample_target_noise(batch.n);
        self.target_value_with_noise(batch, &noise)
    }

    pub fn critic_update(
        &mut self,
        batch: &Batch,
        mut penalty: Option<&mut dyn CriticPenalty>,
    ) -> Result<CriticStats> {
        if batch.n == 0 {
            return usage("critic update on an empty batch");
        }
        let y = self.target_value(batch);
        let n = batch.n;
        let x = concat_rows(&batch.obs, self.obs_dim(), &batch.act, self.act_dim(), n);
        let mut stats = CriticStats::default();
        for i in 0..2 {
            let critic = &self.critics[i];
            let tape = critic.forward_tape(&x, n)?;
            let mut loss = 0.0;
            let mut grad_out = Vec::with_capacity(n);
            for r in 0..n {
                let e = tape.output[r] - y[r];
                loss += e * e;
                grad_out.push(2.0 * e / n as f64);
            }
            stats.td_loss[i] = loss / n as f64;
            let mut grad = vec![0.0; critic.num_params()];
            critic.backward(&tape, &grad_out, Some(&mut grad), false);
            if let Some(p) = penalty.as_deref_mut() {
                stats.extra += p.apply(i, critic, &mut grad);
            }
            self.critic_opts[i].step(self.critics[i].params_mut(), &grad);
        }
        Ok(stats)
    }

    /// Minimizes `−mean Q₁(o, π(o))` plus any auxiliary terms, then
    /// soft-updates every target network.
    pub fn actor_update(&mut self, obs: &[f64], n: usize, aux: Option<&mut dyn ActorAux>) -> Result<ActorStats> {
        if n == 0 {
            return usage("actor update on an empty batch");
        }
        let (od, ad) = (self.obs_dim(), self.act_dim());
        let tape_a = self.actor.forward_tape(obs, n)?;
        let x = concat_rows(obs, od, &tape_a.output, ad, n);
        let tape_q = self.critics[0].forward_tape(&x, n)?;
        let q_loss = -tape_q.output.iter().sum::<f64>() / n as f64;
        let seed = vec![-1.0 / n as f64; n];
        let gin = self.critics[0].backward(&tape_q, &seed, None, true).unwrap();
        let mut action_grad = Vec::with_capacity(n * ad);
        for r in 0..n {
            action_grad.extend_from_slice(&gin[r * (od + ad) + od..(r + 1) * (od + ad)]);
        }
        let mut grad = vec![0.0; self.actor.num_params()];
        let mut stats = ActorStats {
            q_loss,
            extra: 0.0,
        };
        if let Some(aux) = aux {
            stats.extra = aux.apply(&self.actor, obs, &tape_a.output, &mut action_grad, &mut grad);
        }
        self.actor.backward(&tape_a, &action_grad, Some(&mut grad), false);
        self.actor_opt.step(self.actor.params_mut(), &grad);
        self.soft_update_targets();
        Ok(stats)
    }

    pub fn soft_update_targets(&mut self) {
        let tau = self.params.tau;
        self.actor_target.soft_update(&self.actor, tau);
        for i in 0..2 {
            self.critic_targets[i].soft_update(&self.critics[i], tau);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            params: self.params.clone(),
            actor: self.actor.clone(),
            actor_target: self.actor_target.clone(),
            critics: self.critics.clone(),
            critic_targets: self.critic_targets.clone(),
            actor_opt: self.actor_opt.clone(),
            critic_opts: self.critic_opts.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    /// Restores networks and optimizer state; the noise generator is reseeded.
    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Self {
            params: ck.params,
            actor: ck.actor,
            actor_target: ck.actor_target,
            critics: ck.critics,
            critic_targets: ck.critic_targets,
            actor_opt: ck.actor_opt,
            critic_opts: ck.critic_opts,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_params() -> Td3Params {
        let mut p = Td3Params::new(3, vec![-1.0, -1.0], vec![1.0, 1.0]);
        p.hidden = vec![16, 16];
        p.gamma = 0.9;
        p
    }

    fn random_batch(n: usize, rng: &mut ChaCha8Rng, done: bool) -> Batch {
        let mut b = Batch::with_capacity(n, 3, 2);
        for _ in 0..n {
            let o: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let o2: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            b.push(&o, &a, rng.random_range(-1.0..0.0), &o2, done);
        }
        b
    }

    /// Sets a critic's final layer to output the constant `k`.
    fn make_constant(net: &mut DenseNet, k: f64) {
        let p = net.num_params();
        let last_in = net.sizes()[net.sizes().len() - 2];
        let params = net.params_mut();
        for v in &mut params[p - last_in - 1..p - 1] {
            *v = 0.0;
        }
        params[p - 1] = k;
    }

    #[test]
    fn done_rows_target_the_reward() {
        let mut agent = Td3Agent::new(small_params(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_batch(8, &mut rng, true);
        assert_eq!(agent.target_value(&b), b.reward);
    }

    #[test]
    fn constant_target_critics_give_discounted_constant() {
        let mut agent = Td3Agent::new(small_params(), 0);
        make_constant(&mut agent.critic_targets[0], 3.0);
        make_constant(&mut agent.critic_targets[1], 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = random_batch(5, &mut rng, false);
        b.reward = vec![0.0; 5];
        for y in agent.target_value(&b) {
            assert!((y - 0.9 * 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sigma_means_zero_noise() {
        let mut p = small_params();
        p.target_noise = 0.0;
        let mut agent = Td3Agent::new(p, 0);
        assert!(agent.sample_target_noise(50).iter().all(|&e| e == 0.0));
        let mut agent = Td3Agent::new(small_params(), 0);
        let eps = agent.sample_target_noise(500);
        assert!(eps.iter().all(|e| e.abs() <= 0.5));
        assert!(eps.iter().any(|&e| e != 0.0));
    }

    #[test]
    fn swapping_target_critics_leaves_targets_unchanged() {
        let mut agent = Td3Agent::new(small_params(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_batch(16, &mut rng, false);
        let noise = agent.sample_target_noise(16);
        let y = agent.target_value_with_noise(&b, &noise);
        agent.critic_targets.swap(0, 1);
        assert_eq!(agent.target_value_with_noise(&b, &noise), y);
    }

    #[test]
    fn actions_stay_in_range_under_exploration() {
        let mut p = small_params();
        p.act_low = vec![-2.0, 0.0];
        p.act_high = vec![2.0, 10.0];
        p.expl_noise = 5.0;
        let mut agent = Td3Agent::new(p, 4);
        let a0 = agent.act(&[0.1, 0.2, 0.3], false);
        assert_eq!(agent.act(&[0.1, 0.2, 0.3], false), a0);
        for _ in 0..200 {
            let a = agent.act(&[0.1, 0.2, 0.3], true);
            assert!((-2.0..=2.0).contains(&a[0]) && (0.0..=10.0).contains(&a[1]));
        }
    }

    #[test]
    fn perfect_critic_has_zero_td_loss() {
        let mut agent = Td3Agent::new(small_params(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = random_batch(10, &mut rng, true);
        for c in agent.critics.iter_mut() {
            make_constant(c, -0.5);
        }
        b.reward = vec![-0.5; 10];
        let stats = agent.critic_update(&b, None).unwrap();
        assert!(stats.td_loss.iter().all(|&l| l < 1e-24));
    }

    #[test]
    fn single_point_regression_converges_to_target() {
        // A terminal transition repeated: Q(o, a) must approach r.
        let mut p = small_params();
        p.critic_lr = 1e-2;
        let mut agent = Td3Agent::new(p, 6);
        let mut b = Batch::default();
        b.push(&[0.2, -0.3, 0.5], &[0.1, 0.4], -0.7, &[0.0, 0.0, 0.0], true);
        for _ in 0..500 {
            agent.critic_update(&b, None).unwrap();
        }
        let q = agent.q_value(&b.obs, &b.act, 1)[0];
        assert!((q + 0.7).abs() < 1e-3, "q = {q}");
    }

    struct ZeroPenalty;
    impl CriticPenalty for ZeroPenalty {
        fn apply(&mut self, _: usize, _: &DenseNet, _: &mut [f64]) -> f64 {
            0.0
        }
    }

    struct ZeroAux;
    impl ActorAux for ZeroAux {
        fn apply(&mut self, _: &DenseNet, _: &[f64], _: &[f64], _: &mut [f64], _: &mut [f64]) -> f64 {
            0.0
        }
    }

    #[test]
    fn zero_extra_terms_match_plain_updates_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_batch(32, &mut rng, false);
        let mut plain = Td3Agent::new(small_params(), 7);
        let mut with = Td3Agent::new(small_params(), 7);
        for _ in 0..5 {
            plain.critic_update(&b, None).unwrap();
            with.critic_update(&b, Some(&mut ZeroPenalty)).unwrap();
            plain.actor_update(&b.obs, b.n, None).unwrap();
            with.actor_update(&b.obs, b.n, Some(&mut ZeroAux)).unwrap();
        }
        assert_eq!(plain.actor.params(), with.actor.params());
        assert_eq!(plain.critics[0].params(), with.critics[0].params());
        assert_eq!(plain.critic_targets[1].params(), with.critic_targets[1].params());
    }

    #[test]
    fn constant_critic_gives_zero_policy_gradient() {
        let mut agent = Td3Agent::new(small_params(), 8);
        make_constant(&mut agent.critics[0], 1.0);
        let before = agent.actor.params().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = random_batch(16, &mut rng, false);
        let stats = agent.actor_update(&b.obs, b.n, None).unwrap();
        assert!((stats.q_loss + 1.0).abs() < 1e-12);
        assert_eq!(agent.actor.params(), &before[..]);
    }

    struct PullTo {
        target: Vec<f64>,
        weight: f64,
    }
    impl ActorAux for PullTo {
        fn apply(&mut self, _: &DenseNet, _: &[f64], actions: &[f64], ag: &mut [f64], _: &mut [f64]) -> f64 {
            let d = self.target.len();
            let n = actions.len() / d;
            let mut loss = 0.0;
            for (i, a) in actions.iter().enumerate() {
                let e = a - self.target[i % d];
                loss += self.weight * e * e / n as f64;
                ag[i] += 2.0 * self.weight * e / n as f64;
            }
            loss
        }
    }

    #[test]
    fn dominant_auxiliary_term_drives_actor_to_target() {
        let mut p = small_params();
        p.actor_lr = 1e-2;
        let mut agent = Td3Agent::new(p, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_batch(32, &mut rng, false);
        let mut aux = PullTo {
            target: vec![0.5, -0.25],
            weight: 1e4,
        };
        for _ in 0..400 {
            agent.actor_update(&b.obs, b.n, Some(&mut aux)).unwrap();
        }
        for row in agent.act_batch(&b.obs, b.n).chunks(2) {
            assert!((row[0] - 0.5).abs() < 0.02 && (row[1] + 0.25).abs() < 0.02, "{row:?}");
        }
    }

    #[test]
    fn td_loss_decreases_on_stationary_regression() {
        // Rewards depend smoothly on (o, a); all rows terminal.
        let mut agent = Td3Agent::new(small_params(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let make = |rng: &mut ChaCha8Rng, n| {
            let mut b = random_batch(n, rng, true);
            for r in 0..n {
                b.reward[r] = (b.obs[3 * r] - b.act[2 * r + 1]).sin();
            }
            b
        };
        let held = make(&mut rng, 256);
        let td = |agent: &mut Td3Agent| {
            let q = agent.q_value(&held.obs, &held.act, held.n);
            q.iter().zip(&held.reward).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / held.n as f64
        };
        let before = td(&mut agent);
        for _ in 0..1000 {
            let b = make(&mut rng, 64);
            agent.critic_update(&b, None).unwrap();
        }
        let after = td(&mut agent);
        assert!(after < 0.5 * before, "before {before}, after {after}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        let mut agent = Td3Agent::new(small_params(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random_batch(8, &mut rng, false);
        agent.critic_update(&b, None).unwrap();
        agent.actor_update(&b.obs, b.n, None).unwrap();
        agent.save(&path).unwrap();
        let back = Td3Agent::load(&path, 0).unwrap();
        assert_eq!(back.actor, agent.actor);
        assert_eq!(back.critic_targets, agent.critic_targets);
        assert_eq!(back.critic_opts[1].steps(), 1);
    }
}
