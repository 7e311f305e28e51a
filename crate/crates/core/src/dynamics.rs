//! Bootstrapped ensemble of Gaussian next-state models and batched rollouts.
//!
//! Members predict the normalized state delta. Predictions used downstream
//! are the member *means* (never Gaussian draws), de-normalized and added to
//! the current state. Rewards are never modelled.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, Adam, DenseNet, FinalInit, Head, Tape};
use crate::error::{config, usage, Result};
use crate::hierarchy::HierarchyParams;
use crate::td3::concat_rows;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Minibatch updates per member per epoch.
    pub batches_per_epoch: usize,
    pub holdout_fraction: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// Only the most recent transitions are used for fitting.
    pub max_train_samples: usize,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            ensemble_size: 5,
            hidden: vec![256, 256],
            lr: 0.005,
            batch_size: 256,
            epochs: 20,
            batches_per_epoch: 10,
            holdout_fraction: 0.1,
            logvar_min: -5.0,
            logvar_max: 2.0,
            max_train_samples: 50_000,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return config("ensemble needs at least two members");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return config("holdout_fraction must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.batches_per_epoch == 0 {
            return config("dynamics batch size, epochs and batches per epoch must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// One member chosen uniformly at random per prediction.
    SampleMember,
    /// Average of all member means.
    MeanOfMeans,
}

/// Per-feature affine normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = rows.len() / dim;
        if n == 0 {
            return Self::identity(dim);
        }
        let mut mean = vec![0.0; dim];
        for r in rows.chunks(dim) {
            for j in 0..dim {
                mean[j] += r[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows.chunks(dim) {
            for j in 0..dim {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s < 1e-6 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, rows: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        rows.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect()
    }

    pub fn denormalize(&self, rows: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        rows.iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect()
    }
}

/// Anything that maps a batch of `(state, action)` rows to next states.
pub trait TransitionModel {
    fn state_dim(&self) -> usize;
    fn predict(&mut self, states: &[f64], actions: &[f64], n: usize) -> Vec<f64>;
}

/// A deterministic low-level policy over `(state, subgoal)` observations.
pub trait Policy {
    fn act_batch(&self, obs: &[f64], n: usize) -> Vec<f64>;
}

impl Policy for DenseNet {
    fn act_batch(&self, obs: &[f64], n: usize) -> Vec<f64> {
        self.forward(obs, n).expect("policy input width")
    }
}

/// Flat `(s, a, s′)` training rows.
#[derive(Clone, Debug, Default)]
pub struct TransitionSet {
    pub n: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub next_states: Vec<f64>,
}

impl TransitionSet {
    pub fn push(&mut self, s: &[f64], a: &[f64], s_next: &[f64]) {
        self.states.extend_from_slice(s);
        self.actions.extend_from_slice(a);
        self.next_states.extend_from_slice(s_next);
        self.n += 1;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynamicsEnsemble {
    pub params: DynamicsParams,
    state_dim: usize,
    action_dim: usize,
    members: Vec<DenseNet>,
    #[serde(skip)]
    optimizers: Vec<Adam>,
    input_norm: Normalizer,
    delta_norm: Normalizer,
    trained: bool,
    #[serde(skip, default = "default_rng")]
    rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Forward state kept to differentiate predictions with respect to actions.
pub struct PredictionTape {
    n: usize,
    groups: Vec<(usize, Vec<usize>, Tape)>,
    pub next_states: Vec<f64>,
}

impl DynamicsEnsemble {
    pub fn new(state_dim: usize, action_dim: usize, params: DynamicsParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members: Vec<DenseNet> = (0..params.ensemble_size)
            .map(|_| {
                DenseNet::new(
                    state_dim + action_dim,
                    &params.hidden,
                    state_dim,
                    Activation::Swish,
                    Head::Gaussian {
                        logvar_min: params.logvar_min,
                        logvar_max: params.logvar_max,
                    },
                    FinalInit::FanIn,
                    &mut rng,
                )
            })
            .collect();
        let optimizers = members.iter().map(|m| Adam::new(m.num_params(), params.lr)).collect();
        Ok(Self {
            state_dim,
            action_dim,
            members,
            optimizers,
            input_norm: Normalizer::identity(state_dim + action_dim),
            delta_norm: Normalizer::identity(state_dim),
            trained: false,
            rng,
            params,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn members(&self) -> &[DenseNet] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [DenseNet] {
        &mut self.members
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Marks hand-built members as usable for prediction.
    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn set_normalizers(&mut self, input: Normalizer, delta: Normalizer) {
        self.input_norm = input;
        self.delta_norm = delta;
    }

    pub fn normalizers(&self) -> (&Normalizer, &Normalizer) {
        (&self.input_norm, &self.delta_norm)
    }

    /// Fits input and target statistics to `data`.
    pub fn fit_normalizers(&mut self, data: &TransitionSet) {
        let x = concat_rows(&data.states, self.state_dim, &data.actions, self.action_dim, data.n);
        let delta: Vec<f64> = data.next_states.iter().zip(&data.states).map(|(a, b)| a - b).collect();
        self.input_norm = Normalizer::fit(&x, self.state_dim + self.action_dim);
        self.delta_norm = Normalizer::fit(&delta, self.state_dim);
    }

    fn normalized_xy(&self, data: &TransitionSet, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut x = Vec::with_capacity(rows.len() * (sd + ad));
        let mut y = Vec::with_capacity(rows.len() * sd);
        for &r in rows {
            x.extend_from_slice(&data.states[r * sd..(r + 1) * sd]);
            x.extend_from_slice(&data.actions[r * ad..(r + 1) * ad]);
            for j in 0..sd {
                y.push(data.next_states[r * sd + j] - data.states[r * sd + j]);
            }
        }
        (self.input_norm.normalize(&x), self.delta_norm.normalize(&y))
    }

    /// Gaussian negative log-likelihood (per dimension, natural log) of the
    /// normalized targets, plus its gradient with respect to the raw output.
    fn nll_and_grad(output: &[f64], y: &[f64], d: usize, want_grad: bool) -> (f64, Vec<f64>) {
        let n = y.len() / d;
        let mut total = 0.0;
        let mut grad = if want_grad { vec![0.0; output.len()] } else { Vec::new() };
        let scale = 1.0 / (n * d) as f64;
        for r in 0..n {
            for j in 0..d {
                let mu = output[r * 2 * d + j];
                let lv = output[r * 2 * d + d + j];
                let e = mu - y[r * d + j];
                let inv = (-lv).exp();
                total += 0.5 * (e * e * inv + lv + LN_2PI);
                if want_grad {
                    grad[r * 2 * d + j] = e * inv * scale;
                    grad[r * 2 * d + d + j] = 0.5 * (1.0 - e * e * inv) * scale;
                }
            }
        }
        (total * scale, grad)
    }

    /// Mean member NLL on `data` under the current normalizers.
    pub fn nll(&self, data: &TransitionSet) -> f64 {
        let rows: Vec<usize> = (0..data.n).collect();
        self.nll_rows(data, &rows)
    }

    fn nll_rows(&self, data: &TransitionSet, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return f64::NAN;
        }
        let (x, y) = self.normalized_xy(data, rows);
        let mut sum = 0.0;
        for m in &self.members {
            let out = m.forward(&x, rows.len()).unwrap();
            sum += Self::nll_and_grad(&out, &y, self.state_dim, false).0;
        }
        sum / self.members.len() as f64
    }

    /// Fits every member on its own bootstrap resample of the most recent
    /// transitions and returns the mean held-out NLL.
    pub fn train(&mut self, data: &TransitionSet) -> Result<f64> {
        if data.n == 0 {
            return usage("cannot train dynamics on an empty buffer");
        }
        let start = data.n.saturating_sub(self.params.max_train_samples);
        let mut rows: Vec<usize> = (start..data.n).collect();
        // Fisher-Yates with the ensemble generator.
        for i in (1..rows.len()).rev() {
            let j = self.rng.random_range(0..=i);
            rows.swap(i, j);
        }
        let n_hold = ((rows.len() as f64) * self.params.holdout_fraction).floor() as usize;
        let n_hold = if rows.len() > 1 { n_hold.min(rows.len() - 1) } else { 0 };
        let (hold, train) = rows.split_at(n_hold);
        let train = train.to_vec();
        let hold = hold.to_vec();

        let mut fit = TransitionSet::default();
        for &r in &train {
            let (sd, ad) = (self.state_dim, self.action_dim);
            fit.push(
                &data.states[r * sd..(r + 1) * sd],
                &data.actions[r * ad..(r + 1) * ad],
                &data.next_states[r * sd..(r + 1) * sd],
            );
        }
        self.fit_normalizers(&fit);
        if self.optimizers.len() != self.members.len() {
            self.optimizers = self
                .members
                .iter()
                .map(|m| Adam::new(m.num_params(), self.params.lr))
                .collect();
        }

        let bs = self.params.batch_size.min(train.len()).max(1);
        let updates = self.params.epochs * self.params.batches_per_epoch;
        for b in 0..self.members.len() {
            let boot: Vec<usize> = (0..train.len())
                .map(|_| train[self.rng.random_range(0..train.len())])
                .collect();
            for _ in 0..updates {
                let batch: Vec<usize> = (0..bs).map(|_| boot[self.rng.random_range(0..boot.len())]).collect();
                let (x, y) = self.normalized_xy(data, &batch);
                let member = &self.members[b];
                let tape = member.forward_tape(&x, bs)?;
                let (_, g_out) = Self::nll_and_grad(&tape.output, &y, self.state_dim, true);
                let mut grad = vec![0.0; member.num_params()];
                member.backward(&tape, &g_out, Some(&mut grad), false);
                self.optimizers[b].step(self.members[b].params_mut(), &grad);
            }
        }
        self.trained = true;
        let eval_rows = if hold.is_empty() { &train } else { &hold };
        Ok(self.nll_rows(data, eval_rows))
    }

    /// Uniform member indices from the ensemble's generator.
    pub fn sample_members(&mut self, n: usize) -> Vec<usize> {
        let b = self.members.len();
        (0..n).map(|_| self.rng.random_range(0..b)).collect()
    }

    fn check_ready(&self) -> Result<()> {
        if !self.trained {
            return usage("dynamics ensemble used before training");
        }
        Ok(())
    }

    /// Next-state predictions with member `members[r]` for row `r`, keeping
    /// the forward passes for a later [`action_vjp`](Self::action_vjp).
    pub fn predict_tape(&self, states: &[f64], actions: &[f64], n: usize, members: &[usize]) -> Result<PredictionTape> {
        self.check_ready()?;
        let (sd, ad) = (self.state_dim, self.action_dim);
        let x = self
            .input_norm
            .normalize(&concat_rows(states, sd, actions, ad, n));
        let mut next = states.to_vec();
        let mut groups = Vec::new();
        for b in 0..self.members.len() {
            let rows: Vec<usize> = (0..n).filter(|&r| members[r] == b).collect();
            if rows.is_empty() {
                continue;
            }
            let mut xb = Vec::with_capacity(rows.len() * (sd + ad));
            for &r in &rows {
                xb.extend_from_slice(&x[r * (sd + ad)..(r + 1) * (sd + ad)]);
            }
            let tape = self.members[b].forward_tape(&xb, rows.len())?;
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..sd {
                    let mu = tape.output[k * 2 * sd + j];
                    next[r * sd + j] += mu * self.delta_norm.std[j] + self.delta_norm.mean[j];
                }
            }
            groups.push((b, rows, tape));
        }
        Ok(PredictionTape {
            n,
            groups,
            next_states: next,
        })
    }

    /// Vector-Jacobian product of the predicted next states with respect to
    /// the actions: returns `cotᵀ · ∂s′/∂a` per row.
    pub fn action_vjp(&self, tape: &PredictionTape, cot: &[f64]) -> Vec<f64> {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut out = vec![0.0; tape.n * ad];
        for (b, rows, t) in &tape.groups {
            let mut g = vec![0.0; rows.len() * 2 * sd];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..sd {
                    g[k * 2 * sd + j] = cot[r * sd + j] * self.delta_norm.std[j];
                }
            }
            let gx = self.members[*b].backward(t, &g, None, true).unwrap();
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..ad {
                    out[r * ad + j] = gx[k * (sd + ad) + sd + j] / self.input_norm.std[sd + j];
                }
            }
        }
        out
    }

    pub fn predict_batch(&mut self, states: &[f64], actions: &[f64], n: usize, mode: PredictMode) -> Result<Vec<f64>> {
        self.check_ready()?;
        match mode {
            PredictMode::SampleMember => {
                let members = self.sample_members(n);
                Ok(self.predict_tape(states, actions, n, &members)?.next_states)
            }
            PredictMode::MeanOfMeans => {
                let sd = self.state_dim;
                let b = self.members.len();
                let mut acc = vec![0.0; n * sd];
                for m in 0..b {
                    let p = self.predict_tape(states, actions, n, &vec![m; n])?;
                    for (a, v) in acc.iter_mut().zip(&p.next_states) {
                        *a += v / b as f64;
                    }
                }
                Ok(acc)
            }
        }
    }

    pub fn predict_next(&mut self, s: &[f64], a: &[f64], mode: PredictMode) -> Result<Vec<f64>> {
        self.predict_batch(s, a, 1, mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let mut e: DynamicsEnsemble = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        e.rng = ChaCha8Rng::seed_from_u64(seed);
        e.optimizers = e.members.iter().map(|m| Adam::new(m.num_params(), e.params.lr)).collect();
        Ok(e)
    }
}

impl TransitionModel for DynamicsEnsemble {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn predict(&mut self, states: &[f64], actions: &[f64], n: usize) -> Vec<f64> {
        self.predict_batch(states, actions, n, PredictMode::SampleMember)
            .expect("trained ensemble")
    }
}

/// Recorded states used to blend rollouts toward logged behaviour:
/// `ŝ_{i+1} = (1 − ρ^i)·Γ(ŝ_i, â_i) + ρ^i·s_{i+1}`.
pub struct Blend<'a> {
    pub rho: f64,
    /// `recorded[i]` holds `s_{t+i}` for every row, `i = 0..=horizon`.
    pub recorded: &'a [Vec<f64>],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `horizon + 1` blocks of `n × state_dim`.
    pub states: Vec<Vec<f64>>,
    /// `horizon` blocks of `n × goal_dim`.
    pub subgoals: Vec<Vec<f64>>,
    /// `horizon` blocks of `n × action_dim`.
    pub actions: Vec<Vec<f64>>,
}

/// Rolls `policy` forward from `s0` with subgoals propagated by the fixed
/// subgoal transition. With a blend, steps whose weight `ρ^i` equals one use
/// the recorded state and never query the model.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &mut dyn TransitionModel,
    policy: &dyn Policy,
    hier: &HierarchyParams,
    s0: &[f64],
    sg0: &[f64],
    n: usize,
    horizon: usize,
    blend: Option<&Blend<'_>>,
) -> Result<Rollout> {
    if horizon == 0 {
        return usage("rollout horizon must be at least 1");
    }
    let sd = model.state_dim();
    let gd = hier.goal_dim();
    let mut states = vec![s0.to_vec()];
    let mut subgoals = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut sg = sg0.to_vec();
    for i in 0..horizon {
        let s = states.last().unwrap().clone();
        let obs = concat_rows(&s, sd, &sg, gd, n);
        let a = policy.act_batch(&obs, n);
        let weight = blend.map(|b| b.rho.powi(i as i32)).unwrap_or(0.0);
        let next = if weight == 1.0 {
            blend.unwrap().recorded[i + 1].clone()
        } else {
            let pred = model.predict(&s, &a, n);
            match blend {
                Some(b) if weight > 0.0 => pred
                    .iter()
                    .zip(&b.recorded[i + 1])
                    .map(|(p, r)| (1.0 - weight) * p + weight * r)
                    .collect(),
                _ => pred,
            }
        };
        let mut sg_next = Vec::with_capacity(n * gd);
        for r in 0..n {
            sg_next.extend_from_slice(&hier.subgoal_transition(
                &sg[r * gd..(r + 1) * gd],
                &s[r * sd..(r + 1) * sd],
                &next[r * sd..(r + 1) * sd],
            ));
        }
        subgoals.push(sg);
        actions.push(a);
        states.push(next);
        sg = sg_next;
    }
    Ok(Rollout {
        states,
        subgoals,
        actions,
    })
}
