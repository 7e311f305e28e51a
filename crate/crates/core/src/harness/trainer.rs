//! The two-level training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{LandmarkLoss, LevelParams, RunConfig};
use super::log::{DynamicsRow, GuidanceRow, ProgressRow, RunLog, Timings};
use super::{evaluate, EvalResult};
use crate::adjacency::{AdjacencyMemory, AdjacencyNet};
use crate::correction::Corrector;
use crate::dynamics::{DynamicsEnsemble, TransitionSet};
use crate::env::PointMazeEnv;
use crate::error::{config, Result};
use crate::gcmr::{action_grad_norms, bound_conservative, lr_hat, GradientPenalty, OsrpTerm};
use crate::hierarchy::{
    ActionVec, GoalVec, HierarchyParams, HighTransition, LowTransition, ReplayBuffer, StateVec,
};
use crate::landmark::{aclg_loss, fps, higl_loss, pseudo_shift, LandmarkGraph, Plan, Rnd};
use crate::td3::{concat_rows, ActorAux, Batch, Td3Agent, Td3Params};

const SD: usize = PointMazeEnv::STATE_DIM;
const AD: usize = PointMazeEnv::ACTION_DIM;
const GD: usize = PointMazeEnv::GOAL_DIM;

/// Independent generator streams derived from the run seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn agent_params(level: &LevelParams, obs_dim: usize, low: Vec<f64>, high: Vec<f64>) -> Td3Params {
    let mut p = Td3Params::new(obs_dim, low, high);
    p.hidden = level.hidden.clone();
    p.actor_lr = level.actor_lr;
    p.critic_lr = level.critic_lr;
    p.gamma = level.gamma;
    p.tau = level.tau;
    p.target_noise = level.target_noise;
    p.noise_clip = level.noise_clip;
    p.expl_noise = level.expl_noise;
    p
}

struct Interval {
    states: Vec<StateVec>,
    subgoals: Vec<GoalVec>,
    actions: Vec<ActionVec>,
    rewards: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Counters {
    pub steps: usize,
    pub episodes: usize,
    pub low_updates: usize,
    pub high_updates: usize,
    pub dynamics_trainings: usize,
    pub adjacency_trainings: usize,
    pub gp_applications: usize,
    pub osrp_applications: usize,
    pub relabeled_batches: usize,
    pub graph_builds: usize,
    pub planned_rows: usize,
    /// Planned rows whose goal had no path and fell back to the goal itself.
    pub unreachable_plans: usize,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a RunConfig,
    counters: &'a Counters,
    final_success_rate: Option<f64>,
    best_success_rate: Option<f64>,
    timings: &'a [Timings],
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub hier: HierarchyParams,
    env: PointMazeEnv,
    eval_env: PointMazeEnv,
    pub low: Td3Agent,
    pub high: Td3Agent,
    pub low_buf: ReplayBuffer<LowTransition>,
    pub high_buf: ReplayBuffer<HighTransition>,
    pub dynamics: DynamicsEnsemble,
    corrector: Corrector,
    adj_memory: AdjacencyMemory,
    pub adjacency: AdjacencyNet,
    rnd: Rnd,
    pub graph: Option<LandmarkGraph>,
    gp_rng: ChaCha8Rng,
    osrp_rng: ChaCha8Rng,
    landmark_rng: ChaCha8Rng,
    goal_low: Vec<f64>,
    goal_high: Vec<f64>,
    sub_low: Vec<f64>,
    sub_high: Vec<f64>,
    sigma_sg: Vec<f64>,
    pub delta_sg: f64,
    s: StateVec,
    g: GoalVec,
    sg: GoalVec,
    ep_step: usize,
    ep_points: Vec<Vec<f64>>,
    interval: Option<Interval>,
    in_episode: bool,
    pub counters: Counters,
    pub log: RunLog,
    timings: Timings,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: RunConfig, out: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if cfg.model_consumers() && !cfg.use_dynamics {
            return config("model-based terms are enabled but use_dynamics is off");
        }
        let layout = cfg.layout()?;
        let seed = cfg.seed;
        let (gl, gh) = layout.goal_bounds();
        let goal_low = gl.to_vec();
        let goal_high = gh.to_vec();
        let (sub_low, sub_high) = match cfg.hierarchy.scheme {
            crate::hierarchy::SubgoalScheme::Relative => (vec![-cfg.subgoal_range; GD], vec![cfg.subgoal_range; GD]),
            crate::hierarchy::SubgoalScheme::Absolute => (goal_low.clone(), goal_high.clone()),
        };
        let sigma_sg = sub_low
            .iter()
            .zip(&sub_high)
            .map(|(l, h)| 0.5 * (h - l) / 12f64.sqrt())
            .collect();
        let low = Td3Agent::new(agent_params(&cfg.low, SD + GD, vec![-cfg.env_params.a_max; AD], vec![cfg.env_params.a_max; AD]), sub_seed(seed, 1));
        let high = Td3Agent::new(agent_params(&cfg.high, SD + GD, sub_low.clone(), sub_high.clone()), sub_seed(seed, 2));
        let goal_scale = goal_low
            .iter()
            .zip(&goal_high)
            .map(|(l, h)| (h - l).abs())
            .fold(1.0, f64::max);
        let env = PointMazeEnv::new(layout.clone(), cfg.env_params.clone(), sub_seed(seed, 3))?;
        let eval_env = PointMazeEnv::new(layout, cfg.env_params.clone(), sub_seed(seed, 4))?;
        let log = RunLog::new(out)?;
        Ok(Self {
            hier: cfg.hierarchy.clone(),
            env,
            eval_env,
            low,
            high,
            low_buf: ReplayBuffer::new(cfg.buffer_capacity, sub_seed(seed, 5)),
            high_buf: ReplayBuffer::new(cfg.buffer_capacity, sub_seed(seed, 6)),
            dynamics: DynamicsEnsemble::new(SD, AD, cfg.dynamics.clone(), sub_seed(seed, 7))?,
            corrector: Corrector::new(cfg.correction.clone(), sub_seed(seed, 8))?,
            adj_memory: AdjacencyMemory::new(cfg.adjacency.cell_size, cfg.hierarchy.c, cfg.adjacency.capacity),
            adjacency: AdjacencyNet::new(GD, cfg.hierarchy.c, cfg.adjacency.clone(), sub_seed(seed, 9))?,
            rnd: Rnd::new(
                GD,
                &cfg.landmark.rnd_hidden,
                cfg.landmark.rnd_out,
                cfg.landmark.rnd_lr,
                goal_scale,
                sub_seed(seed, 10),
            ),
            graph: None,
            gp_rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, 11)),
            osrp_rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, 12)),
            landmark_rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, 13)),
            goal_low,
            goal_high,
            sub_low,
            sub_high,
            sigma_sg,
            delta_sg: cfg.correction.delta_sg,
            s: StateVec(vec![0.0; SD]),
            g: GoalVec(vec![0.0; GD]),
            sg: GoalVec(vec![0.0; GD]),
            ep_step: 0,
            ep_points: Vec::new(),
            interval: None,
            in_episode: false,
            counters: Counters::default(),
            log,
            timings: Timings::default(),
            started: Instant::now(),
            cfg,
        })
    }

    pub fn step_count(&self) -> usize {
        self.counters.steps
    }

    fn start_episode(&mut self) {
        let (s, g) = self.env.reset(false);
        self.ep_points = vec![self.hier.project(&s).0];
        self.s = s;
        self.g = g;
        self.ep_step = 0;
        self.interval = None;
        self.in_episode = true;
    }

    fn close_interval(&mut self, success: bool) {
        if let Some(iv) = self.interval.take() {
            if iv.actions.is_empty() {
                return;
            }
            self.high_buf.push(HighTransition {
                r: self.hier.high_reward(&iv.rewards),
                states: iv.states,
                goal: self.g.clone(),
                subgoals: iv.subgoals,
                actions: iv.actions,
                done: success,
            });
        }
    }

    /// One environment step followed by every update scheduled for it.
    pub fn step(&mut self) -> Result<()> {
        if !self.in_episode {
            self.start_episode();
        }
        let t0 = Instant::now();
        if self.ep_step % self.hier.c == 0 {
            self.close_interval(false);
            let obs = concat_rows(&self.s, SD, &self.g, GD, 1);
            self.sg = GoalVec(self.high.act(&obs, true));
            self.interval = Some(Interval {
                states: vec![self.s.clone()],
                subgoals: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
            });
        }
        let obs = concat_rows(&self.s, SD, &self.sg, GD, 1);
        let a = self.low.act(&obs, true);
        let res = self.env.step(&a)?;
        let sg_next = self.hier.subgoal_transition(&self.sg, &self.s, &res.state);
        let r_lo = self.hier.intrinsic_reward(&sg_next, &res.state);
        self.low_buf.push(LowTransition {
            s: self.s.clone(),
            sg: self.sg.clone(),
            a: ActionVec(a.clone()),
            r: r_lo,
            s_next: res.state.clone(),
            sg_next: sg_next.clone(),
            done: res.success,
        });
        let iv = self.interval.as_mut().expect("open interval");
        iv.states.push(res.state.clone());
        iv.subgoals.push(self.sg.clone());
        iv.actions.push(ActionVec(a));
        iv.rewards.push(res.reward);
        self.ep_points.push(self.hier.project(&res.state).0);
        self.s = res.state;
        self.sg = sg_next;
        self.ep_step += 1;
        self.counters.steps += 1;
        if res.done {
            self.close_interval(res.success);
            let points = std::mem::take(&mut self.ep_points);
            if self.cfg.landmark_loss != LandmarkLoss::None {
                self.adj_memory.record(&points);
            }
            self.in_episode = false;
            self.counters.episodes += 1;
        }
        self.timings.env_seconds += t0.elapsed().as_secs_f64();
        self.train(self.counters.steps)?;
        let t = self.counters.steps;
        if t % self.cfg.eval_every == 0 {
            self.evaluate_and_log(t)?;
        }
        Ok(())
    }

    pub fn run_until(&mut self, steps: usize) -> Result<()> {
        while self.counters.steps < steps {
            self.step()?;
        }
        Ok(())
    }

    fn model_phase(&self, t: usize) -> bool {
        t >= self.cfg.t_dm
    }

    fn train(&mut self, t: usize) -> Result<()> {
        // An ensemble nothing reads is not trained, so switching every model term
        // off reproduces the model-free run exactly.
        let cfg = self.cfg.clone();
        if cfg.use_dynamics && cfg.model_consumers() && t >= cfg.t_dm && t % cfg.dynamics_every == 0 {
            self.train_dynamics(t)?;
        }
        if cfg.landmark_loss != LandmarkLoss::None
            && t >= cfg.adjacency_first
            && (t - cfg.adjacency_first) % cfg.adjacency_every == 0
            && self.adj_memory.num_positive() > 0
        {
            let t0 = Instant::now();
            let loss = self.adjacency.train(&self.adj_memory)?;
            self.counters.adjacency_trainings += 1;
            debug!("step {t}: adjacency loss {loss:.4} over {} cells", self.adj_memory.num_cells());
            self.timings.adjacency_seconds += t0.elapsed().as_secs_f64();
        }
        if self.low_buf.len() >= self.cfg.low.batch_size {
            self.update_low(t)?;
        }
        if t % self.hier.c == 0 && self.high_buf.len() >= self.cfg.high.batch_size {
            self.update_high(t)?;
        }
        Ok(())
    }

    fn train_dynamics(&mut self, t: usize) -> Result<()> {
        let t0 = Instant::now();
        let mut data = TransitionSet::default();
        let start = self.low_buf.len().saturating_sub(self.cfg.dynamics.max_train_samples);
        for tr in self.low_buf.iter().skip(start) {
            data.push(&tr.s, &tr.a, &tr.s_next);
        }
        let nll = self.dynamics.train(&data)?;
        self.counters.dynamics_trainings += 1;
        self.log.dynamics(DynamicsRow { step: t, heldout_nll: nll })?;
        self.timings.dynamics_seconds += t0.elapsed().as_secs_f64();
        Ok(())
    }

    fn low_batch(&mut self, n: usize) -> Result<Batch> {
        let idx = self.low_buf.sample_indices(n)?;
        Ok(self.low_batch_from(&idx))
    }

    fn low_batch_from(&self, idx: &[usize]) -> Batch {
        let mut b = Batch::with_capacity(idx.len(), SD + GD, AD);
        for &i in idx {
            let tr = self.low_buf.get(i);
            let obs = [tr.s.as_slice(), tr.sg.as_slice()].concat();
            let next = [tr.s_next.as_slice(), tr.sg_next.as_slice()].concat();
            b.push(&obs, &tr.a, tr.r, &next, tr.done);
        }
        b
    }

    fn update_low(&mut self, t: usize) -> Result<()> {
        let t0 = Instant::now();
        let n = self.cfg.low.batch_size;
        let ready = self.model_phase(t) && self.dynamics.is_trained();
        let g = self.cfg.gcmr.clone();
        let gp_step = g.lambda_gp > 0.0 && ready && t % g.gp_every == 0;
        let osrp_step = g.lambda_osrp > 0.0 && ready && t % (g.op_every * self.hier.c) == 0 && !self.high_buf.is_empty();
        let mut batch;
        if gp_step {
            let tg = Instant::now();
            let len = self.low_buf.len();
            let idx: Vec<usize> = (0..n).map(|_| self.gp_rng.random_range(0..len)).collect();
            let gp_batch = self.low_batch_from(&idx);
            let b = self.dynamics.members().len();
            let members: Vec<usize> = (0..n).map(|_| self.gp_rng.random_range(0..b)).collect();
            let l_r = lr_hat(&gp_batch.obs, n, &self.dynamics, &self.low.actor, &self.hier, &members)?;
            let threshold = bound_conservative(AD, l_r, self.cfg.low.gamma)?;
            let actions = self.low.actor.forward(&gp_batch.obs, n)?;
            let mut penalty = GradientPenalty::new(g.lambda_gp, threshold, &gp_batch.obs, &actions, n, SD + GD, AD);
            batch = self.low_batch(n)?;
            for it in 0..g.gp_critic_iters {
                if it > 0 {
                    batch = self.low_batch(n)?;
                }
                self.low.critic_update(&batch, Some(&mut penalty))?;
            }
            self.counters.gp_applications += 1;
            let st = penalty.stats;
            self.log.guidance(GuidanceRow {
                step: t,
                kind: "gp",
                l_r_hat: Some(l_r),
                bound: Some(threshold),
                mean_grad_norm: Some(st.mean_norm),
                max_grad_norm: Some(st.max_norm),
                gp_loss: Some(st.loss),
                osrp_loss: None,
            })?;
            self.timings.gp_seconds += tg.elapsed().as_secs_f64();
        } else {
            batch = self.low_batch(n)?;
            self.low.critic_update(&batch, None)?;
        }
        if osrp_step {
            let to = Instant::now();
            let pairs = g.osrp_pairs;
            let mut states = Vec::with_capacity(pairs * SD);
            let mut goals = Vec::with_capacity(pairs * GD);
            let len = self.high_buf.len();
            for _ in 0..pairs {
                let ht = self.high_buf.get(self.osrp_rng.random_range(0..len));
                states.extend_from_slice(ht.first_state());
                goals.extend_from_slice(&ht.goal);
            }
            let (ps, pg, m) =
                crate::gcmr::osrp_pool(&states, &goals, pairs, SD, GD, g.osrp_replicas, &mut self.osrp_rng);
            let mut term = OsrpTerm::sample(
                g.lambda_osrp,
                ps,
                pg,
                m,
                &self.sigma_sg,
                &self.dynamics,
                &self.high,
                &self.hier,
                &mut self.osrp_rng,
            );
            self.low.actor_update(&batch.obs, n, Some(&mut term))?;
            self.counters.osrp_applications += 1;
            let loss = term.last_loss;
            self.log.guidance(GuidanceRow {
                step: t,
                kind: "osrp",
                l_r_hat: None,
                bound: None,
                mean_grad_norm: None,
                max_grad_norm: None,
                gp_loss: None,
                osrp_loss: Some(loss),
            })?;
            self.timings.osrp_seconds += to.elapsed().as_secs_f64();
        } else {
            self.low.actor_update(&batch.obs, n, None)?;
        }
        self.counters.low_updates += 1;
        self.timings.low_seconds += t0.elapsed().as_secs_f64();
        Ok(())
    }

    /// Low-level values of reaching absolute goal points `targets` from
    /// `states`, one per row.
    pub fn low_values(&self, states: &[f64], targets: &[f64], n: usize) -> Vec<f64> {
        let mut obs = Vec::with_capacity(n * (SD + GD));
        for r in 0..n {
            let s = &states[r * SD..(r + 1) * SD];
            obs.extend_from_slice(s);
            obs.extend_from_slice(&self.hier.subgoal_for_target(&targets[r * GD..(r + 1) * GD], s));
        }
        let a = self.low.actor.forward(&obs, n).expect("low obs width");
        self.low.q_value(&obs, &a, n)
    }

    fn rebuild_graph(&mut self) -> Result<()> {
        let p = &self.cfg.landmark;
        let len = self.low_buf.len();
        let m = p.sample_size.min(len);
        let idx: Vec<usize> = (0..m).map(|_| self.landmark_rng.random_range(0..len)).collect();
        let states: Vec<Vec<f64>> = idx.iter().map(|&i| self.low_buf.get(i).s_next.0.clone()).collect();
        let points: Vec<Vec<f64>> = states.iter().map(|s| self.hier.project(s).0).collect();
        let n_cov = p.n_cov.min(m);
        let mut chosen = fps(&points, n_cov, 0)?;
        let flat: Vec<f64> = points.concat();
        let mut taken = vec![false; m];
        chosen.iter().for_each(|&i| taken[i] = true);
        for i in self.rnd.novelty_select(&flat, m, m) {
            if chosen.len() >= n_cov + p.n_nov.min(m - n_cov) {
                break;
            }
            if !taken[i] {
                taken[i] = true;
                chosen.push(i);
            }
        }
        let l = chosen.len();
        let lm_states: Vec<Vec<f64>> = chosen.iter().map(|&i| states[i].clone()).collect();
        let lm_points: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
        let mut from = Vec::with_capacity(l * l * SD);
        let mut to = Vec::with_capacity(l * l * GD);
        for i in 0..l {
            for j in 0..l {
                from.extend_from_slice(&lm_states[i]);
                to.extend_from_slice(&lm_points[j]);
            }
        }
        let values = self.low_values(&from, &to, l * l);
        self.graph = Some(LandmarkGraph::new(lm_states, lm_points, values, p.cut));
        self.counters.graph_builds += 1;
        Ok(())
    }

    /// Plans from each `(state, goal)` row through the current graph.
    pub fn plan_rows(&self, states: &[f64], goals: &[f64], n: usize) -> Vec<Plan> {
        let graph = self.graph.as_ref().expect("graph built");
        let l = graph.len();
        let mut from = Vec::with_capacity(n * l * SD);
        let mut to = Vec::with_capacity(n * l * GD);
        let mut lm_from = Vec::with_capacity(n * l * SD);
        let mut goal_to = Vec::with_capacity(n * l * GD);
        for r in 0..n {
            let s = &states[r * SD..(r + 1) * SD];
            let g = &goals[r * GD..(r + 1) * GD];
            for j in 0..l {
                from.extend_from_slice(s);
                to.extend_from_slice(&graph.points[j]);
                lm_from.extend_from_slice(&graph.states[j]);
                goal_to.extend_from_slice(g);
            }
        }
        let v_start = self.low_values(&from, &to, n * l);
        let v_goal = self.low_values(&lm_from, &goal_to, n * l);
        let v_direct = self.low_values(states, goals, n);
        (0..n)
            .map(|r| {
                graph.plan(
                    &goals[r * GD..(r + 1) * GD],
                    &v_start[r * l..(r + 1) * l],
                    &v_goal[r * l..(r + 1) * l],
                    v_direct[r],
                    (&self.goal_low, &self.goal_high),
                )
            })
            .collect()
    }

    fn update_high(&mut self, t: usize) -> Result<()> {
        let t0 = Instant::now();
        let n = self.cfg.high.batch_size;
        let idx = self.high_buf.sample_indices(n)?;
        let mut subgoals: Vec<Vec<f64>> = idx.iter().map(|&i| self.high_buf.get(i).subgoal().0.clone()).collect();
        let can_relabel = self.model_phase(t) && (self.cfg.correction.rho >= 1.0 || self.dynamics.is_trained());
        if can_relabel {
            let tr = Instant::now();
            let refs: Vec<&HighTransition> = idx.iter().map(|&i| self.high_buf.get(i)).collect();
            subgoals = self.corrector.relabel_batch(
                &refs,
                &mut self.dynamics,
                &self.low.actor,
                &self.hier,
                &self.sub_low,
                &self.sub_high,
                self.delta_sg,
            )?;
            self.delta_sg += self.cfg.delta_sg_rate * (self.cfg.correction.delta_sg - self.delta_sg);
            self.counters.relabeled_batches += 1;
            self.timings.relabel_seconds += tr.elapsed().as_secs_f64();
        }
        let mut batch = Batch::with_capacity(n, SD + GD, GD);
        let mut firsts = Vec::with_capacity(n * SD);
        let mut goals = Vec::with_capacity(n * GD);
        for (k, &i) in idx.iter().enumerate() {
            let ht = self.high_buf.get(i);
            let obs = [ht.first_state().as_slice(), ht.goal.as_slice()].concat();
            let next = [ht.last_state().as_slice(), ht.goal.as_slice()].concat();
            batch.push(&obs, &subgoals[k], ht.r, &next, ht.done);
            firsts.extend_from_slice(ht.first_state());
            goals.extend_from_slice(&ht.goal);
        }
        self.high.critic_update(&batch, None)?;

        let guided = self.cfg.landmark_loss != LandmarkLoss::None && self.adjacency.is_trained();
        if guided {
            let tl = Instant::now();
            if self.graph.is_none() || self.counters.high_updates % self.cfg.landmark_every == 0 {
                self.rebuild_graph()?;
            }
            let k = self.cfg.plan_batch.min(n);
            let plans = self.plan_rows(&firsts[..k * SD], &goals[..k * GD], k);
            let lp = &self.cfg.landmark;
            let mut pseudo: Vec<Option<Vec<f64>>> = vec![None; n];
            self.counters.planned_rows += plans.len();
            self.counters.unreachable_plans += plans.iter().filter(|p| !p.reachable).count();
            for (r, plan) in plans.iter().enumerate() {
                let here = self.hier.project(&firsts[r * SD..(r + 1) * SD]);
                pseudo[r] = Some(pseudo_shift(&plan.subgoal, &here, lp.delta_pseudo, lp.pseudo_sign));
            }
            self.timings.landmark_seconds += tl.elapsed().as_secs_f64();
            let mut aux = LandmarkAux {
                kind: self.cfg.landmark_loss,
                adjacency: &self.adjacency,
                hier: &self.hier,
                states: &firsts,
                pseudo,
                lambda_adj: lp.lambda_adj,
                lambda_landmark: lp.lambda_landmark,
            };
            self.high.actor_update(&batch.obs, n, Some(&mut aux))?;
            let visited: Vec<f64> = (0..n).flat_map(|r| self.hier.project(&firsts[r * SD..(r + 1) * SD]).0).collect();
            self.rnd.train(&visited, n);
        } else {
            self.high.actor_update(&batch.obs, n, None)?;
        }
        self.counters.high_updates += 1;
        self.timings.high_seconds += t0.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn evaluate(&mut self) -> EvalResult {
        evaluate(
            &mut self.eval_env,
            &self.high.actor,
            &self.low.actor,
            &self.hier,
            self.cfg.eval_episodes,
            sub_seed(self.cfg.seed, 14),
        )
    }

    fn evaluate_and_log(&mut self, t: usize) -> Result<()> {
        let t0 = Instant::now();
        let r = self.evaluate();
        self.timings.eval_seconds += t0.elapsed().as_secs_f64();
        info!(
            "step {t}: success {:.2} return {:.2} final distance {:.2}",
            r.success_rate, r.mean_return, r.mean_final_distance
        );
        self.log.progress(ProgressRow {
            step: t,
            success_rate: r.success_rate,
            mean_return: r.mean_return,
            final_distance: r.mean_final_distance,
            episodes: self.counters.episodes,
            high_updates: self.counters.high_updates,
        })?;
        self.log.flush()?;
        let mut snap = self.timings.clone();
        snap.step = t;
        snap.wall_seconds = self.started.elapsed().as_secs_f64();
        self.log.timings.push(snap);
        if self.cfg.dump_graph {
            self.dump_graph(t)?;
        }
        self.write_sidecar()?;
        Ok(())
    }

    fn dump_graph(&self, t: usize) -> Result<()> {
        let (Some(dir), Some(graph)) = (self.log.dir(), self.graph.as_ref()) else {
            return Ok(());
        };
        let gdir: PathBuf = dir.join("graphs");
        std::fs::create_dir_all(&gdir)?;
        let layout = self.cfg.layout()?;
        let s = [layout.eval_start[0], layout.eval_start[1], 0.0, 0.0];
        let plan = self.plan_rows(&s, &layout.eval_goal, 1).pop();
        graph.dump(&gdir.join(format!("step_{t}.json")), plan.as_ref())
    }

    fn write_sidecar(&self) -> Result<()> {
        let succ: Vec<f64> = self.log.progress.iter().map(|r| r.success_rate).collect();
        self.log.write_sidecar(&Sidecar {
            config: &self.cfg,
            counters: &self.counters,
            final_success_rate: succ.last().copied(),
            best_success_rate: succ.iter().copied().reduce(f64::max),
            timings: &self.log.timings,
        })
    }

    /// Writes checkpoints and the final sidecar.
    pub fn finish(&mut self) -> Result<()> {
        self.log.flush()?;
        self.write_sidecar()?;
        if let Some(dir) = self.log.dir() {
            let ck = dir.join("checkpoints");
            std::fs::create_dir_all(&ck)?;
            self.low.save(&ck.join("low.json"))?;
            self.high.save(&ck.join("high.json"))?;
            if self.dynamics.is_trained() {
                self.dynamics.save(&ck.join("dynamics.json"))?;
            }
            if self.adjacency.is_trained() {
                self.adjacency.psi().save(&ck.join("adjacency.json"))?;
            }
        }
        Ok(())
    }

    /// Fraction of `n_pairs` buffer `(s, sg)` pairs whose critic action
    /// gradient exceeds `factor` times the penalty threshold. The threshold
    /// uses an estimate from a separate training-sized batch. Draws only
    /// from `rng`, so training is unaffected.
    pub fn penalty_violation(&self, n_pairs: usize, factor: f64, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        if !self.dynamics.is_trained() {
            return config("dynamics not trained yet");
        }
        let len = self.low_buf.len();
        let b = self.dynamics.members().len();
        let n = self.cfg.low.batch_size;
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..len)).collect();
        let est = self.low_batch_from(&idx);
        let members: Vec<usize> = (0..n).map(|_| rng.random_range(0..b)).collect();
        let l_r = lr_hat(&est.obs, n, &self.dynamics, &self.low.actor, &self.hier, &members)?;
        let threshold = bound_conservative(AD, l_r, self.cfg.low.gamma)?;
        let idx: Vec<usize> = (0..n_pairs).map(|_| rng.random_range(0..len)).collect();
        let held = self.low_batch_from(&idx);
        let actions = self.low.actor.forward(&held.obs, n_pairs)?;
        let norms = action_grad_norms(&self.low.critics[0], &held.obs, &actions, n_pairs, SD + GD, AD)?;
        let over = norms.iter().filter(|&&v| v > factor * threshold).count();
        Ok((over as f64 / n_pairs as f64, threshold))
    }
}

/// Landmark-guided term on the high actor's subgoals.
struct LandmarkAux<'a> {
    kind: LandmarkLoss,
    adjacency: &'a AdjacencyNet,
    hier: &'a HierarchyParams,
    states: &'a [f64],
    pseudo: Vec<Option<Vec<f64>>>,
    lambda_adj: f64,
    lambda_landmark: f64,
}

impl ActorAux for LandmarkAux<'_> {
    fn apply(&mut self, _actor: &crate::approx::DenseNet, _obs: &[f64], actions: &[f64], action_grad: &mut [f64], _param_grad: &mut [f64]) -> f64 {
        let n = self.pseudo.len();
        let mut absolute = Vec::with_capacity(n * GD);
        let mut here = Vec::with_capacity(n * GD);
        for r in 0..n {
            let s = &self.states[r * SD..(r + 1) * SD];
            absolute.extend(self.hier.absolute_target(&actions[r * GD..(r + 1) * GD], s));
            here.extend_from_slice(&self.hier.project(s));
        }
        // Absolute and relative subgoals differ by a constant per row, so the
        // gradient carries over unchanged.
        match self.kind {
            LandmarkLoss::None => 0.0,
            LandmarkLoss::Aclg => aclg_loss(
                self.adjacency,
                &absolute,
                &here,
                &self.pseudo,
                self.lambda_adj,
                self.lambda_landmark,
                action_grad,
            ),
            LandmarkLoss::Higl => higl_loss(self.adjacency, &absolute, &self.pseudo, self.lambda_landmark, action_grad),
        }
    }
}
