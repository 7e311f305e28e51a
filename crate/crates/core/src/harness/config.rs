//! Run configuration: defaults, algorithm presets, the desk profile and
//! JSON overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adjacency::AdjacencyParams;
use crate::correction::CorrectionParams;
use crate::dynamics::DynamicsParams;
use crate::env::{EnvParams, MazeLayout};
use crate::error::{config, Error, Result};
use crate::gcmr::GcmrParams;
use crate::hierarchy::HierarchyParams;
use crate::landmark::LandmarkParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "aclg")]
    Aclg,
    #[serde(rename = "aclg+gcmr")]
    AclgGcmr,
    #[serde(rename = "gcmr-only")]
    GcmrOnly,
    #[serde(rename = "higl-baseline")]
    HiglBaseline,
    #[serde(rename = "hiro-correction-baseline")]
    HiroCorrectionBaseline,
}

impl Algo {
    pub const ALL: [Algo; 5] = [
        Algo::Aclg,
        Algo::AclgGcmr,
        Algo::GcmrOnly,
        Algo::HiglBaseline,
        Algo::HiroCorrectionBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Aclg => "aclg",
            Algo::AclgGcmr => "aclg+gcmr",
            Algo::GcmrOnly => "gcmr-only",
            Algo::HiglBaseline => "higl-baseline",
            Algo::HiroCorrectionBaseline => "hiro-correction-baseline",
        }
    }
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown algo '{s}'")))
    }
}

/// Which guidance term shapes the high-level actor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkLoss {
    None,
    Aclg,
    Higl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Network sizes and counts as published.
    Paper,
    /// Narrower networks and fewer landmarks so a 200k-step run fits on one
    /// laptop core.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Usage(format!("unknown profile '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelParams {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub target_noise: f64,
    pub noise_clip: f64,
    pub expl_noise: f64,
    pub batch_size: usize,
}

impl LevelParams {
    fn paper(gamma: f64) -> Self {
        Self {
            hidden: vec![300, 300],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            gamma,
            tau: 0.005,
            target_noise: 0.2,
            noise_clip: 0.5,
            expl_noise: 1.0,
            batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    /// Optional JSON layout file; overrides `env` geometry when set.
    pub layout_file: Option<PathBuf>,
    pub algo: Algo,
    pub profile: Profile,
    pub seed: u64,
    pub total_steps: usize,
    pub env_params: EnvParams,
    pub hierarchy: HierarchyParams,
    /// Relative subgoals are limited to `±subgoal_range` per axis.
    pub subgoal_range: f64,
    pub high: LevelParams,
    pub low: LevelParams,
    pub buffer_capacity: usize,
    /// Dynamics are fitted at all (independently of whether anything reads them).
    pub use_dynamics: bool,
    pub dynamics: DynamicsParams,
    pub dynamics_every: usize,
    pub t_dm: usize,
    pub correction: CorrectionParams,
    /// EMA rate moving the working shift magnitude toward `correction.delta_sg`.
    pub delta_sg_rate: f64,
    pub gcmr: GcmrParams,
    pub landmark_loss: LandmarkLoss,
    pub landmark: LandmarkParams,
    /// High-level updates between landmark graph rebuilds.
    pub landmark_every: usize,
    /// Rows of each high batch that receive a planned landmark.
    pub plan_batch: usize,
    pub adjacency: AdjacencyParams,
    pub adjacency_first: usize,
    pub adjacency_every: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub dump_graph: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Algo::AclgGcmr, Profile::Paper)
    }
}

impl RunConfig {
    /// Paper-scale defaults for `algo`, then `profile` adjustments.
    pub fn preset(algo: Algo, profile: Profile) -> Self {
        let mut c = Self {
            env: "point_maze_u".into(),
            layout_file: None,
            algo,
            profile,
            seed: 0,
            total_steps: 200_000,
            env_params: EnvParams::default(),
            hierarchy: HierarchyParams::default(),
            subgoal_range: 5.0,
            high: LevelParams::paper(0.99),
            low: LevelParams::paper(0.95),
            buffer_capacity: 1_000_000,
            use_dynamics: true,
            dynamics: DynamicsParams::default(),
            dynamics_every: 2000,
            t_dm: 20_000,
            correction: CorrectionParams::default(),
            delta_sg_rate: 0.01,
            gcmr: GcmrParams::default(),
            landmark_loss: LandmarkLoss::Aclg,
            landmark: LandmarkParams::default(),
            landmark_every: 1,
            plan_batch: 128,
            adjacency: AdjacencyParams::default(),
            adjacency_first: 20_000,
            adjacency_every: 50_000,
            eval_every: 5000,
            eval_episodes: 10,
            dump_graph: false,
        };
        match algo {
            Algo::Aclg => {
                c.use_dynamics = false;
                c.correction = CorrectionParams::hiro();
                c.gcmr = GcmrParams::off();
            }
            Algo::AclgGcmr => {}
            Algo::GcmrOnly => c.landmark_loss = LandmarkLoss::None,
            Algo::HiglBaseline => {
                c.use_dynamics = false;
                c.correction = CorrectionParams::hiro();
                c.gcmr = GcmrParams::off();
                c.landmark_loss = LandmarkLoss::Higl;
                c.landmark.n_cov = 20;
                c.landmark.n_nov = 20;
            }
            Algo::HiroCorrectionBaseline => c.correction = CorrectionParams::hiro(),
        }
        if profile == Profile::Desk {
            c.apply_desk();
        }
        c
    }

    fn apply_desk(&mut self) {
        for level in [&mut self.high, &mut self.low] {
            level.hidden = vec![64, 64];
        }
        self.low.expl_noise = 0.2;
        self.buffer_capacity = 200_000;
        self.dynamics.hidden = vec![64, 64];
        self.dynamics.max_train_samples = 20_000;
        self.landmark.rnd_hidden = vec![32];
        self.landmark_every = 10;
        self.plan_batch = 32;
        self.adjacency.hidden = vec![64, 64];
        self.adjacency.max_batches_per_epoch = 40;
        self.gcmr.osrp_pairs = 16;
    }

    pub fn layout(&self) -> Result<MazeLayout> {
        match &self.layout_file {
            Some(p) => MazeLayout::load(p),
            None => MazeLayout::by_name(&self.env),
        }
    }

    /// Merges a JSON object of overrides (nested objects merge field-wise).
    pub fn with_overrides(&self, overrides: &Value) -> Result<Self> {
        if !overrides.is_object() {
            return config("config overrides must be a JSON object");
        }
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overrides);
        serde_json::from_value(base).map_err(|e| Error::Config(format!("bad override: {e}")))
    }

    pub fn load_overrides(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.with_overrides(&v)
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.layout()?;
        layout.validate()?;
        self.hierarchy.validate(4)?;
        if self.hierarchy.goal_dim() != 2 {
            return config("the point maze goal space is two-dimensional");
        }
        if self.total_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return config("total_steps, eval_every and eval_episodes must be positive");
        }
        if self.dynamics_every == 0 || self.landmark_every == 0 || self.adjacency_every == 0 {
            return config("cadences must be positive");
        }
        if !(self.subgoal_range > 0.0) {
            return config("subgoal_range must be positive");
        }
        for (name, l) in [("high", &self.high), ("low", &self.low)] {
            if l.batch_size == 0 || !(0.0..1.0).contains(&l.gamma) || !(0.0..=1.0).contains(&l.tau) {
                return config(format!("{name}: batch size must be positive, gamma in [0,1), tau in [0,1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.delta_sg_rate) {
            return config("delta_sg_rate must lie in [0, 1]");
        }
        if self.landmark_loss != LandmarkLoss::None && self.landmark.n_cov + self.landmark.n_nov > self.landmark.sample_size {
            return config("landmark sample_size must cover n_cov + n_nov");
        }
        self.dynamics.validate()?;
        self.correction.validate()?;
        self.gcmr.validate()?;
        self.landmark.validate()?;
        self.adjacency.validate()?;
        if self.buffer_capacity < self.low.batch_size {
            return config("buffer capacity below the batch size");
        }
        Ok(())
    }

    /// Whether any component reads model predictions.
    pub fn model_consumers(&self) -> bool {
        self.gcmr.lambda_gp > 0.0 || self.gcmr.lambda_osrp > 0.0 || self.correction.rho < 1.0
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for algo in Algo::ALL {
            for profile in [Profile::Paper, Profile::Desk] {
                RunConfig::preset(algo, profile).validate().unwrap();
            }
        }
    }

    #[test]
    fn aclg_disables_model_terms() {
        let c = RunConfig::preset(Algo::Aclg, Profile::Paper);
        assert_eq!(c.gcmr.lambda_gp, 0.0);
        assert_eq!(c.gcmr.lambda_osrp, 0.0);
        assert_eq!(c.correction.rho, 1.0);
        assert!(!c.model_consumers());
        assert!(RunConfig::preset(Algo::AclgGcmr, Profile::Paper).model_consumers());
    }

    #[test]
    fn override_touches_a_single_field() {
        let base = RunConfig::preset(Algo::AclgGcmr, Profile::Desk);
        let o: Value = serde_json::json!({"gcmr": {"lambda_gp": 0.0}});
        let c = base.with_overrides(&o).unwrap();
        assert_eq!(c.gcmr.lambda_gp, 0.0);
        assert_eq!(c.gcmr.lambda_osrp, base.gcmr.lambda_osrp);
        assert_eq!(c.low, base.low);
    }

    #[test]
    fn unknown_override_field_is_a_config_error() {
        let base = RunConfig::default();
        let err = base.with_overrides(&serde_json::json!({"nonsense": 1})).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn algo_names_round_trip() {
        for a in Algo::ALL {
            assert_eq!(a.name().parse::<Algo>().unwrap(), a);
            assert_eq!(serde_json::to_value(a).unwrap(), Value::String(a.name().into()));
        }
        assert!("hiro".parse::<Algo>().is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = RunConfig::default();
        c.low.gamma = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.env = "nowhere".into();
        assert!(c.validate().is_err());
    }
}
