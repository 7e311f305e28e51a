//! Run outputs: evaluation rows, model-guidance rows, dynamics fits and the
//! JSON sidecar.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProgressRow {
    pub step: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub final_distance: f64,
    pub episodes: usize,
    pub high_updates: usize,
}

/// One gradient-penalty or planning application. Unused columns are blank.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GuidanceRow {
    pub step: usize,
    pub kind: &'static str,
    pub l_r_hat: Option<f64>,
    pub bound: Option<f64>,
    pub mean_grad_norm: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub gp_loss: Option<f64>,
    pub osrp_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DynamicsRow {
    pub step: usize,
    pub heldout_nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    pub step: usize,
    pub wall_seconds: f64,
    pub env_seconds: f64,
    pub low_seconds: f64,
    pub high_seconds: f64,
    pub relabel_seconds: f64,
    pub landmark_seconds: f64,
    pub dynamics_seconds: f64,
    pub gp_seconds: f64,
    pub osrp_seconds: f64,
    pub adjacency_seconds: f64,
    pub eval_seconds: f64,
}

/// Append-only writers plus in-memory copies of every row.
pub struct RunLog {
    dir: Option<PathBuf>,
    progress_w: Option<csv::Writer<File>>,
    guidance_w: Option<csv::Writer<File>>,
    dynamics_w: Option<csv::Writer<File>>,
    pub progress: Vec<ProgressRow>,
    pub guidance: Vec<GuidanceRow>,
    pub dynamics: Vec<DynamicsRow>,
    pub timings: Vec<Timings>,
}

pub const PROGRESS_FILE: &str = "progress.csv";
pub const GUIDANCE_FILE: &str = "gcmr.csv";
pub const DYNAMICS_FILE: &str = "dynamics.csv";
pub const SIDECAR_FILE: &str = "run.json";

pub const PROGRESS_COLUMNS: [&str; 6] = ["step", "success_rate", "mean_return", "final_distance", "episodes", "high_updates"];
pub const GUIDANCE_COLUMNS: [&str; 8] = [
    "step",
    "kind",
    "l_r_hat",
    "bound",
    "mean_grad_norm",
    "max_grad_norm",
    "gp_loss",
    "osrp_loss",
];
pub const DYNAMICS_COLUMNS: [&str; 2] = ["step", "heldout_nll"];

fn writer(dir: &Path, name: &str, columns: &[&str]) -> Result<csv::Writer<File>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join(name))?;
    w.write_record(columns)?;
    w.flush()?;
    Ok(w)
}

impl RunLog {
    pub fn new(dir: Option<&Path>) -> Result<Self> {
        let mut log = Self {
            dir: dir.map(Path::to_path_buf),
            progress_w: None,
            guidance_w: None,
            dynamics_w: None,
            progress: Vec::new(),
            guidance: Vec::new(),
            dynamics: Vec::new(),
            timings: Vec::new(),
        };
        if let Some(d) = dir {
            std::fs::create_dir_all(d)?;
            log.progress_w = Some(writer(d, PROGRESS_FILE, &PROGRESS_COLUMNS)?);
            log.guidance_w = Some(writer(d, GUIDANCE_FILE, &GUIDANCE_COLUMNS)?);
            log.dynamics_w = Some(writer(d, DYNAMICS_FILE, &DYNAMICS_COLUMNS)?);
        }
        Ok(log)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn progress(&mut self, row: ProgressRow) -> Result<()> {
        if let Some(w) = &mut self.progress_w {
            w.serialize(&row)?;
            w.flush()?;
        }
        self.progress.push(row);
        Ok(())
    }

    pub fn guidance(&mut self, row: GuidanceRow) -> Result<()> {
        if let Some(w) = &mut self.guidance_w {
            w.serialize(&row)?;
        }
        self.guidance.push(row);
        Ok(())
    }

    pub fn dynamics(&mut self, row: DynamicsRow) -> Result<()> {
        if let Some(w) = &mut self.dynamics_w {
            w.serialize(&row)?;
            w.flush()?;
        }
        self.dynamics.push(row);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        for w in [&mut self.progress_w, &mut self.guidance_w, &mut self.dynamics_w].into_iter().flatten() {
            w.flush()?;
        }
        Ok(())
    }

    pub fn write_sidecar<T: Serialize>(&self, doc: &T) -> Result<()> {
        if let Some(d) = &self.dir {
            std::fs::write(d.join(SIDECAR_FILE), serde_json::to_string_pretty(doc)?)?;
        }
        Ok(())
    }
}
