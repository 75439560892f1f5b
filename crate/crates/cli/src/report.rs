//! Summary of a completed run: stage timings, selected frames, motion model
//! kinds and zoom.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hyperlapse::frameselect::read_plan_csv;
use hyperlapse::stab2d::read_transforms_csv;
use hyperlapse::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::pipeline::{CropRow, FovRow, RunLog, Stage};

/// Rows of the per-stage timing breakdown, with the stages that cover them.
/// Rows without stages are inputs produced outside the planner.
pub const TIMING_ROWS: [(&str, &[&str]); 8] = [
    ("360° video stabilization", &["stabilize360"]),
    ("Optical flow estimation and TSP", &[]),
    ("Focus of expansion estimation", &["foe"]),
    ("FCN semantic segmentation", &[]),
    ("Spatial-temporal saliency detection", &["content"]),
    ("Camera view planning", &["viewplan"]),
    ("Saliency-aware frame selection", &["frameselect"]),
    ("Path refinement and rendering", &["render", "stab2d"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    /// `None` for inputs computed outside the planner.
    pub seconds: Option<f64>,
    pub seconds_per_frame: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Stats {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        Some(Self {
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub input_frames: usize,
    pub selected_frames: usize,
    pub target_speedup: f64,
    pub achieved_speedup: f64,
    pub jumps: Option<Stats>,
    pub timing: Vec<TimingRow>,
    pub total_seconds: f64,
    pub model_kinds: BTreeMap<String, usize>,
    /// Over all input frames.
    pub fov: Stats,
    /// Over the selected frames.
    pub selected_fov: Stats,
    pub crop: Option<Stats>,
    pub notices: Vec<String>,
}

/// Reads the run directory; every stage must have completed.
pub fn report(run: &Path) -> Result<Report> {
    let need = |name: &str| -> Result<std::path::PathBuf> {
        let p = run.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::IncompleteRun(format!("{name} is missing")))
        }
    };
    let log: RunLog = serde_json::from_slice(&fs::read(need("run.json")?)?)?;
    for s in Stage::ALL {
        if !log.stages.iter().any(|r| r.stage == s.name()) {
            return Err(Error::IncompleteRun(format!("stage {s} has not run")));
        }
    }
    let config: PipelineConfig = serde_json::from_slice(&fs::read(need("config.json")?)?)?;
    let plan = read_plan_csv(&need("plan.csv")?)?;
    let (_, kinds) = read_transforms_csv(&need("transforms.csv")?)?;
    let fov: Vec<f64> = csv::Reader::from_path(need("fov.csv")?)?
        .deserialize::<FovRow>()
        .map(|r| r.map(|r| r.fov))
        .collect::<std::result::Result<_, _>>()?;
    let crop: Vec<f64> = match run.join("crop.csv") {
        p if p.is_file() => csv::Reader::from_path(p)?
            .deserialize::<CropRow>()
            .map(|r| r.map(|r| r.crop))
            .collect::<std::result::Result<_, _>>()?,
        _ => Vec::new(),
    };
    let n = log.input_frames;
    let timing = TIMING_ROWS
        .iter()
        .map(|(row, stages)| {
            let seconds = (!stages.is_empty()).then(|| {
                log.stages
                    .iter()
                    .filter(|r| stages.contains(&r.stage.as_str()))
                    .map(|r| r.seconds)
                    .sum::<f64>()
            });
            TimingRow {
                stage: row.to_string(),
                seconds,
                seconds_per_frame: seconds.map(|s| s / n.max(1) as f64),
            }
        })
        .collect();
    let mut model_kinds = BTreeMap::new();
    for k in ["translation", "similarity", "homography"] {
        model_kinds.insert(k.to_string(), 0);
    }
    // Frame 0 has no predecessor and carries no selection.
    for k in kinds.iter().skip(1) {
        *model_kinds.entry(k.to_string()).or_insert(0) += 1;
    }
    let jumps: Vec<f64> = plan.jumps().iter().map(|&j| j as f64).collect();
    let selected: Vec<f64> = plan.frames.iter().filter_map(|&t| fov.get(t).copied()).collect();
    let empty = Stats {
        min: 0.0,
        max: 0.0,
        mean: 0.0,
    };
    Ok(Report {
        input_frames: n,
        selected_frames: plan.frames.len(),
        target_speedup: config.select.target_speedup,
        achieved_speedup: n as f64 / plan.frames.len().max(1) as f64,
        jumps: Stats::of(&jumps),
        timing,
        total_seconds: log.stages.iter().map(|r| r.seconds).sum(),
        model_kinds,
        fov: Stats::of(&fov).unwrap_or(empty.clone()),
        selected_fov: Stats::of(&selected).unwrap_or(empty),
        crop: Stats::of(&crop),
        notices: log
            .stages
            .iter()
            .flat_map(|r| r.notices.iter().map(move |m| format!("{}: {m}", r.stage)))
            .collect(),
    })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "frames: {} in, {} out (speed-up {:.2}, target {:.2})",
            self.input_frames, self.selected_frames, self.achieved_speedup, self.target_speedup
        );
        if let Some(j) = &self.jumps {
            let _ = writeln!(s, "jumps: min {} max {} mean {:.2}", j.min, j.max, j.mean);
        }
        let _ = writeln!(s, "stage timing (s/frame):");
        for r in &self.timing {
            match r.seconds_per_frame {
                Some(v) => {
                    let _ = writeln!(s, "  {:<38} {:>9.4}", r.stage, v);
                }
                None => {
                    let _ = writeln!(s, "  {:<38} {:>9}", r.stage, "input");
                }
            }
        }
        let _ = writeln!(s, "  {:<38} {:>9.4}", "total", self.total_seconds / self.input_frames.max(1) as f64);
        let kinds: Vec<String> = self.model_kinds.iter().map(|(k, n)| format!("{k} {n}")).collect();
        let _ = writeln!(s, "motion models: {}", kinds.join(", "));
        let _ = writeln!(
            s,
            "fov: min {:.2} max {:.2} mean {:.2}; selected mean {:.2}",
            self.fov.min, self.fov.max, self.fov.mean, self.selected_fov.mean
        );
        if let Some(c) = &self.crop {
            let _ = writeln!(s, "border: mean {:.2}% max {:.2}%", 100.0 * c.mean, 100.0 * c.max);
        }
        for n in &self.notices {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}
