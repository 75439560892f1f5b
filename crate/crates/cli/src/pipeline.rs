//! Stage-wise pipeline over an input directory, with every intermediate
//! artifact written to (and read back from) a run directory.
//!
//! Input layout: `frames/` (manifest plus frames), and optionally
//! `flow/NNNNNN.flo` (frame `t` to `t + 1`), `tracks.csv`, `regions/` and
//! `probs/`.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hyperlapse::content::{
    analyze_regions, fallback_segmentation, label_regions, read_rois_json, select_rois, windowed_saliency, write_rois_json, FrameSource,
    ProbabilityMaps, RegionMaps, RoiTrack,
};
use hyperlapse::foe::{estimate_foe, read_foe_csv, smooth_foe_track, write_foe_csv, FlowField, FoeRecord};
use hyperlapse::frameselect::{frame_importance, read_plan_csv, select_frames, write_plan_csv, TrackAlignment};
use hyperlapse::geom::{vec_to_dir_unchecked, EquirectGeometry, SphericalDirection, UnitQuaternion};
use hyperlapse::motion::{Mat3, ModelKind};
use hyperlapse::raster::{GrayImage, RgbImage};
use hyperlapse::render::{fov_curve, render_nfov, targeted_areas, warp_frame, FrameSequence, Manifest};
use hyperlapse::stab2d::{read_transforms_csv, stabilize_video, write_transforms_csv};
use hyperlapse::stab360::{
    estimate_rotation_track, frame_warp_rotation, read_rotations_csv, warp_equirect, write_rotations_csv, Stab360Params,
};
use hyperlapse::tracking::{read_tracks_csv, track_sequence, write_tracks_csv, FeatureTrack, Point2};
use hyperlapse::viewplan::{plan_view_path, read_path_csv, write_path_csv, CameraPath};
use hyperlapse::{par, Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stabilize360,
    Foe,
    Content,
    Viewplan,
    Frameselect,
    Render,
    Stab2d,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Stabilize360,
        Stage::Foe,
        Stage::Content,
        Stage::Viewplan,
        Stage::Frameselect,
        Stage::Render,
        Stage::Stab2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stabilize360 => "stabilize360",
            Stage::Foe => "foe",
            Stage::Content => "content",
            Stage::Viewplan => "viewplan",
            Stage::Frameselect => "frameselect",
            Stage::Render => "render",
            Stage::Stab2d => "stab2d",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("input: {0}")]
    Input(Error),
    #[error("stage {stage}: {source}")]
    Stage { stage: Stage, source: Error },
}

impl PipelineError {
    /// 2 for unreadable or invalid inputs, 3 for failures inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Input(_) => 2,
            PipelineError::Stage { source, .. } => {
                if is_input_error(source) {
                    2
                } else {
                    3
                }
            }
        }
    }
}

fn is_input_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Image(_)
            | Error::Format(_)
            | Error::InvalidParameter(_)
            | Error::InvalidGeometry { .. }
            | Error::DimensionMismatch { .. }
            | Error::MissingFrames(_)
    )
}

/// The input directory.
#[derive(Debug, Clone)]
pub struct InputSet {
    pub root: PathBuf,
    pub frames: FrameSequence,
    pub geometry: EquirectGeometry,
    pub flow_dir: Option<PathBuf>,
    pub tracks: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub probs: Option<PathBuf>,
}

impl InputSet {
    pub fn open(root: &Path) -> Result<Self> {
        let frames = FrameSequence::open(&root.join("frames"))?;
        let m = &frames.manifest;
        let geometry = EquirectGeometry::new(m.width, m.height)?;
        if m.count < 2 {
            return Err(Error::InvalidParameter("need at least 2 input frames".into()));
        }
        let some_dir = |p: PathBuf| p.is_dir().then_some(p);
        Ok(Self {
            root: root.to_path_buf(),
            geometry,
            flow_dir: some_dir(root.join("flow")),
            tracks: Some(root.join("tracks.csv")).filter(|p| p.is_file()),
            regions: some_dir(root.join("regions")),
            probs: some_dir(root.join("probs")),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn flow(&self, t: usize) -> Result<Option<FlowField>> {
        let Some(dir) = &self.flow_dir else { return Ok(None) };
        let p = dir.join(format!("{t:06}.flo"));
        if !p.is_file() {
            return Ok(None);
        }
        let f = FlowField::read_flo(BufReader::new(fs::File::open(p)?))?;
        if f.width != self.geometry.width || f.height != self.geometry.height {
            return Err(Error::DimensionMismatch {
                expected: (self.geometry.width, self.geometry.height),
                got: (f.width, f.height),
            });
        }
        Ok(Some(f))
    }
}

impl FrameSource for InputSet {
    fn frame(&self, t: usize) -> Result<RgbImage> {
        self.frames.read(t)
    }

    fn flow(&self, t: usize) -> Result<Option<FlowField>> {
        InputSet::flow(self, t)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    /// Frames the stage worked on.
    pub frames: usize,
    pub notices: Vec<String>,
}

/// `run.json`: per-stage timing and notices. The only artifact that is not
/// reproducible across reruns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub input_frames: usize,
    pub stages: Vec<StageRecord>,
}

impl RunLog {
    pub fn load(run: &Path) -> Result<Self> {
        let p = run.join("run.json");
        if !p.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    fn store(&self, run: &Path) -> Result<()> {
        fs::write(run.join("run.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

struct StageOutput {
    frames: usize,
    notices: Vec<String>,
}

impl StageOutput {
    fn new(frames: usize) -> Self {
        Self {
            frames,
            notices: Vec::new(),
        }
    }

    fn notice(&mut self, msg: String) {
        log::info!("{msg}");
        self.notices.push(msg);
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub input: InputSet,
    pub run_dir: PathBuf,
}

fn create_writer(p: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(p)?))
}

fn open_reader(p: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(p)?))
}

/// Maps a flow field of the original sequence into the rotation-stabilized
/// panorama, where frame `t` is rotated by `r_t` and frame `t + 1` by `r_next`.
pub fn stabilized_flow(flow: &FlowField, g: &EquirectGeometry, r_t: UnitQuaternion, r_next: UnitQuaternion) -> FlowField {
    let inv = r_t.inverse();
    let (w, h) = (g.width, g.height);
    let rows = par::map_range(h, |y| {
        (0..w)
            .map(|x| {
                let d = inv.rotate(g.pixel_to_vec(x as f64, y as f64));
                let (px, py) = g.vec_to_pixel(d);
                let (u, v) = sample_flow(flow, px, py);
                let q = r_next.rotate(g.pixel_to_vec(px + u, py + v));
                let (qx, qy) = g.vec_to_pixel(q);
                (g.wrapped_dx(x as f64, qx) as f32, (qy - y as f64) as f32)
            })
            .collect::<Vec<_>>()
    });
    FlowField::from_fn(w, h, |x, y| rows[y][x])
}

/// Bilinear sample, wrapping horizontally and clamping vertically.
fn sample_flow(flow: &FlowField, x: f64, y: f64) -> (f64, f64) {
    let (w, h) = (flow.width as i64, flow.height as i64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (mut u, mut v) = (0.0, 0.0);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wt = wx * wy;
            if wt == 0.0 {
                continue;
            }
            let xi = (x0 as i64 + dx).rem_euclid(w) as usize;
            let yi = (y0 as i64 + dy).min(h - 1) as usize;
            let (a, b) = flow.get(xi, yi);
            u += wt * a;
            v += wt * b;
        }
    }
    (u, v)
}

/// Track points moved into the rotation-stabilized panorama.
pub fn stabilize_tracks(tracks: &[FeatureTrack], g: &EquirectGeometry, warps: &[UnitQuaternion]) -> Vec<FeatureTrack> {
    tracks
        .iter()
        .map(|tr| FeatureTrack {
            track_id: tr.track_id,
            start_frame: tr.start_frame,
            points: tr
                .points
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let (x, y) = g.vec_to_pixel(warps[tr.start_frame + k].rotate(g.pixel_to_vec(p.x, p.y)));
                    Point2::new(x, y)
                })
                .collect(),
        })
        .collect()
}

/// ROI poses moved into the rotation-stabilized panorama.
pub fn stabilize_rois(rois: &mut [RoiTrack], warps: &[UnitQuaternion]) {
    for r in rois {
        for (k, p) in r.poses.iter_mut().enumerate() {
            *p = vec_to_dir_unchecked(warps[r.start_frame + k].rotate(p.to_vec()));
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RegionRow {
    tsp_id: u32,
    start_frame: usize,
    end_frame: usize,
    pixel_count: u64,
    saliency: f64,
    label: Option<usize>,
}

#[derive(Serialize, Deserialize)]
pub struct FovRow {
    pub frame: usize,
    pub fov: f64,
}

#[derive(Serialize, Deserialize)]
pub struct CropRow {
    pub output_index: usize,
    pub crop: f64,
}

const ROTATION_FILES: [&str; 4] = [
    "rotations_relative.csv",
    "rotations_cumulative.csv",
    "rotations_smoothed.csv",
    "rotations_corrective.csv",
];

impl Pipeline {
    pub fn new(config: PipelineConfig, input_dir: &Path, run_dir: &Path) -> std::result::Result<Self, PipelineError> {
        config.validate().map_err(PipelineError::Input)?;
        let input = InputSet::open(input_dir).map_err(PipelineError::Input)?;
        fs::create_dir_all(run_dir).map_err(|e| PipelineError::Input(e.into()))?;
        Ok(Self {
            config,
            input,
            run_dir: run_dir.to_path_buf(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    pub fn run_all(&self) -> std::result::Result<(), PipelineError> {
        for s in Stage::ALL {
            self.run_stage(s)?;
        }
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage) -> std::result::Result<(), PipelineError> {
        let wrap = |source: Error| PipelineError::Stage { stage, source };
        fs::write(
            self.path("config.json"),
            serde_json::to_vec_pretty(&self.config).map_err(|e| wrap(e.into()))?,
        )
        .map_err(|e| wrap(e.into()))?;
        log::info!("stage {stage}");
        let start = Instant::now();
        let out = match stage {
            Stage::Stabilize360 => self.stabilize360(),
            Stage::Foe => self.foe(),
            Stage::Content => self.content(),
            Stage::Viewplan => self.viewplan(),
            Stage::Frameselect => self.frameselect(),
            Stage::Render => self.render(),
            Stage::Stab2d => self.stab2d(),
        }
        .map_err(wrap)?;
        let seconds = start.elapsed().as_secs_f64();
        let mut logbook = RunLog::load(&self.run_dir).map_err(wrap)?;
        logbook.input_frames = self.input.len();
        let rec = StageRecord {
            stage: stage.name().to_string(),
            seconds,
            frames: out.frames,
            notices: out.notices,
        };
        match logbook.stages.iter_mut().find(|r| r.stage == rec.stage) {
            Some(slot) => *slot = rec,
            None => logbook.stages.push(rec),
        }
        logbook.store(&self.run_dir).map_err(wrap)
    }

    /// Per-frame rotation taking original panorama directions to the
    /// stabilized panorama.
    pub fn warps(&self) -> Result<Vec<UnitQuaternion>> {
        let cum = read_rotations_csv(open_reader(&self.path(ROTATION_FILES[1]))?)?;
        let corr = read_rotations_csv(open_reader(&self.path(ROTATION_FILES[3]))?)?;
        if cum.len() != self.input.len() || corr.len() != cum.len() {
            return Err(Error::Format("rotation tables do not match the input length".into()));
        }
        Ok(cum.iter().zip(&corr).map(|(&q, &r)| frame_warp_rotation(q, r)).collect())
    }

    fn stabilize360(&self) -> Result<StageOutput> {
        let g = &self.input.geometry;
        let n = self.input.len();
        let mut out = StageOutput::new(n);
        let tracks = match &self.input.tracks {
            Some(p) => read_tracks_csv(open_reader(p)?)?,
            None => {
                out.notice("no tracks.csv in the input; tracking the panorama".into());
                let grays: Vec<GrayImage> = par::map_range(n, |t| self.input.frames.read(t).map(|f| f.to_gray()))
                    .into_iter()
                    .collect::<Result<_>>()?;
                track_sequence(&grays, &self.config.panorama_tracker)?
            }
        };
        let mut params: Stab360Params = self.config.stab360;
        params.horn.seed = self.config.seed;
        let rt = estimate_rotation_track(&tracks, g, n, &params);
        if !rt.failed_pairs.is_empty() {
            out.notice(format!("{} frame pairs without a rotation estimate", rt.failed_pairs.len()));
        }
        write_tracks_csv(&tracks, create_writer(&self.path("tracks.csv"))?)?;
        for (name, seq) in ROTATION_FILES
            .iter()
            .zip([&rt.relative, &rt.cumulative, &rt.smoothed, &rt.corrective])
        {
            write_rotations_csv(seq, create_writer(&self.path(name))?)?;
        }
        if self.config.render.write_stabilized {
            let warps = self.warps()?;
            let m = &self.input.frames.manifest;
            let seq = FrameSequence::create(
                &self.path("stabilized"),
                Manifest {
                    format: self.config.render.format,
                    ..m.clone()
                },
            )?;
            par::map_range(n, |t| -> Result<()> {
                seq.write(t, &warp_equirect(&self.input.frames.read(t)?, warps[t], g)?)
            })
            .into_iter()
            .collect::<Result<()>>()?;
        }
        Ok(out)
    }

    fn foe(&self) -> Result<StageOutput> {
        let g = self.input.geometry;
        let n = self.input.len();
        let cfg = &self.config.foe;
        let mut out = StageOutput::new(0);
        let warps = self.warps()?;
        let todo: Vec<usize> = (0..n - 1).step_by(cfg.frame_stride).collect();
        let raw = par::map_slice(&todo, |&t| -> Result<Option<FoeRecord>> {
            let Some(flow) = self.input.flow(t)? else { return Ok(None) };
            let flow = stabilized_flow(&flow, &g, warps[t], warps[t + 1]);
            match estimate_foe(&flow, &g, &cfg.params) {
                Ok(e) => Ok(Some(FoeRecord {
                    frame: t,
                    theta: e.foe.theta,
                    phi: e.foe.phi,
                    confidence: e.confidence,
                })),
                Err(Error::NoConsensus) => Ok(None),
                Err(e) => Err(e),
            }
        });
        let mut records = Vec::new();
        for r in raw {
            if let Some(r) = r? {
                records.push(r);
            }
        }
        out.frames = todo.len();
        write_foe_csv(&records, create_writer(&self.path("foe_raw.csv"))?)?;
        let mut track: Vec<Option<SphericalDirection>> = vec![None; n];
        let mut conf = vec![0.0; n];
        for r in &records {
            track[r.frame] = Some(SphericalDirection::new(r.theta, r.phi));
            conf[r.frame] = r.confidence;
        }
        let smoothed = match smooth_foe_track(&track, cfg.sigma) {
            Ok(s) => s,
            Err(Error::AllMissing) => {
                out.notice("no frame produced an FOE; planning without the FOE term".into());
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        if !smoothed.is_empty() && records.len() < todo.len() {
            out.notice(format!("FOE found on {} of {} frames", records.len(), todo.len()));
        }
        let rows: Vec<FoeRecord> = smoothed
            .iter()
            .enumerate()
            .map(|(t, d)| FoeRecord {
                frame: t,
                theta: d.theta,
                phi: d.phi,
                confidence: conf[t],
            })
            .collect();
        write_foe_csv(&rows, create_writer(&self.path("foe.csv"))?)?;
        Ok(out)
    }

    fn content(&self) -> Result<StageOutput> {
        let g = self.input.geometry;
        let n = self.input.len();
        let c = &self.config.content;
        let mut out = StageOutput::new(n);
        let maps = match &self.input.regions {
            Some(dir) => RegionMaps::open_dir(dir)?,
            None => {
                out.notice(format!(
                    "no region maps; using {}-pixel, {}-frame grid regions",
                    c.fallback_block, c.fallback_span
                ));
                fallback_segmentation(&g, n, c.fallback_block, c.fallback_span)
            }
        };
        if maps.frames != n {
            return Err(Error::Format(format!("region maps cover {} frames, input has {n}", maps.frames)));
        }
        let mut regions = analyze_regions(&maps, &self.input, &g)?;
        windowed_saliency(&mut regions, c.window, c.sigma_s);
        let chosen: Option<Vec<usize>> = match &self.input.probs {
            Some(dir) => {
                let probs = ProbabilityMaps::open_dir(dir)?;
                label_regions(&mut regions, &maps, &probs)?;
                match &self.config.labels {
                    Some(names) => Some(
                        names
                            .iter()
                            .map(|name| {
                                probs
                                    .classes
                                    .iter()
                                    .position(|c| c == name)
                                    .ok_or_else(|| Error::InvalidParameter(format!("unknown label `{name}`")))
                            })
                            .collect::<Result<_>>()?,
                    ),
                    None => None,
                }
            }
            None => {
                out.notice("no probability maps; ROIs ranked on saliency alone".into());
                None
            }
        };
        let mut rows = csv::Writer::from_path(self.path("regions.csv"))?;
        for r in &regions {
            rows.serialize(RegionRow {
                tsp_id: r.tsp_id,
                start_frame: r.start_frame,
                end_frame: r.end_frame,
                pixel_count: r.pixel_count,
                saliency: r.saliency,
                label: r.label,
            })?;
        }
        rows.flush()?;
        let mut rois: Vec<RoiTrack> = select_rois(&regions, chosen.as_deref(), c.subsequence, c.rois_per_subsequence)
            .into_iter()
            .filter(|r| r.saliency > 0.0)
            .collect();
        if rois.is_empty() {
            out.notice("no ROI selected; the path follows the FOE".into());
        }
        let max_s = rois.iter().map(|r| r.saliency).fold(0.0, f64::max);
        if self.config.plan.normalize_saliency && max_s > 0.0 {
            for r in &mut rois {
                r.saliency /= max_s;
            }
        }
        stabilize_rois(&mut rois, &self.warps()?);
        write_rois_json(&rois, &self.path("rois.json"))?;
        Ok(out)
    }

    fn read_foe(&self) -> Result<Vec<SphericalDirection>> {
        let rows = read_foe_csv(open_reader(&self.path("foe.csv"))?)?;
        if !rows.is_empty() && rows.len() != self.input.len() {
            return Err(Error::Format("foe.csv does not match the input length".into()));
        }
        Ok(rows.iter().map(|r| SphericalDirection::new(r.theta, r.phi)).collect())
    }

    fn viewplan(&self) -> Result<StageOutput> {
        let n = self.input.len();
        let mut out = StageOutput::new(n);
        let rois = read_rois_json(&self.path("rois.json"))?;
        let foe = self.read_foe()?;
        let plan = plan_view_path(&rois, &foe, n, &self.config.plan)?;
        for w in &plan.warnings {
            out.notice(format!("{w:?}"));
        }
        write_path_csv(&plan.path, &self.path("path.csv"))?;
        Ok(out)
    }

    fn read_path(&self) -> Result<CameraPath> {
        let path = read_path_csv(&self.path("path.csv"))?;
        if path.len() != self.input.len() {
            return Err(Error::Format("path.csv does not match the input length".into()));
        }
        Ok(path)
    }

    fn frameselect(&self) -> Result<StageOutput> {
        let n = self.input.len();
        let g = self.input.geometry;
        let out = StageOutput::new(n);
        let path = self.read_path()?;
        let rois = read_rois_json(&self.path("rois.json"))?;
        let curve = frame_importance(&path, &rois);
        let tracks = stabilize_tracks(&read_tracks_csv(open_reader(&self.path("tracks.csv"))?)?, &g, &self.warps()?);
        let r = &self.config.render;
        let align = TrackAlignment::new(
            &tracks,
            &path,
            &g,
            self.config.zoom.default_fov,
            r.width,
            r.height,
            &self.config.select,
        )?;
        let plan = select_frames(n, &self.config.select, &curve, &align)?;
        write_plan_csv(&plan, &self.path("plan.csv"))?;
        Ok(out)
    }

    fn render(&self) -> Result<StageOutput> {
        let g = self.input.geometry;
        let path = self.read_path()?;
        let rois = read_rois_json(&self.path("rois.json"))?;
        let plan = read_plan_csv(&self.path("plan.csv"))?;
        let fov = fov_curve(&targeted_areas(&path, &rois), g.width, &self.config.zoom);
        let mut w = csv::Writer::from_path(self.path("fov.csv"))?;
        w.write_record(["frame", "fov"])?;
        for (frame, f) in fov.iter().enumerate() {
            w.write_record([frame.to_string(), format!("{f:.6}")].iter())?;
        }
        w.flush()?;
        let warps = self.warps()?;
        let r = &self.config.render;
        let seq = FrameSequence::create(
            &self.path("nfov"),
            Manifest {
                fps: self.input.frames.manifest.fps,
                width: r.width,
                height: r.height,
                count: plan.frames.len(),
                format: r.format,
            },
        )?;
        par::map_slice(
            &plan.frames.iter().copied().enumerate().collect::<Vec<_>>(),
            |&(i, t)| -> Result<()> {
                let pano = warp_equirect(&self.input.frames.read(t)?, warps[t], &g)?;
                seq.write(i, &render_nfov(&pano, path.poses[t], fov[t], r.width, r.height)?)
            },
        )
        .into_iter()
        .collect::<Result<()>>()?;
        Ok(StageOutput::new(plan.frames.len()))
    }

    fn stab2d(&self) -> Result<StageOutput> {
        let seq = FrameSequence::open(&self.path("nfov"))?;
        let n = seq.len();
        let mut out = StageOutput::new(n);
        let frames: Vec<RgbImage> = par::map_range(n, |i| seq.read(i)).into_iter().collect::<Result<_>>()?;
        let (transforms, kinds) = if n >= 2 {
            let grays: Vec<GrayImage> = frames.iter().map(|f| f.to_gray()).collect();
            let mut ransac = self.config.ransac;
            ransac.seed = self.config.seed;
            let res = stabilize_video(&grays, &self.config.nfov_tracker, &ransac, &self.config.stab2d)?;
            (res.transforms, res.kinds)
        } else {
            out.notice("fewer than 2 selected frames; no 2D stabilization".into());
            (vec![Mat3::IDENTITY; n], vec![ModelKind::Translation; n])
        };
        write_transforms_csv(&transforms, &kinds, &self.path("transforms.csv"))?;
        // Read back so the warps use exactly the stored transforms.
        let (transforms, _) = read_transforms_csv(&self.path("transforms.csv"))?;
        let fin = FrameSequence::create(&self.path("final"), seq.manifest.clone())?;
        let crops = par::map_range(n, |i| -> Result<f64> {
            let (img, crop) = warp_frame(&frames[i], &transforms[i])?;
            fin.write(i, &img)?;
            Ok(crop)
        });
        let mut w = csv::Writer::from_path(self.path("crop.csv"))?;
        w.write_record(["output_index", "crop"])?;
        for (i, c) in crops.into_iter().enumerate() {
            w.write_record([i.to_string(), format!("{:.6}", c?)].iter())?;
        }
        w.flush()?;
        Ok(out)
    }
}

/// Artifact files a completed run contains.
pub const RUN_ARTIFACTS: [&str; 14] = [
    "config.json",
    "run.json",
    "tracks.csv",
    "rotations_relative.csv",
    "rotations_cumulative.csv",
    "rotations_smoothed.csv",
    "rotations_corrective.csv",
    "foe.csv",
    "regions.csv",
    "rois.json",
    "path.csv",
    "plan.csv",
    "fov.csv",
    "transforms.csv",
];
