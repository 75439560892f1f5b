//! Synthetic 360° scenes with known camera motion, flow, tracks, regions,
//! class probabilities and planted ROIs.

use std::fs;
use std::path::Path;

use hyperlapse::content::{ProbabilityMaps, RegionMaps};
use hyperlapse::foe::FlowField;
use hyperlapse::geom::{dir_to_vec, EquirectGeometry, SphericalDirection, UnitQuaternion, Vec3};
use hyperlapse::raster::RgbImage;
use hyperlapse::render::{FrameFormat, FrameSequence, Manifest};
use hyperlapse::stab360::warp_equirect;
use hyperlapse::tracking::{write_tracks_csv, FeatureTrack, Point2};
use hyperlapse::{par, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationSpec {
    /// Steady yaw drift per frame, degrees.
    pub yaw_rate: f64,
    /// Per-axis amplitude of the independent per-frame shake, degrees.
    pub jitter: f64,
    /// Explicit world-to-camera rotations, one per frame; replaces the
    /// generated sequence when present.
    pub explicit: Option<Vec<UnitQuaternion>>,
}

impl Default for RotationSpec {
    fn default() -> Self {
        Self {
            yaw_rate: 0.0,
            jitter: 2.0,
            explicit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Gaussian noise added to track positions, pixels.
    pub track_px: f64,
    /// Gaussian noise added to flow vectors, pixels.
    pub flow_px: f64,
    /// Fraction of flow vectors replaced by random vectors.
    pub flow_outliers: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            track_px: 0.0,
            flow_px: 0.0,
            flow_outliers: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRoi {
    /// World direction.
    pub theta: f64,
    pub phi: f64,
    pub radius: f64,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Color strength against the background, in `[0, 1]`.
    pub saliency: f64,
    /// Class index into [`SynthSceneSpec::classes`].
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSceneSpec {
    pub frames: usize,
    /// Panorama width; height is half of it.
    pub width: usize,
    pub fps: f64,
    pub seed: u64,
    pub rotation: RotationSpec,
    /// World direction of travel.
    pub foe: SphericalDirection,
    /// Translation per frame relative to the (constant) scene depth.
    pub speed: f64,
    pub noise: NoiseSpec,
    /// Tracks alive at any frame, roughly.
    pub track_count: usize,
    pub track_length: usize,
    pub region_block: usize,
    pub region_span: usize,
    /// Probability maps are written every `prob_stride` frames.
    pub prob_stride: usize,
    pub classes: Vec<String>,
    pub rois: Vec<SynthRoi>,
    pub format: FrameFormat,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            frames: 120,
            width: 384,
            fps: 30.0,
            seed: 1,
            rotation: RotationSpec::default(),
            foe: SphericalDirection::new(0.0, 0.0),
            speed: 0.02,
            noise: NoiseSpec::default(),
            track_count: 200,
            track_length: 40,
            region_block: 32,
            region_span: 30,
            prob_stride: 10,
            classes: vec!["background".into(), "person".into()],
            rois: Vec::new(),
            format: FrameFormat::Png,
        }
    }
}

impl SynthSceneSpec {
    pub fn geometry(&self) -> Result<EquirectGeometry> {
        EquirectGeometry::with_width(self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.frames < 2 {
            return bad("a scene needs at least 2 frames".into());
        }
        self.geometry()?;
        let n = &self.noise;
        if [n.track_px, n.flow_px, n.flow_outliers, self.rotation.jitter, self.speed]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("noise levels, jitter and speed must be nonnegative".into());
        }
        if n.flow_outliers > 1.0 {
            return bad("flow_outliers is a fraction".into());
        }
        if let Some(q) = &self.rotation.explicit {
            if q.len() != self.frames {
                return bad(format!("{} explicit rotations for {} frames", q.len(), self.frames));
            }
        }
        if self.track_length < 2 || self.region_block == 0 || self.region_span == 0 || self.prob_stride == 0 {
            return bad("track_length >= 2 and positive block, span and stride required".into());
        }
        for (i, r) in self.rois.iter().enumerate() {
            if r.start_frame > r.end_frame || r.end_frame >= self.frames {
                return bad(format!("roi {i}: span outside the scene"));
            }
            if r.label >= self.classes.len() || !(r.radius > 0.0) {
                return bad(format!("roi {i}: bad label or radius"));
            }
        }
        Ok(())
    }
}

/// Everything the pipeline estimates, as generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSceneSpec,
    /// World-to-camera rotation per frame.
    pub rotations: Vec<UnitQuaternion>,
    /// FOE in each frame's camera coordinates.
    pub foe: Vec<SphericalDirection>,
    pub rois: Vec<RoiTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTruth {
    pub region_id: u32,
    pub label: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Camera-frame direction per frame of the span.
    pub poses: Vec<SphericalDirection>,
}

pub fn synth_rotations(spec: &SynthSceneSpec) -> Vec<UnitQuaternion> {
    if let Some(q) = &spec.rotation.explicit {
        return q.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5107);
    let j = spec.rotation.jitter;
    (0..spec.frames)
        .map(|t| {
            let mut shake = || if j > 0.0 && t > 0 { rng.gen_range(-j..=j) } else { 0.0 };
            let (a, b, c) = (shake(), shake(), shake());
            UnitQuaternion::yaw(spec.rotation.yaw_rate * t as f64 + a) * UnitQuaternion::pitch(b) * UnitQuaternion::roll(c)
        })
        .collect()
}

fn camera_center(spec: &SynthSceneSpec, t: usize) -> Vec3 {
    dir_to_vec(spec.foe) * (spec.speed * t as f64)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, iz: i64, salt: u64) -> f64 {
    let h = splitmix(splitmix(splitmix(salt ^ ix as u64) ^ iy as u64) ^ iz as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: Vec3, salt: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (u, v, w) = (s(p.x - fx), s(p.y - fy), s(p.z - fz));
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wt = (if dx == 1 { u } else { 1.0 - u }) * (if dy == 1 { v } else { 1.0 - v }) * (if dz == 1 { w } else { 1.0 - w });
                acc += wt * lattice(ix + dx, iy + dy, iz + dz, salt);
            }
        }
    }
    acc
}

/// Procedural color texture on the sphere, as a world-frame panorama.
pub fn texture_panorama(g: &EquirectGeometry, seed: u64) -> RgbImage {
    let rows = par::map_range(g.height, |y| {
        (0..g.width)
            .map(|x| {
                let d = g.pixel_to_vec(x as f64, y as f64);
                let mut c = [0u8; 3];
                for (ch, out) in c.iter_mut().enumerate() {
                    let salt = splitmix(seed.wrapping_mul(31).wrapping_add(ch as u64));
                    let n =
                        0.5 * value_noise(d * 6.0, salt) + 0.3 * value_noise(d * 13.0, salt ^ 1) + 0.2 * value_noise(d * 27.0, salt ^ 2);
                    let v = ((n - 0.5) * 2.2 + 0.5).clamp(0.0, 1.0);
                    *out = (20.0 + v * 215.0).round() as u8;
                }
                c
            })
            .collect::<Vec<_>>()
    });
    RgbImage::from_fn(g.width, g.height, |x, y| rows[y][x])
}

const ROI_COLOR: [f64; 3] = [240.0, 20.0, 200.0];

fn roi_masks(spec: &SynthSceneSpec, g: &EquirectGeometry, rot: UnitQuaternion, t: usize) -> Vec<Option<usize>> {
    let live: Vec<(usize, Vec3, f64)> = spec
        .rois
        .iter()
        .enumerate()
        .filter(|(_, r)| (r.start_frame..=r.end_frame).contains(&t))
        .map(|(i, r)| {
            (
                i,
                rot.rotate(dir_to_vec(SphericalDirection::new(r.theta, r.phi))),
                r.radius.to_radians().cos(),
            )
        })
        .collect();
    let mut out = vec![None; g.width * g.height];
    if live.is_empty() {
        return out;
    }
    for y in 0..g.height {
        for x in 0..g.width {
            let d = g.pixel_to_vec(x as f64, y as f64);
            // Later ROIs are drawn on top.
            for &(i, c, cos_r) in &live {
                if d.dot(c) >= cos_r {
                    out[y * g.width + x] = Some(i);
                }
            }
        }
    }
    out
}

/// Frame `t`: the texture seen through rotation `rot` with live ROIs painted on.
pub fn render_frame(spec: &SynthSceneSpec, g: &EquirectGeometry, texture: &RgbImage, rot: UnitQuaternion, t: usize) -> Result<RgbImage> {
    let mut img = warp_equirect(texture, rot, g)?;
    for (i, m) in roi_masks(spec, g, rot, t).into_iter().enumerate() {
        if let Some(r) = m {
            let s = spec.rois[r].saliency.clamp(0.0, 1.0);
            let px = &mut img.data[i * 3..i * 3 + 3];
            for (c, target) in px.iter_mut().zip(ROI_COLOR) {
                *c = (*c as f64 * (1.0 - s) + target * s).round() as u8;
            }
        }
    }
    Ok(img)
}

/// Camera direction at frame `t + 1` of the scene point seen along `d` at
/// frame `t`, for a scene at unit depth.
fn advance(spec: &SynthSceneSpec, rots: &[UnitQuaternion], t: usize, d: Vec3) -> Vec3 {
    let world = camera_center(spec, t) + rots[t].inverse().rotate(d);
    rots[t + 1].rotate(world - camera_center(spec, t + 1)).normalized()
}

/// Analytic flow from frame `t` to `t + 1`, before noise.
pub fn synth_flow(spec: &SynthSceneSpec, g: &EquirectGeometry, rots: &[UnitQuaternion], t: usize) -> FlowField {
    let rows = par::map_range(g.height, |y| {
        (0..g.width)
            .map(|x| {
                let d = g.pixel_to_vec(x as f64, y as f64);
                let (qx, qy) = g.vec_to_pixel(advance(spec, rots, t, d));
                (g.wrapped_dx(x as f64, qx) as f32, (qy - y as f64) as f32)
            })
            .collect::<Vec<_>>()
    });
    FlowField::from_fn(g.width, g.height, |x, y| rows[y][x])
}

fn noisy_flow(spec: &SynthSceneSpec, mut flow: FlowField, t: usize) -> FlowField {
    let n = &spec.noise;
    if n.flow_px == 0.0 && n.flow_outliers == 0.0 {
        return flow;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xF10 ^ ((t as u64) << 20));
    let normal = Normal::new(0.0, n.flow_px.max(1e-300)).expect("finite sigma");
    for i in 0..flow.width * flow.height {
        if n.flow_outliers > 0.0 && rng.gen_bool(n.flow_outliers) {
            flow.u[i] = rng.gen_range(-4.0..4.0);
            flow.v[i] = rng.gen_range(-4.0..4.0);
        } else if n.flow_px > 0.0 {
            flow.u[i] += normal.sample(&mut rng) as f32;
            flow.v[i] += normal.sample(&mut rng) as f32;
        }
    }
    flow
}

/// Scene points at unit depth from the camera at their first frame, followed
/// under the analytic motion. Batches of `track_count / 2` tracks start every
/// `track_length / 2` frames.
pub fn synth_tracks(spec: &SynthSceneSpec, g: &EquirectGeometry, rots: &[UnitQuaternion]) -> Vec<FeatureTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7AC5);
    let normal = Normal::new(0.0, spec.noise.track_px.max(1e-300)).expect("finite sigma");
    let half = (spec.track_length / 2).max(1);
    let per_batch = (spec.track_count / 2).max(1);
    let mut tracks = Vec::new();
    let mut id = 0u64;
    let mut start = 0;
    while start + 1 < spec.frames {
        let end = (start + spec.track_length).min(spec.frames);
        for _ in 0..per_batch {
            // Uniform on the sphere, away from the poles.
            let z: f64 = rng.gen_range(-0.9..0.9);
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let mut d = Vec3::new(r * a.cos(), z, r * a.sin());
            let mut points = Vec::with_capacity(end - start);
            for t in start..end {
                if t > start {
                    d = advance(spec, rots, t - 1, d);
                }
                let (mut x, mut y) = g.vec_to_pixel(d);
                if spec.noise.track_px > 0.0 {
                    x += normal.sample(&mut rng);
                    y += normal.sample(&mut rng);
                }
                points.push(Point2::new(x.rem_euclid(g.width as f64), y));
            }
            tracks.push(FeatureTrack {
                track_id: id,
                start_frame: start,
                points,
            });
            id += 1;
        }
        start += half;
    }
    tracks
}

fn background_id(spec: &SynthSceneSpec, g: &EquirectGeometry, x: usize, y: usize, t: usize) -> u32 {
    let cols = g.width.div_ceil(spec.region_block);
    let rows = g.height.div_ceil(spec.region_block);
    (((t / spec.region_span) * rows + y / spec.region_block) * cols + x / spec.region_block) as u32
}

fn background_count(spec: &SynthSceneSpec, g: &EquirectGeometry) -> u32 {
    let cols = g.width.div_ceil(spec.region_block);
    let rows = g.height.div_ceil(spec.region_block);
    (cols * rows * spec.frames.div_ceil(spec.region_span)) as u32
}

/// Writes the dataset to `out`:
/// `frames/`, `flow/NNNNNN.flo` (frame `t` to `t + 1`), `tracks.csv`,
/// `regions/`, `probs/` and `ground_truth.json`.
pub fn synth_scene(spec: &SynthSceneSpec, out: &Path) -> Result<GroundTruth> {
    spec.validate()?;
    let g = spec.geometry()?;
    let rots = synth_rotations(spec);
    let texture = texture_panorama(&g, spec.seed);
    let seq = FrameSequence::create(
        &out.join("frames"),
        Manifest {
            fps: spec.fps,
            width: g.width,
            height: g.height,
            count: spec.frames,
            format: spec.format,
        },
    )?;
    let flow_dir = out.join("flow");
    fs::create_dir_all(&flow_dir)?;
    let bg = background_count(spec, &g);
    let mut probs = ProbabilityMaps::new(g.width, g.height, spec.classes.clone());
    let mut region_frames = Vec::with_capacity(spec.frames);
    let mut roi_truth: Vec<RoiTruth> = spec
        .rois
        .iter()
        .enumerate()
        .map(|(i, r)| RoiTruth {
            region_id: bg + i as u32,
            label: r.label,
            start_frame: r.start_frame,
            end_frame: r.end_frame,
            poses: Vec::new(),
        })
        .collect();
    let mut foe = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let rot = rots[t];
        seq.write(t, &render_frame(spec, &g, &texture, rot, t)?)?;
        if t + 1 < spec.frames {
            let flow = noisy_flow(spec, synth_flow(spec, &g, &rots, t), t);
            let f = fs::File::create(flow_dir.join(format!("{t:06}.flo")))?;
            flow.write_flo(std::io::BufWriter::new(f))?;
        }
        let masks = roi_masks(spec, &g, rot, t);
        let mut ids = Vec::with_capacity(g.width * g.height);
        for y in 0..g.height {
            for x in 0..g.width {
                ids.push(match masks[y * g.width + x] {
                    Some(r) => bg + r as u32,
                    None => background_id(spec, &g, x, y, t),
                });
            }
        }
        if t % spec.prob_stride == 0 {
            let n = g.width * g.height;
            let mut p = vec![0.0f32; spec.classes.len() * n];
            for (i, m) in masks.iter().enumerate() {
                let class = m.map_or(0, |r| spec.rois[r].label);
                p[class * n + i] = 1.0;
            }
            probs.insert(t, p)?;
        }
        region_frames.push(ids);
        for (i, r) in spec.rois.iter().enumerate() {
            if (r.start_frame..=r.end_frame).contains(&t) {
                let d = rot.rotate(dir_to_vec(SphericalDirection::new(r.theta, r.phi)));
                roi_truth[i].poses.push(hyperlapse::geom::vec_to_dir_unchecked(d));
            }
        }
        foe.push(hyperlapse::geom::vec_to_dir_unchecked(rot.rotate(dir_to_vec(spec.foe))));
    }
    RegionMaps::from_frames(g.width, g.height, region_frames)?.write_dir(&out.join("regions"))?;
    probs.write_dir(&out.join("probs"))?;
    let tracks = synth_tracks(spec, &g, &rots);
    write_tracks_csv(&tracks, std::io::BufWriter::new(fs::File::create(out.join("tracks.csv"))?))?;
    let truth = GroundTruth {
        spec: spec.clone(),
        rotations: rots,
        foe,
        rois: roi_truth,
    };
    fs::write(out.join("ground_truth.json"), serde_json::to_vec_pretty(&truth)?)?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSceneSpec {
        SynthSceneSpec {
            frames: 6,
            width: 96,
            track_count: 40,
            track_length: 4,
            region_block: 16,
            region_span: 3,
            prob_stride: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_motion_is_static() {
        let spec = SynthSceneSpec {
            speed: 0.0,
            rotation: RotationSpec {
                jitter: 0.0,
                ..Default::default()
            },
            ..small()
        };
        let g = spec.geometry().unwrap();
        let rots = synth_rotations(&spec);
        let f = synth_flow(&spec, &g, &rots, 2);
        assert!(f.u.iter().chain(&f.v).all(|v| v.abs() < 1e-4));
        for tr in synth_tracks(&spec, &g, &rots) {
            for p in &tr.points {
                assert!(p.dist(tr.points[0]) < 1e-6);
            }
        }
    }

    #[test]
    fn forward_motion_diverges_from_foe() {
        let spec = SynthSceneSpec {
            rotation: RotationSpec {
                jitter: 0.0,
                ..Default::default()
            },
            foe: SphericalDirection::new(40.0, 10.0),
            ..small()
        };
        let g = spec.geometry().unwrap();
        let rots = synth_rotations(&spec);
        let f = synth_flow(&spec, &g, &rots, 0);
        let (fx, fy) = g.dir_to_pixel(spec.foe);
        let (mut pos, mut total) = (0, 0);
        for y in 10..g.height - 10 {
            for x in 0..g.width {
                let dx = g.wrapped_dx(fx, x as f64);
                let dy = y as f64 - fy;
                let r = (dx * dx + dy * dy).sqrt();
                if !(3.0..20.0).contains(&r) {
                    continue;
                }
                let (u, v) = f.get(x, y);
                total += 1;
                if u * dx + v * dy > 0.0 {
                    pos += 1;
                }
            }
        }
        assert!(total > 50 && pos == total, "{pos}/{total}");
    }

    #[test]
    fn rotation_tracks_are_rotated_projections() {
        let spec = SynthSceneSpec {
            speed: 0.0,
            rotation: RotationSpec {
                jitter: 3.0,
                yaw_rate: 1.5,
                ..Default::default()
            },
            ..small()
        };
        let g = spec.geometry().unwrap();
        let rots = synth_rotations(&spec);
        for tr in synth_tracks(&spec, &g, &rots) {
            let d0 = g.pixel_to_vec(tr.points[0].x, tr.points[0].y);
            let world = rots[tr.start_frame].inverse().rotate(d0);
            for (k, p) in tr.points.iter().enumerate() {
                let (x, y) = g.vec_to_pixel(rots[tr.start_frame + k].rotate(world));
                assert!(g.wrapped_dx(x, p.x).abs() < 0.5 && (y - p.y).abs() < 0.5);
            }
        }
    }

    #[test]
    fn dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSceneSpec {
            rois: vec![SynthRoi {
                theta: 10.0,
                phi: 0.0,
                radius: 15.0,
                start_frame: 1,
                end_frame: 4,
                saliency: 1.0,
                label: 1,
            }],
            ..small()
        };
        let truth = synth_scene(&spec, dir.path()).unwrap();
        assert_eq!(truth.rois[0].poses.len(), 4);
        assert_eq!(FrameSequence::open(&dir.path().join("frames")).unwrap().len(), 6);
        assert!(dir.path().join("flow/000004.flo").exists() && !dir.path().join("flow/000005.flo").exists());
        let maps = RegionMaps::open_dir(&dir.path().join("regions")).unwrap();
        assert!(maps.frame(2).unwrap().contains(&truth.rois[0].region_id));
        assert!(!maps.frame(0).unwrap().contains(&truth.rois[0].region_id));
        let probs = ProbabilityMaps::open_dir(&dir.path().join("probs")).unwrap();
        assert_eq!(probs.available_frames(), vec![0, 2, 4]);
        let again: GroundTruth = serde_json::from_slice(&fs::read(dir.path().join("ground_truth.json")).unwrap()).unwrap();
        assert_eq!(again, truth);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SynthSceneSpec { frames: 1, ..small() }.validate().is_err());
        let mut s = small();
        s.noise.flow_px = -1.0;
        assert!(s.validate().is_err());
    }
}
