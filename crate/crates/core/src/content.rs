//! Region statistics, spatio-temporal saliency, semantic labels and ROI
//! selection.

use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::foe::FlowField;
use crate::geom::{wrap_degrees, EquirectGeometry, SphericalDirection};
use crate::par;
use crate::raster::{rgb_to_lab, RgbImage};

pub const COLOR_BINS_PER_CHANNEL: usize = 8;
pub const MAG_BINS: usize = 16;
pub const ORI_BINS: usize = 16;
pub const FEATURE_LEN: usize = 3 * COLOR_BINS_PER_CHANNEL + MAG_BINS + ORI_BINS;

/// Default Gaussian-like spatial falloff of the contrast weight.
pub const SIGMA_S: f64 = 0.04;
pub const SALIENCY_WINDOW: usize = 200;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct RegionSidecar {
    width: usize,
    height: usize,
    frames: usize,
    id_count: u32,
}

#[derive(Debug, Clone)]
enum RegionStorage {
    Memory(Vec<Vec<u32>>),
    Dir(PathBuf),
    Grid { block: usize, span: usize },
}

/// Per-frame region-id grids, held in memory, read lazily from a directory,
/// or generated on the fly for the regular fallback grid.
#[derive(Debug, Clone)]
pub struct RegionMaps {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub id_count: u32,
    storage: RegionStorage,
}

fn frame_file(dir: &Path, t: usize, ext: &str) -> PathBuf {
    dir.join(format!("{t:06}.{ext}"))
}

impl RegionMaps {
    pub fn from_frames(width: usize, height: usize, maps: Vec<Vec<u32>>) -> Result<Self> {
        for m in &maps {
            if m.len() != width * height {
                return Err(Error::DimensionMismatch {
                    expected: (width, height),
                    got: (m.len(), 1),
                });
            }
        }
        let id_count = maps.iter().flatten().max().map_or(0, |&m| m + 1);
        Ok(Self {
            width,
            height,
            frames: maps.len(),
            id_count,
            storage: RegionStorage::Memory(maps),
        })
    }

    pub fn frame(&self, t: usize) -> Result<Cow<'_, [u32]>> {
        if t >= self.frames {
            return Err(Error::MissingFrames(t));
        }
        match &self.storage {
            RegionStorage::Memory(m) => Ok(Cow::Borrowed(&m[t])),
            RegionStorage::Dir(dir) => {
                let bytes = fs::read(frame_file(dir, t, "bin"))?;
                if bytes.len() != self.width * self.height * 4 {
                    return Err(Error::Format(format!("region frame {t}: {} bytes", bytes.len())));
                }
                Ok(Cow::Owned(
                    bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
                ))
            }
            RegionStorage::Grid { block, span } => {
                let cols = self.width.div_ceil(*block);
                let rows = self.height.div_ceil(*block);
                let slab = t / span;
                let mut out = Vec::with_capacity(self.width * self.height);
                for y in 0..self.height {
                    for x in 0..self.width {
                        out.push(((slab * rows + y / block) * cols + x / block) as u32);
                    }
                }
                Ok(Cow::Owned(out))
            }
        }
    }

    /// Writes `regions.json` plus one `NNNNNN.bin` per frame.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let side = RegionSidecar {
            width: self.width,
            height: self.height,
            frames: self.frames,
            id_count: self.id_count,
        };
        fs::write(dir.join("regions.json"), serde_json::to_vec_pretty(&side)?)?;
        for t in 0..self.frames {
            let f = self.frame(t)?;
            let bytes: Vec<u8> = f.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(frame_file(dir, t, "bin"), bytes)?;
        }
        Ok(())
    }

    pub fn open_dir(dir: &Path) -> Result<Self> {
        let side: RegionSidecar = serde_json::from_slice(&fs::read(dir.join("regions.json"))?)?;
        for t in 0..side.frames {
            if !frame_file(dir, t, "bin").exists() {
                return Err(Error::MissingFrames(t));
            }
        }
        Ok(Self {
            width: side.width,
            height: side.height,
            frames: side.frames,
            id_count: side.id_count,
            storage: RegionStorage::Dir(dir.to_path_buf()),
        })
    }
}

/// Regular grid of `block x block x span` space-time boxes, one region each.
pub fn fallback_segmentation(g: &EquirectGeometry, frame_count: usize, block: usize, span: usize) -> RegionMaps {
    let block = block.max(1);
    let span = span.max(1);
    let cols = g.width.div_ceil(block);
    let rows = g.height.div_ceil(block);
    let slabs = frame_count.div_ceil(span);
    RegionMaps {
        width: g.width,
        height: g.height,
        frames: frame_count,
        id_count: (cols * rows * slabs) as u32,
        storage: RegionStorage::Grid { block, span },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ProbSidecar {
    width: usize,
    height: usize,
    classes: Vec<String>,
}

#[derive(Debug, Clone)]
enum ProbSource {
    Memory(Vec<f32>),
    File(PathBuf),
}

/// Per-frame class probabilities stored `[class][y][x]`. Frames without a map
/// inherit the nearest available one (earlier wins ties).
#[derive(Debug, Clone)]
pub struct ProbabilityMaps {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<String>,
    frames: BTreeMap<usize, ProbSource>,
}

impl ProbabilityMaps {
    pub fn new(width: usize, height: usize, classes: Vec<String>) -> Self {
        Self {
            width,
            height,
            classes,
            frames: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, frame: usize, probs: Vec<f32>) -> Result<()> {
        let want = self.classes.len() * self.width * self.height;
        if probs.len() != want {
            return Err(Error::DimensionMismatch {
                expected: (want, 1),
                got: (probs.len(), 1),
            });
        }
        self.frames.insert(frame, ProbSource::Memory(probs));
        Ok(())
    }

    pub fn available_frames(&self) -> Vec<usize> {
        self.frames.keys().copied().collect()
    }

    pub fn nearest_frame(&self, t: usize) -> Option<usize> {
        let before = self.frames.range(..=t).next_back().map(|(k, _)| *k);
        let after = self.frames.range(t..).next().map(|(k, _)| *k);
        match (before, after) {
            (Some(b), Some(a)) => Some(if t - b <= a - t { b } else { a }),
            (b, a) => b.or(a),
        }
    }

    pub fn frame(&self, t: usize) -> Result<Cow<'_, [f32]>> {
        let k = self.nearest_frame(t).ok_or(Error::MissingFrames(t))?;
        match &self.frames[&k] {
            ProbSource::Memory(v) => Ok(Cow::Borrowed(v)),
            ProbSource::File(p) => {
                let bytes = fs::read(p)?;
                let want = self.classes.len() * self.width * self.height;
                if bytes.len() != want * 4 {
                    return Err(Error::Format(format!("probability frame {k}: {} bytes", bytes.len())));
                }
                Ok(Cow::Owned(
                    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ))
            }
        }
    }

    /// Writes `classes.json` plus one `NNNNNN.f32` per available frame.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let side = ProbSidecar {
            width: self.width,
            height: self.height,
            classes: self.classes.clone(),
        };
        fs::write(dir.join("classes.json"), serde_json::to_vec_pretty(&side)?)?;
        for &k in self.frames.keys() {
            let f = self.frame(k)?;
            let bytes: Vec<u8> = f.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(frame_file(dir, k, "f32"), bytes)?;
        }
        Ok(())
    }

    pub fn open_dir(dir: &Path) -> Result<Self> {
        let side: ProbSidecar = serde_json::from_slice(&fs::read(dir.join("classes.json"))?)?;
        let mut frames = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("f32") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let t: usize = stem
                .parse()
                .map_err(|_| Error::Format(format!("unexpected probability file {}", path.display())))?;
            frames.insert(t, ProbSource::File(path));
        }
        Ok(Self {
            width: side.width,
            height: side.height,
            classes: side.classes,
            frames,
        })
    }
}

/// Histogram accumulator for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAccumulator {
    color: [u64; 3 * COLOR_BINS_PER_CHANNEL],
    mag: [u64; MAG_BINS],
    ori: [u64; ORI_BINS],
    pixels: u64,
}

impl Default for FeatureAccumulator {
    fn default() -> Self {
        Self {
            color: [0; 3 * COLOR_BINS_PER_CHANNEL],
            mag: [0; MAG_BINS],
            ori: [0; ORI_BINS],
            pixels: 0,
        }
    }
}

/// Magnitude bin: `[0, 0.25)`, fourteen log-spaced bins up to 32 px, overflow.
pub fn magnitude_bin(m: f64) -> usize {
    if m < 0.25 {
        0
    } else if m >= 32.0 {
        MAG_BINS - 1
    } else {
        (1 + (2.0 * (m / 0.25).log2()).floor() as usize).min(MAG_BINS - 2)
    }
}

/// Orientation bin over `[0, 360)` degrees.
pub fn orientation_bin(u: f64, v: f64) -> usize {
    let a = v.atan2(u).to_degrees().rem_euclid(360.0);
    ((a / (360.0 / ORI_BINS as f64)) as usize).min(ORI_BINS - 1)
}

pub fn color_bins(lab: [f32; 3]) -> [usize; 3] {
    let n = COLOR_BINS_PER_CHANNEL as f32;
    let l = ((lab[0] / 100.0 * n) as isize).clamp(0, n as isize - 1) as usize;
    let a = (((lab[1] + 128.0) / 256.0 * n) as isize).clamp(0, n as isize - 1) as usize;
    let b = (((lab[2] + 128.0) / 256.0 * n) as isize).clamp(0, n as isize - 1) as usize;
    [l, a, b]
}

fn unit_or_uniform(h: &[u64]) -> Vec<f64> {
    let n = h.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt();
    if n == 0.0 {
        vec![1.0 / (h.len() as f64).sqrt(); h.len()]
    } else {
        h.iter().map(|&c| c as f64 / n).collect()
    }
}

impl FeatureAccumulator {
    /// Adds one pixel. Orientation is only recorded for pixels that move at
    /// least a quarter pixel.
    pub fn add(&mut self, bins: [usize; 3], flow: (f64, f64)) {
        self.color[bins[0]] += 1;
        self.color[COLOR_BINS_PER_CHANNEL + bins[1]] += 1;
        self.color[2 * COLOR_BINS_PER_CHANNEL + bins[2]] += 1;
        let m = flow.0.hypot(flow.1);
        self.mag[magnitude_bin(m)] += 1;
        if m >= 0.25 {
            self.ori[orientation_bin(flow.0, flow.1)] += 1;
        }
        self.pixels += 1;
    }

    pub fn merge(&mut self, o: &FeatureAccumulator) {
        self.color.iter_mut().zip(&o.color).for_each(|(a, b)| *a += b);
        self.mag.iter_mut().zip(&o.mag).for_each(|(a, b)| *a += b);
        self.ori.iter_mut().zip(&o.ori).for_each(|(a, b)| *a += b);
        self.pixels += o.pixels;
    }

    pub fn pixels(&self) -> u64 {
        self.pixels
    }

    /// Concatenated unit-norm histograms: color (L, a, b), magnitude,
    /// orientation. A region without motion gets a uniform orientation part.
    pub fn finish(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(FEATURE_LEN);
        out.extend(unit_or_uniform(&self.color[..COLOR_BINS_PER_CHANNEL]));
        out.extend(unit_or_uniform(&self.color[COLOR_BINS_PER_CHANNEL..2 * COLOR_BINS_PER_CHANNEL]));
        out.extend(unit_or_uniform(&self.color[2 * COLOR_BINS_PER_CHANNEL..]));
        out.extend(unit_or_uniform(&self.mag));
        out.extend(unit_or_uniform(&self.ori));
        out
    }
}

/// Lab histogram bins for every pixel of a frame.
pub fn frame_color_bins(frame: &RgbImage) -> Vec<[usize; 3]> {
    let w = frame.width;
    let rows = par::map_range(frame.height, |y| {
        (0..w).map(|x| color_bins(rgb_to_lab(frame.get(x, y)))).collect::<Vec<_>>()
    });
    rows.into_iter().flatten().collect()
}

fn flow_at(flow: Option<&FlowField>, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
    match flow {
        None => (0.0, 0.0),
        Some(f) if f.width == w && f.height == h => f.get(x, y),
        Some(f) => {
            let fx = (x * f.width / w).min(f.width - 1);
            let fy = (y * f.height / h).min(f.height - 1);
            let s = w as f64 / f.width as f64;
            let (u, v) = f.get(fx, fy);
            (u * s, v * s)
        }
    }
}

/// Frame and flow providers used by region analysis.
pub trait FrameSource: Sync {
    fn frame(&self, t: usize) -> Result<RgbImage>;
    /// Flow from frame `t` to `t + 1`, if any.
    fn flow(&self, t: usize) -> Result<Option<FlowField>>;
}

/// Features of one region (the union of its pixels over all frames).
pub fn tsp_features(region_id: u32, maps: &RegionMaps, source: &dyn FrameSource) -> Result<Vec<f64>> {
    let mut acc = FeatureAccumulator::default();
    for t in 0..maps.frames {
        let ids = maps.frame(t)?;
        if !ids.iter().any(|&i| i == region_id) {
            continue;
        }
        let frame = source.frame(t)?;
        frame.check_dims(maps.width, maps.height)?;
        let flow = source.flow(t)?;
        for (i, _) in ids.iter().enumerate().filter(|(_, &r)| r == region_id) {
            let (x, y) = (i % maps.width, i / maps.width);
            let bins = color_bins(rgb_to_lab(frame.get(x, y)));
            acc.add(bins, flow_at(flow.as_ref(), x, y, maps.width, maps.height));
        }
    }
    if acc.pixels == 0 {
        return Err(Error::EmptyRegion(region_id));
    }
    Ok(acc.finish())
}

/// Per-frame footprint of a region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameFootprint {
    pub frame: usize,
    pub area: f64,
    pub pose: SphericalDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TspRegion {
    pub tsp_id: u32,
    pub start_frame: usize,
    pub end_frame: usize,
    /// One entry per covered frame, in frame order.
    pub footprints: Vec<FrameFootprint>,
    /// Center of mass over the whole support, normalized to `[0, 1]^2`.
    pub center: [f64; 2],
    pub pixel_count: u64,
    pub features: Vec<f64>,
    pub saliency: f64,
    pub label: Option<usize>,
}

impl TspRegion {
    pub fn midpoint(&self) -> f64 {
        (self.start_frame + self.end_frame) as f64 / 2.0
    }
}

#[derive(Default, Clone)]
struct FramePoseSums {
    count: u64,
    cos: f64,
    sin: f64,
    rel: f64,
    phi: f64,
}

#[derive(Default, Clone)]
struct RegionAcc {
    features: FeatureAccumulator,
    sum_x: f64,
    sum_y: f64,
    frames: BTreeMap<usize, (u64, SphericalDirection)>,
}

/// Circular reference longitude of a set of sums, 0 when undefined.
fn circular_center(cos: f64, sin: f64) -> f64 {
    if cos.hypot(sin) < 1e-12 {
        0.0
    } else {
        sin.atan2(cos).to_degrees()
    }
}

fn frame_poses(ids: &[u32], g: &EquirectGeometry) -> HashMap<u32, (u64, SphericalDirection)> {
    let (w, h) = (g.width, g.height);
    let thetas: Vec<f64> = (0..w).map(|x| (x as f64 + 0.5) / w as f64 * 360.0 - 180.0).collect();
    let trig: Vec<(f64, f64)> = thetas.iter().map(|t| t.to_radians().sin_cos()).collect();
    let mut sums: HashMap<u32, FramePoseSums> = HashMap::new();
    for y in 0..h {
        let phi = 90.0 - (y as f64 + 0.5) / h as f64 * 180.0;
        for x in 0..w {
            let s = sums.entry(ids[y * w + x]).or_default();
            s.count += 1;
            s.sin += trig[x].0;
            s.cos += trig[x].1;
            s.phi += phi;
        }
    }
    let centers: HashMap<u32, f64> = sums.iter().map(|(k, s)| (*k, circular_center(s.cos, s.sin))).collect();
    for y in 0..h {
        for x in 0..w {
            let id = ids[y * w + x];
            let c = centers[&id];
            sums.get_mut(&id).unwrap().rel += wrap_degrees(thetas[x] - c);
        }
    }
    sums.into_iter()
        .map(|(k, s)| {
            let n = s.count as f64;
            let theta = wrap_degrees(s.rel / n + centers[&k]);
            (k, (s.count, SphericalDirection::new(theta, s.phi / n)))
        })
        .collect()
}

/// Mean direction of a pixel set: latitude averaged directly, longitude
/// averaged after unwrapping around the circular mean.
pub fn roi_pose(pixels: &[(usize, usize)], g: &EquirectGeometry) -> Result<SphericalDirection> {
    if pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    let dirs: Vec<SphericalDirection> = pixels.iter().map(|&(x, y)| g.pixel_to_dir(x, y)).collect::<Result<_>>()?;
    let (c, s) = dirs.iter().fold((0.0, 0.0), |(c, s), d| {
        let (si, co) = d.theta.to_radians().sin_cos();
        (c + co, s + si)
    });
    let center = circular_center(c, s);
    let n = dirs.len() as f64;
    let rel = dirs.iter().map(|d| wrap_degrees(d.theta - center)).sum::<f64>() / n;
    let phi = dirs.iter().map(|d| d.phi).sum::<f64>() / n;
    Ok(SphericalDirection::new(wrap_degrees(rel + center), phi))
}

/// Single pass over all frames collecting features, per-frame poses and
/// areas, and centers of mass for every region. Saliency and labels are left
/// at their defaults.
pub fn analyze_regions(maps: &RegionMaps, source: &dyn FrameSource, g: &EquirectGeometry) -> Result<Vec<TspRegion>> {
    if maps.width != g.width || maps.height != g.height {
        return Err(Error::DimensionMismatch {
            expected: (g.width, g.height),
            got: (maps.width, maps.height),
        });
    }
    let (w, h) = (g.width, g.height);
    let per_frame = |t: usize| -> Result<HashMap<u32, RegionAcc>> {
        let ids = maps.frame(t)?;
        let frame = source.frame(t)?;
        frame.check_dims(w, h)?;
        let flow = source.flow(t)?;
        let bins = frame_color_bins(&frame);
        let mut accs: HashMap<u32, RegionAcc> = HashMap::new();
        for y in 0..h {
            for x in 0..w {
                let a = accs.entry(ids[y * w + x]).or_default();
                a.features.add(bins[y * w + x], flow_at(flow.as_ref(), x, y, w, h));
                a.sum_x += (x as f64 + 0.5) / w as f64;
                a.sum_y += (y as f64 + 0.5) / h as f64;
            }
        }
        for (id, fp) in frame_poses(&ids, g) {
            accs.get_mut(&id).unwrap().frames.insert(t, fp);
        }
        Ok(accs)
    };
    let frames = par::map_range(maps.frames, per_frame);
    let mut all: BTreeMap<u32, RegionAcc> = BTreeMap::new();
    for f in frames {
        for (id, a) in f? {
            let e = all.entry(id).or_default();
            e.features.merge(&a.features);
            e.sum_x += a.sum_x;
            e.sum_y += a.sum_y;
            e.frames.extend(a.frames);
        }
    }
    let mut out = Vec::with_capacity(all.len());
    for (id, a) in all {
        let start = *a.frames.keys().next().unwrap();
        let end = *a.frames.keys().next_back().unwrap();
        if end + 1 - start != a.frames.len() {
            log::warn!("region {id} has temporal gaps; keeping its covered frames only");
        }
        let n = a.features.pixels() as f64;
        out.push(TspRegion {
            tsp_id: id,
            start_frame: start,
            end_frame: end,
            footprints: a
                .frames
                .iter()
                .map(|(&frame, &(count, pose))| FrameFootprint {
                    frame,
                    area: count as f64,
                    pose,
                })
                .collect(),
            center: [a.sum_x / n, a.sum_y / n],
            pixel_count: a.features.pixels(),
            features: a.features.finish(),
            saliency: 0.0,
            label: None,
        });
    }
    Ok(out)
}

/// What the contrast measure needs from a region.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyInput<'a> {
    pub size: f64,
    pub center: [f64; 2],
    pub features: &'a [f64],
}

fn contrast_term(c: &SaliencyInput, i: &SaliencyInput, sigma_s: f64) -> f64 {
    let dm = (i.center[0] - c.center[0]).hypot(i.center[1] - c.center[1]);
    let dx: f64 = i.features.iter().zip(c.features).map(|(a, b)| (a - b) * (a - b)).sum();
    c.size * (-dm / sigma_s).exp() * dx
}

/// Feature contrast of every region against all others in the same window:
/// `s_c = sum_{i != c} |r_c| exp(-|m_i - m_c| / sigma_s) |x_i - x_c|^2`.
pub fn tsp_saliency(regions: &[SaliencyInput], sigma_s: f64) -> Vec<f64> {
    par::map_range(regions.len(), |c| {
        let rc = &regions[c];
        let mut s = 0.0;
        for (i, ri) in regions.iter().enumerate() {
            if i != c {
                s += contrast_term(rc, ri, sigma_s);
            }
        }
        s
    })
}

/// Saliency of each region over the regions overlapping a `window`-frame span
/// centered at its temporal midpoint.
pub fn windowed_saliency(regions: &mut [TspRegion], window: usize, sigma_s: f64) {
    let half = window as f64 / 2.0;
    let inputs: Vec<SaliencyInput> = regions
        .iter()
        .map(|r| SaliencyInput {
            size: r.pixel_count as f64,
            center: r.center,
            features: &r.features,
        })
        .collect();
    let spans: Vec<(f64, f64)> = regions.iter().map(|r| (r.start_frame as f64, r.end_frame as f64 + 1.0)).collect();
    let mids: Vec<f64> = regions.iter().map(|r| r.midpoint() + 0.5).collect();
    let scores = par::map_range(regions.len(), |c| {
        let (lo, hi) = (mids[c] - half, mids[c] + half);
        let mut s = 0.0;
        for (i, ri) in inputs.iter().enumerate() {
            if i != c && spans[i].0 < hi && spans[i].1 > lo {
                s += contrast_term(&inputs[c], ri, sigma_s);
            }
        }
        s
    });
    for (r, s) in regions.iter_mut().zip(scores) {
        r.saliency = s;
    }
}

/// Mean class probability over every pixel of every region, one frame at a
/// time; returns `sums[region][class]` and pixel counts.
fn class_sums(maps: &RegionMaps, probs: &ProbabilityMaps, region_ids: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<u64>)> {
    if probs.available_frames().is_empty() {
        return Err(Error::MissingFrames(0));
    }
    if probs.width != maps.width || probs.height != maps.height {
        return Err(Error::DimensionMismatch {
            expected: (maps.width, maps.height),
            got: (probs.width, probs.height),
        });
    }
    let index: HashMap<u32, usize> = region_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let nc = probs.classes.len();
    let npx = maps.width * maps.height;
    let mut sums = vec![vec![0.0f64; nc]; region_ids.len()];
    let mut counts = vec![0u64; region_ids.len()];
    for t in 0..maps.frames {
        let ids = maps.frame(t)?;
        if !ids.iter().any(|r| index.contains_key(r)) {
            continue;
        }
        let p = probs.frame(t)?;
        for (px, r) in ids.iter().enumerate() {
            if let Some(&k) = index.get(r) {
                counts[k] += 1;
                for (c, s) in sums[k].iter_mut().enumerate() {
                    *s += p[c * npx + px] as f64;
                }
            }
        }
    }
    Ok((sums, counts))
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Class with the highest mean probability over the region's support; ties
/// go to the lowest class index.
pub fn tsp_semantic_label(region_id: u32, maps: &RegionMaps, probs: &ProbabilityMaps) -> Result<usize> {
    let (sums, counts) = class_sums(maps, probs, &[region_id])?;
    if counts[0] == 0 {
        return Err(Error::EmptyRegion(region_id));
    }
    Ok(argmax_lowest(&sums[0]))
}

/// Labels every region in one pass over the maps.
pub fn label_regions(regions: &mut [TspRegion], maps: &RegionMaps, probs: &ProbabilityMaps) -> Result<()> {
    let ids: Vec<u32> = regions.iter().map(|r| r.tsp_id).collect();
    let (sums, _) = class_sums(maps, probs, &ids)?;
    for (r, s) in regions.iter_mut().zip(sums) {
        r.label = Some(argmax_lowest(&s));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTrack {
    pub tsp_id: u32,
    pub start_frame: usize,
    pub end_frame: usize,
    pub poses: Vec<SphericalDirection>,
    pub areas: Vec<f64>,
    pub saliency: f64,
    pub label: Option<usize>,
}

impl RoiTrack {
    pub fn pose_at(&self, t: usize) -> Option<SphericalDirection> {
        t.checked_sub(self.start_frame).and_then(|i| self.poses.get(i).copied())
    }

    pub fn area_at(&self, t: usize) -> Option<f64> {
        t.checked_sub(self.start_frame).and_then(|i| self.areas.get(i).copied())
    }
}

/// ROI track for a region; frames missing inside its span repeat the
/// previous footprint.
pub fn roi_track(region: &TspRegion) -> RoiTrack {
    let mut poses = Vec::with_capacity(region.end_frame + 1 - region.start_frame);
    let mut areas = Vec::with_capacity(poses.capacity());
    let mut it = region.footprints.iter().peekable();
    let mut last = region.footprints[0];
    for t in region.start_frame..=region.end_frame {
        if let Some(f) = it.peek() {
            if f.frame == t {
                last = **f;
                it.next();
            }
        }
        poses.push(last.pose);
        areas.push(last.area);
    }
    RoiTrack {
        tsp_id: region.tsp_id,
        start_frame: region.start_frame,
        end_frame: region.end_frame,
        poses,
        areas,
        saliency: region.saliency,
        label: region.label,
    }
}

/// Label with the highest summed saliency; ties go to the lowest id.
pub fn default_label(regions: &[TspRegion]) -> Option<usize> {
    let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
    for r in regions {
        if let Some(l) = r.label {
            *totals.entry(l).or_default() += r.saliency;
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (l, s) in totals {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((l, s));
        }
    }
    best.map(|(l, _)| l)
}

/// Top-`k` regions by saliency per `subsequence`-frame chunk (regions belong
/// to the chunk holding their temporal midpoint), restricted to `chosen`
/// labels, or to the default label when `chosen` is `None`. Unlabeled input
/// with no explicit choice is ranked on saliency alone. Output is sorted by
/// saliency, highest first.
pub fn select_rois(regions: &[TspRegion], chosen: Option<&[usize]>, subsequence: usize, k: usize) -> Vec<RoiTrack> {
    let allowed: Option<Vec<usize>> = match chosen {
        Some(c) => Some(c.to_vec()),
        None => default_label(regions).map(|l| vec![l]),
    };
    let eligible = |r: &&TspRegion| match &allowed {
        Some(a) => r.label.is_some_and(|l| a.contains(&l)),
        None => true,
    };
    let sub = subsequence.max(1) as f64;
    let mut chunks: BTreeMap<usize, Vec<&TspRegion>> = BTreeMap::new();
    for r in regions.iter().filter(eligible) {
        chunks.entry((r.midpoint() / sub).floor() as usize).or_default().push(r);
    }
    let mut picked: Vec<&TspRegion> = Vec::new();
    for (_, mut c) in chunks {
        c.sort_by(|a, b| b.saliency.total_cmp(&a.saliency).then(a.tsp_id.cmp(&b.tsp_id)));
        picked.extend(c.into_iter().take(k));
    }
    picked.sort_by(|a, b| b.saliency.total_cmp(&a.saliency).then(a.tsp_id.cmp(&b.tsp_id)));
    picked.into_iter().map(roi_track).collect()
}

pub fn write_rois_json(rois: &[RoiTrack], path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(rois)?)?;
    Ok(())
}

pub fn read_rois_json(path: &Path) -> Result<Vec<RoiTrack>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
