//! Sparse corner detection and normalized-cross-correlation patch tracking.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::par;
use crate::raster::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// A correspondence between frame `a` and frame `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub track_id: u64,
    pub a: Point2,
    pub b: Point2,
}

impl Match {
    pub fn new(a: Point2, b: Point2) -> Self {
        Self { track_id: 0, a, b }
    }

    pub fn displacement(&self) -> (f64, f64) {
        (self.b.x - self.a.x, self.b.y - self.a.y)
    }
}

/// Positions of one feature over consecutive frames, starting at `start_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub track_id: u64,
    pub start_frame: usize,
    pub points: Vec<Point2>,
}

impl FeatureTrack {
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.points.len() - 1
    }

    pub fn point_at(&self, frame: usize) -> Option<Point2> {
        frame.checked_sub(self.start_frame).and_then(|i| self.points.get(i).copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    pub patch_radius: usize,
    pub search_radius: i64,
    pub ncc_threshold: f64,
    pub min_spacing: f64,
    pub max_corners: usize,
    pub corner_quality: f64,
    /// Frames are equirectangular; horizontal search wraps around the seam.
    pub panoramic: bool,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            patch_radius: 7,
            search_radius: 16,
            ncc_threshold: 0.8,
            min_spacing: 8.0,
            max_corners: 200,
            corner_quality: 0.01,
            panoramic: false,
        }
    }
}

const HARRIS_K: f32 = 0.04;

fn harris_response(image: &GrayImage) -> Vec<f32> {
    let (w, h) = (image.width, image.height);
    let mut ixx = vec![0.0f32; w * h];
    let mut iyy = vec![0.0f32; w * h];
    let mut ixy = vec![0.0f32; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let p = |dx: i64, dy: i64| image.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let box_sum = |src: &[f32]| -> Vec<f32> {
        // separable 5-tap binomial window
        const K: [f32; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 2..w.saturating_sub(2) {
                tmp[y * w + x] = (0..5).map(|k| K[k] * src[y * w + x + k - 2]).sum();
            }
        }
        let mut out = vec![0.0f32; w * h];
        for y in 2..h.saturating_sub(2) {
            for x in 0..w {
                out[y * w + x] = (0..5).map(|k| K[k] * tmp[(y + k - 2) * w + x]).sum();
            }
        }
        out
    };
    let (sxx, syy, sxy) = (box_sum(&ixx), box_sum(&iyy), box_sum(&ixy));
    (0..w * h)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - HARRIS_K * tr * tr
        })
        .collect()
}

/// Harris corners with 3x3 non-maximum suppression and a minimum spacing of
/// 8 px, strongest first.
pub fn detect_corners(image: &GrayImage, max_count: usize, quality: f64) -> Vec<Point2> {
    detect_corners_spaced(image, max_count, quality, 8.0, &[])
}

/// [`detect_corners`] with explicit spacing; candidates closer than `spacing`
/// to any point of `existing` are skipped.
pub fn detect_corners_spaced(image: &GrayImage, max_count: usize, quality: f64, spacing: f64, existing: &[Point2]) -> Vec<Point2> {
    let (w, h) = (image.width, image.height);
    let margin = 8usize;
    if max_count == 0 || w <= 2 * margin || h <= 2 * margin {
        return Vec::new();
    }
    let r = harris_response(image);
    let rmax = r.iter().cloned().fold(0.0f32, f32::max);
    if rmax <= 1e-6 {
        return Vec::new();
    }
    let thresh = (quality as f32) * rmax;
    let mut cands = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let v = r[y * w + x];
            if v <= thresh || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = r[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
                    // plateau ties resolve to the first pixel in raster order
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > v || (earlier && n == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cands.push((v, Point2::new(x as f64, y as f64)));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.y.total_cmp(&b.1.y)).then(a.1.x.total_cmp(&b.1.x)));
    let mut out: Vec<Point2> = Vec::new();
    for (_, p) in cands {
        if out.len() >= max_count {
            break;
        }
        if out.iter().chain(existing).all(|q| q.dist(p) >= spacing) {
            out.push(p);
        }
    }
    out
}

struct Patch {
    values: Vec<f32>,
    mean: f32,
    norm: f32,
}

fn extract_patch(img: &GrayImage, cx: i64, cy: i64, r: i64, wrap: bool) -> Option<Patch> {
    let (w, h) = (img.width as i64, img.height as i64);
    if cy - r < 0 || cy + r >= h {
        return None;
    }
    if !wrap && (cx - r < 0 || cx + r >= w) {
        return None;
    }
    let mut values = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            values.push(img.get(x.rem_euclid(w) as usize, y as usize));
        }
    }
    let mean = values.iter().sum::<f32>() / values.len() as f32;
    let norm = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>().sqrt();
    Some(Patch { values, mean, norm })
}

fn ncc(a: &Patch, b: &Patch) -> f64 {
    if a.norm < 1e-3 || b.norm < 1e-3 {
        return -1.0;
    }
    let s: f32 = a.values.iter().zip(&b.values).map(|(x, y)| (x - a.mean) * (y - b.mean)).sum();
    (s / (a.norm * b.norm)) as f64
}

fn parabola_offset(left: f64, mid: f64, right: f64) -> f64 {
    let den = left - 2.0 * mid + right;
    if den.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (left - right) / den).clamp(-0.5, 0.5)
    }
}

fn track_point(a: &GrayImage, b: &GrayImage, p: Point2, params: &TrackerParams) -> Option<Point2> {
    let r = params.patch_radius as i64;
    let s = params.search_radius;
    let wrap = params.panoramic;
    let cx = p.x.round() as i64;
    let cy = p.y.round() as i64;
    let pa = extract_patch(a, cx, cy, r, wrap)?;
    if pa.norm < 1e-3 {
        return None;
    }
    let side = (2 * s + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; side * side];
    let mut best = (f64::NEG_INFINITY, 0i64, 0i64);
    for dy in -s..=s {
        for dx in -s..=s {
            if let Some(pb) = extract_patch(b, cx + dx, cy + dy, r, wrap) {
                let v = ncc(&pa, &pb);
                scores[((dy + s) as usize) * side + (dx + s) as usize] = v;
                // prefer the smallest displacement among exact ties
                let better = v > best.0 || (v == best.0 && dx * dx + dy * dy < best.1 * best.1 + best.2 * best.2);
                if better {
                    best = (v, dx, dy);
                }
            }
        }
    }
    if best.0 < params.ncc_threshold {
        return None;
    }
    let (_, dx, dy) = best;
    let exact = best.0 >= 1.0 - 1e-6;
    let at = |x: i64, y: i64| -> Option<f64> {
        if x.abs() > s || y.abs() > s {
            return None;
        }
        let v = scores[((y + s) as usize) * side + (x + s) as usize];
        v.is_finite().then_some(v)
    };
    let ox = match (at(dx - 1, dy), at(dx + 1, dy)) {
        (Some(l), Some(rr)) if !exact => parabola_offset(l, best.0, rr),
        _ => 0.0,
    };
    let oy = match (at(dx, dy - 1), at(dx, dy + 1)) {
        (Some(u), Some(d)) if !exact => parabola_offset(u, best.0, d),
        _ => 0.0,
    };
    let mut x = p.x + dx as f64 + ox;
    let y = p.y + dy as f64 + oy;
    let w = b.width as f64;
    if wrap {
        x = x.rem_euclid(w);
    } else if x < 0.0 || x > w - 1.0 {
        return None;
    }
    if y < 0.0 || y > b.height as f64 - 1.0 {
        return None;
    }
    Some(Point2::new(x, y))
}

/// Matches `points` from `frame_a` into `frame_b` by exhaustive NCC search.
/// Points whose best score falls under the threshold are dropped.
pub fn track_features(frame_a: &GrayImage, frame_b: &GrayImage, points: &[Point2], params: &TrackerParams) -> Result<Vec<Match>> {
    if frame_a.width != frame_b.width || frame_a.height != frame_b.height {
        return Err(Error::DimensionMismatch {
            expected: (frame_a.width, frame_a.height),
            got: (frame_b.width, frame_b.height),
        });
    }
    let found = par::map_slice(points, |&p| track_point(frame_a, frame_b, p, params).map(|q| (p, q)));
    Ok(found
        .into_iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|(a, b)| Match { track_id: i as u64, a, b }))
        .collect())
}

/// Chains per-pair matches (`pairs[t]` links frame `t` to `t + 1`) into tracks
/// by `track_id`. A track ends at the first pair where its id is missing; an id
/// that reappears later starts a new track.
pub fn build_tracks(pairs: &[Vec<Match>]) -> Vec<FeatureTrack> {
    let mut tracks: Vec<FeatureTrack> = Vec::new();
    let mut active: HashMap<u64, usize> = HashMap::new();
    for (t, matches) in pairs.iter().enumerate() {
        let mut next: HashMap<u64, usize> = HashMap::with_capacity(matches.len());
        for m in matches {
            if next.contains_key(&m.track_id) {
                continue;
            }
            match active.get(&m.track_id) {
                Some(&idx) if tracks[idx].end_frame() == t => {
                    tracks[idx].points.push(m.b);
                    next.insert(m.track_id, idx);
                }
                _ => {
                    tracks.push(FeatureTrack {
                        track_id: 0,
                        start_frame: t,
                        points: vec![m.a, m.b],
                    });
                    next.insert(m.track_id, tracks.len() - 1);
                }
            }
        }
        active = next;
    }
    for (i, tr) in tracks.iter_mut().enumerate() {
        tr.track_id = i as u64;
    }
    tracks
}

/// Detects and tracks features through a frame sequence. Lost tracks are
/// replaced by fresh detections away from surviving points.
pub fn track_sequence(frames: &[GrayImage], params: &TrackerParams) -> Result<Vec<FeatureTrack>> {
    if frames.len() < 2 {
        return Ok(Vec::new());
    }
    let mut next_id = 0u64;
    let mut current: Vec<(u64, Point2)> =
        detect_corners_spaced(&frames[0], params.max_corners, params.corner_quality, params.min_spacing, &[])
            .into_iter()
            .map(|p| {
                next_id += 1;
                (next_id - 1, p)
            })
            .collect();
    let mut pairs = Vec::with_capacity(frames.len() - 1);
    for t in 0..frames.len() - 1 {
        let pts: Vec<Point2> = current.iter().map(|c| c.1).collect();
        let matches: Vec<Match> = track_features(&frames[t], &frames[t + 1], &pts, params)?
            .into_iter()
            .map(|m| Match {
                track_id: current[m.track_id as usize].0,
                ..m
            })
            .collect();
        current = matches.iter().map(|m| (m.track_id, m.b)).collect();
        if current.len() < params.max_corners {
            let existing: Vec<Point2> = current.iter().map(|c| c.1).collect();
            let fresh = detect_corners_spaced(
                &frames[t + 1],
                params.max_corners - current.len(),
                params.corner_quality,
                params.min_spacing,
                &existing,
            );
            for p in fresh {
                current.push((next_id, p));
                next_id += 1;
            }
        }
        pairs.push(matches);
    }
    Ok(build_tracks(&pairs))
}

/// Writes tracks as `track_id,frame,x,y` rows.
pub fn write_tracks_csv<W: Write>(tracks: &[FeatureTrack], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["track_id", "frame", "x", "y"])?;
    for tr in tracks {
        for (k, p) in tr.points.iter().enumerate() {
            w.write_record([
                tr.track_id.to_string(),
                (tr.start_frame + k).to_string(),
                format!("{:.6}", p.x),
                format!("{:.6}", p.y),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `track_id,frame,x,y` rows. Rows of a track may come in any order but
/// must cover consecutive frames without gaps.
pub fn read_tracks_csv<R: Read>(input: R) -> Result<Vec<FeatureTrack>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["track_id", "frame", "x", "y"] {
        return Err(Error::Format(format!("unexpected track header {headers:?}")));
    }
    let mut rows: HashMap<u64, Vec<(usize, Point2)>> = HashMap::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<&str> { rec.get(i).ok_or_else(|| Error::Format("short row".into())) };
        let id: u64 = parse(0)?.parse().map_err(|_| Error::Format("bad track_id".into()))?;
        let frame: usize = parse(1)?.parse().map_err(|_| Error::Format("bad frame".into()))?;
        let x: f64 = parse(2)?.parse().map_err(|_| Error::Format("bad x".into()))?;
        let y: f64 = parse(3)?.parse().map_err(|_| Error::Format("bad y".into()))?;
        rows.entry(id).or_default().push((frame, Point2::new(x, y)));
    }
    let mut ids: Vec<u64> = rows.keys().copied().collect();
    ids.sort_unstable();
    let mut tracks = Vec::with_capacity(ids.len());
    for id in ids {
        let mut pts = rows.remove(&id).unwrap_or_default();
        pts.sort_by_key(|p| p.0);
        let start = pts[0].0;
        if pts.iter().enumerate().any(|(k, p)| p.0 != start + k) {
            return Err(Error::Format(format!("track {id} has a frame gap")));
        }
        tracks.push(FeatureTrack {
            track_id: id,
            start_frame: start,
            points: pts.into_iter().map(|p| p.1).collect(),
        });
    }
    Ok(tracks)
}
