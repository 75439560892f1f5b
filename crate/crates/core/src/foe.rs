//! Focus-of-expansion estimation by great-circle Hough voting over optical
//! flow on the equirectangular sphere.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_1_PI;
use std::io::{Read, Write};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::geom::{gaussian_filter, unwrap_sequence, wrap_degrees, EquirectGeometry, SphericalDirection, Vec3};
use crate::par;

const FLO_MAGIC: f32 = 202021.25;

/// Dense per-pixel displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        let mut out = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                out.u[y * width + x] = a;
                out.v[y * width + x] = b;
            }
        }
        out
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i] as f64, self.v[i] as f64)
    }

    pub fn negated(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|a| -a).collect(),
            v: self.v.iter().map(|a| -a).collect(),
        }
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|a| a * s).collect(),
            v: self.v.iter().map(|a| a * s).collect(),
        }
    }

    /// Middlebury `.flo`: magic, i32 width, i32 height, interleaved f32 `u, v`,
    /// all little-endian.
    pub fn write_flo<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.u.len() * 8);
        buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        buf.extend_from_slice(&(self.width as i32).to_le_bytes());
        buf.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (a, b) in self.u.iter().zip(&self.v) {
            buf.extend_from_slice(&a.to_le_bytes());
            buf.extend_from_slice(&b.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a `.flo` stream. Middlebury "unknown" entries (magnitude above
    /// 1e9 or non-finite) are read as zero flow.
    pub fn read_flo<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 12 {
            return Err(Error::Format("truncated .flo header".into()));
        }
        let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let i32_at = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if f32_at(0) != FLO_MAGIC {
            return Err(Error::Format("bad .flo magic".into()));
        }
        let (w, h) = (i32_at(4), i32_at(8));
        if w <= 0 || h <= 0 {
            return Err(Error::Format(format!("bad .flo size {w}x{h}")));
        }
        let (w, h) = (w as usize, h as usize);
        if bytes.len() != 12 + w * h * 8 {
            return Err(Error::Format(format!(
                "expected {} bytes of flow, found {}",
                w * h * 8,
                bytes.len() - 12
            )));
        }
        let clean = |x: f32| if x.is_finite() && x.abs() <= 1e9 { x } else { 0.0 };
        let mut out = Self::zeros(w, h);
        for i in 0..w * h {
            out.u[i] = clean(f32_at(12 + 8 * i));
            out.v[i] = clean(f32_at(16 + 8 * i));
        }
        Ok(out)
    }
}

/// How the great circle of a flow vector is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CircleConstruction {
    /// Circle through `p` tangent to the flow vector (limit of the chord as
    /// the displacement shrinks). Depends only on the flow direction.
    #[default]
    Tangent,
    /// Circle through the lifts of `p` and `p + v`.
    Chord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoeParams {
    pub steps: usize,
    pub stride: usize,
    pub flow_min: f64,
    pub downscale: usize,
    /// Side of the square neighborhood used to tell FOE from FOC.
    pub neighborhood: usize,
    /// Half-size in full-resolution pixels of the refinement window.
    pub refine_radius: usize,
    pub min_confidence: f64,
    pub construction: CircleConstruction,
}

impl Default for FoeParams {
    fn default() -> Self {
        Self {
            steps: 720,
            stride: 4,
            flow_min: 0.5,
            downscale: 4,
            neighborhood: 21,
            refine_radius: 10,
            min_confidence: 0.01,
            construction: CircleConstruction::Tangent,
        }
    }
}

/// A great circle as `cos(a) b1 + sin(a) b2` with orthonormal `b1, b2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreatCircle {
    pub b1: Vec3,
    pub b2: Vec3,
}

impl GreatCircle {
    pub fn point(&self, c: f64, s: f64) -> Vec3 {
        self.b1 * c + self.b2 * s
    }

    pub fn normal(&self) -> Vec3 {
        self.b1.cross(self.b2)
    }
}

fn flow_gate(v: (f64, f64), flow_min: f64) -> Result<()> {
    let m = v.0.hypot(v.1);
    if !(m > flow_min) {
        return Err(Error::FlowTooSmall(m));
    }
    Ok(())
}

/// Circle through the lifts of `p1` and `p1 + v1`: `b1 = z1`, `b2` the
/// normalized component of `z2` orthogonal to `z1`.
pub fn chord_circle(p1: (f64, f64), v1: (f64, f64), g: &EquirectGeometry, flow_min: f64) -> Result<GreatCircle> {
    flow_gate(v1, flow_min)?;
    let z1 = g.pixel_to_vec(p1.0, p1.1);
    let z2 = g.pixel_to_vec(p1.0 + v1.0, p1.1 + v1.1);
    let perp = z2 - z1 * z1.dot(z2);
    let n = perp.norm();
    if n < 1e-12 || z1.cross(z2).norm() < 1e-12 {
        return Err(Error::DegenerateFlow);
    }
    Ok(GreatCircle {
        b1: z1,
        b2: perp * (1.0 / n),
    })
}

/// Circle through the lift of `p1` whose tangent there is the image of `v1`
/// under the equirectangular Jacobian.
pub fn tangent_circle(p1: (f64, f64), v1: (f64, f64), g: &EquirectGeometry, flow_min: f64) -> Result<GreatCircle> {
    flow_gate(v1, flow_min)?;
    let d = g.continuous_to_dir(p1.0, p1.1);
    let (st, ct) = d.theta.to_radians().sin_cos();
    let (sp, cp) = d.phi.to_radians().sin_cos();
    let z1 = Vec3::new(cp * st, sp, cp * ct);
    let dth = (360.0 / g.width as f64).to_radians() * v1.0;
    let dph = -(180.0 / g.height as f64).to_radians() * v1.1;
    let t = Vec3::new(cp * ct, 0.0, -cp * st) * dth + Vec3::new(-sp * st, cp, -sp * ct) * dph;
    let n = t.norm();
    if !(n > 1e-12) {
        return Err(Error::DegenerateFlow);
    }
    Ok(GreatCircle { b1: z1, b2: t * (1.0 / n) })
}

fn circle_for(p1: (f64, f64), v1: (f64, f64), g: &EquirectGeometry, params: &FoeParams) -> Result<GreatCircle> {
    match params.construction {
        CircleConstruction::Tangent => tangent_circle(p1, v1, g, params.flow_min),
        CircleConstruction::Chord => chord_circle(p1, v1, g, params.flow_min),
    }
}

/// `(cos, sin)` of `steps` uniform angles over `[0, 360)`, built so that
/// index `steps - k` is the exact mirror of `k`. Traversing a circle with a
/// negated `b2` then visits the same points in reverse order.
fn angle_table(steps: usize) -> Vec<(f64, f64)> {
    let mut t = vec![(1.0, 0.0); steps];
    for k in 1..=steps / 2 {
        let a = std::f64::consts::TAU * k as f64 / steps as f64;
        let (s, c) = a.sin_cos();
        t[k] = (c, s);
        t[steps - k] = (c, -s);
    }
    t
}

/// Samples the great circle of flow vector `v1` at pixel `p1` (literal chord
/// construction) at `steps` uniform angles and returns continuous pixel
/// coordinates; `x` is wrapped into `[0, width)`.
pub fn great_circle_points(p1: (f64, f64), v1: (f64, f64), g: &EquirectGeometry, steps: usize, flow_min: f64) -> Result<Vec<(f64, f64)>> {
    let c = chord_circle(p1, v1, g, flow_min)?;
    Ok(angle_table(steps)
        .into_iter()
        .map(|(co, si)| {
            let (x, y) = g.vec_to_pixel(c.point(co, si));
            (x.rem_euclid(g.width as f64), y)
        })
        .collect())
}

/// Per-cell vote counts on a (possibly downscaled) equirectangular grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteGrid {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
    pub total: u64,
    /// Number of flow vectors that cast votes.
    pub voters: usize,
}

impl VoteGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            counts: vec![0; width * height],
            total: 0,
            voters: 0,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn antipode(&self, x: usize, y: usize) -> (usize, usize) {
        ((x + self.width / 2) % self.width, self.height - 1 - y)
    }

    fn merge(mut self, o: VoteGrid) -> VoteGrid {
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
        self.total += o.total;
        self.voters += o.voters;
        self
    }
}

/// Exact nearest grid cell of a unit vector.
fn cell_exact(v: Vec3, w: usize, h: usize) -> usize {
    let theta = v.x.atan2(v.z).to_degrees();
    let phi = v.y.clamp(-1.0, 1.0).asin().to_degrees();
    let x = ((theta + 180.0) / 360.0 * w as f64 - 0.5).round() as i64;
    let y = ((90.0 - phi) / 180.0 * h as f64 - 0.5).round() as i64;
    y.clamp(0, h as i64 - 1) as usize * w + x.rem_euclid(w as i64) as usize
}

/// Direction-to-cell lookup through a cube map with `n x n` buckets per face.
/// Coarse votes only need cell accuracy; a bucket spans under 0.25 degrees,
/// far below a coarse cell, and lookups avoid transcendental calls.
pub struct CellLut {
    n: usize,
    cells: Vec<u32>,
}

impl CellLut {
    pub fn new(w: usize, h: usize) -> Self {
        let n = 256;
        let mut cells = vec![0u32; 6 * n * n];
        for face in 0..6 {
            for i in 0..n {
                for j in 0..n {
                    let a = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                    let b = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                    let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                    let v = match face / 2 {
                        0 => Vec3::new(s, a, b),
                        1 => Vec3::new(a, s, b),
                        _ => Vec3::new(a, b, s),
                    };
                    cells[(face * n + i) * n + j] = cell_exact(v.normalized(), w, h) as u32;
                }
            }
        }
        Self { n, cells }
    }

    /// Cached table for the most recent grid size.
    pub fn shared(w: usize, h: usize) -> Arc<Self> {
        static LAST: Mutex<Option<((usize, usize), Arc<CellLut>)>> = Mutex::new(None);
        let mut slot = LAST.lock().unwrap_or_else(|e| e.into_inner());
        match &*slot {
            Some((key, lut)) if *key == (w, h) => lut.clone(),
            _ => {
                let lut = Arc::new(Self::new(w, h));
                *slot = Some(((w, h), lut.clone()));
                lut
            }
        }
    }

    #[inline]
    pub fn cell(&self, v: Vec3) -> usize {
        let (ax, ay, az) = (v.x.abs(), v.y.abs(), v.z.abs());
        let (face, m, a, b) = if ax >= ay && ax >= az {
            (if v.x >= 0.0 { 0 } else { 1 }, ax, v.y, v.z)
        } else if ay >= az {
            (if v.y >= 0.0 { 2 } else { 3 }, ay, v.x, v.z)
        } else {
            (if v.z >= 0.0 { 4 } else { 5 }, az, v.x, v.y)
        };
        let inv = 0.5 * self.n as f64 / m;
        let last = self.n - 1;
        let i = (((a * inv) + 0.5 * self.n as f64) as usize).min(last);
        let j = (((b * inv) + 0.5 * self.n as f64) as usize).min(last);
        self.cells[(face * self.n + i) * self.n + j] as usize
    }
}

fn flow_geometry(flow: &FlowField, g: &EquirectGeometry) -> Result<EquirectGeometry> {
    let fg = EquirectGeometry::new(flow.width, flow.height)?;
    if flow.width == 0 || g.width % flow.width != 0 {
        return Err(Error::DimensionMismatch {
            expected: (g.width, g.height),
            got: (flow.width, flow.height),
        });
    }
    Ok(fg)
}

/// Great circles of every sampled flow vector above the magnitude threshold.
pub fn voting_circles(flow: &FlowField, g: &EquirectGeometry, params: &FoeParams) -> Result<Vec<GreatCircle>> {
    let fg = flow_geometry(flow, g)?;
    let stride = params.stride.max(1);
    let rows: Vec<usize> = (0..flow.height).step_by(stride).collect();
    let per_row = par::map_slice(&rows, |&y| {
        (0..flow.width)
            .step_by(stride)
            .filter_map(|x| circle_for((x as f64, y as f64), flow.get(x, y), &fg, params).ok())
            .collect::<Vec<_>>()
    });
    Ok(per_row.into_iter().flatten().collect())
}

fn vote_circles(circles: &[GreatCircle], w: usize, h: usize, steps: usize) -> VoteGrid {
    let steps = steps.max(1);
    let table = angle_table(steps);
    let lut = CellLut::shared(w, h);
    // the second half of an even table is the antipodal image of the first
    let half = if steps % 2 == 0 && w % 2 == 0 { steps / 2 } else { steps };
    let antipode = |cell: usize| {
        let (x, y) = (cell % w, cell / w);
        (h - 1 - y) * w + (x + w / 2) % w
    };
    par::fold_shards(
        circles.len(),
        8,
        || VoteGrid::new(w, h),
        |grid, i| {
            let c = &circles[i];
            // cyclic run-length dedupe: a circle votes once per cell it enters
            let first = lut.cell(c.point(table[0].0, table[0].1));
            let mut last = first;
            let mut cast = 1u64;
            grid.counts[first] += 1;
            let mut visit = |cell: usize, grid: &mut VoteGrid| {
                if cell != last {
                    grid.counts[cell] += 1;
                    cast += 1;
                    last = cell;
                }
            };
            let mut runs = Vec::new();
            for &(co, si) in &table[1..half] {
                let cell = lut.cell(c.point(co, si));
                if half < steps {
                    if runs.last() != Some(&cell) {
                        runs.push(cell);
                    }
                }
                visit(cell, grid);
            }
            if half < steps {
                visit(antipode(first), grid);
                for &cell in &runs {
                    visit(antipode(cell), grid);
                }
            }
            if cast > 1 && last == first {
                grid.counts[first] -= 1;
                cast -= 1;
            }
            grid.total += cast;
            grid.voters += 1;
        },
        VoteGrid::merge,
    )
}

fn fold_votes(circles: &[GreatCircle], w: usize, h: usize, cells_of: impl Fn(&GreatCircle, &mut Vec<usize>) + Sync + Send) -> VoteGrid {
    let shards = 8;
    par::fold_shards(
        circles.len(),
        shards,
        || VoteGrid::new(w, h),
        |grid, i| {
            let mut cells = Vec::new();
            cells_of(&circles[i], &mut cells);
            for &c in &cells {
                grid.counts[c] += 1;
            }
            grid.total += cells.len() as u64;
            grid.voters += 1;
        },
        VoteGrid::merge,
    )
}

/// Accumulates great-circle votes of all sampled flow vectors on the grid
/// downscaled by `params.downscale` from the flow's resolution.
pub fn vote_frame(flow: &FlowField, g: &EquirectGeometry, params: &FoeParams) -> Result<VoteGrid> {
    let circles = voting_circles(flow, g, params)?;
    let f = params.downscale.max(1);
    let (w, h) = (flow.width / f, flow.height / f);
    if w < 2 || h < 1 {
        return Err(Error::InvalidParameter(format!(
            "downscale {f} too large for {}x{}",
            flow.width, flow.height
        )));
    }
    Ok(vote_circles(&circles, w, h, params.steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoeEstimate {
    pub foe: SphericalDirection,
    pub foc: SphericalDirection,
    pub confidence: f64,
}

/// Full-resolution votes inside a pixel box around `center` (a direction),
/// sampling each circle finely near its closest approach.
fn local_votes(circles: &[GreatCircle], fg: &EquirectGeometry, center: (i64, i64), radius: i64) -> Vec<u32> {
    let side = (2 * radius + 1) as usize;
    let cvec = fg.pixel_to_vec(center.0 as f64, center.1 as f64);
    let dpp = fg.degrees_per_pixel().to_radians();
    let reach = (radius as f64 + 1.5) * dpp * std::f64::consts::SQRT_2;
    let lat_cos = (1.0 - cvec.y * cvec.y).sqrt().max(0.1);
    let step = 0.5 * dpp * lat_cos;
    let n = (reach / step).ceil() as i64;
    let (w, h) = (fg.width as i64, fg.height as i64);
    let (wf, hf) = (fg.width as f64, fg.height as f64);
    let grid = fold_votes(circles, side, side, |c, cells| {
        let normal = c.normal();
        let off = cvec.dot(normal);
        if off.abs() > reach.sin() {
            return;
        }
        let foot = cvec - normal * off;
        let fnorm = foot.norm();
        if fnorm < 1e-12 {
            return;
        }
        let b1 = foot * (1.0 / fnorm);
        let b2 = normal.cross(b1);
        let mut last = usize::MAX;
        let (ds, dc) = step.sin_cos();
        let (mut s, mut co) = (-(n as f64) * step).sin_cos();
        for _ in -n..=n {
            let v = b1 * co + b2 * s;
            (s, co) = (s * dc + co * ds, co * dc - s * ds);
            let px = (v.x.atan2(v.z) * FRAC_1_PI * 0.5 + 0.5) * wf - 0.5;
            let py = (0.5 - v.y.atan2((v.x * v.x + v.z * v.z).sqrt()) * FRAC_1_PI) * hf - 0.5;
            let mut dx = px.round() as i64 - center.0;
            dx = (dx + w / 2).rem_euclid(w) - w / 2;
            let dy = (py.round() as i64).clamp(0, h - 1) - center.1;
            if dx.abs() > radius || dy.abs() > radius {
                last = usize::MAX;
                continue;
            }
            let cell = ((dy + radius) * (2 * radius + 1) + dx + radius) as usize;
            if cell != last {
                cells.push(cell);
                last = cell;
            }
        }
    });
    grid.counts
}

/// Mean component of flow pointing away from `(cx, cy)` over a square window.
fn mean_radial_flow(flow: &FlowField, cx: i64, cy: i64, half: i64) -> f64 {
    let (w, h) = (flow.width as i64, flow.height as i64);
    let mut sum = 0.0;
    let mut n = 0usize;
    for dy in -half..=half {
        let y = cy + dy;
        if y < 0 || y >= h {
            continue;
        }
        for dx in -half..=half {
            if dx == 0 && dy == 0 {
                continue;
            }
            let x = (cx + dx).rem_euclid(w);
            let (u, v) = flow.get(x as usize, y as usize);
            let r = (dx as f64).hypot(dy as f64);
            sum += (u * dx as f64 + v * dy as f64) / r;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Picks the antipodal cell pair with the highest summed votes, refines it at
/// the flow's resolution and labels the expanding end as the FOE.
pub fn locate_foe(votes: &VoteGrid, flow: &FlowField, g: &EquirectGeometry, params: &FoeParams) -> Result<FoeEstimate> {
    let circles = voting_circles(flow, g, params)?;
    locate_with_circles(votes, &circles, flow, g, params)
}

fn locate_with_circles(
    votes: &VoteGrid,
    circles: &[GreatCircle],
    flow: &FlowField,
    g: &EquirectGeometry,
    params: &FoeParams,
) -> Result<FoeEstimate> {
    if votes.total == 0 || votes.voters == 0 {
        return Err(Error::NoConsensus);
    }
    let fg = flow_geometry(flow, g)?;
    let mut best = (0u64, 0usize, 0usize);
    for y in 0..votes.height {
        for x in 0..votes.width / 2 {
            let (ax, ay) = votes.antipode(x, y);
            let s = votes.get(x, y) as u64 + votes.get(ax, ay) as u64;
            if s > best.0 {
                best = (s, x, y);
            }
        }
    }
    let confidence = best.0 as f64 / (2.0 * votes.voters as f64);
    if confidence < params.min_confidence {
        return Err(Error::NoConsensus);
    }
    let f = (flow.width / votes.width) as f64;
    let cx = ((best.1 as f64 + 0.5) * f - 0.5).round() as i64;
    let cy = (((best.2 as f64 + 0.5) * f - 0.5).round() as i64).clamp(0, flow.height as i64 - 1);
    let (w, h) = (flow.width as i64, flow.height as i64);
    let r = params.refine_radius as i64;
    let side = (2 * r + 1) as usize;
    let near = local_votes(circles, &fg, (cx, cy), r);
    let mut top = (0u64, cx, cy);
    for dy in -r..=r {
        for dx in -r..=r {
            let y = cy + dy;
            if y < 0 || y >= h {
                continue;
            }
            let i = ((dy + r) as usize) * side + (dx + r) as usize;
            // a great circle through a pixel also passes its antipode, so the
            // far window mirrors the near one
            let s = 2 * near[i] as u64;
            if s > top.0 {
                top = (s, (cx + dx).rem_euclid(w), y);
            }
        }
    }
    let (px, py) = (top.1, top.2);
    let (qx, qy) = ((px + w / 2).rem_euclid(w), h - 1 - py);
    let half = (params.neighborhood / 2) as i64;
    let d = mean_radial_flow(flow, px, py, half) - mean_radial_flow(flow, qx, qy, half);
    let p = fg.continuous_to_dir(px as f64, py as f64);
    let q = fg.continuous_to_dir(qx as f64, qy as f64);
    let (foe, foc) = if d >= 0.0 { (p, q) } else { (q, p) };
    Ok(FoeEstimate { foe, foc, confidence })
}

/// Votes and locates in one pass.
pub fn estimate_foe(flow: &FlowField, g: &EquirectGeometry, params: &FoeParams) -> Result<FoeEstimate> {
    let circles = voting_circles(flow, g, params)?;
    let f = params.downscale.max(1);
    let votes = vote_circles(&circles, flow.width / f, flow.height / f, params.steps);
    locate_with_circles(&votes, &circles, flow, g, params)
}

/// Fills gaps with the nearest present value (earlier wins ties), then
/// Gaussian-filters unwrapped longitude and latitude.
pub fn smooth_foe_track(track: &[Option<SphericalDirection>], sigma: f64) -> Result<Vec<SphericalDirection>> {
    let present: Vec<usize> = track.iter().enumerate().filter(|(_, d)| d.is_some()).map(|(i, _)| i).collect();
    if present.is_empty() {
        return Err(Error::AllMissing);
    }
    let filled: Vec<SphericalDirection> = (0..track.len())
        .map(|i| {
            let j = match present.binary_search(&i) {
                Ok(k) => present[k],
                Err(k) => {
                    let after = present.get(k).copied();
                    let before = k.checked_sub(1).map(|b| present[b]);
                    match (before, after) {
                        (Some(b), Some(a)) => {
                            if i - b <= a - i {
                                b
                            } else {
                                a
                            }
                        }
                        (Some(b), None) => b,
                        (None, Some(a)) => a,
                        (None, None) => unreachable!(),
                    }
                }
            };
            track[j].unwrap()
        })
        .collect();
    let thetas = unwrap_sequence(&filled.iter().map(|d| d.theta).collect::<Vec<_>>());
    let phis: Vec<f64> = filled.iter().map(|d| d.phi).collect();
    let st = gaussian_filter(&thetas, sigma);
    let sp = gaussian_filter(&phis, sigma);
    Ok(st
        .into_iter()
        .zip(sp)
        .map(|(t, p)| SphericalDirection::new(wrap_degrees(t), p))
        .collect())
}

/// One row of the FOE table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoeRecord {
    pub frame: usize,
    pub theta: f64,
    pub phi: f64,
    pub confidence: f64,
}

pub fn write_foe_csv<W: Write>(records: &[FoeRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "theta", "phi", "confidence"])?;
    for r in records {
        w.write_record([
            r.frame.to_string(),
            format!("{:.6}", r.theta),
            format!("{:.6}", r.phi),
            format!("{:.6}", r.confidence),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_foe_csv<R: Read>(input: R) -> Result<Vec<FoeRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Direction of a voting-grid cell center.
pub fn cell_direction(votes: &VoteGrid, x: usize, y: usize) -> SphericalDirection {
    let theta = (x as f64 + 0.5) / votes.width as f64 * 360.0 - 180.0;
    let phi = 90.0 - (y as f64 + 0.5) / votes.height as f64 * 180.0;
    SphericalDirection::new(theta, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::dir_to_vec;

    /// Instantaneous motion field of forward translation toward `foe`, mapped
    /// to pixel units through the equirectangular Jacobian.
    fn radial_field(g: &EquirectGeometry, foe: SphericalDirection, gain: f64) -> FlowField {
        let f = dir_to_vec(foe);
        FlowField::from_fn(g.width, g.height, |x, y| {
            let d = g.continuous_to_dir(x as f64, y as f64);
            let z = dir_to_vec(d);
            let t = z * z.dot(f) - f;
            let (st, ct) = d.theta.to_radians().sin_cos();
            let (sp, cp) = d.phi.to_radians().sin_cos();
            let e_th = Vec3::new(ct, 0.0, -st);
            let e_ph = Vec3::new(-sp * st, cp, -sp * ct);
            let dth = t.dot(e_th) / cp.max(1e-9);
            let dph = t.dot(e_ph);
            let u = dth.to_degrees() / g.degrees_per_pixel() * gain;
            let v = -dph.to_degrees() / (180.0 / g.height as f64) * gain;
            (u as f32, v as f32)
        })
    }

    fn px_err(g: &EquirectGeometry, a: SphericalDirection, b: SphericalDirection) -> f64 {
        let (ax, ay) = g.dir_to_pixel(a);
        let (bx, by) = g.dir_to_pixel(b);
        g.wrapped_dx(ax, bx).hypot(by - ay)
    }

    #[test]
    fn circle_points_lie_in_plane() {
        let g = EquirectGeometry::new(1920, 960).unwrap();
        let p1 = (700.0, 300.0);
        let v1 = (3.0, -2.0);
        let c = chord_circle(p1, v1, &g, 0.5).unwrap();
        let z1 = g.pixel_to_vec(p1.0, p1.1);
        let z2 = g.pixel_to_vec(p1.0 + v1.0, p1.1 + v1.1);
        let b3 = z1.cross(z2).normalized();
        for (co, si) in angle_table(720) {
            assert!(c.point(co, si).dot(b3).abs() < 1e-9);
        }
        let pts = great_circle_points(p1, v1, &g, 720, 0.5).unwrap();
        assert!((pts[0].0 - p1.0).abs() < 0.5 && (pts[0].1 - p1.1).abs() < 0.5);
    }

    #[test]
    fn equatorial_flow_traces_equator() {
        let g = EquirectGeometry::new(1920, 960).unwrap();
        for pts in [
            great_circle_points((400.0, 479.5), (4.0, 0.0), &g, 720, 0.5).unwrap(),
            tangent_circle((400.0, 479.5), (4.0, 0.0), &g, 0.5)
                .map(|c| {
                    angle_table(720)
                        .into_iter()
                        .map(|(a, b)| g.vec_to_pixel(c.point(a, b)))
                        .collect::<Vec<_>>()
                })
                .unwrap(),
        ] {
            assert!(pts.iter().all(|p| (p.1 - 479.5).abs() <= 1.0));
        }
    }

    #[test]
    fn small_or_degenerate_flow_is_rejected() {
        let g = EquirectGeometry::new(480, 240).unwrap();
        assert!(matches!(
            great_circle_points((10.0, 10.0), (0.1, 0.1), &g, 720, 0.5),
            Err(Error::FlowTooSmall(_))
        ));
        assert!(matches!(
            tangent_circle((10.0, 10.0), (0.0, 0.0), &g, 0.5),
            Err(Error::FlowTooSmall(_))
        ));
    }

    #[test]
    fn zero_flow_gives_empty_grid() {
        let g = EquirectGeometry::new(480, 240).unwrap();
        let votes = vote_frame(&FlowField::zeros(480, 240), &g, &FoeParams::default()).unwrap();
        assert!(votes.counts.iter().all(|&c| c == 0));
        assert_eq!(votes.total, 0);
        assert!(matches!(
            locate_foe(&votes, &FlowField::zeros(480, 240), &g, &FoeParams::default()),
            Err(Error::NoConsensus)
        ));
    }

    #[test]
    fn votes_are_additive() {
        let g = EquirectGeometry::new(480, 240).unwrap();
        let flow = radial_field(&g, SphericalDirection::new(20.0, 10.0), 2.0);
        let sparse = vote_frame(&flow, &g, &FoeParams::default()).unwrap();
        let dense = vote_frame(
            &flow,
            &g,
            &FoeParams {
                stride: 2,
                ..FoeParams::default()
            },
        )
        .unwrap();
        assert!(sparse.counts.iter().zip(&dense.counts).all(|(a, b)| a <= b));
        assert_eq!(sparse.total, sparse.counts.iter().map(|&c| c as u64).sum::<u64>());
    }

    #[test]
    fn divergent_field_is_localized_and_swaps_under_negation() {
        let g = EquirectGeometry::new(960, 480).unwrap();
        let truth = SphericalDirection::new(35.0, -12.0);
        let flow = radial_field(&g, truth, 3.0);
        let p = FoeParams::default();
        let est = estimate_foe(&flow, &g, &p).unwrap();
        assert!(px_err(&g, est.foe, truth) <= 2.0, "{:?}", est);
        assert!(est.confidence > 0.5);
        let neg = estimate_foe(&flow.negated(), &g, &p).unwrap();
        assert_eq!(neg.foe, est.foc);
        assert_eq!(neg.foc, est.foe);
        let scaled = estimate_foe(&flow.scaled(2.5), &g, &p).unwrap();
        assert_eq!(scaled.foe, est.foe);
    }

    #[test]
    fn center_foe_on_full_resolution_grid() {
        let g = EquirectGeometry::new(1920, 960).unwrap();
        let truth = g.continuous_to_dir(960.0, 480.0);
        let flow = radial_field(&g, truth, 4.0);
        let votes = vote_frame(&flow, &g, &FoeParams::default()).unwrap();
        let (mut bx, mut by, mut bv) = (0, 0, 0);
        for y in 0..votes.height {
            for x in 0..votes.width {
                if votes.get(x, y) > bv {
                    (bx, by, bv) = (x, y, votes.get(x, y));
                }
            }
        }
        let cell = cell_direction(&votes, bx, by);
        let d = px_err(&g, cell, truth).min(px_err(&g, cell, SphericalDirection::new(truth.theta + 180.0, -truth.phi)));
        assert!(d <= 4.0, "{d}");
        let est = locate_foe(&votes, &flow, &g, &FoeParams::default()).unwrap();
        assert!(px_err(&g, est.foe, truth) <= 2.0);
    }

    #[test]
    fn lookup_matches_exact_cells_away_from_borders() {
        let lut = CellLut::new(240, 120);
        let mut mismatched = 0;
        for i in 0..20000 {
            let d = SphericalDirection::new(i as f64 * 0.0179 - 179.0, (i as f64 * 0.731).sin() * 70.0);
            let v = crate::geom::dir_to_vec(d);
            let (e, l) = (cell_exact(v, 240, 120), lut.cell(v));
            if e != l {
                mismatched += 1;
                let (ex, ey) = (e % 240, e / 240);
                let (lx, ly) = (l % 240, l / 240);
                let dx = (ex as i64 - lx as i64).rem_euclid(240).min((lx as i64 - ex as i64).rem_euclid(240));
                assert!(dx <= 1 && (ey as i64 - ly as i64).abs() <= 1);
            }
        }
        assert!(mismatched < 4000, "{mismatched}");
    }

    #[test]
    fn flo_roundtrip_and_validation() {
        let f = FlowField::from_fn(6, 3, |x, y| (x as f32 * 0.5, -(y as f32)));
        let mut buf = Vec::new();
        f.write_flo(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 6 * 3 * 8);
        assert_eq!(&buf[..4], &202021.25f32.to_le_bytes());
        assert_eq!(FlowField::read_flo(&buf[..]).unwrap(), f);
        let mut bad = buf.clone();
        bad[0] ^= 1;
        assert!(FlowField::read_flo(&bad[..]).is_err());
        assert!(FlowField::read_flo(&buf[..20]).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let c = vec![Some(SphericalDirection::new(10.0, 5.0)); 30];
        for d in smooth_foe_track(&c, 10.0).unwrap() {
            assert!((d.theta - 10.0).abs() < 1e-9 && (d.phi - 5.0).abs() < 1e-9);
        }
        let seam: Vec<Option<SphericalDirection>> = (0..40)
            .map(|t| Some(SphericalDirection::new(if t < 20 { 179.0 } else { -179.0 }, 0.0)))
            .collect();
        for d in smooth_foe_track(&seam, 5.0).unwrap() {
            assert!(d.theta.abs() > 178.0, "{d:?}");
        }
        let mut spike = vec![Some(SphericalDirection::new(0.0, 0.0)); 61];
        spike[30] = Some(SphericalDirection::new(90.0, 0.0));
        let s = smooth_foe_track(&spike, 10.0).unwrap();
        assert!(s[30].theta.abs() * 3.0 <= 90.0);
        let gaps = vec![None, Some(SphericalDirection::new(5.0, 0.0)), None];
        assert!(smooth_foe_track(&gaps, 0.0).unwrap().iter().all(|d| d.theta == 5.0));
        assert!(matches!(smooth_foe_track(&[None, None], 1.0), Err(Error::AllMissing)));
    }

    #[test]
    fn foe_csv_roundtrip() {
        let rows = vec![
            FoeRecord {
                frame: 0,
                theta: 1.5,
                phi: -2.25,
                confidence: 0.5,
            },
            FoeRecord {
                frame: 1,
                theta: -179.0,
                phi: 0.0,
                confidence: 0.0,
            },
        ];
        let mut buf = Vec::new();
        write_foe_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("frame,theta,phi,confidence\n"));
        assert_eq!(read_foe_csv(&buf[..]).unwrap(), rows);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn radial_fields_locate_and_negation_swaps(theta in -180.0f64..180.0, phi in -60.0f64..60.0, gain in 2.0f64..6.0) {
            let g = EquirectGeometry::new(480, 240).unwrap();
            let truth = SphericalDirection::new(theta, phi);
            let flow = radial_field(&g, truth, gain);
            let params = FoeParams::default();
            let est = estimate_foe(&flow, &g, &params).unwrap();
            proptest::prop_assert!(px_err(&g, est.foe, truth) < 2.0, "{:?} vs {truth:?}", est.foe);
            let mut neg = flow.clone();
            neg.u.iter_mut().chain(neg.v.iter_mut()).for_each(|v| *v = -*v);
            let swapped = estimate_foe(&neg, &g, &params).unwrap();
            proptest::prop_assert_eq!(swapped.foe, est.foc);
            proptest::prop_assert_eq!(swapped.foc, est.foe);
        }
    }
}
