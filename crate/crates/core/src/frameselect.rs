//! Output frame selection by dynamic programming over importance, alignment,
//! velocity and acceleration costs.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use crate::content::RoiTrack;
use crate::error::{Error, Result};
use crate::motion::{fit_homography, residuals};
use crate::par;
use crate::render::NfovCamera;
use crate::tracking::{FeatureTrack, Match, Point2};
use crate::viewplan::CameraPath;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameSelectParams {
    pub target_speedup: f64,
    pub w_s: f64,
    pub w_v_sel: f64,
    pub w_a_sel: f64,
    pub tau_v: f64,
    pub tau_a: f64,
    pub tau_m_fraction: f64,
    pub gamma_fraction: f64,
    /// Largest allowed jump; `ceil(2 * target_speedup)` when unset.
    pub jump_window: Option<usize>,
    /// Sum importance over `i..=j` instead of `i..j`.
    pub inclusive_saliency_sum: bool,
}

impl Default for FrameSelectParams {
    fn default() -> Self {
        Self::for_speedup(8.0)
    }
}

impl FrameSelectParams {
    pub fn for_speedup(speedup: f64) -> Self {
        Self {
            target_speedup: speedup,
            w_s: 5000.0,
            w_v_sel: 200.0,
            w_a_sel: 100.0,
            tau_v: 200.0,
            tau_a: 200.0,
            tau_m_fraction: 0.1,
            gamma_fraction: 0.5,
            jump_window: None,
            inclusive_saliency_sum: false,
        }
    }

    pub fn window(&self) -> usize {
        self.jump_window.unwrap_or((2.0 * self.target_speedup).ceil() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_speedup >= 1.0) || !self.target_speedup.is_finite() {
            return Err(Error::InvalidParameter("target_speedup must be >= 1".into()));
        }
        let nonneg = [
            self.w_s,
            self.w_v_sel,
            self.w_a_sel,
            self.tau_v,
            self.tau_a,
            self.tau_m_fraction,
            self.gamma_fraction,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("frame selection weights must be nonnegative".into()));
        }
        if self.window() < 1 {
            return Err(Error::InfeasibleWindow(self.window()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceCurve {
    pub scores: Vec<f64>,
    pub mean: f64,
}

impl ImportanceCurve {
    pub fn new(scores: Vec<f64>) -> Self {
        let mean = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        Self { scores, mean }
    }
}

/// Importance of each frame: saliency of the ROI present at that frame whose
/// pose is angularly closest to the camera direction, 0 with no ROI.
pub fn frame_importance(path: &CameraPath, rois: &[RoiTrack]) -> ImportanceCurve {
    let scores = path
        .poses
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut best: Option<(f64, f64)> = None;
            for r in rois {
                if let Some(pose) = r.pose_at(t) {
                    let d = p.angle_to(pose);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, r.saliency));
                    }
                }
            }
            best.map_or(0.0, |b| b.1)
        })
        .collect();
    ImportanceCurve::new(scores)
}

/// `(sum_{p=i}^{j-1} s_p - v * s_mean)^2`, or up to `j` when `inclusive`.
pub fn saliency_cost(i: usize, j: usize, prefix: &[f64], mean: f64, speedup: f64, inclusive: bool) -> f64 {
    let end = if inclusive { j + 1 } else { j };
    let end = end.min(prefix.len() - 1);
    let s = prefix[end] - prefix[i.min(end)];
    (s - speedup * mean).powi(2)
}

pub fn prefix_sums(scores: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(scores.len() + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for s in scores {
        acc += s;
        out.push(acc);
    }
    out
}

pub fn velocity_cost(i: usize, j: usize, speedup: f64, tau_v: f64) -> f64 {
    ((j as f64 - i as f64) - speedup).powi(2).min(tau_v)
}

pub fn acceleration_cost(h: usize, i: usize, j: usize, tau_a: f64) -> f64 {
    ((j as f64 - i as f64) - (i as f64 - h as f64)).powi(2).min(tau_a)
}

/// Alignment cost between two input frames in pixels².
pub trait AlignmentCost: Sync {
    fn cost(&self, i: usize, j: usize) -> f64;
}

pub struct ZeroAlignment;

impl AlignmentCost for ZeroAlignment {
    fn cost(&self, _i: usize, _j: usize) -> f64 {
        0.0
    }
}

impl<F: Fn(usize, usize) -> f64 + Sync> AlignmentCost for F {
    fn cost(&self, i: usize, j: usize) -> f64 {
        self(i, j)
    }
}

/// Center displacement under the homography fitted to `matches`, or `gamma`
/// when fewer than four matches exist, the fit is degenerate, or the mean
/// squared reprojection error reaches `tau_m`.
pub fn alignment_cost(matches: &[Match], center: Point2, tau_m: f64, gamma: f64) -> f64 {
    if matches.len() < 4 {
        return gamma;
    }
    let Ok(h) = fit_homography(matches) else {
        return gamma;
    };
    let r = residuals(&h, matches);
    let lr = r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64;
    if !(lr < tau_m) {
        return gamma;
    }
    let c = h.apply(center);
    if !c.x.is_finite() || !c.y.is_finite() {
        return gamma;
    }
    (c.x - center.x).powi(2) + (c.y - center.y).powi(2)
}

/// Tracks projected into the planned NFOV view of every frame.
pub struct TrackAlignment {
    frames: Vec<HashMap<u64, Point2>>,
    center: Point2,
    tau_m: f64,
    gamma: f64,
}

impl TrackAlignment {
    pub fn new(
        tracks: &[FeatureTrack],
        path: &CameraPath,
        g: &crate::geom::EquirectGeometry,
        fov: f64,
        out_w: usize,
        out_h: usize,
        params: &FrameSelectParams,
    ) -> Result<Self> {
        let cams: Vec<NfovCamera> = path
            .poses
            .iter()
            .map(|p| NfovCamera::new(*p, fov, out_w, out_h))
            .collect::<Result<_>>()?;
        let mut frames = vec![HashMap::new(); path.len()];
        for tr in tracks {
            for (k, pt) in tr.points.iter().enumerate() {
                let t = tr.start_frame + k;
                if t >= frames.len() {
                    break;
                }
                if let Some((x, y)) = cams[t].project(g.pixel_to_vec(pt.x, pt.y)) {
                    if x >= -0.5 && y >= -0.5 && x < out_w as f64 - 0.5 && y < out_h as f64 - 0.5 {
                        frames[t].insert(tr.track_id, Point2::new(x, y));
                    }
                }
            }
        }
        let d = (out_w as f64).hypot(out_h as f64);
        Ok(Self {
            frames,
            center: Point2::new((out_w as f64 - 1.0) / 2.0, (out_h as f64 - 1.0) / 2.0),
            tau_m: params.tau_m_fraction * d,
            gamma: params.gamma_fraction * d,
        })
    }

    pub fn matches(&self, i: usize, j: usize) -> Vec<Match> {
        let (a, b) = (&self.frames[i], &self.frames[j]);
        let mut ids: Vec<u64> = a.keys().filter(|k| b.contains_key(k)).copied().collect();
        ids.sort_unstable();
        ids.into_iter()
            .map(|id| Match {
                track_id: id,
                a: a[&id],
                b: b[&id],
            })
            .collect()
    }
}

impl AlignmentCost for TrackAlignment {
    fn cost(&self, i: usize, j: usize) -> f64 {
        alignment_cost(&self.matches(i, j), self.center, self.tau_m, self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePlan {
    pub frames: Vec<usize>,
}

impl FramePlan {
    pub fn jumps(&self) -> Vec<usize> {
        self.frames.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// First frame at which the plan may end.
pub fn end_threshold(frames: usize, speedup: f64) -> usize {
    ((frames as f64 - speedup).ceil().max(1.0) as usize).min(frames - 1)
}

/// Per-transition cost tables `C(i, i + k)` for `k` in `1..=window`,
/// excluding acceleration.
pub fn transition_costs(frames: usize, params: &FrameSelectParams, curve: &ImportanceCurve, align: &dyn AlignmentCost) -> Vec<Vec<f64>> {
    let w = params.window();
    let prefix = prefix_sums(&curve.scores);
    par::map_range(frames, |i| {
        (1..=w)
            .map(|k| {
                let j = i + k;
                if j >= frames {
                    return f64::INFINITY;
                }
                align.cost(i, j)
                    + params.w_s * saliency_cost(i, j, &prefix, curve.mean, params.target_speedup, params.inclusive_saliency_sum)
                    + params.w_v_sel * velocity_cost(i, j, params.target_speedup, params.tau_v)
            })
            .collect()
    })
}

/// Total cost of a plan, accumulated in the same order as the solver.
pub fn plan_cost(plan: &[usize], table: &[Vec<f64>], params: &FrameSelectParams) -> f64 {
    let c = |i: usize, j: usize| table[i][j - i - 1];
    let mut acc = c(plan[0], plan[1]);
    for k in 2..plan.len() {
        acc = c(plan[k - 1], plan[k]) + (acc + params.w_a_sel * acceleration_cost(plan[k - 2], plan[k - 1], plan[k], params.tau_a));
    }
    acc
}

/// Minimum-cost monotone plan starting at frame 0 and ending at or after
/// [`end_threshold`], with every jump in `1..=window`. The first transition
/// carries no acceleration term. Ties prefer the smaller jump.
pub fn select_frames_with_table(frames: usize, params: &FrameSelectParams, table: &[Vec<f64>]) -> Result<(FramePlan, f64)> {
    params.validate()?;
    if frames < 2 {
        return Err(Error::InvalidParameter("frame selection needs at least two frames".into()));
    }
    let w = params.window();
    // cost[j][k - 1]: best cost of a plan whose last jump is k and ends at j.
    let mut cost = vec![vec![f64::INFINITY; w]; frames];
    let mut back = vec![vec![0usize; w]; frames];
    for k in 1..=w.min(frames - 1) {
        cost[k][k - 1] = table[0][k - 1];
    }
    for i in 1..frames {
        for k in 1..=w {
            let j = i + k;
            if j >= frames {
                break;
            }
            let cij = table[i][k - 1];
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for kp in 1..=w.min(i) {
                let prev = cost[i][kp - 1];
                if !prev.is_finite() {
                    continue;
                }
                let v = cij + (prev + params.w_a_sel * acceleration_cost(i - kp, i, j, params.tau_a));
                if v < best {
                    best = v;
                    arg = kp;
                }
            }
            if best < cost[j][k - 1] {
                cost[j][k - 1] = best;
                back[j][k - 1] = arg;
            }
        }
    }
    let thr = end_threshold(frames, params.target_speedup);
    let mut end: Option<(usize, usize, f64)> = None;
    for j in thr..frames {
        for k in 1..=w.min(j) {
            let c = cost[j][k - 1];
            if c.is_finite() && end.map_or(true, |(_, _, b)| c < b) {
                end = Some((j, k, c));
            }
        }
    }
    let (mut j, mut k, total) = end.ok_or(Error::InfeasibleWindow(w))?;
    let mut out = vec![j];
    loop {
        let i = j - k;
        out.push(i);
        if i == 0 {
            break;
        }
        let kp = back[j][k - 1];
        j = i;
        k = kp;
    }
    out.reverse();
    Ok((FramePlan { frames: out }, total))
}

pub fn select_frames(frames: usize, params: &FrameSelectParams, curve: &ImportanceCurve, align: &dyn AlignmentCost) -> Result<FramePlan> {
    params.validate()?;
    if curve.scores.len() != frames {
        return Err(Error::LengthMismatch(frames, curve.scores.len()));
    }
    let table = transition_costs(frames, params, curve, align);
    Ok(select_frames_with_table(frames, params, &table)?.0)
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanRow {
    output_index: usize,
    input_frame: usize,
}

pub fn write_plan_csv(plan: &FramePlan, file: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    for (output_index, &input_frame) in plan.frames.iter().enumerate() {
        w.serialize(PlanRow { output_index, input_frame })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_plan_csv(file: &Path) -> Result<FramePlan> {
    let mut r = csv::Reader::from_path(file)?;
    let mut frames = Vec::new();
    for (i, row) in r.deserialize::<PlanRow>().enumerate() {
        let row = row?;
        if row.output_index != i {
            return Err(Error::Format(format!("plan row {i} has index {}", row.output_index)));
        }
        if frames.last().is_some_and(|&l| row.input_frame <= l) {
            return Err(Error::Format(format!("plan row {i} is not increasing")));
        }
        frames.push(row.input_frame);
    }
    Ok(FramePlan { frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::SphericalDirection;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn roi(start: usize, poses: Vec<SphericalDirection>, saliency: f64) -> RoiTrack {
        RoiTrack {
            tsp_id: 0,
            start_frame: start,
            end_frame: start + poses.len() - 1,
            areas: vec![1.0; poses.len()],
            poses,
            saliency,
            label: None,
        }
    }

    #[test]
    fn importance_examples() {
        let path = CameraPath {
            poses: vec![SphericalDirection::new(0.0, 0.0); 30],
        };
        let none = frame_importance(&path, &[]);
        assert!(none.scores.iter().all(|&s| s == 0.0) && none.mean == 0.0);
        let one = frame_importance(&path, &[roi(10, vec![SphericalDirection::new(5.0, 0.0); 11], 0.7)]);
        for (t, s) in one.scores.iter().enumerate() {
            assert_eq!(*s, if (10..=20).contains(&t) { 0.7 } else { 0.0 });
        }
        let two = frame_importance(
            &path,
            &[
                roi(0, vec![SphericalDirection::new(40.0, 0.0); 30], 0.9),
                roi(0, vec![SphericalDirection::new(10.0, 0.0); 30], 0.3),
            ],
        );
        assert!(two.scores.iter().all(|&s| s == 0.3));
    }

    #[test]
    fn cost_examples() {
        let p = prefix_sums(&[3.0; 10]);
        assert_eq!(saliency_cost(2, 4, &p, 3.0, 2.0, false), 0.0);
        let z = prefix_sums(&[0.0; 10]);
        assert_eq!(saliency_cost(0, 7, &z, 0.0, 2.0, false), 0.0);
        let s = prefix_sums(&[1.0, 1.0, 4.0, 1.0, 1.0]);
        assert_eq!(saliency_cost(1, 3, &s, 1.0, 2.0, false), 9.0);
        assert_eq!(saliency_cost(1, 3, &s, 1.0, 2.0, true), 16.0);
        assert_eq!(velocity_cost(0, 8, 8.0, 200.0), 0.0);
        assert_eq!(velocity_cost(0, 28, 8.0, 200.0), 200.0);
        assert_eq!(velocity_cost(0, 11, 8.0, 200.0), 9.0);
        assert_eq!(acceleration_cost(0, 3, 6, 200.0), 0.0);
        assert_eq!(acceleration_cost(0, 2, 7, 200.0), 9.0);
        assert_eq!(acceleration_cost(0, 1, 31, 200.0), 200.0);
    }

    fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    #[test]
    fn alignment_examples() {
        let a = pts(&[(10.0, 10.0), (200.0, 15.0), (30.0, 150.0), (180.0, 170.0), (100.0, 90.0)]);
        let center = Point2::new(100.0, 75.0);
        let same: Vec<Match> = a
            .iter()
            .enumerate()
            .map(|(i, p)| Match {
                track_id: i as u64,
                a: *p,
                b: *p,
            })
            .collect();
        assert!(alignment_cost(&same, center, 25.0, 125.0) < 1e-12);
        let moved: Vec<Match> = a
            .iter()
            .enumerate()
            .map(|(i, p)| Match {
                track_id: i as u64,
                a: *p,
                b: Point2::new(p.x + 3.0, p.y - 4.0),
            })
            .collect();
        assert!((alignment_cost(&moved, center, 25.0, 125.0) - 25.0).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let junk: Vec<Match> = (0..40)
            .map(|i| Match {
                track_id: i,
                a: Point2::new(rng.gen_range(0.0..250.0), rng.gen_range(0.0..250.0)),
                b: Point2::new(rng.gen_range(0.0..250.0), rng.gen_range(0.0..250.0)),
            })
            .collect();
        assert_eq!(alignment_cost(&junk, center, 25.0, 125.0), 125.0);
        assert_eq!(alignment_cost(&same[..3], center, 25.0, 125.0), 125.0);
    }

    #[test]
    fn uniform_instance_picks_every_other_frame() {
        let params = FrameSelectParams::for_speedup(2.0);
        let plan = select_frames(10, &params, &ImportanceCurve::new(vec![0.0; 10]), &ZeroAlignment).unwrap();
        assert_eq!(plan.frames, vec![0, 2, 4, 6, 8]);
    }

    /// Every monotone plan from frame 0 with jumps in `1..=w` ending at or
    /// after the threshold.
    fn brute_force(frames: usize, params: &FrameSelectParams, table: &[Vec<f64>]) -> f64 {
        fn rec(plan: &mut Vec<usize>, frames: usize, thr: usize, w: usize, params: &FrameSelectParams, table: &[Vec<f64>], best: &mut f64) {
            let last = *plan.last().unwrap();
            if plan.len() >= 2 && last >= thr {
                let c = plan_cost(plan, table, params);
                if c < *best {
                    *best = c;
                }
            }
            for k in 1..=w {
                if last + k >= frames {
                    break;
                }
                plan.push(last + k);
                rec(plan, frames, thr, w, params, table, best);
                plan.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(
            &mut vec![0],
            frames,
            end_threshold(frames, params.target_speedup),
            params.window(),
            params,
            table,
            &mut best,
        );
        best
    }

    #[test]
    fn dp_matches_brute_force() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = rng.gen_range(1..=4);
            let frames = rng.gen_range(2..=18);
            let mut params = FrameSelectParams::for_speedup(rng.gen_range(1.0..4.0));
            params.jump_window = Some(w);
            let curve = ImportanceCurve::new((0..frames).map(|_| rng.gen_range(0.0..2.0)).collect());
            let align: Vec<Vec<f64>> = (0..frames)
                .map(|_| (0..frames).map(|_| rng.gen_range(0.0..500.0)).collect())
                .collect();
            let table = transition_costs(frames, &params, &curve, &|i: usize, j: usize| align[i][j]);
            let (plan, cost) = select_frames_with_table(frames, &params, &table).unwrap();
            assert_eq!(cost, brute_force(frames, &params, &table), "seed {seed}");
            assert_eq!(cost, plan_cost(&plan.frames, &table, &params));
            assert!(plan.jumps().iter().all(|&j| (1..=w).contains(&j)));
        }
    }

    #[test]
    fn burst_slows_the_output() {
        let frames = 200;
        let mut s = vec![0.1; frames];
        s[100..105].fill(10.0);
        let params = FrameSelectParams::for_speedup(4.0);
        let plan = select_frames(frames, &params, &ImportanceCurve::new(s), &ZeroAlignment).unwrap();
        let (mut inside, mut outside) = (vec![], vec![]);
        for w in plan.frames.windows(2) {
            if (100..105).contains(&w[0]) {
                inside.push((w[1] - w[0]) as f64);
            } else {
                outside.push((w[1] - w[0]) as f64);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!inside.is_empty() && mean(&inside) < mean(&outside));
    }

    #[test]
    fn plan_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("plan.csv");
        let plan = FramePlan { frames: vec![0, 3, 7, 8] };
        write_plan_csv(&plan, &f).unwrap();
        assert!(std::fs::read_to_string(&f)
            .unwrap()
            .starts_with("output_index,input_frame\n0,0\n1,3\n"));
        assert_eq!(read_plan_csv(&f).unwrap(), plan);
    }

    #[test]
    fn rejects_bad_window() {
        let mut params = FrameSelectParams::for_speedup(2.0);
        params.jump_window = Some(0);
        assert!(matches!(params.validate(), Err(Error::InfeasibleWindow(0))));
    }

    proptest::proptest! {
        #[test]
        fn plans_are_feasible_and_optimal(
            seed in 0u64..1000,
            frames in 2usize..16,
            w in 1usize..5,
            speedup in 1.0f64..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = FrameSelectParams::for_speedup(speedup);
            params.jump_window = Some(w);
            let curve = ImportanceCurve::new((0..frames).map(|_| rng.gen_range(0.0..2.0)).collect());
            let align: Vec<Vec<f64>> = (0..frames).map(|_| (0..frames).map(|_| rng.gen_range(0.0..500.0)).collect()).collect();
            let table = transition_costs(frames, &params, &curve, &|i: usize, j: usize| align[i][j]);
            let (plan, cost) = select_frames_with_table(frames, &params, &table).unwrap();
            proptest::prop_assert_eq!(plan.frames[0], 0);
            proptest::prop_assert!(*plan.frames.last().unwrap() >= end_threshold(frames, speedup));
            proptest::prop_assert!(plan.jumps().iter().all(|&j| (1..=w).contains(&j)));
            proptest::prop_assert_eq!(cost, plan_cost(&plan.frames, &table, &params));
            proptest::prop_assert_eq!(cost, brute_force(frames, &params, &table));
        }
    }
}
