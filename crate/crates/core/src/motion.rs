//! 2D motion models (translation, similarity, homography), RANSAC, and
//! Akaike-information-criterion model selection.

use nalgebra::{DMatrix, Matrix3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Mul;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::par;
use crate::tracking::{Match, Point2};

/// Row-major 3x3 projective matrix, kept with `h33 = 1` when possible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [f64; 9]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn translation(tx: f64, ty: f64) -> Mat3 {
        Mat3([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    /// `x' = s R(angle) x + t`.
    pub fn similarity(scale: f64, angle_rad: f64, tx: f64, ty: f64) -> Mat3 {
        let (s, c) = angle_rad.sin_cos();
        Mat3([scale * c, -scale * s, tx, scale * s, scale * c, ty, 0.0, 0.0, 1.0])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.0[r * 3 + c]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        if !d.is_finite() || d.abs() < 1e-12 {
            return None;
        }
        let m = &self.0;
        let inv = [
            (m[4] * m[8] - m[5] * m[7]) / d,
            (m[2] * m[7] - m[1] * m[8]) / d,
            (m[1] * m[5] - m[2] * m[4]) / d,
            (m[5] * m[6] - m[3] * m[8]) / d,
            (m[0] * m[8] - m[2] * m[6]) / d,
            (m[2] * m[3] - m[0] * m[5]) / d,
            (m[3] * m[7] - m[4] * m[6]) / d,
            (m[1] * m[6] - m[0] * m[7]) / d,
            (m[0] * m[4] - m[1] * m[3]) / d,
        ];
        Some(Mat3(inv).normalized())
    }

    /// Scales so `h33 = 1`; left unchanged when `h33` is (near) zero.
    pub fn normalized(self) -> Mat3 {
        let h = self.0[8];
        if h.abs() < 1e-12 {
            return self;
        }
        let mut out = self.0;
        out.iter_mut().for_each(|v| *v /= h);
        Mat3(out)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let m = &self.0;
        let w = m[6] * p.x + m[7] * p.y + m[8];
        Point2::new((m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w)
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        self.0.iter().zip(&o.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn frobenius_dist_sq(&self, o: &Mat3) -> f64 {
        self.0.iter().zip(&o.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn to_na(self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.0)
    }

    fn from_na(m: &Matrix3<f64>) -> Mat3 {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = m[(r, c)];
            }
        }
        Mat3(out)
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = (0..3).map(|k| self.0[r * 3 + k] * o.0[k * 3 + c]).sum();
            }
        }
        Mat3(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Translation,
    Similarity,
    Homography,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Translation, ModelKind::Similarity, ModelKind::Homography];

    /// Free-parameter count `k` used by the AIC.
    pub fn parameter_count(self) -> usize {
        match self {
            ModelKind::Translation => 2,
            ModelKind::Similarity => 4,
            ModelKind::Homography => 8,
        }
    }

    pub fn min_samples(self) -> usize {
        match self {
            ModelKind::Translation => 1,
            ModelKind::Similarity => 2,
            ModelKind::Homography => 4,
        }
    }

    pub fn fit(self, matches: &[Match]) -> Result<Mat3> {
        match self {
            ModelKind::Translation => fit_translation(matches),
            ModelKind::Similarity => fit_similarity(matches),
            ModelKind::Homography => fit_homography(matches),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Translation => "translation",
            ModelKind::Similarity => "similarity",
            ModelKind::Homography => "homography",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(ModelKind::Translation),
            "similarity" => Ok(ModelKind::Similarity),
            "homography" => Ok(ModelKind::Homography),
            other => Err(Error::Format(format!("unknown model kind {other:?}"))),
        }
    }
}

pub fn fit_translation(matches: &[Match]) -> Result<Mat3> {
    if matches.is_empty() {
        return Err(Error::EmptyMatches);
    }
    let n = matches.len() as f64;
    let (sx, sy) = matches.iter().fold((0.0, 0.0), |(sx, sy), m| {
        let (dx, dy) = m.displacement();
        (sx + dx, sy + dy)
    });
    Ok(Mat3::translation(sx / n, sy / n))
}

/// Least-squares 4-DOF fit of `b = [a -b; b a] a_pt + t`.
pub fn fit_similarity(matches: &[Match]) -> Result<Mat3> {
    if matches.len() < 2 {
        return Err(Error::TooFewMatches {
            need: 2,
            got: matches.len(),
        });
    }
    let n = matches.len() as f64;
    let (mut cax, mut cay, mut cbx, mut cby) = (0.0, 0.0, 0.0, 0.0);
    for m in matches {
        cax += m.a.x;
        cay += m.a.y;
        cbx += m.b.x;
        cby += m.b.y;
    }
    cax /= n;
    cay /= n;
    cbx /= n;
    cby /= n;
    let (mut den, mut num_a, mut num_b) = (0.0, 0.0, 0.0);
    for m in matches {
        let (ax, ay) = (m.a.x - cax, m.a.y - cay);
        let (bx, by) = (m.b.x - cbx, m.b.y - cby);
        den += ax * ax + ay * ay;
        num_a += ax * bx + ay * by;
        num_b += ax * by - ay * bx;
    }
    if den < 1e-12 {
        return Err(Error::Degenerate("coincident points"));
    }
    let a = num_a / den;
    let b = num_b / den;
    let tx = cbx - (a * cax - b * cay);
    let ty = cby - (b * cax + a * cay);
    Ok(Mat3([a, -b, tx, b, a, ty, 0.0, 0.0, 1.0]))
}

fn normalizing_transform(pts: impl Iterator<Item = Point2> + Clone) -> Option<Mat3> {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts.clone().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = pts.map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    if !(mean_dist > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Mat3([s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0]))
}

/// Normalized DLT homography with `h33 = 1`.
pub fn fit_homography(matches: &[Match]) -> Result<Mat3> {
    if matches.len() < 4 {
        return Err(Error::TooFewMatches {
            need: 4,
            got: matches.len(),
        });
    }
    let ta = normalizing_transform(matches.iter().map(|m| m.a)).ok_or(Error::Degenerate("coincident points"))?;
    let tb = normalizing_transform(matches.iter().map(|m| m.b)).ok_or(Error::Degenerate("coincident points"))?;
    let rows = (2 * matches.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, m) in matches.iter().enumerate() {
        let p = ta.apply(m.a);
        let q = tb.apply(m.b);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = -p.x;
        a[(r0, 1)] = -p.y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = q.x * p.x;
        a[(r0, 7)] = q.x * p.y;
        a[(r0, 8)] = q.x;
        a[(r1, 3)] = -p.x;
        a[(r1, 4)] = -p.y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = q.y * p.x;
        a[(r1, 7)] = q.y * p.y;
        a[(r1, 8)] = q.y;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::Degenerate("svd failed"))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let smax = sv[order[sv.len() - 1]];
    // a second (near) null direction means the correspondences do not pin H
    if sv[order[1]] <= 1e-9 * smax {
        return Err(Error::Degenerate("rank-deficient correspondences"));
    }
    let h = v_t.row(order[0]);
    let hn = Mat3([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]]);
    let tb_inv = tb.inverse().ok_or(Error::Degenerate("normalization singular"))?;
    let full = Mat3::from_na(&(tb_inv.to_na() * hn.to_na() * ta.to_na()));
    if full.0[8].abs() < 1e-12 {
        return Err(Error::Degenerate("h33 vanishes"));
    }
    let out = full.normalized();
    if out.det().abs() < 1e-12 || out.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("singular homography"));
    }
    Ok(out)
}

/// Euclidean reprojection distance `|b - M a|` for every match.
pub fn residuals(model: &Mat3, matches: &[Match]) -> Vec<f64> {
    matches.iter().map(|m| model.apply(m.a).dist(m.b)).collect()
}

/// Floor applied to the mean squared residual before taking its logarithm.
pub const AIC_EPSILON: f64 = 1e-12;

/// `n ln(max(mean(r^2), eps)) + 2k`.
pub fn aic_score(residuals: &[f64], k: usize) -> f64 {
    let n = residuals.len() as f64;
    let mse = residuals.iter().map(|r| r * r).sum::<f64>() / n;
    n * mse.max(AIC_EPSILON).ln() + 2.0 * k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AicFitMode {
    /// Models refit on their RANSAC inlier sets.
    #[default]
    Ransac,
    /// Plain least-squares fits on all matches.
    FullData,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
    pub fit_mode: AicFitMode,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 2.0,
            seed: 0,
            fit_mode: AicFitMode::Ransac,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub model: Mat3,
    pub inliers: Vec<bool>,
}

impl RansacFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Hypothesize-and-verify over minimal samples, then refit on the largest
/// consensus set. Samples come from a seeded generator so results are
/// reproducible; hypotheses are scored in parallel.
pub fn ransac_fit(matches: &[Match], kind: ModelKind, params: &RansacParams) -> Result<RansacFit> {
    let need = kind.min_samples();
    if matches.len() < need {
        return Err(Error::TooFewMatches { need, got: matches.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let samples: Vec<Vec<usize>> = (0..params.iterations.max(1))
        .map(|_| sample(&mut rng, matches.len(), need).into_vec())
        .collect();
    let thr = params.inlier_threshold;
    let scored = par::map_slice(&samples, |idx| {
        let subset: Vec<Match> = idx.iter().map(|&i| matches[i]).collect();
        let model = kind.fit(&subset).ok()?;
        let r = residuals(&model, matches);
        let count = r.iter().filter(|&&e| e < thr).count();
        let spread: f64 = r.iter().filter(|&&e| e < thr).map(|e| e * e).sum();
        Some((count, spread, model))
    });
    let mut best: Option<(usize, f64, Mat3)> = None;
    for s in scored.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => s.0 > b.0 || (s.0 == b.0 && s.1 < b.1),
        };
        if better {
            best = Some(s);
        }
    }
    let (count, _, model) = best.ok_or(Error::NoConsensus)?;
    if count < need + 1 {
        return Err(Error::NoConsensus);
    }
    let mask: Vec<bool> = residuals(&model, matches).iter().map(|&e| e < thr).collect();
    let inlier_set: Vec<Match> = matches.iter().zip(&mask).filter(|(_, &b)| b).map(|(m, _)| *m).collect();
    let refit = kind.fit(&inlier_set).unwrap_or(model);
    Ok(RansacFit {
        model: refit,
        inliers: mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSelection {
    pub kind: ModelKind,
    pub model: Mat3,
    /// AIC per candidate that produced a model.
    pub scores: Vec<(ModelKind, f64)>,
}

/// Candidate kinds admissible for `n` matches.
pub fn admissible_kinds(n: usize) -> Vec<ModelKind> {
    ModelKind::ALL.into_iter().filter(|k| n >= k.min_samples()).collect()
}

/// Fits every admissible model and returns the one with the lowest AIC over
/// all matches; ties favor fewer parameters.
pub fn select_model_aic(matches: &[Match], params: &RansacParams) -> Result<ModelSelection> {
    if matches.is_empty() {
        return Err(Error::TooFewMatches { need: 1, got: 0 });
    }
    let mut scores = Vec::new();
    let mut best: Option<(ModelKind, Mat3, f64)> = None;
    for kind in admissible_kinds(matches.len()) {
        let fitted = match params.fit_mode {
            AicFitMode::Ransac => ransac_fit(matches, kind, params).map(|f| f.model),
            AicFitMode::FullData => kind.fit(matches),
        };
        let Ok(model) = fitted else { continue };
        let aic = aic_score(&residuals(&model, matches), kind.parameter_count());
        scores.push((kind, aic));
        if best.as_ref().map_or(true, |b| aic < b.2) {
            best = Some((kind, model, aic));
        }
    }
    let (kind, model, _) = match best {
        Some(b) => b,
        None => {
            let model = fit_translation(matches)?;
            let aic = aic_score(&residuals(&model, matches), 2);
            scores.push((ModelKind::Translation, aic));
            (ModelKind::Translation, model, aic)
        }
    };
    Ok(ModelSelection { kind, model, scores })
}
