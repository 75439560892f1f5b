//! Adaptive 2D stabilization of the rendered NFOV sequence: per-pair model
//! selection, pose chaining, Jacobi path smoothing and stabilizing warps.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::motion::{select_model_aic, Mat3, ModelKind, RansacParams};
use crate::par;
use crate::raster::GrayImage;
use crate::tracking::{detect_corners_spaced, track_features, TrackerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stab2dParams {
    pub lambda: f64,
    pub sigma_smooth: f64,
    pub jacobi_iterations: usize,
}

impl Default for Stab2dParams {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            sigma_smooth: 2.0,
            jacobi_iterations: 5,
        }
    }
}

impl Stab2dParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.sigma_smooth >= 0.0) {
            return Err(Error::InvalidParameter("lambda and sigma_smooth must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `P_0 = I`, `P_t = H_t P_{t-1}` with `models[t - 1] = H_t`, each product
/// renormalized to `h33 = 1`.
pub fn chain_poses(models: &[Mat3]) -> Result<Vec<Mat3>> {
    let mut out = Vec::with_capacity(models.len() + 1);
    out.push(Mat3::IDENTITY);
    for (i, h) in models.iter().enumerate() {
        if h.inverse().is_none() {
            return Err(Error::SingularModel(i + 1));
        }
        let p = (*h * out[i]).normalized();
        if !p.0.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularModel(i + 1));
        }
        out.push(p);
    }
    Ok(out)
}

/// Neighbor offsets and weights `exp(-d^2 / sigma^2)` for `0 < |d| <= 3 sigma`.
fn neighbor_weights(sigma: f64) -> Vec<(i64, f64)> {
    if sigma <= 0.0 {
        return Vec::new();
    }
    let r = (3.0 * sigma).floor() as i64;
    (-r..=r)
        .filter(|&d| d != 0)
        .map(|d| (d, (-((d * d) as f64) / (sigma * sigma)).exp()))
        .collect()
}

/// `sum_t |Pbar_t - P_t|^2 + lambda sum_t sum_{r in window(t)} w_tr |Pbar_t - Pbar_r|^2`.
pub fn smoothing_objective(chain: &[Mat3], smoothed: &[Mat3], params: &Stab2dParams) -> f64 {
    let nb = neighbor_weights(params.sigma_smooth);
    let n = chain.len() as i64;
    let mut e = 0.0;
    for t in 0..chain.len() {
        e += smoothed[t].frobenius_dist_sq(&chain[t]);
        for &(d, w) in &nb {
            let r = t as i64 + d;
            if (0..n).contains(&r) {
                e += params.lambda * w * smoothed[t].frobenius_dist_sq(&smoothed[r as usize]);
            }
        }
    }
    e
}

/// Jacobi iterations `Pbar_t <- P_t / g_t + sum_r (2 lambda w_tr / g_t) Pbar_r`,
/// `g_t = 1 + 2 lambda sum_r w_tr`, starting from `Pbar = P`.
pub fn smooth_poses(chain: &[Mat3], params: &Stab2dParams) -> Vec<Mat3> {
    let nb = neighbor_weights(params.sigma_smooth);
    let n = chain.len() as i64;
    let mut cur = chain.to_vec();
    if params.lambda == 0.0 || nb.is_empty() {
        return cur;
    }
    for _ in 0..params.jacobi_iterations {
        let next = par::map_range(chain.len(), |t| {
            let mut wsum = 0.0;
            let mut acc = [0.0; 9];
            for &(d, w) in &nb {
                let r = t as i64 + d;
                if (0..n).contains(&r) {
                    wsum += w;
                    for (a, v) in acc.iter_mut().zip(cur[r as usize].0) {
                        *a += w * v;
                    }
                }
            }
            let gamma = 1.0 + 2.0 * params.lambda * wsum;
            let mut m = [0.0; 9];
            for k in 0..9 {
                m[k] = chain[t].0[k] / gamma + 2.0 * params.lambda * acc[k] / gamma;
            }
            Mat3(m).normalized()
        });
        cur = next;
    }
    cur
}

/// `B_t = Pbar_t P_t^{-1}`, renormalized to `h33 = 1`.
pub fn stabilizing_transforms(chain: &[Mat3], smoothed: &[Mat3]) -> Result<Vec<Mat3>> {
    if chain.len() != smoothed.len() {
        return Err(Error::LengthMismatch(chain.len(), smoothed.len()));
    }
    chain
        .iter()
        .zip(smoothed)
        .enumerate()
        .map(|(t, (p, s))| {
            let inv = p.inverse().ok_or(Error::SingularPose(t))?;
            Ok((*s * inv).normalized())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stab2dResult {
    /// Per-frame stabilizing transform.
    pub transforms: Vec<Mat3>,
    /// Per-frame model kind; frame 0 has no predecessor and reports
    /// translation.
    pub kinds: Vec<ModelKind>,
    /// `models[t - 1]` maps frame `t - 1` onto frame `t`.
    pub models: Vec<Mat3>,
}

/// Per-pair AIC model selection on tracked corners, then chaining, smoothing
/// and stabilizing transforms. Pairs that cannot be fitted fall back to the
/// identity.
pub fn stabilize_video(
    frames: &[GrayImage],
    tracker: &TrackerParams,
    ransac: &RansacParams,
    params: &Stab2dParams,
) -> Result<Stab2dResult> {
    params.validate()?;
    if frames.len() < 2 {
        return Err(Error::InvalidParameter("2D stabilization needs at least two frames".into()));
    }
    let picks = par::map_range(frames.len() - 1, |t| -> Result<(ModelKind, Mat3)> {
        let corners = detect_corners_spaced(&frames[t], tracker.max_corners, tracker.corner_quality, tracker.min_spacing, &[]);
        let matches = track_features(&frames[t], &frames[t + 1], &corners, tracker)?;
        let pair_params = RansacParams {
            seed: ransac.seed.wrapping_add(t as u64),
            ..*ransac
        };
        match select_model_aic(&matches, &pair_params) {
            Ok(sel) if sel.model.inverse().is_some() => Ok((sel.kind, sel.model)),
            Ok(_) | Err(Error::TooFewMatches { .. }) | Err(Error::NoConsensus) | Err(Error::Degenerate(_)) => {
                log::warn!("frame pair {t}: no usable motion model; using identity");
                Ok((ModelKind::Translation, Mat3::IDENTITY))
            }
            Err(e) => Err(e),
        }
    });
    let mut kinds = vec![ModelKind::Translation];
    let mut models = Vec::with_capacity(frames.len() - 1);
    for p in picks {
        let (k, m) = p?;
        kinds.push(k);
        models.push(m);
    }
    let chain = chain_poses(&models)?;
    let smoothed = smooth_poses(&chain, params);
    let transforms = stabilizing_transforms(&chain, &smoothed)?;
    Ok(Stab2dResult { transforms, kinds, models })
}

const TRANSFORM_HEADER: [&str; 11] = ["frame", "kind", "h11", "h12", "h13", "h21", "h22", "h23", "h31", "h32", "h33"];

pub fn write_transforms_csv(transforms: &[Mat3], kinds: &[ModelKind], file: &Path) -> Result<()> {
    if transforms.len() != kinds.len() {
        return Err(Error::LengthMismatch(transforms.len(), kinds.len()));
    }
    let mut w = csv::Writer::from_path(file)?;
    w.write_record(TRANSFORM_HEADER)?;
    for (t, (m, k)) in transforms.iter().zip(kinds).enumerate() {
        let mut row = vec![t.to_string(), k.to_string()];
        row.extend(m.0.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transforms_csv(file: &Path) -> Result<(Vec<Mat3>, Vec<ModelKind>)> {
    let mut r = csv::Reader::from_path(file)?;
    if r.headers()?.iter().collect::<Vec<_>>() != TRANSFORM_HEADER {
        return Err(Error::Format("unexpected transforms header".into()));
    }
    let (mut ms, mut ks) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::Format(format!("transforms row {i}: {m}"));
        if rec.get(0).and_then(|s| s.parse::<usize>().ok()) != Some(i) {
            return Err(bad("frame out of order".into()));
        }
        let kind: ModelKind = rec[1].parse().map_err(|_| bad(format!("unknown kind {}", &rec[1])))?;
        let mut m = [0.0; 9];
        for (k, v) in m.iter_mut().enumerate() {
            *v = rec[2 + k].parse().map_err(|e| bad(format!("{e}")))?;
        }
        ms.push(Mat3(m));
        ks.push(kind);
    }
    Ok((ms, ks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng) -> Mat3 {
        let mut m = Mat3::similarity(
            rng.gen_range(0.95..1.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        )
        .0;
        m[6] = rng.gen_range(-1e-4..1e-4);
        m[7] = rng.gen_range(-1e-4..1e-4);
        Mat3(m).normalized()
    }

    #[test]
    fn chain_examples() {
        let id = chain_poses(&[Mat3::IDENTITY; 4]).unwrap();
        assert!(id.iter().all(|p| *p == Mat3::IDENTITY));
        let tr = chain_poses(&[Mat3::translation(1.0, 0.0); 6]).unwrap();
        for (t, p) in tr.iter().enumerate() {
            assert!((p.at(0, 2) - t as f64).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hs: Vec<Mat3> = (0..30).map(|_| random_model(&mut rng)).collect();
        let ps = chain_poses(&hs).unwrap();
        for t in 1..ps.len() {
            let h = (ps[t] * ps[t - 1].inverse().unwrap()).normalized();
            assert!(h.max_abs_diff(&hs[t - 1]) < 1e-9);
        }
        assert!(matches!(
            chain_poses(&[Mat3::IDENTITY, Mat3([0.0; 9])]),
            Err(Error::SingularModel(2))
        ));
    }

    #[test]
    fn smoothing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chain = chain_poses(&(0..20).map(|_| random_model(&mut rng)).collect::<Vec<_>>()).unwrap();
        let off = Stab2dParams {
            lambda: 0.0,
            ..Default::default()
        };
        assert_eq!(smooth_poses(&chain, &off), chain);
        let tiny = Stab2dParams {
            sigma_smooth: 1e-3,
            ..Default::default()
        };
        for (a, b) in smooth_poses(&chain, &tiny).iter().zip(&chain) {
            assert!(a.max_abs_diff(b) < 1e-9);
        }
        let p = Mat3::similarity(1.1, 0.2, 4.0, -2.0);
        for s in smooth_poses(&vec![p; 12], &Stab2dParams::default()) {
            assert!(s.max_abs_diff(&p) < 1e-12);
        }
    }

    #[test]
    fn alternating_jitter_is_damped() {
        let hs: Vec<Mat3> = (0..60)
            .map(|t| Mat3::translation(if t % 2 == 0 { 2.0 } else { -2.0 }, 0.0))
            .collect();
        let chain = chain_poses(&hs).unwrap();
        let smoothed = smooth_poses(&chain, &Stab2dParams::default());
        let sd = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let before: Vec<f64> = chain.iter().map(|p| p.at(0, 2)).collect();
        let after: Vec<f64> = smoothed.iter().map(|p| p.at(0, 2)).collect();
        assert!(sd(&before) >= 3.0 * sd(&after), "{} vs {}", sd(&before), sd(&after));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn objective_decreases(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..60);
            let chain = chain_poses(&(0..n).map(|_| random_model(&mut rng)).collect::<Vec<_>>()).unwrap();
            let params = Stab2dParams::default();
            let smoothed = smooth_poses(&chain, &params);
            prop_assert!(smoothing_objective(&chain, &smoothed, &params) < smoothing_objective(&chain, &chain, &params));
        }

        #[test]
        fn transforms_map_chain_onto_smoothed(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chain = chain_poses(&(0..15).map(|_| random_model(&mut rng)).collect::<Vec<_>>()).unwrap();
            let smoothed = smooth_poses(&chain, &Stab2dParams::default());
            let b = stabilizing_transforms(&chain, &smoothed).unwrap();
            for t in 0..chain.len() {
                prop_assert!((b[t] * chain[t]).normalized().max_abs_diff(&smoothed[t]) < 1e-9);
            }
            let same = stabilizing_transforms(&chain, &chain).unwrap();
            prop_assert!(same.iter().all(|m| m.max_abs_diff(&Mat3::IDENTITY) < 1e-9));
        }
    }

    #[test]
    fn translation_chain_gives_translations() {
        let hs: Vec<Mat3> = (0..10)
            .map(|t| Mat3::translation(1.0 + (t % 3) as f64, -0.5 * (t % 2) as f64))
            .collect();
        let chain = chain_poses(&hs).unwrap();
        let b = stabilizing_transforms(&chain, &smooth_poses(&chain, &Stab2dParams::default())).unwrap();
        for m in b {
            assert!((m.at(0, 0) - 1.0).abs() < 1e-12 && m.at(0, 1).abs() < 1e-12 && m.at(1, 0).abs() < 1e-12);
            assert!((m.at(1, 1) - 1.0).abs() < 1e-12 && m.at(2, 0).abs() < 1e-12 && m.at(2, 1).abs() < 1e-12);
        }
    }

    #[test]
    fn static_video_needs_no_correction() {
        let img = GrayImage::from_fn(96, 72, |x, y| {
            let (cx, cy) = ((x / 12) % 2, (y / 12) % 2);
            if cx ^ cy == 1 {
                0.9
            } else {
                0.1
            }
        });
        let frames = vec![img; 4];
        let res = stabilize_video(
            &frames,
            &TrackerParams::default(),
            &RansacParams::default(),
            &Stab2dParams::default(),
        )
        .unwrap();
        for b in &res.transforms {
            for &(x, y) in &[(0.0, 0.0), (95.0, 0.0), (0.0, 71.0), (95.0, 71.0)] {
                let p = crate::tracking::Point2::new(x, y);
                assert!(b.apply(p).dist(p) < 0.1);
            }
        }
        assert_eq!(res.kinds.len(), 4);
    }

    #[test]
    fn transforms_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("t.csv");
        let ms = vec![Mat3::IDENTITY, Mat3::similarity(1.01, 0.1, 0.3333333333333, -7.25)];
        let ks = vec![ModelKind::Translation, ModelKind::Homography];
        write_transforms_csv(&ms, &ks, &f).unwrap();
        assert!(std::fs::read_to_string(&f)
            .unwrap()
            .starts_with("frame,kind,h11,h12,h13,h21,h22,h23,h31,h32,h33\n0,"));
        let (m2, k2) = read_transforms_csv(&f).unwrap();
        assert_eq!((m2.clone(), k2.clone()), (ms, ks));
        let g = dir.path().join("u.csv");
        write_transforms_csv(&m2, &k2, &g).unwrap();
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(&g).unwrap());
    }
}
