//! Rotation-only stabilization of equirectangular video: per-pair rotations
//! from tracked features, cumulative chaining, Gaussian quaternion smoothing,
//! and spherical rewarping.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geom::{gaussian_kernel, quat_weighted_blend, EquirectGeometry, UnitQuaternion, Vec3};
use crate::par;
use crate::raster::{to_u8, RgbImage};
use crate::tracking::FeatureTrack;

/// Eigen-decomposition of a symmetric 4x4 matrix by cyclic Jacobi sweeps.
/// Returns eigenvalues and the matching eigenvectors as columns.
pub fn jacobi_eigen_sym4(m: [[f64; 4]; 4]) -> ([f64; 4], [[f64; 4]; 4]) {
    let mut a = m;
    let mut v = [[0.0; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..4)
            .flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-12 * scale {
            break;
        }
        for p in 0..3 {
            for q in p + 1..4 {
                if a[p][q].abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2], a[3][3]], v)
}

/// Closed-form absolute orientation: the rotation `R` maximizing
/// `sum dot(R a_i, b_i)`.
pub fn estimate_rotation_horn(pairs: &[(Vec3, Vec3)]) -> Result<UnitQuaternion> {
    if pairs.len() < 3 {
        return Err(Error::Degenerate("fewer than 3 correspondences"));
    }
    let a0 = pairs[0].0;
    let spread = pairs.iter().map(|(a, _)| a0.cross(*a).norm()).fold(0.0, f64::max);
    if spread < 1e-9 {
        return Err(Error::Degenerate("correspondences collinear through the origin"));
    }
    let mut s = [[0.0; 3]; 3];
    for (a, b) in pairs {
        let av = [a.x, a.y, a.z];
        let bv = [b.x, b.y, b.z];
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += av[i] * bv[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (vals, vecs) = jacobi_eigen_sym4(n);
    let best = (0..4).max_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap_or(0);
    let q = UnitQuaternion::from_components(vecs[0][best], vecs[1][best], vecs[2][best], vecs[3][best]);
    if !q.w.is_finite() {
        return Err(Error::Degenerate("eigen-solve failed"));
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustHornParams {
    pub iterations: usize,
    pub inlier_angle_deg: f64,
    pub seed: u64,
}

impl Default for RobustHornParams {
    fn default() -> Self {
        Self {
            iterations: 50,
            inlier_angle_deg: 1.0,
            seed: 0,
        }
    }
}

/// Horn's method inside a 3-point RANSAC loop; the final rotation is refit on
/// the inliers of the best hypothesis.
pub fn estimate_rotation_robust(pairs: &[(Vec3, Vec3)], params: &RobustHornParams) -> Result<(UnitQuaternion, Vec<bool>)> {
    if pairs.len() < 3 {
        return Err(Error::Degenerate("fewer than 3 correspondences"));
    }
    let thr = params.inlier_angle_deg.to_radians();
    let mask_for = |q: UnitQuaternion| -> Vec<bool> { pairs.iter().map(|(a, b)| q.rotate(*a).angle_to(*b) < thr).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, UnitQuaternion)> = None;
    if pairs.len() > 3 {
        for _ in 0..params.iterations {
            let idx = sample(&mut rng, pairs.len(), 3);
            let subset: Vec<(Vec3, Vec3)> = idx.iter().map(|i| pairs[i]).collect();
            let Ok(q) = estimate_rotation_horn(&subset) else { continue };
            let count = mask_for(q).iter().filter(|&&b| b).count();
            if best.map_or(true, |(c, _)| count > c) {
                best = Some((count, q));
            }
        }
    }
    let (_, hyp) = match best {
        Some(b) if b.0 >= 3 => b,
        _ => (pairs.len(), estimate_rotation_horn(pairs)?),
    };
    let mask = mask_for(hyp);
    let inliers: Vec<(Vec3, Vec3)> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let q = estimate_rotation_horn(&inliers).unwrap_or(hyp);
    Ok((q, mask_for(q)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stab360Params {
    /// Gaussian smoothing width in frames.
    pub sigma: f64,
    pub horn: RobustHornParams,
}

impl Default for Stab360Params {
    fn default() -> Self {
        Self {
            sigma: 20.0,
            horn: RobustHornParams::default(),
        }
    }
}

/// Unit-vector correspondences between frames `t` and `t + 1`.
pub fn pair_correspondences(tracks: &[FeatureTrack], g: &EquirectGeometry, t: usize) -> Vec<(Vec3, Vec3)> {
    tracks
        .iter()
        .filter_map(|tr| {
            let a = tr.point_at(t)?;
            let b = tr.point_at(t + 1)?;
            Some((g.pixel_to_vec(a.x, a.y), g.pixel_to_vec(b.x, b.y)))
        })
        .collect()
}

/// Rotation from frame `t` to frame `t + 1` for every adjacent pair of an
/// `n_frames` sequence.
pub fn relative_rotations(
    tracks: &[FeatureTrack],
    g: &EquirectGeometry,
    n_frames: usize,
    params: &RobustHornParams,
) -> Vec<Result<UnitQuaternion>> {
    par::map_range(n_frames.saturating_sub(1), |t| {
        let pairs = pair_correspondences(tracks, g, t);
        if pairs.len() < 3 {
            return Err(Error::InsufficientTracks { frame: t });
        }
        let p = RobustHornParams {
            seed: params.seed.wrapping_add(t as u64),
            ..*params
        };
        estimate_rotation_robust(&pairs, &p)
            .map(|(q, _)| q)
            .map_err(|_| Error::InsufficientTracks { frame: t })
    })
}

/// `Q(0) = I`, `Q(t) = q(t-1) * Q(t-1)`; output has one more entry than `q_rel`.
pub fn cumulative_rotations(q_rel: &[UnitQuaternion]) -> Vec<UnitQuaternion> {
    let mut out = Vec::with_capacity(q_rel.len() + 1);
    out.push(UnitQuaternion::IDENTITY);
    for q in q_rel {
        let prev = *out.last().unwrap();
        out.push(*q * prev);
    }
    out
}

/// Gaussian-weighted quaternion blend over a `3 sigma` window.
pub fn smooth_rotations(q_cum: &[UnitQuaternion], sigma: f64) -> Vec<UnitQuaternion> {
    if sigma <= 0.0 {
        return q_cum.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let n = q_cum.len() as i64;
    par::map_range(q_cum.len(), |t| {
        let t = t as i64;
        let lo = (t - r).max(0);
        let hi = (t + r).min(n - 1);
        let quats = &q_cum[lo as usize..=hi as usize];
        let weights: Vec<f64> = (lo..=hi).map(|i| kernel[(i - t + r) as usize]).collect();
        quat_weighted_blend(quats, &weights).expect("kernel center weight is positive")
    })
}

/// `R(t) = Q(t)^-1 * Qs(t)`.
pub fn corrective_rotations(q_cum: &[UnitQuaternion], q_smooth: &[UnitQuaternion]) -> Result<Vec<UnitQuaternion>> {
    if q_cum.len() != q_smooth.len() {
        return Err(Error::LengthMismatch(q_cum.len(), q_smooth.len()));
    }
    Ok(q_cum.iter().zip(q_smooth).map(|(q, s)| q.inverse() * *s).collect())
}

/// Rotation applied to the pixels of frame `t` so it shows the smoothed
/// orientation: `Qs Q^-1`, i.e. the corrective rotation conjugated into the
/// frame's own coordinates (`Q R Q^-1`).
pub fn frame_warp_rotation(q_cum: UnitQuaternion, r_corr: UnitQuaternion) -> UnitQuaternion {
    q_cum * r_corr * q_cum.inverse()
}

/// Rewarps an equirectangular frame by `r`: output direction `u` samples the
/// input at `r^-1 u` (bilinear, wrapping horizontally, clamping at the poles).
pub fn warp_equirect(image: &RgbImage, r: UnitQuaternion, g: &EquirectGeometry) -> Result<RgbImage> {
    image.check_dims(g.width, g.height)?;
    let (w, h) = (g.width, g.height);
    let m = r.inverse().to_matrix();
    let cols: Vec<(f64, f64)> = (0..w)
        .map(|x| {
            let th = ((x as f64 + 0.5) / w as f64 * 360.0 - 180.0).to_radians();
            th.sin_cos()
        })
        .collect();
    let mut out = RgbImage::new(w, h);
    let wf = w as f64;
    let hf = h as f64;
    par::for_each_chunk_mut(&mut out.data, w * 3, |y, row| {
        let ph = (90.0 - (y as f64 + 0.5) / hf * 180.0).to_radians();
        let (sp, cp) = ph.sin_cos();
        for (x, &(st, ct)) in cols.iter().enumerate() {
            let u = [cp * st, sp, cp * ct];
            let v = [
                m[0][0] * u[0] + m[0][1] * u[1] + m[0][2] * u[2],
                m[1][0] * u[0] + m[1][1] * u[1] + m[1][2] * u[2],
                m[2][0] * u[0] + m[2][1] * u[1] + m[2][2] * u[2],
            ];
            let phi = v[1].clamp(-1.0, 1.0).asin().to_degrees();
            let theta = v[0].atan2(v[2]).to_degrees();
            let sx = (theta + 180.0) / 360.0 * wf - 0.5;
            let sy = (90.0 - phi) / 180.0 * hf - 0.5;
            row[x * 3..x * 3 + 3].copy_from_slice(&to_u8(image.sample_wrapped(sx, sy)));
        }
    });
    Ok(out)
}

/// All four rotation sequences of a stabilization run.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationTrack {
    /// `relative[t]` maps frame `t` to frame `t + 1`.
    pub relative: Vec<UnitQuaternion>,
    pub cumulative: Vec<UnitQuaternion>,
    pub smoothed: Vec<UnitQuaternion>,
    pub corrective: Vec<UnitQuaternion>,
    /// Pairs whose rotation could not be estimated and were set to identity.
    pub failed_pairs: Vec<usize>,
}

impl RotationTrack {
    pub fn warp_rotation(&self, t: usize) -> UnitQuaternion {
        frame_warp_rotation(self.cumulative[t], self.corrective[t])
    }
}

/// Runs rotation estimation, chaining, smoothing and correction. Pairs lacking
/// tracks fall back to identity and are reported in `failed_pairs`.
pub fn estimate_rotation_track(tracks: &[FeatureTrack], g: &EquirectGeometry, n_frames: usize, params: &Stab360Params) -> RotationTrack {
    let mut failed_pairs = Vec::new();
    let relative: Vec<UnitQuaternion> = relative_rotations(tracks, g, n_frames, &params.horn)
        .into_iter()
        .enumerate()
        .map(|(t, r)| {
            r.unwrap_or_else(|e| {
                log::warn!("frame pair {t}: {e}; using identity");
                failed_pairs.push(t);
                UnitQuaternion::IDENTITY
            })
        })
        .collect();
    let cumulative = if n_frames == 0 {
        Vec::new()
    } else {
        cumulative_rotations(&relative)
    };
    let smoothed = smooth_rotations(&cumulative, params.sigma);
    let corrective = corrective_rotations(&cumulative, &smoothed).expect("equal lengths");
    RotationTrack {
        relative,
        cumulative,
        smoothed,
        corrective,
        failed_pairs,
    }
}

pub fn write_rotations_csv<W: Write>(quats: &[UnitQuaternion], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "qw", "qx", "qy", "qz"])?;
    for (t, q) in quats.iter().enumerate() {
        w.write_record([
            t.to_string(),
            format!("{:.12}", q.w),
            format!("{:.12}", q.x),
            format!("{:.12}", q.y),
            format!("{:.12}", q.z),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rotations_csv<R: Read>(input: R) -> Result<Vec<UnitQuaternion>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["frame", "qw", "qx", "qy", "qz"] {
        return Err(Error::Format(format!("unexpected rotation header {headers:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad rotation row {}", i + 1)))
        };
        if parse(0)? as usize != i {
            return Err(Error::Format(format!("rotation rows out of order at {}", i + 1)));
        }
        out.push(UnitQuaternion::from_components(parse(1)?, parse(2)?, parse(3)?, parse(4)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{dir_to_vec, SphericalDirection};
    use crate::tracking::Point2;
    use rand::Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v * (1.0 / n);
            }
        }
    }

    #[test]
    fn jacobi_diagonalizes() {
        let m = [
            [4.0, 1.0, 0.5, 0.0],
            [1.0, 3.0, 0.2, 0.1],
            [0.5, 0.2, -1.0, 0.3],
            [0.0, 0.1, 0.3, 2.0],
        ];
        let (vals, v) = jacobi_eigen_sym4(m);
        for k in 0..4 {
            for i in 0..4 {
                let mv: f64 = (0..4).map(|j| m[i][j] * v[j][k]).sum();
                assert!((mv - vals[k] * v[i][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn horn_identity_and_yaw() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..10).map(|_| random_unit(&mut rng)).collect();
        let same: Vec<(Vec3, Vec3)> = pts.iter().map(|&p| (p, p)).collect();
        assert!(estimate_rotation_horn(&same).unwrap().angle() < 1e-9);
        let q = UnitQuaternion::yaw(30.0);
        let rot: Vec<(Vec3, Vec3)> = pts.iter().map(|&p| (p, q.rotate(p))).collect();
        assert!(estimate_rotation_horn(&rot).unwrap().angle_to(q) < 1e-9);
    }

    #[test]
    fn horn_degenerate() {
        let a = Vec3::new(0.0, 0.0, 1.0);
        let pairs = vec![(a, a), (-a, -a), (a, a)];
        assert!(estimate_rotation_horn(&pairs).is_err());
        assert!(estimate_rotation_horn(&pairs[..2]).is_err());
    }

    #[test]
    fn robust_horn_ignores_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = UnitQuaternion::from_axis_angle(Vec3::new(0.3, 1.0, 0.1).normalized(), 0.2);
        let mut pairs: Vec<(Vec3, Vec3)> = (0..40)
            .map(|_| {
                let p = random_unit(&mut rng);
                (p, q.rotate(p))
            })
            .collect();
        for _ in 0..10 {
            pairs.push((random_unit(&mut rng), random_unit(&mut rng)));
        }
        let (est, mask) = estimate_rotation_robust(&pairs, &RobustHornParams::default()).unwrap();
        assert!(est.angle_to(q) < 1e-9);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 40);
    }

    fn rotation_tracks(g: &EquirectGeometry, rots: &[UnitQuaternion], n_pts: usize, seed: u64) -> Vec<FeatureTrack> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_pts)
            .map(|i| {
                let d = SphericalDirection::new(rng.gen_range(-180.0..180.0), rng.gen_range(-60.0..60.0));
                let v = dir_to_vec(d);
                let points = rots
                    .iter()
                    .map(|q| {
                        let (x, y) = g.vec_to_pixel(q.rotate(v));
                        Point2::new(x.rem_euclid(g.width as f64), y)
                    })
                    .collect();
                FeatureTrack {
                    track_id: i as u64,
                    start_frame: 0,
                    points,
                }
            })
            .collect()
    }

    #[test]
    fn static_scene_gives_identities() {
        let g = EquirectGeometry::new(960, 480).unwrap();
        let tracks = rotation_tracks(&g, &[UnitQuaternion::IDENTITY; 5], 30, 2);
        for r in relative_rotations(&tracks, &g, 5, &RobustHornParams::default()) {
            assert!(r.unwrap().angle() < 1e-6);
        }
    }

    #[test]
    fn relative_rotations_match_ground_truth() {
        let g = EquirectGeometry::new(960, 480).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rots = vec![UnitQuaternion::IDENTITY];
        for _ in 0..10 {
            let step = UnitQuaternion::yaw(rng.gen_range(-3.0..3.0)) * UnitQuaternion::pitch(rng.gen_range(-2.0..2.0));
            rots.push(step * *rots.last().unwrap());
        }
        let tracks = rotation_tracks(&g, &rots, 40, 4);
        let est = relative_rotations(&tracks, &g, rots.len(), &RobustHornParams::default());
        for (t, r) in est.into_iter().enumerate() {
            let truth = rots[t + 1] * rots[t].inverse();
            assert!(r.unwrap().angle_to(truth).to_degrees() < 0.1);
        }
    }

    #[test]
    fn too_few_tracks_flags_the_pair() {
        let g = EquirectGeometry::new(960, 480).unwrap();
        let mut tracks = rotation_tracks(&g, &[UnitQuaternion::IDENTITY; 3], 2, 6);
        tracks.extend(rotation_tracks(&g, &[UnitQuaternion::IDENTITY; 2], 5, 7));
        let r = relative_rotations(&tracks, &g, 3, &RobustHornParams::default());
        assert!(r[0].is_ok());
        assert!(matches!(r[1], Err(Error::InsufficientTracks { frame: 1 })));
    }

    #[test]
    fn cumulative_chain_invariant() {
        let q = vec![UnitQuaternion::yaw(1.0), UnitQuaternion::pitch(2.0), UnitQuaternion::roll(-1.0)];
        let c = cumulative_rotations(&q);
        assert_eq!(c.len(), 4);
        assert_eq!(c[0], UnitQuaternion::IDENTITY);
        for t in 1..4 {
            assert_eq!(c[t], q[t - 1] * c[t - 1]);
        }
    }

    #[test]
    fn smoothing_examples() {
        let c = vec![UnitQuaternion::yaw(7.0); 20];
        for q in smooth_rotations(&c, 5.0) {
            assert!(q.angle_to(c[0]) < 1e-12);
        }
        let j: Vec<UnitQuaternion> = (0..60).map(|t| UnitQuaternion::yaw(if t % 2 == 0 { 2.0 } else { -2.0 })).collect();
        assert_eq!(smooth_rotations(&j, 0.0), j);
        let s = smooth_rotations(&j, 5.0);
        let before = j.iter().map(|q| q.angle()).fold(0.0, f64::max);
        let after = s.iter().map(|q| q.angle()).fold(0.0, f64::max);
        assert!(after * 5.0 <= before, "{before} {after}");
    }

    #[test]
    fn corrective_examples() {
        let q: Vec<UnitQuaternion> = (0..5).map(|t| UnitQuaternion::yaw(t as f64) * UnitQuaternion::pitch(0.5)).collect();
        for r in corrective_rotations(&q, &q).unwrap() {
            assert!(r.angle() < 1e-12);
        }
        let ids = vec![UnitQuaternion::IDENTITY; 5];
        let r = corrective_rotations(&q, &ids).unwrap();
        for t in 0..5 {
            assert!(r[t].angle_to(q[t].inverse()) < 1e-12);
        }
        let s: Vec<UnitQuaternion> = (0..5).map(|t| UnitQuaternion::roll(t as f64)).collect();
        let r = corrective_rotations(&q, &s).unwrap();
        for t in 0..5 {
            assert!((q[t] * r[t]).angle_to(s[t]) < 1e-9);
        }
        assert!(matches!(corrective_rotations(&q, &s[..3]), Err(Error::LengthMismatch(5, 3))));
    }

    fn test_pano(w: usize) -> RgbImage {
        RgbImage::from_fn(w, w / 2, |x, y| {
            let v = ((x as f64 * 0.21).sin() * 60.0 + (y as f64 * 0.17).cos() * 50.0 + 128.0) as u8;
            [v, (x * 7 % 256) as u8, ((x + y) * 3 % 256) as u8]
        })
    }

    #[test]
    fn warp_identity_is_exact() {
        let g = EquirectGeometry::new(256, 128).unwrap();
        let img = test_pano(256);
        assert_eq!(warp_equirect(&img, UnitQuaternion::IDENTITY, &g).unwrap(), img);
    }

    #[test]
    fn warp_one_column_yaw_is_a_shift() {
        let g = EquirectGeometry::new(256, 128).unwrap();
        let img = test_pano(256);
        let out = warp_equirect(&img, UnitQuaternion::yaw(g.degrees_per_pixel()), &g).unwrap();
        let mut max_err = 0i32;
        for y in 0..128 {
            for x in 0..256 {
                let a = out.get(x, y);
                let b = img.get((x + 255) % 256, y);
                for k in 0..3 {
                    max_err = max_err.max((a[k] as i32 - b[k] as i32).abs());
                }
            }
        }
        assert!(max_err <= 1, "{max_err}");
    }

    #[test]
    fn warp_roundtrip_is_close() {
        let g = EquirectGeometry::new(256, 128).unwrap();
        let img = test_pano(256);
        let q = UnitQuaternion::yaw(10.0) * UnitQuaternion::pitch(5.0);
        let back = warp_equirect(&warp_equirect(&img, q, &g).unwrap(), q.inverse(), &g).unwrap();
        // ignore polar caps where the pitch folds rows together
        let mut err = 0.0;
        let mut n = 0.0;
        for y in 16..112 {
            for x in 0..256 {
                let a = img.get(x, y);
                let b = back.get(x, y);
                for k in 0..3 {
                    err += (a[k] as f64 - b[k] as f64).abs();
                    n += 1.0;
                }
            }
        }
        assert!(err / n < 2.0, "{}", err / n);
        assert!(warp_equirect(&img, q, &EquirectGeometry::new(128, 64).unwrap()).is_err());
    }

    #[test]
    fn warp_rotation_moves_frame_to_smoothed_view() {
        let q = UnitQuaternion::yaw(4.0) * UnitQuaternion::pitch(1.0);
        let s = UnitQuaternion::yaw(1.0);
        let r = corrective_rotations(&[q], &[s]).unwrap()[0];
        let w = frame_warp_rotation(q, r);
        let world = Vec3::new(0.2, 0.3, 0.9).normalized();
        let seen = q.rotate(world);
        assert!(w.rotate(seen).angle_to(s.rotate(world)) < 1e-12);
    }

    #[test]
    fn rotation_csv_roundtrip() {
        let q: Vec<UnitQuaternion> = (0..4).map(|t| UnitQuaternion::yaw(t as f64 * 3.3)).collect();
        let mut buf = Vec::new();
        write_rotations_csv(&q, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame,qw,qx,qy,qz\n"));
        let back = read_rotations_csv(&buf[..]).unwrap();
        for (a, b) in q.iter().zip(&back) {
            assert!(a.angle_to(*b) < 1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn horn_recovers_rotations(
            axis in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            angle in -3.0f64..3.0,
            seed in 0u64..1000,
            n in 3usize..30,
        ) {
            let axis = Vec3::new(axis.0, axis.1, axis.2);
            proptest::prop_assume!(axis.norm() > 1e-2);
            let q = UnitQuaternion::from_axis_angle(axis, angle);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<(Vec3, Vec3)> = (0..n)
                .map(|_| {
                    let v = random_unit(&mut rng);
                    (v, q.rotate(v))
                })
                .collect();
            let est = estimate_rotation_horn(&pairs).unwrap();
            proptest::prop_assert!(est.angle_to(q) < 1e-9, "{}", est.angle_to(q));
        }

        #[test]
        fn corrective_rotations_land_on_the_smoothed_track(
            seed in 0u64..1000,
            sigma in 0.0f64..10.0,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rel: Vec<UnitQuaternion> = (0..20)
                .map(|_| UnitQuaternion::from_axis_angle(random_unit(&mut rng), rng.gen_range(-0.1..0.1)))
                .collect();
            let cum = cumulative_rotations(&rel);
            let smooth = smooth_rotations(&cum, sigma);
            let corr = corrective_rotations(&cum, &smooth).unwrap();
            for ((c, s), r) in cum.iter().zip(&smooth).zip(&corr) {
                proptest::prop_assert!((*c * *r).angle_to(*s) < 1e-9);
            }
        }
    }
}
