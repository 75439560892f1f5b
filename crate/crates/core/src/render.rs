//! Zoom curve, perspective rendering of equirectangular frames, projective
//! warps and frame-sequence I/O.

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::content::RoiTrack;
use crate::error::{Error, Result};
use crate::geom::{dir_to_vec, gaussian_filter, EquirectGeometry, SphericalDirection, Vec3};
use crate::motion::Mat3;
use crate::par;
use crate::raster::{to_u8, RgbImage};
use crate::tracking::Point2;
use crate::viewplan::CameraPath;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZoomParams {
    /// Output aspect ratio, width over height.
    pub aspect: f64,
    /// Target ratio of ROI area to the cropped view.
    pub target_ratio: f64,
    pub default_fov: f64,
    pub min_fov: f64,
    pub smooth_sigma: f64,
}

impl Default for ZoomParams {
    fn default() -> Self {
        Self {
            aspect: 4.0 / 3.0,
            target_ratio: 0.001,
            default_fov: 100.0,
            min_fov: 30.0,
            smooth_sigma: 15.0,
        }
    }
}

impl ZoomParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.aspect > 0.0) || !(self.target_ratio > 0.0) || !(self.smooth_sigma >= 0.0) {
            return Err(Error::InvalidParameter("zoom aspect and target ratio must be positive".into()));
        }
        if !(0.0 < self.min_fov && self.min_fov <= self.default_fov && self.default_fov < 180.0) {
            return Err(Error::InvalidParameter("need 0 < min_fov <= default_fov < 180".into()));
        }
        Ok(())
    }
}

/// `sqrt(c * A / r) * 360 / W` for an ROI of `area` equirect pixels².
pub fn raw_fov(area: f64, equirect_width: usize, params: &ZoomParams) -> f64 {
    (params.aspect * area / params.target_ratio).sqrt() * 360.0 / equirect_width as f64
}

/// Area of the ROI the camera targets at each frame: the ROI present at `t`
/// nearest to the path direction.
pub fn targeted_areas(path: &CameraPath, rois: &[RoiTrack]) -> Vec<Option<f64>> {
    path.poses
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut best: Option<(f64, f64)> = None;
            for r in rois {
                if let (Some(pose), Some(a)) = (r.pose_at(t), r.area_at(t)) {
                    let d = p.angle_to(pose);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, a));
                    }
                }
            }
            best.map(|b| b.1)
        })
        .collect()
}

/// Clamped, Gaussian-smoothed and re-clamped horizontal FOV per frame.
/// Frames without a target use the default FOV.
pub fn fov_curve(areas: &[Option<f64>], equirect_width: usize, params: &ZoomParams) -> Vec<f64> {
    let clamp = |f: f64| f.clamp(params.min_fov, params.default_fov);
    let offset: Vec<f64> = areas
        .iter()
        .map(|a| a.map_or(0.0, |a| clamp(raw_fov(a, equirect_width, params)) - params.default_fov))
        .collect();
    gaussian_filter(&offset, params.smooth_sigma)
        .into_iter()
        .map(|d| clamp(params.default_fov + d))
        .collect()
}

/// Pinhole camera looking along a spherical direction with zero roll.
/// Pixel `(i, j)` has its center at `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NfovCamera {
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl NfovCamera {
    pub fn new(dir: SphericalDirection, fov: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov > 0.0 && fov < 180.0) {
            return Err(Error::InvalidFov(fov));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("output size must be positive".into()));
        }
        let forward = dir_to_vec(dir);
        let th = dir.theta.to_radians();
        let right = Vec3::new(th.cos(), 0.0, -th.sin());
        let up = forward.cross(right);
        Ok(Self {
            forward,
            right,
            up,
            focal: (width as f64 / 2.0) / (fov.to_radians() / 2.0).tan(),
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        })
    }

    /// Unnormalized viewing ray through image point `(x, y)`.
    pub fn ray(&self, x: f64, y: f64) -> Vec3 {
        let (u, v) = (x - self.cx, self.cy - y);
        Vec3::new(
            self.forward.x * self.focal + self.right.x * u + self.up.x * v,
            self.forward.y * self.focal + self.right.y * u + self.up.y * v,
            self.forward.z * self.focal + self.right.z * u + self.up.z * v,
        )
    }

    /// Image point of a world direction, `None` behind the camera.
    pub fn project(&self, v: Vec3) -> Option<(f64, f64)> {
        let z = v.dot(self.forward);
        if z <= 1e-12 {
            return None;
        }
        Some((
            self.cx + self.focal * v.dot(self.right) / z,
            self.cy - self.focal * v.dot(self.up) / z,
        ))
    }
}

/// Perspective view of an equirectangular frame, bilinear with horizontal
/// wrap.
pub fn render_nfov(frame: &RgbImage, dir: SphericalDirection, fov: f64, out_w: usize, out_h: usize) -> Result<RgbImage> {
    let g = EquirectGeometry::new(frame.width, frame.height)?;
    let cam = NfovCamera::new(dir, fov, out_w, out_h)?;
    if dir.phi.abs() > 85.0 {
        log::debug!("rendering near a pole at latitude {:.1}", dir.phi);
    }
    let mut out = RgbImage::new(out_w, out_h);
    par::for_each_chunk_mut(&mut out.data, out_w * 3, |y, row| {
        for x in 0..out_w {
            let (sx, sy) = g.vec_to_pixel(cam.ray(x as f64, y as f64));
            row[x * 3..x * 3 + 3].copy_from_slice(&to_u8(frame.sample_wrapped(sx, sy)));
        }
    });
    Ok(out)
}

/// Projective warp by inverse mapping; pixels that map outside the source are
/// black. Returns the image and the fraction of black-filled pixels.
pub fn warp_frame(image: &RgbImage, b: &Mat3) -> Result<(RgbImage, f64)> {
    let inv = b.inverse().ok_or(Error::SingularTransform)?;
    let w = image.width;
    let mut out = RgbImage::new(w, image.height);
    let outside = std::sync::atomic::AtomicUsize::new(0);
    par::for_each_chunk_mut(&mut out.data, w * 3, |y, row| {
        let mut miss = 0;
        for x in 0..w {
            let s = inv.apply(Point2::new(x as f64, y as f64));
            match image.sample_bounded(s.x, s.y) {
                Some(c) => row[x * 3..x * 3 + 3].copy_from_slice(&to_u8(c)),
                None => miss += 1,
            }
        }
        outside.fetch_add(miss, std::sync::atomic::Ordering::Relaxed);
    });
    let total = (w * image.height).max(1);
    Ok((out, outside.into_inner() as f64 / total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    Png,
    Ppm,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Png => "png",
            FrameFormat::Ppm => "ppm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    #[serde(default = "default_format")]
    pub format: FrameFormat,
}

fn default_format() -> FrameFormat {
    FrameFormat::Png
}

pub fn frame_path(dir: &Path, index: usize, format: FrameFormat) -> PathBuf {
    dir.join(format!("{index:06}.{}", format.extension()))
}

pub fn write_image(img: &RgbImage, path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let (w, h) = (img.width as u32, img.height as u32);
    if ext == "ppm" {
        let f = BufWriter::new(fs::File::create(path)?);
        PnmEncoder::new(f)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&img.data, w, h, ExtendedColorType::Rgb8)?;
    } else {
        image::save_buffer_with_format(path, &img.data, w, h, ExtendedColorType::Rgb8, ImageFormat::Png)?;
    }
    Ok(())
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage {
        width: w as usize,
        height: h as usize,
        data: img.into_raw(),
    })
}

/// Frame directory described by `manifest.json`.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl FrameSequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        for i in 0..manifest.count {
            if !frame_path(dir, i, manifest.format).exists() {
                return Err(Error::MissingFrames(i));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn create(dir: &Path, manifest: Manifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn read(&self, index: usize) -> Result<RgbImage> {
        let img = read_image(&frame_path(&self.dir, index, self.manifest.format))?;
        img.check_dims(self.manifest.width, self.manifest.height)?;
        Ok(img)
    }

    pub fn write(&self, index: usize, img: &RgbImage) -> Result<()> {
        img.check_dims(self.manifest.width, self.manifest.height)?;
        write_image(img, &frame_path(&self.dir, index, self.manifest.format))
    }
}
