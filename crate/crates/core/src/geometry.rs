//! Binocular viewing geometry: pixel rays, vergence, and fixation-relative
//! disparity.
//!
//! The observer sits at the cyclopean origin looking down +Z with +X to the
//! right and +Y up. The eyes are at `(±ipd/2, 0, 0)` and are never rotated;
//! disparity is defined as a difference of vergence angles, which does not
//! depend on eye orientation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub type Vec3 = [f64; 3];

pub const DEFAULT_IPD_M: f64 = 0.064;
pub const DEFAULT_FOV_H_DEG: f64 = 56.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewingGeometry {
    pub ipd_m: f64,
    pub fov_h_deg: f64,
    pub width_px: usize,
    pub height_px: usize,
    /// `(u, v)` = (column, row) of the fixation ray.
    pub fixation_px: (usize, usize),
}

impl ViewingGeometry {
    pub fn new(ipd_m: f64, fov_h_deg: f64, width_px: usize, height_px: usize) -> Result<Self> {
        let geom = Self {
            ipd_m,
            fov_h_deg,
            width_px,
            height_px,
            fixation_px: (width_px / 2, height_px / 2),
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Square grid with the default interocular distance and field of view.
    pub fn square(width_px: usize) -> Result<Self> {
        Self::new(DEFAULT_IPD_M, DEFAULT_FOV_H_DEG, width_px, width_px)
    }

    pub fn with_fixation(mut self, u: usize, v: usize) -> Result<Self> {
        self.fixation_px = (u, v);
        self.validate()?;
        Ok(self)
    }

    pub fn with_ipd(mut self, ipd_m: f64) -> Result<Self> {
        self.ipd_m = ipd_m;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ipd_m > 0.0 && self.ipd_m.is_finite()) {
            return Err(Error::Input(format!("ipd_m must be > 0, got {}", self.ipd_m)));
        }
        if !(self.fov_h_deg > 0.0 && self.fov_h_deg < 180.0) {
            return Err(Error::Input(format!(
                "fov_h_deg must lie in (0, 180), got {}",
                self.fov_h_deg
            )));
        }
        if self.width_px < 2 || self.height_px < 2 {
            return Err(Error::Input(format!(
                "grid must be at least 2x2, got {}x{}",
                self.width_px, self.height_px
            )));
        }
        let (u, v) = self.fixation_px;
        if u >= self.width_px || v >= self.height_px {
            return Err(Error::Input(format!("fixation pixel ({u}, {v}) outside grid")));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width_px * self.height_px
    }

    pub fn deg_per_px(&self) -> f64 {
        self.fov_h_deg / self.width_px as f64
    }

    pub fn left_eye(&self) -> Vec3 {
        [-0.5 * self.ipd_m, 0.0, 0.0]
    }

    pub fn right_eye(&self) -> Vec3 {
        [0.5 * self.ipd_m, 0.0, 0.0]
    }

    /// Unit direction through the center of pixel `(u, v)`.
    ///
    /// Pinhole mapping: the horizontal tangent spans `±tan(fov/2)` at the
    /// outer pixel edges; the vertical axis uses the same tangent per pixel.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Result<Vec3> {
        if u >= self.width_px || v >= self.height_px {
            return Err(Error::Input(format!(
                "pixel ({u}, {v}) outside {}x{} grid",
                self.width_px, self.height_px
            )));
        }
        Ok(self.ray_unchecked(u, v))
    }

    pub(crate) fn ray_unchecked(&self, u: usize, v: usize) -> Vec3 {
        let half_tan = (0.5 * self.fov_h_deg).to_radians().tan();
        let w = self.width_px as f64;
        // Integer numerators keep mirrored columns exactly antisymmetric.
        let nx = (2 * u + 1) as f64 - w;
        let ny = self.height_px as f64 - (2 * v + 1) as f64;
        let x = half_tan * nx / w;
        let y = half_tan * ny / w;
        normalize([x, y, 1.0])
    }

    /// All pixel rays in row-major order.
    pub fn rays(&self) -> Vec<Vec3> {
        let w = self.width_px;
        (0..self.pixel_count()).map(|i| self.ray_unchecked(i % w, i / w)).collect()
    }
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Angle subtended at `point` by the two eyes, in radians.
pub fn vergence_angle(geom: &ViewingGeometry, point: Vec3) -> Result<f64> {
    let to_left = sub(geom.left_eye(), point);
    let to_right = sub(geom.right_eye(), point);
    let (nl, nr) = (norm(to_left), norm(to_right));
    if nl == 0.0 || nr == 0.0 || !nl.is_finite() || !nr.is_finite() {
        return Err(Error::Domain(format!("vergence undefined at {point:?}")));
    }
    Ok(angle_between_units(scale(to_left, 1.0 / nl), scale(to_right, 1.0 / nr)))
}

// Kahan's form: 2·atan2(|a − b|, |a + b|) is well conditioned for the tiny
// angles that distant points produce.
fn angle_between_units(a: Vec3, b: Vec3) -> f64 {
    2.0 * norm(sub(a, b)).atan2(norm([a[0] + b[0], a[1] + b[1], a[2] + b[2]]))
}

/// Per-pixel radial distance from the cyclopean origin plus a hit mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if depth.len() != n || mask.len() != n {
            return Err(Error::Data(format!(
                "depth map buffers ({}, {}) do not match {width}x{height}",
                depth.len(),
                mask.len()
            )));
        }
        Ok(Self { width, height, depth, mask })
    }

    /// Uniform radial depth over the whole grid.
    pub fn uniform(width: usize, height: usize, depth_m: f64) -> Self {
        Self {
            width,
            height,
            depth: vec![depth_m; width * height],
            mask: vec![true; width * height],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.mask[i].then(|| self.depth[i])
    }

    /// Mirror about the vertical center line.
    pub fn flipped_horizontal(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            depth: flip_rows(&self.depth, self.width),
            mask: flip_rows(&self.mask, self.width),
        }
    }

    /// Planar z-depth (distance along the optical axis); debugging aid.
    pub fn to_z_depth(&self, geom: &ViewingGeometry) -> Vec<f64> {
        geom.rays()
            .iter()
            .zip(&self.depth)
            .zip(&self.mask)
            .map(|((ray, &r), &hit)| if hit { r * ray[2] } else { 0.0 })
            .collect()
    }

    fn check_dims(&self, geom: &ViewingGeometry) -> Result<()> {
        if self.width != geom.width_px || self.height != geom.height_px {
            return Err(Error::Data(format!(
                "depth map is {}x{}, geometry expects {}x{}",
                self.width, self.height, geom.width_px, geom.height_px
            )));
        }
        Ok(())
    }
}

pub(crate) fn flip_rows<T: Clone>(data: &[T], width: usize) -> Vec<T> {
    data.chunks(width).flat_map(|row| row.iter().rev().cloned()).collect()
}

/// Fixation-relative angular disparity in radians; positive means nearer
/// than fixation (crossed). Masked-out pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DisparityMap {
    pub fn flipped_horizontal(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: flip_rows(&self.values, self.width),
            mask: flip_rows(&self.mask, self.width),
        }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    /// Mean |disparity| over masked-in pixels, or 0 for an empty mask.
    pub fn masked_mean_abs(&self) -> f64 {
        let (sum, n) = self
            .values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v.abs(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Multiplies every value by `factor`; used by sensitivity probes.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * factor).collect(), ..self.clone() }
    }
}

pub fn disparity_from_depth(
    geom: &ViewingGeometry,
    depth: &DepthMap,
    fixation_distance_m: f64,
) -> Result<DisparityMap> {
    disparity_from_depth_with(geom, depth, fixation_distance_m, Exec::default())
}

pub fn disparity_from_depth_with(
    geom: &ViewingGeometry,
    depth: &DepthMap,
    fixation_distance_m: f64,
    exec: Exec,
) -> Result<DisparityMap> {
    geom.validate()?;
    depth.check_dims(geom)?;
    if !(fixation_distance_m > 0.0 && fixation_distance_m.is_finite()) {
        return Err(Error::Input(format!(
            "fixation distance must be > 0, got {fixation_distance_m}"
        )));
    }
    let (fu, fv) = geom.fixation_px;
    let w = geom.width_px;
    let fix_index = fv * w + fu;
    if !depth.mask[fix_index] {
        return Err(Error::NoFixationSurface { u: fu, v: fv });
    }
    if let Some(i) = depth
        .depth
        .iter()
        .zip(&depth.mask)
        .position(|(&d, &m)| m && !(d > 0.0 && d.is_finite()))
    {
        return Err(Error::Data(format!(
            "non-positive depth {} at pixel ({}, {})",
            depth.depth[i],
            i % w,
            i / w
        )));
    }

    let fixation_point = scale(geom.ray_unchecked(fu, fv), fixation_distance_m);
    let fixation_vergence = vergence_angle(geom, fixation_point)?;

    let mut values = vec![0.0; geom.pixel_count()];
    for_each_row_result(exec, &mut values, w, |v, row| {
        for (u, out) in row.iter_mut().enumerate() {
            let i = v * w + u;
            if !depth.mask[i] {
                continue;
            }
            let point = scale(geom.ray_unchecked(u, v), depth.depth[i]);
            *out = vergence_angle(geom, point)? - fixation_vergence;
        }
        Ok(())
    })?;
    values[fix_index] = 0.0;

    Ok(DisparityMap { width: w, height: geom.height_px, values, mask: depth.mask.clone() })
}

fn for_each_row_result<F>(exec: Exec, buf: &mut [f64], row_len: usize, f: F) -> Result<()>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync + Send,
{
    let first_error = std::sync::Mutex::new(None::<(usize, Error)>);
    par::for_each_row(exec, buf, row_len, |v, row| {
        if let Err(e) = f(v, row) {
            let mut slot = first_error.lock().unwrap();
            if slot.as_ref().is_none_or(|(row, _)| v < *row) {
                *slot = Some((v, e));
            }
        }
    });
    match first_error.into_inner().unwrap() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

/// First-order disparity `ipd·(1/d − 1/f)` for a point at `d` on the
/// fixation ray.
pub fn small_angle_disparity(ipd_m: f64, d_m: f64, f_m: f64) -> Result<f64> {
    if !(d_m > 0.0 && f_m > 0.0) {
        return Err(Error::Domain(format!("distances must be > 0, got d={d_m}, f={f_m}")));
    }
    Ok(ipd_m * (1.0 / d_m - 1.0 / f_m))
}
