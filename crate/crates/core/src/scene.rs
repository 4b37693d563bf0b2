//! Procedural still-life scenes and analytic depth rendering.
//!
//! Scenes are stored in canonical units: the central jug's front surface
//! sits on the optical axis at radial distance 1.0. Rendering at a metric
//! scale multiplies every canonical depth by that scale, so the hit mask and
//! the surface seen by each pixel never depend on viewing distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, DepthMap, Vec3, ViewingGeometry};
use crate::par::{self, Exec};

pub const NEAR_BAND: (f64, f64) = (0.55, 0.95);
pub const FAR_BAND: (f64, f64) = (1.05, 2.2);
pub const GROUND_HEIGHT: f64 = -0.35;
const JUG_RADIUS: f64 = 0.07;
const JUG_TOP: f64 = 0.10;
const SIZE_RANGE: (f64, f64) = (0.03, 0.08);
// Objects are scattered inside this half-angle (both axes) so they stay in
// view under the default 56° field.
const PLACEMENT_HALF_ANGLE_DEG: f64 = 25.0;
// Minimum angular clearance between any object and the optical axis.
const AXIS_CLEARANCE_DEG: f64 = 4.0;
const MAX_PLACEMENT_TRIES: usize = 10_000;

const STREAM_LAYOUT: u64 = 1;
const STREAM_REARRANGE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Cylinder,
    Jug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Central,
    Near,
    Far,
    Ground,
}

/// One scene object.
///
/// `size` is interpreted per kind: sphere `[r, r, r]`; box half extents;
/// cylinder and jug `[radius, half_height, radius]` (the jug adds a lid
/// sphere of the same radius centered on the top cap).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    pub size: Vec3,
    pub tag: Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub near: usize,
    pub far: usize,
}

impl Default for Inventory {
    fn default() -> Self {
        Self { near: 6, far: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub ground_plane: bool,
    pub ground_height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Removal {
    Full,
    MinusNear,
    MinusFar,
}

impl Removal {
    pub fn name(self) -> &'static str {
        match self {
            Removal::Full => "full",
            Removal::MinusNear => "minus_near",
            Removal::MinusFar => "minus_far",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Removal::Full),
            "minus_near" => Ok(Removal::MinusNear),
            "minus_far" => Ok(Removal::MinusFar),
            other => Err(Error::format("variant", format!("unknown variant {other:?}"))),
        }
    }

    fn keeps(self, tag: Tag) -> bool {
        !matches!((self, tag), (Removal::MinusNear, Tag::Near) | (Removal::MinusFar, Tag::Far))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneVariant {
    pub removal: Removal,
    pub flipped: bool,
}

impl SceneVariant {
    pub const FULL: SceneVariant = SceneVariant { removal: Removal::Full, flipped: false };

    /// The six training variants: full, minus-near, minus-far, then the
    /// same three mirrored.
    pub const ALL: [SceneVariant; 6] = [
        SceneVariant { removal: Removal::Full, flipped: false },
        SceneVariant { removal: Removal::MinusNear, flipped: false },
        SceneVariant { removal: Removal::MinusFar, flipped: false },
        SceneVariant { removal: Removal::Full, flipped: true },
        SceneVariant { removal: Removal::MinusNear, flipped: true },
        SceneVariant { removal: Removal::MinusFar, flipped: true },
    ];
}

impl Primitive {
    /// Radius of a sphere around `center` containing the whole object.
    pub fn bounding_radius(&self) -> f64 {
        let [a, b, c] = self.size;
        match self.kind {
            PrimitiveKind::Sphere => a,
            PrimitiveKind::Box => norm([a, b, c]),
            PrimitiveKind::Cylinder => a.hypot(b),
            PrimitiveKind::Jug => b + a,
        }
    }

    /// Distance along a ray from the origin to the first surface hit.
    pub fn intersect(&self, dir: Vec3) -> Option<f64> {
        let [r, hh, _] = self.size;
        match self.kind {
            PrimitiveKind::Sphere => hit_sphere(self.center, r, dir),
            PrimitiveKind::Box => hit_box(self.center, self.size, dir),
            PrimitiveKind::Cylinder => hit_cylinder(self.center, r, hh, dir),
            PrimitiveKind::Jug => {
                let lid = [self.center[0], self.center[1] + hh, self.center[2]];
                nearest(hit_cylinder(self.center, r, hh, dir), hit_sphere(lid, r, dir))
            }
        }
    }
}

const T_MIN: f64 = 1e-9;

fn nearest(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

fn hit_sphere(center: Vec3, radius: f64, dir: Vec3) -> Option<f64> {
    // |t·d − c|² = r², |d| = 1
    let b = dot(dir, center);
    let disc = b * b - (dot(center, center) - radius * radius);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [b - s, b + s].into_iter().find(|&t| t > T_MIN)
}

fn hit_box(center: Vec3, half: Vec3, dir: Vec3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let lo = center[axis] - half[axis];
        let hi = center[axis] + half[axis];
        if dir[axis] == 0.0 {
            if 0.0 < lo || 0.0 > hi {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = (lo / dir[axis], hi / dir[axis]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    if t_near > t_far || t_far <= T_MIN {
        return None;
    }
    Some(if t_near > T_MIN { t_near } else { t_far })
}

/// Vertical (Y-axis) capped cylinder.
fn hit_cylinder(center: Vec3, radius: f64, half_height: f64, dir: Vec3) -> Option<f64> {
    let (cx, cy, cz) = (center[0], center[1], center[2]);
    let (y_lo, y_hi) = (cy - half_height, cy + half_height);
    let mut best: Option<f64> = None;

    let a = dir[0] * dir[0] + dir[2] * dir[2];
    if a > 0.0 {
        let b = -(dir[0] * cx + dir[2] * cz);
        let c = cx * cx + cz * cz - radius * radius;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                let y = t * dir[1];
                if t > T_MIN && (y_lo..=y_hi).contains(&y) {
                    best = nearest(best, Some(t));
                    break;
                }
            }
        }
    }
    if dir[1] != 0.0 {
        for cap in [y_lo, y_hi] {
            let t = cap / dir[1];
            if t > T_MIN {
                let (dx, dz) = (t * dir[0] - cx, t * dir[2] - cz);
                if dx * dx + dz * dz <= radius * radius {
                    best = nearest(best, Some(t));
                }
            }
        }
    }
    best
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let central: Vec<_> = self.primitives.iter().filter(|p| p.tag == Tag::Central).collect();
        if central.len() != 1 {
            return Err(Error::Data(format!(
                "scene {} has {} central primitives, expected 1",
                self.scene_id,
                central.len()
            )));
        }
        let hit = central[0].intersect([0.0, 0.0, 1.0]);
        if hit.is_none_or(|t| (t - 1.0).abs() > 1e-9) {
            return Err(Error::Data(format!(
                "central primitive of {} is hit at {hit:?} on the optical axis, expected 1.0",
                self.scene_id
            )));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(Error::Data(format!("primitive {i} has a non-positive size")));
            }
            if p.center[2] <= 0.0 {
                return Err(Error::Data(format!("primitive {i} is behind the observer")));
            }
            let depth = norm(p.center);
            let bad = match p.tag {
                Tag::Near => depth >= 1.0,
                Tag::Far => depth <= 1.0,
                Tag::Central | Tag::Ground => false,
            };
            if bad {
                return Err(Error::Data(format!(
                    "primitive {i} tagged {:?} has canonical depth {depth}",
                    p.tag
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.primitives.iter().filter(|p| p.tag == tag).count()
    }

    pub fn inventory(&self) -> Inventory {
        Inventory { near: self.count(Tag::Near), far: self.count(Tag::Far) }
    }

    /// Nearest hit along `dir` among primitives kept by `removal`.
    pub fn cast(&self, dir: Vec3, removal: Removal) -> Option<f64> {
        let mut best = self
            .primitives
            .iter()
            .filter(|p| removal.keeps(p.tag))
            .fold(None, |acc, p| nearest(acc, p.intersect(dir)));
        if self.ground_plane && dir[1] < 0.0 {
            best = nearest(best, Some(self.ground_height / dir[1]));
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("scene", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: SceneSpec =
            serde_json::from_str(text).map_err(|e| Error::format("scene", e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }
}

fn central_jug() -> Primitive {
    let half_height = 0.5 * (JUG_TOP - GROUND_HEIGHT);
    Primitive {
        kind: PrimitiveKind::Jug,
        center: [0.0, GROUND_HEIGHT + half_height, 1.0 + JUG_RADIUS],
        size: [JUG_RADIUS, half_height, JUG_RADIUS],
        tag: Tag::Central,
    }
}

struct Placer {
    rng: ChaCha8Rng,
    seed: u64,
}

impl Placer {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, seed }
    }

    fn random_shape(&mut self) -> (PrimitiveKind, Vec3) {
        let kind = match self.rng.random_range(0..4) {
            0 => PrimitiveKind::Sphere,
            1 => PrimitiveKind::Box,
            2 => PrimitiveKind::Cylinder,
            _ => PrimitiveKind::Jug,
        };
        let s = self.rng.random_range(SIZE_RANGE.0..SIZE_RANGE.1);
        let size = match kind {
            PrimitiveKind::Sphere => [s, s, s],
            PrimitiveKind::Box => {
                let h = s * self.rng.random_range(0.6..1.6);
                let d = s * self.rng.random_range(0.6..1.2);
                [s, h, d]
            }
            PrimitiveKind::Cylinder | PrimitiveKind::Jug => {
                [s * 0.7, s * self.rng.random_range(1.0..2.0), s * 0.7]
            }
        };
        (kind, size)
    }

    /// Samples a center so the whole bounding sphere lies in the tag's
    /// depth band, clear of the optical axis, above the ground, and apart
    /// from everything already placed.
    fn place(
        &mut self,
        kind: PrimitiveKind,
        size: Vec3,
        tag: Tag,
        placed: &[Primitive],
    ) -> Result<Primitive> {
        let (lo, hi) = match tag {
            Tag::Near => NEAR_BAND,
            Tag::Far => FAR_BAND,
            _ => return Err(Error::Input(format!("cannot scatter a {tag:?} primitive"))),
        };
        let mut candidate = Primitive { kind, center: [0.0; 3], size, tag };
        let bound = candidate.bounding_radius();
        if hi - lo <= 2.0 * bound {
            return Err(Error::Generation {
                seed: self.seed,
                reason: format!("object of bounding radius {bound} does not fit the depth band"),
            });
        }
        let half = PLACEMENT_HALF_ANGLE_DEG.to_radians().tan();
        for _ in 0..MAX_PLACEMENT_TRIES {
            let depth = self.rng.random_range(lo + bound..hi - bound);
            let dir = crate::geometry::normalize([
                self.rng.random_range(-half..half),
                self.rng.random_range(-half..half),
                1.0,
            ]);
            let center = [dir[0] * depth, dir[1] * depth, dir[2] * depth];
            let off_axis = dir[2].acos();
            let clearance = (bound / depth).asin() + AXIS_CLEARANCE_DEG.to_radians();
            if off_axis <= clearance {
                continue;
            }
            if center[1] - bound <= GROUND_HEIGHT {
                continue;
            }
            let overlaps = placed.iter().any(|p| {
                let d = norm(crate::geometry::sub(p.center, center));
                d <= p.bounding_radius() + bound
            });
            if overlaps {
                continue;
            }
            candidate.center = center;
            return Ok(candidate);
        }
        Err(Error::Generation {
            seed: self.seed,
            reason: format!("could not place a {tag:?} {kind:?} after {MAX_PLACEMENT_TRIES} tries"),
        })
    }
}

pub fn generate_scene(seed: u64, inventory: Inventory, scene_id: &str) -> Result<SceneSpec> {
    let mut placer = Placer::new(seed, STREAM_LAYOUT);
    let mut primitives = vec![central_jug()];
    let tags = std::iter::repeat_n(Tag::Near, inventory.near)
        .chain(std::iter::repeat_n(Tag::Far, inventory.far));
    for tag in tags {
        let (kind, size) = placer.random_shape();
        let p = placer.place(kind, size, tag, &primitives)?;
        primitives.push(p);
    }
    let scene = SceneSpec {
        scene_id: scene_id.to_string(),
        seed,
        primitives,
        ground_plane: true,
        ground_height: GROUND_HEIGHT,
    };
    scene.validate()?;
    Ok(scene)
}

/// Same objects (kinds, sizes, tags, order) at freshly sampled positions.
/// The central jug stays where it is.
pub fn rearranged_scene(base: &SceneSpec, seed: u64) -> Result<SceneSpec> {
    base.validate()?;
    let mut placer = Placer::new(seed, STREAM_REARRANGE);
    let mut primitives: Vec<Primitive> =
        base.primitives.iter().filter(|p| p.tag == Tag::Central).copied().collect();
    // Ground-tagged props and the jug keep their positions.
    primitives.extend(base.primitives.iter().filter(|p| p.tag == Tag::Ground).copied());
    for p in base.primitives.iter().filter(|p| matches!(p.tag, Tag::Near | Tag::Far)) {
        let moved = placer.place(p.kind, p.size, p.tag, &primitives)?;
        primitives.push(moved);
    }
    // Restore the base ordering so the two specs diff cleanly.
    let mut fixed = primitives.iter().filter(|p| !matches!(p.tag, Tag::Near | Tag::Far));
    let mut moved = primitives.iter().filter(|p| matches!(p.tag, Tag::Near | Tag::Far));
    let ordered = base
        .primitives
        .iter()
        .map(|p| match p.tag {
            Tag::Near | Tag::Far => *moved.next().unwrap(),
            _ => *fixed.next().unwrap(),
        })
        .collect();
    let scene = SceneSpec {
        scene_id: format!("{}-rearranged-{seed}", base.scene_id),
        seed,
        primitives: ordered,
        ground_plane: base.ground_plane,
        ground_height: base.ground_height,
    };
    scene.validate()?;
    Ok(scene)
}

/// Canonical radial depths (fixation surface at exactly 1.0) for a variant.
pub fn render_canonical(
    scene: &SceneSpec,
    variant: SceneVariant,
    geom: &ViewingGeometry,
    exec: Exec,
) -> Result<DepthMap> {
    geom.validate()?;
    let w = geom.width_px;
    let (fu, fv) = geom.fixation_px;
    let fixation_raw = scene
        .cast(geom.ray_unchecked(fu, fv), Removal::Full)
        .ok_or(Error::NoFixationSurface { u: fu, v: fv })?;

    let mut raw = vec![f64::NAN; geom.pixel_count()];
    par::for_each_row(exec, &mut raw, w, |v, row| {
        for (u, out) in row.iter_mut().enumerate() {
            if let Some(t) = scene.cast(geom.ray_unchecked(u, v), variant.removal) {
                *out = t / fixation_raw;
            }
        }
    });
    let mask: Vec<bool> = raw.iter().map(|d| !d.is_nan()).collect();
    let depth = raw.into_iter().map(|d| if d.is_nan() { 0.0 } else { d }).collect();
    let map = DepthMap::new(w, geom.height_px, depth, mask)?;
    Ok(if variant.flipped { map.flipped_horizontal() } else { map })
}

pub fn render_depth(
    scene: &SceneSpec,
    variant: SceneVariant,
    geom: &ViewingGeometry,
    scale_m: f64,
) -> Result<DepthMap> {
    render_depth_with(scene, variant, geom, scale_m, Exec::default())
}

pub fn render_depth_with(
    scene: &SceneSpec,
    variant: SceneVariant,
    geom: &ViewingGeometry,
    scale_m: f64,
    exec: Exec,
) -> Result<DepthMap> {
    if !(scale_m > 0.0 && scale_m.is_finite()) {
        return Err(Error::Input(format!("scale must be > 0, got {scale_m}")));
    }
    let mut map = render_canonical(scene, variant, geom, exec)?;
    for (d, &m) in map.depth.iter_mut().zip(&map.mask) {
        if m {
            *d *= scale_m;
        }
    }
    Ok(map)
}
