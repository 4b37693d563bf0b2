//! Training and test sets on disk.
//!
//! A dataset directory holds one binary file per sample under `samples/`,
//! a `manifest.csv` index, a `dataset.cfg` echo of the generating
//! configuration, and the `scene.json` the samples were rendered from.
//!
//! Sample file (little-endian): `"QND1"`, u32 width, u32 height,
//! u32 channels (= 2), u32 dtype (0 = f32), planar row-major f32 data
//! (channel 0 disparity in radians, channel 1 mask as 0.0/1.0), then an f64
//! label distance in meters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{disparity_from_depth_with, DisparityMap, ViewingGeometry};
use crate::io::{self, Reader};
use crate::model::network::Prepared;
use crate::model::train::TrainingSet;
use crate::model::ModelConfig;
use crate::par::{self, Exec};
use crate::scene::{rearranged_scene, render_depth_with, Removal, SceneSpec, SceneVariant};

pub const SAMPLE_MAGIC: &[u8; 4] = b"QND1";
pub const MANIFEST_HEADER: &str = "id,path,distance_m,variant,flip,scene_id,seed";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CONFIG_FILE: &str = "dataset.cfg";
pub const SCENE_FILE: &str = "scene.json";

pub const DEFAULT_D_MIN: f64 = 0.25;
pub const DEFAULT_D_MAX: f64 = 2.5;
pub const DEFAULT_TRAIN_DISTANCES: usize = 100;
pub const DEFAULT_TEST_COUNT: usize = 200;

const STREAM_DISTANCES: u64 = 3;

/// Draws `n` distances uniform in diopters over `[1/d_max, 1/d_min]`.
pub fn sample_distances(seed: u64, n: usize, d_min: f64, d_max: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("need at least one distance".into()));
    }
    if !(d_min > 0.0 && d_min <= d_max && d_max.is_finite()) {
        return Err(Error::Config(format!("invalid distance range [{d_min}, {d_max}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_DISTANCES);
    let (lo, hi) = (1.0 / d_max, 1.0 / d_min);
    Ok((0..n)
        .map(|_| {
            let diopters = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            (1.0 / diopters).clamp(d_min, d_max)
        })
        .collect())
}

/// Grid payload of a sample file.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleData {
    pub width: usize,
    pub height: usize,
    pub disparity: Vec<f32>,
    pub mask: Vec<f32>,
    pub label_distance_m: f64,
}

impl SampleData {
    pub fn from_disparity(map: &DisparityMap, label_distance_m: f64) -> Self {
        Self {
            width: map.width,
            height: map.height,
            disparity: map.values.iter().map(|&v| v as f32).collect(),
            mask: map.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            label_distance_m,
        }
    }

    /// Back to a disparity map (f32 precision).
    pub fn to_disparity(&self) -> DisparityMap {
        DisparityMap {
            width: self.width,
            height: self.height,
            values: self.disparity.iter().map(|&v| v as f64).collect(),
            mask: self.mask.iter().map(|&m| m > 0.5).collect(),
        }
    }

    pub fn flipped_horizontal(&self) -> Self {
        Self {
            disparity: crate::geometry::flip_rows(&self.disparity, self.width),
            mask: crate::geometry::flip_rows(&self.mask, self.width),
            ..self.clone()
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(20 + 8 * n + 8);
        out.extend_from_slice(SAMPLE_MAGIC);
        for v in [self.width as u32, self.height as u32, 2, 0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.disparity.iter().chain(&self.mask) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.label_distance_m.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != SAMPLE_MAGIC {
            return Err(Error::format("magic", "not a QND1 sample"));
        }
        let width = r.u32("width")? as usize;
        let height = r.u32("height")? as usize;
        let channels = r.u32("channels")?;
        if channels != 2 {
            return Err(Error::format("channels", format!("expected 2, found {channels}")));
        }
        let dtype = r.u32("dtype")?;
        if dtype != 0 {
            return Err(Error::format("dtype", format!("expected 0 (f32), found {dtype}")));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Error::format("width", "dimensions overflow"))?;
        let disparity = r.f32_vec(n, "disparity")?;
        let mask = r.f32_vec(n, "mask")?;
        let label_distance_m = r.f64("label_distance_m")?;
        if r.remaining() != 0 {
            return Err(Error::format("payload", format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { width, height, disparity, mask, label_distance_m })
    }
}

pub fn write_sample(data: &SampleData, path: &Path) -> Result<()> {
    io::write_atomic(path, &data.encode())
}

pub fn load_sample(path: &Path) -> Result<SampleData> {
    SampleData::decode(&io::read(path)?).map_err(|e| match e {
        Error::Format { field, reason } => {
            Error::Format { field, reason: format!("{reason} ({})", path.display()) }
        }
        other => other,
    })
}

/// A manifest row joined with its sample payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub data: SampleData,
    pub variant: SceneVariant,
    pub scene_id: String,
    pub distance_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    /// Relative to the dataset root.
    pub path: String,
    pub distance_m: f64,
    pub variant: SceneVariant,
    pub scene_id: String,
    /// Seed of the distance stream this label was drawn from.
    pub seed: u64,
    pub distance_index: usize,
}

/// Parameters that generated a dataset, echoed to `dataset.cfg`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub geometry: ViewingGeometry,
    pub d_min: f64,
    pub d_max: f64,
    pub seed: u64,
    pub count: usize,
    pub kind: String,
    /// Free-form extras (e.g. rearrangement seed).
    pub extra: BTreeMap<String, String>,
}

impl DatasetConfig {
    fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut s = String::new();
        let _ = writeln!(s, "kind = {}", self.kind);
        let _ = writeln!(s, "ipd_m = {}", g.ipd_m);
        let _ = writeln!(s, "fov_h_deg = {}", g.fov_h_deg);
        let _ = writeln!(s, "width_px = {}", g.width_px);
        let _ = writeln!(s, "height_px = {}", g.height_px);
        let _ = writeln!(s, "fixation_u = {}", g.fixation_px.0);
        let _ = writeln!(s, "fixation_v = {}", g.fixation_px.1);
        let _ = writeln!(s, "d_min = {}", self.d_min);
        let _ = writeln!(s, "d_max = {}", self.d_max);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "count = {}", self.count);
        for (k, v) in &self.extra {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(CONFIG_FILE, format!("bad line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
            map.remove(key)
                .ok_or_else(|| Error::format(CONFIG_FILE, format!("missing {key}")))?
                .parse()
                .map_err(|_| Error::format(CONFIG_FILE, format!("bad value for {key}")))
        }
        let kind = take(&mut map, "kind")?;
        let ipd: f64 = take(&mut map, "ipd_m")?;
        let fov: f64 = take(&mut map, "fov_h_deg")?;
        let w: usize = take(&mut map, "width_px")?;
        let h: usize = take(&mut map, "height_px")?;
        let fu: usize = take(&mut map, "fixation_u")?;
        let fv: usize = take(&mut map, "fixation_v")?;
        let geometry = ViewingGeometry::new(ipd, fov, w, h)?.with_fixation(fu, fv)?;
        Ok(Self {
            geometry,
            d_min: take(&mut map, "d_min")?,
            d_max: take(&mut map, "d_max")?,
            seed: take(&mut map, "seed")?,
            count: take(&mut map, "count")?,
            kind,
            extra: map,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub config: DatasetConfig,
}

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.id,
                r.path,
                r.distance_m,
                r.variant.removal.name(),
                u8::from(r.variant.flipped),
                r.scene_id,
                r.seed
            );
        }
        s
    }

    pub fn save(&self) -> Result<()> {
        io::write_atomic(&self.root.join(CONFIG_FILE), self.config.to_text().as_bytes())?;
        io::write_atomic(&self.root.join(MANIFEST_FILE), self.to_csv().as_bytes())
    }

    /// Reads `manifest.csv` and `dataset.cfg` under `root` and checks that
    /// every listed sample file exists.
    pub fn load(root: &Path) -> Result<Self> {
        let config = DatasetConfig::from_text(&io::read_to_string(&root.join(CONFIG_FILE))?)?;
        let text = io::read_to_string(&root.join(MANIFEST_FILE))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::format(MANIFEST_FILE, "missing or wrong header"));
        }
        let mut rows = Vec::new();
        let mut per_distance: BTreeMap<String, usize> = BTreeMap::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| Error::format(MANIFEST_FILE, format!("line {}: {what}", n + 2));
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let flipped = match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("flip must be 0 or 1")),
            };
            let distance_m: f64 = f[2].parse().map_err(|_| bad("bad distance"))?;
            let next = per_distance.len();
            let distance_index = *per_distance.entry(f[2].to_string()).or_insert(next);
            let row = ManifestRow {
                id: f[0].to_string(),
                path: f[1].to_string(),
                distance_m,
                variant: SceneVariant { removal: Removal::parse(f[3])?, flipped },
                scene_id: f[5].to_string(),
                seed: f[6].parse().map_err(|_| bad("bad seed"))?,
                distance_index,
            };
            if !root.join(&row.path).is_file() {
                return Err(bad(&format!("sample file {} does not exist", row.path)));
            }
            rows.push(row);
        }
        Ok(Self { root: root.to_path_buf(), rows, config })
    }

    pub fn sample_path(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    /// Loads a row's payload and validates it against the manifest.
    pub fn load_sample(&self, row: &ManifestRow) -> Result<Sample> {
        let data = load_sample(&self.sample_path(row))?;
        let g = &self.config.geometry;
        if data.width != g.width_px || data.height != g.height_px {
            return Err(Error::format(
                "width",
                format!(
                    "{} is {}x{}, manifest config says {}x{}",
                    row.path, data.width, data.height, g.width_px, g.height_px
                ),
            ));
        }
        if data.label_distance_m != row.distance_m {
            return Err(Error::format(
                "label_distance_m",
                format!("{} stores {}, manifest says {}", row.path, data.label_distance_m, row.distance_m),
            ));
        }
        Ok(Sample {
            sample_id: row.id.clone(),
            data,
            variant: row.variant,
            scene_id: row.scene_id.clone(),
            distance_index: row.distance_index,
        })
    }

    pub fn load_scene(&self) -> Result<SceneSpec> {
        SceneSpec::from_json(&io::read_to_string(&self.root.join(SCENE_FILE))?)
    }

    /// Every scene referenced by the manifest, keyed by scene id.
    pub fn load_scenes(&self) -> Result<BTreeMap<String, SceneSpec>> {
        let n_scenes: usize = self.config.extra.get("n_scenes").and_then(|v| v.parse().ok()).unwrap_or(1);
        let mut scenes = BTreeMap::new();
        let first = self.load_scene()?;
        scenes.insert(first.scene_id.clone(), first);
        for k in 1..n_scenes {
            let path = self.root.join(format!("scene_{k}.json"));
            let scene = SceneSpec::from_json(&io::read_to_string(&path)?)?;
            scenes.insert(scene.scene_id.clone(), scene);
        }
        if let Some(row) = self.rows.iter().find(|r| !scenes.contains_key(&r.scene_id)) {
            return Err(Error::format(MANIFEST_FILE, format!("{} names unknown scene {}", row.id, row.scene_id)));
        }
        Ok(scenes)
    }

    pub fn load_all(&self, exec: Exec) -> Result<Vec<Sample>> {
        par::try_map_indexed(exec, self.rows.len(), |i| self.load_sample(&self.rows[i]))
    }

    /// Network inputs and diopter targets for every row, in manifest order.
    pub fn training_set(&self, config: &ModelConfig, exec: Exec) -> Result<TrainingSet> {
        let samples = self.load_all(exec)?;
        let inputs = prepare_samples(config, &samples, exec)?;
        let targets_diopters = samples.iter().map(|s| 1.0 / s.data.label_distance_m).collect();
        Ok(TrainingSet { inputs, targets_diopters })
    }
}

pub fn prepare_samples<T: num_traits::Float + Send>(
    config: &ModelConfig,
    samples: &[Sample],
    exec: Exec,
) -> Result<Vec<Prepared<T>>> {
    par::try_map_indexed(exec, samples.len(), |i| {
        let d = &samples[i].data;
        config.prepare(d.height, d.width, &d.disparity, &d.mask)
    })
}

/// Renders one sample: depth at `distance_m` for `variant`, then disparity
/// with fixation at that same distance.
pub fn render_sample(
    scene: &SceneSpec,
    variant: SceneVariant,
    geom: &ViewingGeometry,
    distance_m: f64,
    exec: Exec,
) -> Result<SampleData> {
    let depth = render_depth_with(scene, variant, geom, distance_m, exec)?;
    let disparity = disparity_from_depth_with(geom, &depth, distance_m, exec)?;
    Ok(SampleData::from_disparity(&disparity, distance_m))
}

struct Job<'a> {
    id: String,
    scene: &'a SceneSpec,
    variant: SceneVariant,
    distance_m: f64,
    distance_index: usize,
}

fn materialize(
    root: &Path,
    jobs: &[Job<'_>],
    geom: &ViewingGeometry,
    seed: u64,
    exec: Exec,
) -> Result<Vec<ManifestRow>> {
    // Samples are independent: parallelize across them, keep each render
    // sequential, and emit rows in job order.
    par::try_map_indexed(exec, jobs.len(), |i| {
        let job = &jobs[i];
        let data = render_sample(job.scene, job.variant, geom, job.distance_m, Exec::Sequential)
            .map_err(|e| {
                Error::Data(format!(
                    "render failed at distance {} variant {:?}: {e}",
                    job.distance_m, job.variant
                ))
            })?;
        let rel = format!("samples/{}.qnd", job.id);
        write_sample(&data, &root.join(&rel))?;
        Ok(ManifestRow {
            id: job.id.clone(),
            path: rel,
            distance_m: job.distance_m,
            variant: job.variant,
            scene_id: job.scene.scene_id.clone(),
            seed,
            distance_index: job.distance_index,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DistanceRange {
    fn default() -> Self {
        Self { d_min: DEFAULT_D_MIN, d_max: DEFAULT_D_MAX }
    }
}

/// `n_distances` shared distances × the six variants.
pub fn build_training_set(
    scene: &SceneSpec,
    geom: &ViewingGeometry,
    seed: u64,
    n_distances: usize,
    range: DistanceRange,
    root: &Path,
    exec: Exec,
) -> Result<Manifest> {
    scene.validate()?;
    let distances = sample_distances(seed, n_distances, range.d_min, range.d_max)?;
    let mut jobs = Vec::with_capacity(distances.len() * 6);
    for (di, &d) in distances.iter().enumerate() {
        for (vi, &variant) in SceneVariant::ALL.iter().enumerate() {
            jobs.push(Job {
                id: format!("train_{:05}", di * 6 + vi),
                scene,
                variant,
                distance_m: d,
                distance_index: di,
            });
        }
    }
    let rows = materialize(root, &jobs, geom, seed, exec)?;
    io::write_atomic(&root.join(SCENE_FILE), scene.to_json()?.as_bytes())?;
    let manifest = Manifest {
        root: root.to_path_buf(),
        rows,
        config: DatasetConfig {
            geometry: *geom,
            d_min: range.d_min,
            d_max: range.d_max,
            seed,
            count: jobs.len(),
            kind: "train".into(),
            extra: BTreeMap::from([("n_distances".into(), n_distances.to_string())]),
        },
    };
    manifest.save()?;
    Ok(manifest)
}

/// `n` fresh distances on rearranged copies of `base` (full, unflipped).
/// With `n_scenes > 1` samples cycle through that many rearrangements;
/// `scene.json` holds the first.
#[allow(clippy::too_many_arguments)]
pub fn build_test_set(
    base: &SceneSpec,
    geom: &ViewingGeometry,
    seed: u64,
    rearrange_seed: u64,
    n: usize,
    n_scenes: usize,
    range: DistanceRange,
    root: &Path,
    exec: Exec,
) -> Result<Manifest> {
    if n_scenes == 0 {
        return Err(Error::Config("need at least one rearranged scene".into()));
    }
    let scenes = (0..n_scenes as u64)
        .map(|k| rearranged_scene(base, rearrange_seed.wrapping_add(k)))
        .collect::<Result<Vec<_>>>()?;
    let distances = sample_distances(seed, n, range.d_min, range.d_max)?;
    let jobs: Vec<Job<'_>> = distances
        .iter()
        .enumerate()
        .map(|(i, &d)| Job {
            id: format!("test_{i:05}"),
            scene: &scenes[i % n_scenes],
            variant: SceneVariant::FULL,
            distance_m: d,
            distance_index: i,
        })
        .collect();
    let rows = materialize(root, &jobs, geom, seed, exec)?;
    for (k, s) in scenes.iter().enumerate().skip(1) {
        io::write_atomic(&root.join(format!("scene_{k}.json")), s.to_json()?.as_bytes())?;
    }
    io::write_atomic(&root.join(SCENE_FILE), scenes[0].to_json()?.as_bytes())?;
    let manifest = Manifest {
        root: root.to_path_buf(),
        rows,
        config: DatasetConfig {
            geometry: *geom,
            d_min: range.d_min,
            d_max: range.d_max,
            seed,
            count: n,
            kind: "test".into(),
            extra: BTreeMap::from([
                ("rearrange_seed".into(), rearrange_seed.to_string()),
                ("n_scenes".into(), n_scenes.to_string()),
                ("base_scene_id".into(), base.scene_id.clone()),
            ]),
        },
    };
    manifest.save()?;
    Ok(manifest)
}
