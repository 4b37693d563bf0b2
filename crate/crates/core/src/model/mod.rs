//! The distance-regression network: configuration, parameters, and the
//! public forward/backward entry points.
//!
//! The network sees two channels (scaled disparity, validity mask), runs a
//! chain of same-padded conv + rectifier layers grouped into three stages,
//! averages the last feature map over masked-in positions, and maps the
//! pooled vector affinely to a fixation distance in diopters.

pub mod arch;
pub mod checkpoint;
pub(crate) mod network;
pub mod train;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use arch::Architecture;
use network::Layout;
pub use network::{Prepared, INPUT_CHANNELS};

pub const DEFAULT_CHANNELS: [usize; 3] = [4, 8, 16];
pub const DEFAULT_DISPARITY_NORM: f64 = 0.1;
/// Midpoint of the 0.4–4.0 diopter training range.
pub const DEFAULT_OUTPUT_OFFSET: f64 = 2.2;

const STREAM_INIT: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    pub fov_h_deg: f64,
    pub arch: Architecture,
    /// Disparities are divided by this (radians) before entering the net.
    pub disparity_norm: f64,
    /// Initial head bias, in diopters.
    pub output_offset: f64,
}

impl ModelConfig {
    /// Plans an architecture whose stage receptive fields match the degree
    /// targets at this resolution.
    pub fn for_resolution(resolution: usize, fov_h_deg: f64, channels: [usize; 3]) -> Result<Self> {
        let arch = arch::plan(resolution, fov_h_deg, channels)?;
        let cfg = Self {
            resolution,
            fov_h_deg,
            arch,
            disparity_norm: DEFAULT_DISPARITY_NORM,
            output_offset: DEFAULT_OUTPUT_OFFSET,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Arbitrary layer chain without the receptive-field contract; meant for
    /// toy models in tests and benchmarks.
    pub fn custom(resolution: usize, arch: Architecture) -> Self {
        Self {
            resolution,
            fov_h_deg: crate::geometry::DEFAULT_FOV_H_DEG,
            arch,
            disparity_norm: DEFAULT_DISPARITY_NORM,
            output_offset: DEFAULT_OUTPUT_OFFSET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Config(format!("resolution {} too small", self.resolution)));
        }
        if !(self.disparity_norm > 0.0) {
            return Err(Error::Config("disparity_norm must be > 0".into()));
        }
        arch::check_receptive_fields(&self.arch, self.resolution, self.fov_h_deg)
    }

    pub fn stage_receptive_fields_deg(&self) -> Vec<f64> {
        let deg_per_px = self.fov_h_deg / self.resolution as f64;
        self.arch.stage_receptive_fields().into_iter().map(|rf| rf as f64 * deg_per_px).collect()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    /// `(name, shape)` of every parameter tensor in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = INPUT_CHANNELS;
        for (i, l) in self.arch.layers().enumerate() {
            out.push((format!("conv{i}.weight"), vec![l.out_channels, in_ch, l.kernel, l.kernel]));
            out.push((format!("conv{i}.bias"), vec![l.out_channels]));
            in_ch = l.out_channels;
        }
        out.push(("head.weight".into(), vec![in_ch]));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    pub(crate) fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("resolution".into(), self.resolution.to_string()),
            ("fov_h_deg".into(), self.fov_h_deg.to_string()),
            ("architecture".into(), self.arch.to_string()),
            ("disparity_norm".into(), self.disparity_norm.to_string()),
            ("output_offset".into(), self.output_offset.to_string()),
        ]
    }

    pub(crate) fn from_echo(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| {
            meta.get(key).ok_or_else(|| Error::format("metadata", format!("missing key {key}")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| Error::format(key, "not a number"))
        };
        Ok(Self {
            resolution: get("resolution")?
                .parse()
                .map_err(|_| Error::format("resolution", "not an integer"))?,
            fov_h_deg: num("fov_h_deg")?,
            arch: Architecture::parse(get("architecture")?)?,
            disparity_norm: num("disparity_norm")?,
            output_offset: num("output_offset")?,
        })
    }

    /// Turns a stored sample into network input.
    pub fn prepare<T: num_traits::Float>(
        &self,
        height: usize,
        width: usize,
        disparity: &[f32],
        mask: &[f32],
    ) -> Result<Prepared<T>> {
        if height != self.resolution || width != self.resolution {
            return Err(Error::Config(format!(
                "sample is {width}x{height}, model expects {0}x{0}",
                self.resolution
            )));
        }
        if disparity.len() != height * width || mask.len() != height * width {
            return Err(Error::Data("sample buffers do not match their dimensions".into()));
        }
        Ok(Prepared::new(&self.arch, height, width, disparity, mask, self.disparity_norm))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// All tensors back to back, in [`ModelConfig::tensor_shapes`] order.
    pub values: Vec<f32>,
    /// Free-form training metadata (seed, epochs, final_loss, ...).
    pub meta: BTreeMap<String, String>,
}

impl ModelParams {
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let mut offset = 0;
        for (n, shape) in self.config.tensor_shapes() {
            let len: usize = shape.iter().product();
            if n == name {
                return Some(&self.values[offset..offset + len]);
            }
            offset += len;
        }
        None
    }

    pub fn head_bias(&self) -> f32 {
        self.values[self.config.layout().head_bias]
    }

    /// Predicted fixation distance in diopters.
    pub fn forward(&self, input: &Prepared<f32>) -> Result<f64> {
        let trace = network::forward(&self.config.layout(), &self.values, input)?;
        Ok(trace.output as f64)
    }

    pub fn forward_batch(&self, inputs: &[Prepared<f32>], exec: Exec) -> Result<Vec<f64>> {
        let layout = self.config.layout();
        par::try_map_indexed(exec, inputs.len(), |i| {
            network::forward(&layout, &self.values, &inputs[i]).map(|t| t.output as f64)
        })
    }
}

/// Deterministic fan-in scaled uniform initialization.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    let layout = config.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    let mut values = vec![0f32; layout.total];
    for c in &layout.convs {
        let fan_in = (c.in_ch * c.kernel * c.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c.out_ch * fan_in as usize;
        for v in &mut values[c.weight..c.weight + n] {
            *v = rng.random_range(-bound..bound) as f32;
        }
    }
    let head_in = layout.final_channels();
    let bound = (3.0 / head_in as f64).sqrt();
    for v in &mut values[layout.head_weight..layout.head_weight + head_in] {
        *v = rng.random_range(-bound..bound) as f32;
    }
    values[layout.head_bias] = config.output_offset as f32;
    let mut meta = BTreeMap::new();
    meta.insert("init_seed".into(), seed.to_string());
    Ok(ModelParams { config, values, meta })
}

/// Mean squared error (diopters²) of a batch and its exact gradient.
pub fn loss_and_gradient<T>(
    config: &ModelConfig,
    params: &[T],
    batch: &[(Prepared<T>, f64)],
) -> Result<(f64, Vec<T>)>
where
    T: num_traits::Float + Send + Sync,
{
    let layout = config.layout();
    if params.len() != layout.total {
        return Err(Error::Config(format!(
            "parameter vector has {} entries, model needs {}",
            params.len(),
            layout.total
        )));
    }
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let weight = T::one() / T::from(batch.len()).unwrap();
    let mut grads = vec![T::zero(); layout.total];
    let mut loss = T::zero();
    for (input, target) in batch {
        let trace = network::forward(&layout, params, input)?;
        let se = network::backward(&layout, params, input, &trace, T::from(*target).unwrap(), weight, &mut grads);
        loss = loss + se;
    }
    Ok(((loss * weight).to_f64().unwrap(), grads))
}

/// Forward pass on arbitrary-precision parameters (used by gradient checks).
pub fn forward_with<T: num_traits::Float>(
    config: &ModelConfig,
    params: &[T],
    input: &Prepared<T>,
) -> Result<T> {
    Ok(network::forward(&config.layout(), params, input)?.output)
}

/// On/off state of every rectifier for one input, in layer order. Finite
/// difference checks use it to skip perturbations that cross a kink.
pub fn relu_pattern<T: num_traits::Float>(
    config: &ModelConfig,
    params: &[T],
    input: &Prepared<T>,
) -> Result<Vec<bool>> {
    let trace = network::forward(&config.layout(), params, input)?;
    Ok(trace.maps.iter().flat_map(|(m, _, _)| m.iter().map(|&v| v > T::zero())).collect())
}
