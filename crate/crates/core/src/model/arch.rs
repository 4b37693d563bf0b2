//! Layer chains and their cumulative receptive fields.
//!
//! Stage targets are fixed in visual degrees; at a given resolution they
//! become pixel targets of `deg / (fov / width)`. A chain is acceptable when
//! each stage's cumulative receptive field lands within 10% of its target,
//! or within half a pixel when 10% is less than the integer grid allows.

use std::fmt;

use crate::error::{Error, Result};

pub const RF_TARGETS_DEG: [f64; 3] = [0.59, 2.74, 9.2];
pub const RF_REL_TOLERANCE: f64 = 0.10;
pub const RF_ABS_TOLERANCE_PX: f64 = 0.5;

const MAX_LAYERS_PER_STAGE: usize = 4;
const KERNELS: [usize; 2] = [3, 5];
const STRIDES: [usize; 3] = [1, 2, 4];
const MIN_FINAL_MAP: usize = 8;

/// Same-padded convolution followed by a rectifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub stages: Vec<Vec<ConvSpec>>,
}

impl Architecture {
    pub fn layers(&self) -> impl Iterator<Item = &ConvSpec> {
        self.stages.iter().flatten()
    }

    pub fn total_stride(&self) -> usize {
        self.layers().map(|l| l.stride).product()
    }

    /// Cumulative receptive field (in input pixels) at the end of each stage.
    pub fn stage_receptive_fields(&self) -> Vec<usize> {
        let mut rf = 1;
        let mut jump = 1;
        self.stages
            .iter()
            .map(|stage| {
                for l in stage {
                    rf += (l.kernel - 1) * jump;
                    jump *= l.stride;
                }
                rf
            })
            .collect()
    }

    pub fn final_channels(&self) -> usize {
        self.layers().last().map_or(0, |l| l.out_channels)
    }

    /// Parses the compact form produced by `Display`, e.g.
    /// `k3s1c4|k3s4c8,k3s1c8|k5s1c16`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::format("architecture", format!("{text:?}: {why}"));
        let stages = text
            .split('|')
            .map(|stage| {
                stage
                    .split(',')
                    .map(|layer| {
                        let rest = layer.trim().strip_prefix('k').ok_or_else(|| bad("missing k"))?;
                        let (k, rest) = rest.split_once('s').ok_or_else(|| bad("missing s"))?;
                        let (s, c) = rest.split_once('c').ok_or_else(|| bad("missing c"))?;
                        let num = |v: &str| v.parse::<usize>().map_err(|_| bad("bad number"));
                        let spec = ConvSpec { kernel: num(k)?, stride: num(s)?, out_channels: num(c)? };
                        if spec.kernel.is_multiple_of(2) || spec.stride == 0 || spec.out_channels == 0 {
                            return Err(bad("kernels must be odd, strides and channels positive"));
                        }
                        Ok(spec)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if stages.is_empty() || stages.iter().any(Vec::is_empty) {
            return Err(bad("empty stage"));
        }
        Ok(Self { stages })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            for (j, l) in stage.iter().enumerate() {
                if j > 0 {
                    f.write_str(",")?;
                }
                write!(f, "k{}s{}c{}", l.kernel, l.stride, l.out_channels)?;
            }
        }
        Ok(())
    }
}

pub fn pixel_targets(width_px: usize, fov_h_deg: f64) -> [f64; 3] {
    let deg_per_px = fov_h_deg / width_px as f64;
    RF_TARGETS_DEG.map(|deg| deg / deg_per_px)
}

pub fn within_tolerance(rf_px: usize, target_px: f64) -> bool {
    (rf_px as f64 - target_px).abs() <= (RF_REL_TOLERANCE * target_px).max(RF_ABS_TOLERANCE_PX)
}

pub fn check_receptive_fields(arch: &Architecture, width_px: usize, fov_h_deg: f64) -> Result<()> {
    let targets = pixel_targets(width_px, fov_h_deg);
    let realized = arch.stage_receptive_fields();
    if realized.len() != targets.len() {
        return Err(Error::Config(format!(
            "architecture has {} stages, expected {}",
            realized.len(),
            targets.len()
        )));
    }
    for (i, (&rf, &t)) in realized.iter().zip(&targets).enumerate() {
        if !within_tolerance(rf, t) {
            return Err(Error::Config(format!(
                "stage {} receptive field {rf}px misses target {t:.2}px at width {width_px}",
                i + 1
            )));
        }
    }
    Ok(())
}

/// The full-resolution chain: conv5, conv5, conv3/4 | conv5, conv5,
/// conv3/2 | 4 × conv5, giving stage fields of 11, 51 and 179 px.
pub fn reference_1024(channels: [usize; 3]) -> Architecture {
    let c = |kernel, stride, i: usize| ConvSpec { kernel, stride, out_channels: channels[i] };
    Architecture {
        stages: vec![
            vec![c(5, 1, 0), c(5, 1, 0), c(3, 4, 0)],
            vec![c(5, 1, 1), c(5, 1, 1), c(3, 2, 1)],
            vec![c(5, 1, 2), c(5, 1, 2), c(5, 1, 2), c(5, 1, 2)],
        ],
    }
}

/// Chooses the cheapest chain (in multiply-accumulates) meeting every stage
/// target at this resolution. Width 1024 with the default field of view
/// returns [`reference_1024`].
pub fn plan(width_px: usize, fov_h_deg: f64, channels: [usize; 3]) -> Result<Architecture> {
    if width_px == 1024 && fov_h_deg == crate::geometry::DEFAULT_FOV_H_DEG {
        return Ok(reference_1024(channels));
    }
    let targets = pixel_targets(width_px, fov_h_deg);
    let max_stride = (width_px / MIN_FINAL_MAP).max(1);
    let mut best: Option<(f64, usize, Architecture)> = None;

    let mut search = Search {
        targets,
        channels,
        max_stride,
        best: &mut best,
    };
    search.stage(0, 1, 1, width_px, 2, 0.0, 0, Vec::new());

    match best {
        Some((_, _, arch)) => Ok(arch),
        None => {
            let shown: Vec<String> = targets.iter().map(|t| format!("{t:.2}")).collect();
            let deg_per_px = fov_h_deg / width_px as f64;
            Err(Error::Config(format!(
                "receptive-field targets [{}] px are unattainable at width {width_px}: \
                 achievable stage fields start at 3 px ({:.3} deg) and grow in odd steps",
                shown.join(", "),
                3.0 * deg_per_px
            )))
        }
    }
}

struct Search<'a> {
    targets: [f64; 3],
    channels: [usize; 3],
    max_stride: usize,
    best: &'a mut Option<(f64, usize, Architecture)>,
}

impl Search<'_> {
    #[allow(clippy::too_many_arguments)]
    fn stage(
        &mut self,
        stage: usize,
        rf: usize,
        jump: usize,
        size: usize,
        in_ch: usize,
        cost: f64,
        layers: usize,
        done: Vec<Vec<ConvSpec>>,
    ) {
        if stage == 3 {
            let better = match self.best {
                None => true,
                Some((c, n, _)) => cost < *c || (cost == *c && layers < *n),
            };
            if better {
                *self.best = Some((cost, layers, Architecture { stages: done }));
            }
            return;
        }
        let mut chain = Vec::new();
        self.layer(stage, rf, jump, size, in_ch, cost, layers, &done, &mut chain);
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &mut self,
        stage: usize,
        rf: usize,
        jump: usize,
        size: usize,
        in_ch: usize,
        cost: f64,
        layers: usize,
        done: &[Vec<ConvSpec>],
        chain: &mut Vec<ConvSpec>,
    ) {
        if self.best.as_ref().is_some_and(|(c, _, _)| cost > *c) {
            return;
        }
        let target = self.targets[stage];
        if !chain.is_empty() && within_tolerance(rf, target) {
            let mut next = done.to_vec();
            next.push(chain.clone());
            self.stage(stage + 1, rf, jump, size, self.channels[stage], cost, layers, next);
        }
        if chain.len() == MAX_LAYERS_PER_STAGE {
            return;
        }
        let out_ch = self.channels[stage];
        for kernel in KERNELS {
            let grown = rf + (kernel - 1) * jump;
            if grown as f64 > target * (1.0 + RF_REL_TOLERANCE) + RF_ABS_TOLERANCE_PX {
                continue;
            }
            for stride in STRIDES {
                if jump * stride > self.max_stride {
                    continue;
                }
                let out = size.div_ceil(stride);
                let macs = (out * out * kernel * kernel * in_ch * out_ch) as f64;
                chain.push(ConvSpec { kernel, stride, out_channels: out_ch });
                self.layer(
                    stage,
                    grown,
                    jump * stride,
                    out,
                    out_ch,
                    cost + macs,
                    layers + 1,
                    done,
                    chain,
                );
                chain.pop();
            }
        }
    }
}
