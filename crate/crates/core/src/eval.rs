//! Metrics, analytic baselines, probes, and report files.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{prepare_samples, render_sample, Manifest, Sample};
use crate::error::{Error, Result};
use crate::geometry::{DisparityMap, ViewingGeometry};
use crate::io;
use crate::model::{ModelConfig, ModelParams, Prepared};
use crate::par::{self, Exec};
use crate::scene::{render_canonical, SceneSpec, SceneVariant};

/// Pixels whose |disparity| is below this are too close to fixation to invert.
pub const DISPARITY_FLOOR_RAD: f64 = 1e-5;
pub const MIN_USABLE_PIXELS: usize = 100;
/// Predictions are clamped to at least this many diopters before conversion
/// to meters, so a non-positive network output maps to a far but finite
/// distance.
pub const MIN_PREDICTED_DIOPTERS: f64 = 0.01;
pub const PLOT_RANGE_M: (f64, f64) = (0.25, 2.5);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub r2: f64,
    pub rmse_m: f64,
    pub rmse_diopters: f64,
    pub median_abs_error_m: f64,
}

/// R² and RMSE in meters, RMSE in diopters, and median absolute error.
/// R² is NaN when every truth is identical.
pub fn metrics(truth_m: &[f64], pred_m: &[f64]) -> Result<Metrics> {
    if truth_m.is_empty() || truth_m.len() != pred_m.len() {
        return Err(Error::Input(format!(
            "need matching non-empty truth/prediction lists, got {} and {}",
            truth_m.len(),
            pred_m.len()
        )));
    }
    let n = truth_m.len() as f64;
    let mean = truth_m.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth_m.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = truth_m.iter().zip(pred_m).map(|(t, p)| (t - p).powi(2)).sum();
    let ss_dio: f64 = truth_m.iter().zip(pred_m).map(|(t, p)| (1.0 / t - 1.0 / p).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    let abs: Vec<f64> = truth_m.iter().zip(pred_m).map(|(t, p)| (t - p).abs()).collect();
    Ok(Metrics {
        r2,
        rmse_m: (ss_res / n).sqrt(),
        rmse_diopters: (ss_dio / n).sqrt(),
        median_abs_error_m: median(abs),
    })
}

pub fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn diopters_to_m(diopters: f64) -> f64 {
    1.0 / diopters.max(MIN_PREDICTED_DIOPTERS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub true_m: f64,
    pub pred_m: f64,
    pub err_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub metrics: Metrics,
    pub config_echo: Vec<(String, String)>,
}

impl EvalReport {
    pub fn from_predictions(
        ids: Vec<String>,
        truth_m: &[f64],
        pred_m: &[f64],
        config_echo: Vec<(String, String)>,
    ) -> Result<Self> {
        let metrics = metrics(truth_m, pred_m)?;
        let mut rows: Vec<EvalRow> = ids
            .into_iter()
            .zip(truth_m.iter().zip(pred_m))
            .map(|(id, (&t, &p))| EvalRow { id, true_m: t, pred_m: p, err_m: p - t })
            .collect();
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self { rows, metrics, config_echo })
    }

    /// Aggregates as `key=value` lines.
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let _ = writeln!(s, "n={}", self.rows.len());
        let _ = writeln!(s, "r2={}", m.r2);
        let _ = writeln!(s, "rmse_m={}", m.rmse_m);
        let _ = writeln!(s, "rmse_diopters={}", m.rmse_diopters);
        let _ = writeln!(s, "median_abs_error_m={}", m.median_abs_error_m);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,true_m,pred_m,err_m\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.id, r.true_m, r.pred_m, r.err_m);
        }
        for line in self.summary().lines() {
            let _ = writeln!(s, "# {line}");
        }
        for (k, v) in &self.config_echo {
            let _ = writeln!(s, "# config.{k}={v}");
        }
        s
    }

    /// Rebuilds a report from [`EvalReport::to_csv`] output, recomputing the
    /// aggregates from the rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("id,true_m,pred_m,err_m") {
            return Err(Error::format("report.csv", "missing header"));
        }
        let (mut ids, mut truth, mut pred, mut echo) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            if let Some(rest) = line.strip_prefix("# config.") {
                if let Some((k, v)) = rest.split_once('=') {
                    echo.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format("report.csv", format!("bad number in {line:?}")));
            if f.len() != 4 {
                return Err(Error::format("report.csv", format!("expected 4 fields in {line:?}")));
            }
            ids.push(f[0].to_string());
            truth.push(num(f[1])?);
            pred.push(num(f[2])?);
        }
        Self::from_predictions(ids, &truth, &pred, echo)
    }
}

/// Predictions (diopters) for every sample, in input order.
pub fn predict_diopters(params: &ModelParams, samples: &[Sample], exec: Exec) -> Result<Vec<f64>> {
    let inputs: Vec<Prepared<f32>> = prepare_samples(&params.config, samples, exec)?;
    params.forward_batch(&inputs, exec)
}

fn check_resolution(config: &ModelConfig, geom: &ViewingGeometry) -> Result<()> {
    if geom.width_px != config.resolution || geom.height_px != config.resolution {
        return Err(Error::Config(format!(
            "model resolution {0}x{0} does not match data {1}x{2}",
            config.resolution, geom.width_px, geom.height_px
        )));
    }
    Ok(())
}

pub fn evaluate(params: &ModelParams, manifest: &Manifest, exec: Exec) -> Result<EvalReport> {
    if manifest.rows.is_empty() {
        return Err(Error::Input("test manifest is empty".into()));
    }
    check_resolution(&params.config, &manifest.config.geometry)?;
    let samples = manifest.load_all(exec)?;
    let pred = predict_diopters(params, &samples, exec)?;
    let truth: Vec<f64> = samples.iter().map(|s| s.data.label_distance_m).collect();
    let pred_m: Vec<f64> = pred.into_iter().map(diopters_to_m).collect();
    let ids = samples.iter().map(|s| s.sample_id.clone()).collect();
    let mut echo = params.config.echo();
    echo.push(("data_seed".into(), manifest.config.seed.to_string()));
    echo.push(("data_kind".into(), manifest.config.kind.clone()));
    EvalReport::from_predictions(ids, &truth, &pred_m, echo)
}

/// Writes the CSV report and, if requested, an SVG scatter plot.
pub fn emit_report(report: &EvalReport, csv_path: &Path, plot_path: Option<&Path>) -> Result<()> {
    io::write_atomic(csv_path, report.to_csv().as_bytes())?;
    if let Some(p) = plot_path {
        io::write_atomic(p, scatter_svg(report).as_bytes())?;
    }
    Ok(())
}

/// Predicted-vs-true scatter with the identity line, as standalone SVG.
pub fn scatter_svg(report: &EvalReport) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 48.0;
    let (lo, hi) = PLOT_RANGE_M;
    let span = report
        .rows
        .iter()
        .flat_map(|r| [r.true_m, r.pred_m])
        .filter(|v| v.is_finite())
        .fold(hi, f64::max)
        .min(4.0 * hi);
    let px = |m: f64| PAD + (m.clamp(0.0, span) - 0.0) / span * (SIZE - 2.0 * PAD);
    let py = |m: f64| SIZE - px(m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>"#,
        px(0.0),
        py(0.0),
        px(span)
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#,
        px(0.0),
        py(0.0),
        py(span)
    );
    let _ = writeln!(
        s,
        r#"<line class="identity" data-from="{lo},{lo}" data-to="{hi},{hi}" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        px(lo),
        py(lo),
        px(hi),
        py(hi)
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            r#"<circle class="sample" cx="{:.2}" cy="{:.2}" r="2.5" fill="steelblue"><title>{} true={} pred={}</title></circle>"#,
            px(r.true_m),
            py(r.pred_m),
            r.id,
            r.true_m,
            r.pred_m
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">true distance (m)</text>"#,
        SIZE / 2.0,
        SIZE - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">predicted distance (m)</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="12">R2={:.4} RMSE={:.4} m</text>"#,
        PAD,
        report.metrics.r2,
        report.metrics.rmse_m
    );
    s.push_str("</svg>\n");
    s
}

/// Small-angle inversion of an observed disparity map against the
/// canonical depths of the same scene and variant. Returns the median
/// per-pixel scale estimate in meters.
pub fn closed_form_scale(
    observed: &DisparityMap,
    scene: &SceneSpec,
    variant: SceneVariant,
    geom: &ViewingGeometry,
    exec: Exec,
) -> Result<f64> {
    let canonical = render_canonical(scene, variant, geom, exec)?;
    if observed.width != canonical.width || observed.height != canonical.height {
        return Err(Error::Input(format!(
            "observed map is {}x{}, geometry is {}x{}",
            observed.width, observed.height, canonical.width, canonical.height
        )));
    }
    let (fu, fv) = geom.fixation_px;
    let fixation = fv * geom.width_px + fu;
    let estimates: Vec<f64> = (0..observed.values.len())
        .filter(|&i| i != fixation && observed.mask[i] && canonical.mask[i])
        .filter(|&i| observed.values[i].abs() > DISPARITY_FLOOR_RAD)
        .map(|i| geom.ipd_m * (1.0 / canonical.depth[i] - 1.0) / observed.values[i])
        .filter(|s| s.is_finite() && *s > 0.0)
        .collect();
    if estimates.len() < MIN_USABLE_PIXELS {
        return Err(Error::InsufficientSignal { usable: estimates.len(), required: MIN_USABLE_PIXELS });
    }
    Ok(median(estimates))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HelmholtzRow {
    pub id: String,
    pub true_m: f64,
    pub pred_m: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HelmholtzReport {
    pub factor: f64,
    pub rows: Vec<HelmholtzRow>,
    pub median_ratio: f64,
}

impl HelmholtzReport {
    pub fn summary(&self) -> String {
        format!("factor={}\nn={}\nmedian_ratio={}\n", self.factor, self.rows.len(), self.median_ratio)
    }
}

/// Re-renders the manifest's samples with the interocular distance scaled
/// by `factor` and reports predicted/true distance ratios.
pub fn helmholtz_probe(params: &ModelParams, manifest: &Manifest, factor: f64, exec: Exec) -> Result<HelmholtzReport> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Input(format!("factor must be > 0, got {factor}")));
    }
    if manifest.rows.is_empty() {
        return Err(Error::Input("test manifest is empty".into()));
    }
    let base = manifest.config.geometry;
    check_resolution(&params.config, &base)?;
    let geom = base.with_ipd(base.ipd_m * factor)?;
    let scenes = manifest.load_scenes()?;
    let data = par::try_map_indexed(exec, manifest.rows.len(), |i| {
        let row = &manifest.rows[i];
        render_sample(&scenes[&row.scene_id], row.variant, &geom, row.distance_m, Exec::Sequential)
    })?;
    let samples: Vec<Sample> = manifest
        .rows
        .iter()
        .zip(data)
        .map(|(row, data)| Sample {
            sample_id: row.id.clone(),
            data,
            variant: row.variant,
            scene_id: row.scene_id.clone(),
            distance_index: row.distance_index,
        })
        .collect();
    let pred = predict_diopters(params, &samples, exec)?;
    let rows: Vec<HelmholtzRow> = samples
        .iter()
        .zip(pred)
        .map(|(s, p)| {
            let pred_m = diopters_to_m(p);
            let true_m = s.data.label_distance_m;
            HelmholtzRow { id: s.sample_id.clone(), true_m, pred_m, ratio: pred_m / true_m }
        })
        .collect();
    let median_ratio = median(rows.iter().map(|r| r.ratio).collect());
    Ok(HelmholtzReport { factor, rows, median_ratio })
}

/// Predicts the mean of the truths for every sample.
pub fn mean_baseline(truth_m: &[f64]) -> Result<Metrics> {
    if truth_m.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    let mean = truth_m.iter().sum::<f64>() / truth_m.len() as f64;
    metrics(truth_m, &vec![mean; truth_m.len()])
}

/// Ordinary least squares of diopters on masked mean |disparity|.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearProbe {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearProbe {
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let xs: Vec<f64> = samples.iter().map(|s| s.data.to_disparity().masked_mean_abs()).collect();
        let ys: Vec<f64> = samples.iter().map(|s| 1.0 / s.data.label_distance_m).collect();
        let n = xs.len() as f64;
        if xs.len() < 2 {
            return Err(Error::Input("linear probe needs at least two samples".into()));
        }
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        if sxx == 0.0 {
            return Err(Error::Input("linear probe feature is constant".into()));
        }
        let slope = sxy / sxx;
        Ok(Self { intercept: my - slope * mx, slope })
    }

    pub fn predict_m(&self, sample: &Sample) -> f64 {
        diopters_to_m(self.intercept + self.slope * sample.data.to_disparity().masked_mean_abs())
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<Metrics> {
        let truth: Vec<f64> = samples.iter().map(|s| s.data.label_distance_m).collect();
        let pred: Vec<f64> = samples.iter().map(|s| self.predict_m(s)).collect();
        metrics(&truth, &pred)
    }
}

/// Fraction of samples whose prediction changes by at most `tol_diopters`
/// when the input is mirrored left to right.
pub fn flip_agreement(params: &ModelParams, samples: &[Sample], tol_diopters: f64, exec: Exec) -> Result<f64> {
    let flipped: Vec<Sample> =
        samples.iter().map(|s| Sample { data: s.data.flipped_horizontal(), ..s.clone() }).collect();
    let a = predict_diopters(params, samples, exec)?;
    let b = predict_diopters(params, &flipped, exec)?;
    let ok = a.iter().zip(&b).filter(|(x, y)| (*x - *y).abs() <= tol_diopters).count();
    Ok(ok as f64 / samples.len().max(1) as f64)
}

/// Fraction of samples whose predicted distance moves opposite to a global
/// disparity gain `alpha` (gain > 1 should read nearer).
pub fn gain_monotonicity(params: &ModelParams, samples: &[Sample], alpha: f64, exec: Exec) -> Result<f64> {
    let scaled: Vec<Sample> = samples
        .iter()
        .map(|s| {
            let mut data = s.data.clone();
            data.disparity.iter_mut().for_each(|v| *v = (*v as f64 * alpha) as f32);
            Sample { data, ..s.clone() }
        })
        .collect();
    let base = predict_diopters(params, samples, exec)?;
    let moved = predict_diopters(params, &scaled, exec)?;
    let ok = base
        .iter()
        .zip(&moved)
        .filter(|(b, m)| if alpha > 1.0 { *m > *b } else { *m < *b })
        .count();
    Ok(ok as f64 / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_r2(t: &[f64], p: &[f64]) -> f64 {
        let mut mean = 0.0;
        for x in t {
            mean += x;
        }
        mean /= t.len() as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..t.len() {
            num += (t[i] - p[i]) * (t[i] - p[i]);
            den += (t[i] - mean) * (t[i] - mean);
        }
        1.0 - num / den
    }

    #[test]
    fn metrics_match_naive_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let n = rng.random_range(2..60);
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.25..2.5)).collect();
            let p: Vec<f64> = t.iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
            let m = metrics(&t, &p).unwrap();
            assert!((m.r2 - naive_r2(&t, &p)).abs() <= 1e-12);
            let mut se = 0.0;
            for i in 0..n {
                se += (t[i] - p[i]).powi(2);
            }
            assert!((m.rmse_m - (se / n as f64).sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let t = [0.3, 0.7, 1.1, 2.4];
        let m = metrics(&t, &t).unwrap();
        assert_eq!((m.r2, m.rmse_m, m.median_abs_error_m), (1.0, 0.0, 0.0));
        let mb = mean_baseline(&t).unwrap();
        assert!(mb.r2.abs() < 1e-15);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn csv_round_trip_reproduces_aggregates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t: Vec<f64> = (0..37).map(|_| rng.random_range(0.25..2.5)).collect();
        let p: Vec<f64> = t.iter().map(|x| x * rng.random_range(0.8..1.2)).collect();
        let ids = (0..37).map(|i| format!("test_{i:05}")).collect();
        let r = EvalReport::from_predictions(ids, &t, &p, vec![("resolution".into(), "256".into())]).unwrap();
        let csv = r.to_csv();
        let rows = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
        assert_eq!(rows, 37);
        let back = EvalReport::from_csv(&csv).unwrap();
        assert!((back.metrics.r2 - r.metrics.r2).abs() <= 1e-9);
        assert!((back.metrics.rmse_m - r.metrics.rmse_m).abs() <= 1e-9);
        assert_eq!(back.config_echo, r.config_echo);
    }

    #[test]
    fn svg_has_one_marker_per_sample_and_identity_line() {
        let t = [0.3, 0.9, 2.0];
        let ids = vec!["a".into(), "b".into(), "c".into()];
        let r = EvalReport::from_predictions(ids, &t, &[0.35, 0.8, 2.2], vec![]).unwrap();
        let svg = scatter_svg(&r);
        assert_eq!(svg.matches("<circle class=\"sample\"").count(), 3);
        assert!(svg.contains("class=\"identity\" data-from=\"0.25,0.25\" data-to=\"2.5,2.5\""));
    }

    #[test]
    fn median_handles_odd_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }
}
