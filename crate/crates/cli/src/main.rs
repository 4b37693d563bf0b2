use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use stereoscale::config::PipelineConfig;
use stereoscale::dataset::{self, build_test_set, build_training_set, Manifest, Sample};
use stereoscale::eval::{self, emit_report, evaluate, helmholtz_probe, LinearProbe};
use stereoscale::model::checkpoint::{load_params, save_params};
use stereoscale::model::train::train;
use stereoscale::model::{build_model, ModelParams};
use stereoscale::scene::{generate_scene, SceneSpec};
use stereoscale::{io, Error, Removal, SceneVariant};

const RUN_LOG: &str = "run.log";

#[derive(Parser)]
#[command(name = "stereoscale", version, about = "Distance from fixation-relative disparity")]
struct Cli {
    /// Pipeline configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Procedural scene files.
    #[command(subcommand)]
    Scene(SceneCommand),
    /// Render one disparity map at a viewing distance.
    Render(RenderArgs),
    /// Build training or test datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    Train(TrainArgs),
    Eval(EvalArgs),
    Predict(PredictArgs),
    /// Closed-form scale estimate on a rendered map.
    Oracle(OracleArgs),
    /// Predictions under a scaled interocular distance.
    ProbeHelmholtz(ProbeArgs),
}

#[derive(Subcommand)]
enum SceneCommand {
    Gen(SceneGenArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    BuildTrain(BuildArgs),
    BuildTest(BuildArgs),
}

#[derive(Args)]
struct SceneGenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Overrides `scene_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    distance: f64,
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long)]
    flip: bool,
    /// Overrides `resolution`.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    view: ViewArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    /// Scene file; generated from `scene_seed` when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the distance seed of this dataset.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides both `init_seed` and `shuffle_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training dataset used to fit the linear-probe baseline.
    #[arg(long)]
    train_data: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// A dataset directory or a single sample file.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Scene whose canonical depths drive the inversion (defaults to --scene).
    #[arg(long)]
    canonical: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    factor: f64,
    #[arg(long)]
    out: PathBuf,
}

/// A one-line failure: exit code plus `error kind=... message=...`.
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure { code, kind: e.kind().into(), message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, kind: "usage".into(), message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Effective configuration plus the flags that overrode it.
struct Context {
    config: PipelineConfig,
    config_path: Option<PathBuf>,
    command: String,
    overrides: Vec<(String, String)>,
}

impl Context {
    fn new(config_path: Option<PathBuf>, command: &str) -> CliResult<Self> {
        let config = match &config_path {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        Ok(Self { config, config_path, command: command.into(), overrides: Vec::new() })
    }

    fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) -> CliResult<()> {
        if let Some(v) = value {
            let v = v.to_string();
            self.config.set(key, &v)?;
            self.overrides.push((key.into(), v));
        }
        Ok(())
    }

    fn validated(self) -> CliResult<Self> {
        self.config.validate()?;
        Ok(self)
    }

    /// Writes `run.log` into `dir`: command, overrides, config echo, seeds,
    /// then a SHA-256 line for every other file below `dir`.
    fn write_run_log(&self, dir: &Path, seeds: &[(&str, u64)], notes: &[(&str, String)]) -> CliResult<()> {
        let mut s = String::new();
        let _ = writeln!(s, "# stereoscale {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "command = {}", self.command);
        if let Some(p) = &self.config_path {
            let _ = writeln!(s, "config_file = {}", p.display());
        }
        let _ = writeln!(s, "# precedence: flag > config file > built-in default");
        for (k, v) in &self.overrides {
            let _ = writeln!(s, "override.{k} = {v}");
        }
        for line in self.config.echo().lines() {
            let _ = writeln!(s, "config.{line}");
        }
        for (k, v) in seeds {
            let _ = writeln!(s, "seed.{k} = {v}");
        }
        for (k, v) in notes {
            let _ = writeln!(s, "{k} = {v}");
        }
        for path in files_below(dir)? {
            let rel = path.strip_prefix(dir).unwrap_or(&path);
            if rel == Path::new(RUN_LOG) {
                continue;
            }
            let bytes = io::read(&path)?;
            let digest = Sha256::digest(&bytes);
            let hex = digest.iter().fold(String::new(), |mut h, b| {
                let _ = write!(h, "{b:02x}");
                h
            });
            let _ = writeln!(s, "sha256.{} = {hex}", rel.display());
        }
        io::write_atomic(&dir.join(RUN_LOG), s.as_bytes())?;
        Ok(())
    }
}

fn files_below(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Failure::from(Error::Io { path: d.clone(), source: e }))?;
        for entry in entries {
            let entry = entry.map_err(|e| Failure::from(Error::Io { path: d.clone(), source: e }))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn load_scene(path: &Path) -> CliResult<SceneSpec> {
    Ok(SceneSpec::from_json(&io::read_to_string(path)?)?)
}

fn scene_or_generated(ctx: &Context, path: Option<&Path>) -> CliResult<SceneSpec> {
    match path {
        Some(p) => load_scene(p),
        None => {
            let c = &ctx.config;
            Ok(generate_scene(c.scene_seed, c.inventory(), &format!("scene-{}", c.scene_seed))?)
        }
    }
}

fn variant(args: &ViewArgs) -> CliResult<SceneVariant> {
    Ok(SceneVariant { removal: Removal::parse(&args.variant)?, flipped: args.flip })
}

/// Rejects a dataset whose viewing geometry contradicts the configuration.
fn check_data_matches(ctx: &Context, manifest: &Manifest) -> CliResult<()> {
    let g = &manifest.config.geometry;
    let c = &ctx.config;
    if g.width_px != c.resolution || g.height_px != c.resolution {
        return Err(usage(format!(
            "resolution mismatch: configuration says {0}x{0}, data at {1} is {2}x{3}",
            c.resolution,
            manifest.root.display(),
            g.width_px,
            g.height_px
        )));
    }
    if g.fov_h_deg != c.fov_h_deg || g.ipd_m != c.ipd_m {
        return Err(usage(format!(
            "geometry mismatch: configuration has fov {} deg / ipd {} m, data has {} deg / {} m",
            c.fov_h_deg, c.ipd_m, g.fov_h_deg, g.ipd_m
        )));
    }
    Ok(())
}

fn check_model_matches(model: &ModelParams, manifest: &Manifest) -> CliResult<()> {
    let g = &manifest.config.geometry;
    if g.width_px != model.config.resolution || g.height_px != model.config.resolution {
        return Err(usage(format!(
            "resolution mismatch: model expects {0}x{0}, data at {1} is {2}x{3}",
            model.config.resolution,
            manifest.root.display(),
            g.width_px,
            g.height_px
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.into(), source: e }))
}

fn scene_gen(mut ctx: Context, args: SceneGenArgs) -> CliResult<()> {
    ctx.flag("scene_seed", args.seed)?;
    let ctx = ctx.validated()?;
    create_dir(&args.out)?;
    let scene = scene_or_generated(&ctx, None)?;
    io::write_atomic(&args.out.join(dataset::SCENE_FILE), scene.to_json()?.as_bytes())?;
    ctx.write_run_log(&args.out, &[("scene", ctx.config.scene_seed)], &[])?;
    println!("scene_id={}", scene.scene_id);
    println!("primitives={}", scene.primitives.len());
    println!("path={}", args.out.join(dataset::SCENE_FILE).display());
    Ok(())
}

fn render(mut ctx: Context, args: RenderArgs) -> CliResult<()> {
    ctx.flag("resolution", args.view.resolution)?;
    let ctx = ctx.validated()?;
    let scene = load_scene(&args.view.scene)?;
    let variant = variant(&args.view)?;
    let geom = ctx.config.geometry()?;
    let data = dataset::render_sample(&scene, variant, &geom, args.view.distance, ctx.config.exec())?;
    create_dir(&args.out)?;
    dataset::write_sample(&data, &args.out.join("disparity.qnd"))?;
    ctx.write_run_log(&args.out, &[], &[("distance_m", args.view.distance.to_string())])?;
    let map = data.to_disparity();
    println!("distance_m={}", args.view.distance);
    println!("masked_pixels={}", map.mask.iter().filter(|&&m| m).count());
    println!("masked_mean_abs_rad={}", map.masked_mean_abs());
    Ok(())
}

fn build(mut ctx: Context, args: BuildArgs, test: bool) -> CliResult<()> {
    let seed_key = if test { "test_data_seed" } else { "train_data_seed" };
    ctx.flag(seed_key, args.seed)?;
    ctx.flag("resolution", args.resolution)?;
    let ctx = ctx.validated()?;
    let c = &ctx.config;
    let scene = scene_or_generated(&ctx, args.scene.as_deref())?;
    let geom = c.geometry()?;
    create_dir(&args.out)?;
    let manifest = if test {
        eprintln!("rendering {} test samples", c.test_count);
        build_test_set(
            &scene,
            &geom,
            c.test_data_seed,
            c.rearrange_seed,
            c.test_count,
            c.test_scenes,
            c.distance_range(),
            &args.out,
            c.exec(),
        )?
    } else {
        eprintln!("rendering {} training samples", c.train_distances * SceneVariant::ALL.len());
        build_training_set(&scene, &geom, c.train_data_seed, c.train_distances, c.distance_range(), &args.out, c.exec())?
    };
    let mut seeds = vec![("scene", c.scene_seed), (seed_key, if test { c.test_data_seed } else { c.train_data_seed })];
    if test {
        seeds.push(("rearrange", c.rearrange_seed));
    }
    ctx.write_run_log(&args.out, &seeds, &[("base_scene_id", scene.scene_id.clone())])?;
    println!("samples={}", manifest.rows.len());
    println!("manifest={}", args.out.join(dataset::MANIFEST_FILE).display());
    Ok(())
}

fn train_cmd(mut ctx: Context, args: TrainArgs) -> CliResult<()> {
    ctx.flag("init_seed", args.seed)?;
    ctx.flag("shuffle_seed", args.seed)?;
    ctx.flag("resolution", args.resolution)?;
    let ctx = ctx.validated()?;
    let c = &ctx.config;
    let model_config = c.model_config()?;
    let manifest = Manifest::load(&args.data)?;
    check_data_matches(&ctx, &manifest)?;
    create_dir(&args.out)?;
    let set = manifest.training_set(&model_config, c.exec())?;
    eprintln!("training {} on {} samples", model_config.arch, set.len());
    let mut log = String::from("epoch,loss,rmse_diopters\n");
    let params = train(build_model(model_config, c.init_seed)?, &set, &c.train_config(), |s| {
        eprintln!("epoch {} loss {:.6} rmse_diopters {:.6}", s.epoch, s.loss, s.rmse_diopters);
        let _ = writeln!(log, "{},{},{}", s.epoch, s.loss, s.rmse_diopters);
    })?;
    io::write_atomic(&args.out.join("train_log.csv"), log.as_bytes())?;
    let model_path = args.out.join("model.qnw");
    save_params(&params, &model_path)?;
    ctx.write_run_log(
        &args.out,
        &[("init", c.init_seed), ("shuffle", c.shuffle_seed)],
        &[("data", args.data.display().to_string())],
    )?;
    for key in ["epochs", "final_loss", "final_rmse_diopters"] {
        println!("{key}={}", params.meta.get(key).map(String::as_str).unwrap_or(""));
    }
    println!("model={}", model_path.display());
    Ok(())
}

fn eval_cmd(ctx: Context, args: EvalArgs) -> CliResult<()> {
    let ctx = ctx.validated()?;
    let exec = ctx.config.exec();
    let params = load_params(&args.model)?;
    let manifest = Manifest::load(&args.data)?;
    check_model_matches(&params, &manifest)?;
    let train_manifest = args.train_data.as_deref().map(Manifest::load).transpose()?;
    if let Some(m) = &train_manifest {
        check_model_matches(&params, m)?;
    }
    create_dir(&args.out)?;
    let report = evaluate(&params, &manifest, exec)?;
    emit_report(&report, &args.out.join("report.csv"), Some(&args.out.join("scatter.svg")))?;
    let truths: Vec<f64> = report.rows.iter().map(|r| r.true_m).collect();
    let mut extra = format!("mean_baseline_r2={}\n", eval::mean_baseline(&truths)?.r2);
    if let Some(m) = &train_manifest {
        let probe = LinearProbe::fit(&m.load_all(exec)?)?;
        let test_samples: Vec<Sample> = manifest.load_all(exec)?;
        let _ = writeln!(extra, "linear_probe_r2={}", probe.evaluate(&test_samples)?.r2);
    }
    ctx.write_run_log(
        &args.out,
        &[],
        &[("model", args.model.display().to_string()), ("data", args.data.display().to_string())],
    )?;
    print!("{}{extra}", report.summary());
    Ok(())
}

fn predict_cmd(ctx: Context, args: PredictArgs) -> CliResult<()> {
    let ctx = ctx.validated()?;
    let exec = ctx.config.exec();
    let params = load_params(&args.model)?;
    let samples = if args.data.is_dir() {
        let manifest = Manifest::load(&args.data)?;
        check_model_matches(&params, &manifest)?;
        manifest.load_all(exec)?
    } else {
        let data = dataset::load_sample(&args.data)?;
        vec![Sample {
            sample_id: args.data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            data,
            variant: SceneVariant::FULL,
            scene_id: String::new(),
            distance_index: 0,
        }]
    };
    let pred = eval::predict_diopters(&params, &samples, exec)?;
    for (s, d) in samples.iter().zip(pred) {
        println!("pred_m.{}={}", s.sample_id, eval::diopters_to_m(d));
    }
    Ok(())
}

fn oracle_cmd(mut ctx: Context, args: OracleArgs) -> CliResult<()> {
    ctx.flag("resolution", args.view.resolution)?;
    let ctx = ctx.validated()?;
    let scene = load_scene(&args.view.scene)?;
    let canonical = match &args.canonical {
        Some(p) => load_scene(p)?,
        None => scene.clone(),
    };
    let variant = variant(&args.view)?;
    let geom = ctx.config.geometry()?;
    let exec = ctx.config.exec();
    let observed = dataset::render_sample(&scene, variant, &geom, args.view.distance, exec)?;
    let estimate = eval::closed_form_scale(&observed.to_disparity(), &canonical, variant, &geom, exec)?;
    println!("true_m={}", args.view.distance);
    println!("estimate_m={estimate}");
    println!("relative_error={}", estimate / args.view.distance - 1.0);
    println!("matched={}", canonical == scene);
    Ok(())
}

fn probe_cmd(ctx: Context, args: ProbeArgs) -> CliResult<()> {
    let ctx = ctx.validated()?;
    let params = load_params(&args.model)?;
    let manifest = Manifest::load(&args.data)?;
    check_model_matches(&params, &manifest)?;
    create_dir(&args.out)?;
    let report = helmholtz_probe(&params, &manifest, args.factor, ctx.config.exec())?;
    let mut csv = String::from("id,true_m,pred_m,ratio\n");
    for r in &report.rows {
        let _ = writeln!(csv, "{},{},{},{}", r.id, r.true_m, r.pred_m, r.ratio);
    }
    io::write_atomic(&args.out.join("helmholtz.csv"), csv.as_bytes())?;
    ctx.write_run_log(&args.out, &[], &[("factor", args.factor.to_string())])?;
    print!("{}", report.summary());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = cli.config;
    match cli.command {
        Command::Scene(SceneCommand::Gen(a)) => scene_gen(Context::new(cfg, "scene gen")?, a),
        Command::Render(a) => render(Context::new(cfg, "render")?, a),
        Command::Dataset(DatasetCommand::BuildTrain(a)) => build(Context::new(cfg, "dataset build-train")?, a, false),
        Command::Dataset(DatasetCommand::BuildTest(a)) => build(Context::new(cfg, "dataset build-test")?, a, true),
        Command::Train(a) => train_cmd(Context::new(cfg, "train")?, a),
        Command::Eval(a) => eval_cmd(Context::new(cfg, "eval")?, a),
        Command::Predict(a) => predict_cmd(Context::new(cfg, "predict")?, a),
        Command::Oracle(a) => oracle_cmd(Context::new(cfg, "oracle")?, a),
        Command::ProbeHelmholtz(a) => probe_cmd(Context::new(cfg, "probe-helmholtz")?, a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error kind=usage message={:?}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} message={:?}", f.kind, one_line(&f.message));
            ExitCode::from(f.code)
        }
    }
}
