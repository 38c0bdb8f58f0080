use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use toml::{Table, Value};

use flowsal_core::io::{read_flo, read_pnm, write_flo, write_frame, write_heatmap, write_pfm};
use flowsal_core::pipeline::{list_inputs, load_scene, stability_map, FRAME_EXTENSIONS};
use flowsal_core::synth::{render_field, render_frames};
use flowsal_core::{
    estimate_flow, run_pipeline, FlowError, MeanFlowAccumulator, PipelineConfig, PipelineError,
};

#[derive(Parser, Debug)]
#[command(name = "flowsal", version, about = "Salient-region detection in crowd flow")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full pipeline.
    Analyze(AnalyzeArgs),
    /// Estimate flow between consecutive frames and write .flo files.
    Flow(FlowArgs),
    /// Exponent map of the first window of .flo files.
    Stability(StabilityArgs),
    /// Render a scene to frames, its velocity field and ground truth.
    Synth(SynthArgs),
    /// Time the pipeline on a scene.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct InputArgs {
    /// Directory of PGM/PPM frames.
    #[arg(long, group = "source")]
    frames: Option<PathBuf>,
    /// Directory of .flo files.
    #[arg(long, group = "source")]
    flows: Option<PathBuf>,
    /// Fixture name (e.g. bottleneck-64) or scene TOML path.
    #[arg(long, group = "source")]
    scene: Option<String>,
}

#[derive(Args, Debug, Default)]
struct FlowFlags {
    #[arg(long)]
    smoothness: Option<f64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    pyramid_scale: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct AdvectionFlags {
    /// Integration horizon in frames (defaults to tau).
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    step_h: Option<f64>,
    #[arg(long)]
    seed_stride: Option<usize>,
    /// clamp, zero or reflect.
    #[arg(long)]
    boundary: Option<String>,
}

#[derive(Args, Debug, Default)]
struct SaliencyFlags {
    #[arg(long)]
    beta: Option<f64>,
    /// fixed, percentile or otsu.
    #[arg(long)]
    alpha_mode: Option<String>,
    #[arg(long)]
    alpha_value: Option<f64>,
    #[arg(long)]
    fallback_alpha: Option<f64>,
    #[arg(long)]
    local_window: Option<usize>,
    #[arg(long)]
    local_k: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
    /// union or intersection.
    #[arg(long)]
    combine: Option<String>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    input: InputArgs,
    /// Window length in frames.
    #[arg(long)]
    tau: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated: phi_map, phi_hat_map, mask, regions_json, heatmap_image, timing.
    #[arg(long, value_delimiter = ',')]
    artifacts: Option<Vec<String>>,
    /// Scene input only: estimate flow from rendered frames.
    #[arg(long)]
    via_frames: bool,
    #[arg(long)]
    texture_seed: Option<u64>,
    #[command(flatten)]
    flow: FlowFlags,
    #[command(flatten)]
    advection: AdvectionFlags,
    #[command(flatten)]
    saliency: SaliencyFlags,
}

#[derive(Args, Debug)]
struct FlowArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flow: FlowFlags,
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[arg(long)]
    flows: PathBuf,
    #[arg(long, default_value_t = 10)]
    tau: usize,
    /// Output path prefix: writes <out>.pfm and <out>.pgm.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    advection: AdvectionFlags,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    scene: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 11)]
    n_frames: usize,
    #[arg(long, default_value_t = 0)]
    texture_seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value = "bottleneck-64")]
    scene: String,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    #[arg(long)]
    via_frames: bool,
    #[command(flatten)]
    advection: AdvectionFlags,
}

/// Failures that map to a process exit code.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Input(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Input(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Input(e) | Failure::Numeric(e) => e,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.into()),
            PipelineError::Numeric(_) => Failure::Numeric(e.into()),
            _ => Failure::Input(e.into()),
        }
    }
}

fn input_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Input(e.into())
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn set(table: &mut Table, section: &str, key: &str, value: Option<Value>) {
    if let Some(v) = value {
        let entry = table.entry(section).or_insert_with(|| Value::Table(Table::new()));
        if let Value::Table(t) = entry {
            t.insert(key.into(), v);
        }
    }
}

fn float(v: Option<f64>) -> Option<Value> {
    v.map(Value::Float)
}

fn int(v: Option<usize>) -> Option<Value> {
    v.map(|n| Value::Integer(n as i64))
}

fn string(v: &Option<String>) -> Option<Value> {
    v.clone().map(Value::String)
}

fn apply_flow(t: &mut Table, f: &FlowFlags) {
    set(t, "flow", "smoothness_weight", float(f.smoothness));
    set(t, "flow", "pyramid_levels", int(f.levels));
    set(t, "flow", "pyramid_scale", float(f.pyramid_scale));
    set(t, "flow", "iterations_per_level", int(f.iterations));
    set(t, "flow", "convergence_eps", float(f.eps));
}

fn apply_advection(t: &mut Table, a: &AdvectionFlags) {
    set(t, "advection", "horizon_tau", float(a.horizon));
    set(t, "advection", "step_h", float(a.step_h));
    set(t, "advection", "seed_stride", int(a.seed_stride));
    set(t, "advection", "boundary", string(&a.boundary));
}

fn apply_saliency(t: &mut Table, s: &SaliencyFlags) {
    set(t, "saliency", "beta", float(s.beta));
    set(t, "saliency", "alpha_mode", string(&s.alpha_mode));
    set(t, "saliency", "alpha_value", float(s.alpha_value));
    set(t, "saliency", "fallback_alpha", float(s.fallback_alpha));
    set(t, "saliency", "local_window", int(s.local_window));
    set(t, "saliency", "local_k", float(s.local_k));
    set(t, "saliency", "min_region_area", int(s.min_area));
    set(t, "saliency", "combine_mode", string(&s.combine));
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Config file (if any) with command-line overrides applied.
fn pipeline_config(args: &AnalyzeArgs) -> Result<PipelineConfig, Failure> {
    let mut t = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(config_err)?;
            text.parse::<Table>().with_context(|| format!("parsing {}", p.display())).map_err(config_err)?
        }
        None => Table::new(),
    };
    let input = match (&args.input.frames, &args.input.flows, &args.input.scene) {
        (Some(d), _, _) => Some(("frames", path_value(d))),
        (_, Some(d), _) => Some(("flows", path_value(d))),
        (_, _, Some(s)) => Some(("scene", Value::String(s.clone()))),
        _ => None,
    };
    if let Some((k, v)) = input {
        let mut it = Table::new();
        it.insert(k.into(), v);
        t.insert("input".into(), Value::Table(it));
    }
    if let Some(tau) = args.tau {
        t.insert("tau".into(), Value::Integer(tau as i64));
    }
    set(&mut t, "output", "dir", args.out.as_deref().map(path_value));
    set(
        &mut t,
        "output",
        "artifacts",
        args.artifacts.as_ref().map(|a| Value::Array(a.iter().cloned().map(Value::String).collect())),
    );
    if args.via_frames {
        set(&mut t, "scene", "via_frames", Some(Value::Boolean(true)));
    }
    set(&mut t, "scene", "texture_seed", args.texture_seed.map(|s| Value::Integer(s as i64)));
    apply_flow(&mut t, &args.flow);
    apply_advection(&mut t, &args.advection);
    apply_saliency(&mut t, &args.saliency);
    if !t.contains_key("input") {
        return Err(config_err(anyhow::anyhow!("no input: pass --frames, --flows or --scene, or set [input]")));
    }
    let cfg: PipelineConfig = t.try_into().map_err(config_err)?;
    cfg.validate()?;
    Ok(cfg)
}

fn analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let cfg = pipeline_config(args)?;
    let summary = run_pipeline(&cfg)?;
    for (w, r) in summary.windows.iter().zip(&summary.reports) {
        println!(
            "window {} frames {}..={} alpha {:.6}{} regions {}",
            w.index,
            w.frame_window[0],
            w.frame_window[1],
            w.alpha_used,
            if w.alpha_fallback { " (fallback)" } else { "" },
            r.regions.len()
        );
        for reg in &r.regions {
            let b = reg.bbox;
            println!(
                "  #{} area {} bbox [{}, {}, {}, {}] mean_phi {:.6} max_phi {:.6}",
                reg.id, reg.area, b.x, b.y, b.w, b.h, reg.mean_phi, reg.max_phi
            );
        }
    }
    if summary.windows.is_empty() {
        warn!("no complete window in the input");
    }
    Ok(())
}

fn flow_params(flags: &FlowFlags) -> Result<flowsal_core::FlowParamsf64, Failure> {
    let mut t = Table::new();
    apply_flow(&mut t, flags);
    let flow = t.remove("flow").unwrap_or(Value::Table(Table::new()));
    let params: flowsal_core::FlowParamsf64 = flow.try_into().map_err(config_err)?;
    params.validate().map_err(config_err)?;
    Ok(params)
}

fn flow(args: &FlowArgs) -> Result<(), Failure> {
    let params = flow_params(&args.flow)?;
    let files = list_inputs(&args.frames, &FRAME_EXTENSIONS)?;
    if files.len() < 2 {
        return Err(input_err(anyhow::anyhow!("need at least two frames in {}", args.frames.display())));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display())).map_err(input_err)?;
    let mut prev = read_pnm::<f64>(&files[0]).map_err(input_err)?;
    for (i, path) in files.iter().enumerate().skip(1) {
        let next = read_pnm::<f64>(path).map_err(input_err)?;
        let f = estimate_flow(&prev, &next, &params).map_err(|e| match e {
            FlowError::ShapeMismatch { .. } => input_err(anyhow::anyhow!("{}: {e}", path.display())),
            other => Failure::Numeric(other.into()),
        })?;
        let out = args.out.join(format!("flow_{:05}.flo", i - 1));
        write_flo(&f, &out).map_err(input_err)?;
        info!("wrote {}", out.display());
        prev = next;
    }
    println!("wrote {} flow files to {}", files.len() - 1, args.out.display());
    Ok(())
}

fn stability(args: &StabilityArgs) -> Result<(), Failure> {
    let mut t = Table::new();
    t.insert("input".into(), Value::Table([("flows".to_string(), path_value(&args.flows))].into_iter().collect()));
    t.insert("tau".into(), Value::Integer(args.tau as i64));
    apply_advection(&mut t, &args.advection);
    let cfg: PipelineConfig = t.try_into().map_err(config_err)?;
    cfg.validate()?;
    let adv = cfg.advection_config()?;
    let files = list_inputs(&args.flows, &["flo"])?;
    if files.len() < args.tau {
        return Err(input_err(anyhow::anyhow!("{} flow files, window needs {}", files.len(), args.tau)));
    }
    let first = read_flo::<f64>(&files[0]).map_err(input_err)?;
    let mut acc = MeanFlowAccumulator::new(first.shape(), args.tau).map_err(config_err)?;
    acc.accumulate(&first).map_err(input_err)?;
    for p in &files[1..args.tau] {
        let f = read_flo::<f64>(p).map_err(input_err)?;
        acc.accumulate(&f).with_context(|| p.display().to_string()).map_err(input_err)?;
    }
    let mean = acc.finalize_mean().map_err(input_err)?;
    let phi = stability_map(&mean, &adv)?;
    if phi.values().iter().any(|v| !v.is_finite()) {
        return Err(Failure::Numeric(anyhow::anyhow!("non-finite exponent")));
    }
    let pfm = args.out.with_extension("pfm");
    let pgm = args.out.with_extension("pgm");
    write_pfm(&phi, &pfm).map_err(input_err)?;
    write_heatmap(&phi, &pgm).map_err(input_err)?;
    let (lo, hi) = phi.min_max();
    println!("phi range [{lo:.6}, {hi:.6}] -> {} and {}", pfm.display(), pgm.display());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let spec = load_scene(&args.scene)?;
    let (field, gt) = render_field::<f64>(&spec).map_err(config_err)?;
    let frames = render_frames::<f64>(&spec, args.n_frames, args.texture_seed).map_err(config_err)?;
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(input_err)?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(f, out.join(format!("frame_{i:05}.pgm"))).map_err(input_err)?;
    }
    write_flo(&field, out.join("field.flo")).map_err(input_err)?;
    fs::write(out.join("scene.toml"), spec.to_toml_string()).map_err(input_err)?;
    let boxes: Vec<String> =
        gt.salient_boxes.iter().map(|b| format!("[{}, {}, {}, {}]", b.x, b.y, b.w, b.h)).collect();
    fs::write(out.join("ground_truth.toml"), format!("salient_boxes = [{}]\n", boxes.join(", "))).map_err(input_err)?;
    println!("wrote {} frames, field.flo and ground truth to {}", frames.len(), out.display());
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<(), Failure> {
    let mut t = Table::new();
    t.insert("input".into(), Value::Table([("scene".to_string(), Value::String(args.scene.clone()))].into_iter().collect()));
    if args.via_frames {
        set(&mut t, "scene", "via_frames", Some(Value::Boolean(true)));
    }
    apply_advection(&mut t, &args.advection);
    let cfg: PipelineConfig = t.try_into().map_err(config_err)?;
    cfg.validate()?;
    if args.repeat == 0 {
        return Err(config_err(anyhow::anyhow!("--repeat must be at least 1")));
    }
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..args.repeat {
        let start = Instant::now();
        let s = run_pipeline(&cfg)?;
        best = best.min(start.elapsed().as_secs_f64());
        last = Some(s);
    }
    let s = last.expect("at least one run");
    let t = &s.timings;
    println!("scene {} workers {} best {:.4}s", args.scene, rayon::current_num_threads(), best);
    println!(
        "  input {:.4}  flow {:.4}  accumulate {:.4}  advection {:.4}  jacobian {:.4}  eigen {:.4}  exponent {:.4}  saliency {:.4}",
        t.input, t.flow, t.accumulate, t.advection, t.jacobian, t.eigen, t.exponent, t.saliency
    );
    println!("  {:.0} seed points/s", s.pixels_per_second);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Flow(a) => flow(a),
        Command::Stability(a) => stability(a),
        Command::Synth(a) => synth(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match cli.workers {
        Some(0) => Err(Failure::Config(anyhow::anyhow!("--workers must be at least 1"))),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(Failure::Config(e.into())),
        },
        None => run(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
