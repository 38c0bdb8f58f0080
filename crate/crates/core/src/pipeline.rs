//! Window-by-window orchestration: frames or flow files in, region reports and maps out.
//!
//! Windows tumble. Flow `i` runs from frame `i` to frame `i + 1`, and window `k` averages
//! flows `k*tau .. (k+1)*tau`, so it spans frames `k*tau ..= (k+1)*tau` and neighbouring
//! windows share one boundary frame. Only the previous frame and the running sums are kept
//! between flows.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advection::{advect_grid, AdvectionConfig};
use crate::field::{BoundaryPolicy, GridShape, ScalarField, VectorField2};
use crate::flow::{estimate_flow, FlowParams, Frame, MeanFlowAccumulator};
use crate::io::{self, IoError};
use crate::saliency::{detect, Detection, Region, SaliencyConfig};
use crate::stability::{jacobian_of_flow_map, max_eigenvalue_ctc, stability_exponent, StabilityField};
use crate::synth::{self, SceneSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read {path}: {detail}")]
    InputUnreadable { path: PathBuf, detail: String },
    #[error("{file}: malformed at byte {offset}: {detail}")]
    Format { file: PathBuf, offset: usize, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("cannot write {path}: {detail}")]
    Output { path: PathBuf, detail: String },
}

impl PipelineError {
    fn from_input(e: IoError) -> Self {
        match e {
            IoError::Io { path, source } => PipelineError::InputUnreadable { path, detail: source.to_string() },
            other => PipelineError::Format {
                file: other.path().to_path_buf(),
                offset: other.offset().unwrap_or(0),
                detail: other.to_string(),
            },
        }
    }

    fn from_output(e: IoError) -> Self {
        PipelineError::Output { path: e.path().to_path_buf(), detail: e.to_string() }
    }
}

/// Where the window data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// Directory of numbered PGM/PPM frames, read in lexicographic order.
    Frames(PathBuf),
    /// Directory of `.flo` files, one per consecutive frame pair.
    Flows(PathBuf),
    /// A shipped fixture name or a path to a scene TOML.
    Scene(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneOptions {
    /// Render `tau + 1` textured frames and estimate flow from them instead of using the
    /// scene's velocity field as the window mean.
    pub via_frames: bool,
    pub texture_seed: u64,
}

/// Advection settings; `horizon_tau` defaults to the window length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvectionSettings {
    pub horizon_tau: Option<f64>,
    pub step_h: f64,
    pub seed_stride: usize,
    pub boundary: BoundaryPolicy,
}

impl Default for AdvectionSettings {
    fn default() -> Self {
        Self {
            horizon_tau: None,
            step_h: AdvectionConfig::<f64>::DEFAULT_STEP,
            seed_stride: 1,
            boundary: BoundaryPolicy::Clamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    /// Raw exponent map, PFM.
    PhiMap,
    /// Magnified map, PFM.
    PhiHatMap,
    /// Segmentation mask, PGM.
    Mask,
    /// Per-window region report, JSON.
    RegionsJson,
    /// Exponent heatmap, PGM with a range sidecar.
    HeatmapImage,
    /// Run summary with stage timings, JSON.
    Timing,
}

impl std::str::FromStr for Artifact {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown artifact '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSettings {
    /// Nothing is written when unset.
    pub dir: Option<PathBuf>,
    pub artifacts: BTreeSet<Artifact>,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: None, artifacts: [Artifact::RegionsJson, Artifact::Timing].into_iter().collect() }
    }
}

pub const DEFAULT_TAU: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: InputSource,
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default)]
    pub flow: FlowParams<f64>,
    #[serde(default)]
    pub advection: AdvectionSettings,
    #[serde(default)]
    pub saliency: SaliencyConfig<f64>,
    #[serde(default)]
    pub scene: SceneOptions,
    #[serde(default)]
    pub output: OutputSettings,
}

fn default_tau() -> usize {
    DEFAULT_TAU
}

impl PipelineConfig {
    pub fn new(input: InputSource) -> Self {
        Self {
            input,
            tau: DEFAULT_TAU,
            flow: FlowParams::default(),
            advection: AdvectionSettings::default(),
            saliency: SaliencyConfig::default(),
            scene: SceneOptions::default(),
            output: OutputSettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn advection_config(&self) -> Result<AdvectionConfig<f64>, PipelineError> {
        let a = &self.advection;
        let horizon = a.horizon_tau.unwrap_or(self.tau as f64);
        AdvectionConfig::new(horizon, a.step_h, a.seed_stride, a.boundary)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.tau == 0 {
            return Err(PipelineError::Config("tau must be at least 1".into()));
        }
        self.flow.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.saliency.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.advection_config()?;
        Ok(())
    }
}

/// The per-window JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    /// First and last frame index covered by the window.
    pub frame_window: [usize; 2],
    pub alpha_used: f64,
    /// Region geometry is in seed-grid cells (pixels when `seed_stride` is 1).
    pub regions: Vec<Region>,
}

impl WindowReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Wall time per stage, summed over windows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub input: f64,
    pub flow: f64,
    pub accumulate: f64,
    pub advection: f64,
    pub jacobian: f64,
    pub eigen: f64,
    pub exponent: f64,
    pub saliency: f64,
    pub output: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub index: usize,
    pub frame_window: [usize; 2],
    pub alpha_used: f64,
    pub alpha_fallback: bool,
    pub regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub windows: Vec<WindowSummary>,
    /// Trailing frames or flows that did not fill a window.
    pub skipped_trailing: usize,
    pub timings: StageTimings,
    pub total_seconds: f64,
    /// Seed points pushed through advection and detection per second of total time.
    pub pixels_per_second: f64,
    #[serde(skip)]
    pub reports: Vec<WindowReport>,
}

/// Everything computed for one window.
#[derive(Debug, Clone)]
pub struct WindowOutcome {
    pub phi: StabilityField<f64>,
    pub detection: Detection<f64>,
}

struct Clock(Instant);

impl Clock {
    fn start() -> Self {
        Self(Instant::now())
    }

    fn lap(&mut self, slot: &mut f64) {
        let now = Instant::now();
        *slot += now.duration_since(self.0).as_secs_f64();
        self.0 = now;
    }
}

/// Advection through detection for one mean field.
pub fn process_window(
    mean: &VectorField2<f64>,
    adv: &AdvectionConfig<f64>,
    saliency: &SaliencyConfig<f64>,
    timings: &mut StageTimings,
) -> Result<WindowOutcome, PipelineError> {
    let mut clock = Clock::start();
    let map = advect_grid(mean, adv);
    clock.lap(&mut timings.advection);
    let jac = jacobian_of_flow_map(&map).map_err(|e| PipelineError::Config(e.to_string()))?;
    clock.lap(&mut timings.jacobian);
    let lambda = max_eigenvalue_ctc(&jac);
    clock.lap(&mut timings.eigen);
    let phi = stability_exponent(&lambda, adv.horizon());
    clock.lap(&mut timings.exponent);
    if let Some(i) = phi.values().iter().position(|v| !v.is_finite()) {
        return Err(PipelineError::Numeric(format!("non-finite exponent at seed {i}")));
    }
    let detection = detect(&phi, saliency).map_err(|e| PipelineError::Numeric(e.to_string()))?;
    clock.lap(&mut timings.saliency);
    Ok(WindowOutcome { phi, detection })
}

/// Files in `dir` with one of `exts` (case-insensitive), sorted by name.
pub fn list_inputs(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, PipelineError> {
    let unreadable = |e: std::io::Error| PipelineError::InputUnreadable { path: dir.into(), detail: e.to_string() };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(unreadable)? {
        let path = entry.map_err(unreadable)?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub const FRAME_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

/// Loads a scene by fixture name or from a TOML file.
pub fn load_scene(name_or_path: &str) -> Result<SceneSpec, PipelineError> {
    if let Some(spec) = synth::fixture(name_or_path) {
        return Ok(spec);
    }
    let path = Path::new(name_or_path);
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::InputUnreadable { path: path.into(), detail: e.to_string() })?;
    SceneSpec::from_toml_str(&text).map_err(|e| PipelineError::Format { file: path.into(), offset: 0, detail: e.to_string() })
}

/// Streams consecutive flows into tumbling windows and hands each full mean to `sink`.
struct Windower<'a> {
    tau: usize,
    acc: Option<MeanFlowAccumulator<f64>>,
    flows_seen: usize,
    sink: &'a mut dyn FnMut(VectorField2<f64>, [usize; 2], &mut StageTimings) -> Result<(), PipelineError>,
}

impl Windower<'_> {
    fn push(&mut self, flow: &VectorField2<f64>, origin: &Path, timings: &mut StageTimings) -> Result<(), PipelineError> {
        let mut clock = Clock::start();
        let acc = match &mut self.acc {
            Some(a) => a,
            None => self.acc.insert(
                MeanFlowAccumulator::new(flow.shape(), self.tau).map_err(|e| PipelineError::Config(e.to_string()))?,
            ),
        };
        acc.accumulate(flow).map_err(|e| PipelineError::Format {
            file: origin.into(),
            offset: 0,
            detail: e.to_string(),
        })?;
        self.flows_seen += 1;
        let mean = if acc.is_full() {
            let m = acc.finalize_mean().expect("full window");
            acc.reset();
            Some(m)
        } else {
            None
        };
        clock.lap(&mut timings.accumulate);
        if let Some(m) = mean {
            let end = self.flows_seen;
            (self.sink)(m, [end - self.tau, end], timings)?;
        }
        Ok(())
    }

    fn pending(&self) -> usize {
        self.acc.as_ref().map_or(0, |a| a.count())
    }
}

fn check_flow(flow: &VectorField2<f64>, first: &mut Option<GridShape>, path: &Path) -> Result<(), PipelineError> {
    let s = *first.get_or_insert(flow.shape());
    if s != flow.shape() {
        return Err(PipelineError::Format {
            file: path.into(),
            offset: 4,
            detail: format!("{}x{} differs from {}x{}", flow.shape().width, flow.shape().height, s.width, s.height),
        });
    }
    Ok(())
}

fn run_frames(
    frames: &mut dyn Iterator<Item = Result<(PathBuf, Frame<f64>), PipelineError>>,
    cfg: &PipelineConfig,
    w: &mut Windower,
    timings: &mut StageTimings,
) -> Result<usize, PipelineError> {
    let mut prev: Option<Frame<f64>> = None;
    let mut shape = None;
    for item in frames {
        let mut clock = Clock::start();
        let (path, frame) = item?;
        clock.lap(&mut timings.input);
        if let Some(p) = &prev {
            if p.shape() != frame.shape() {
                return Err(PipelineError::Format {
                    file: path,
                    offset: 0,
                    detail: "frame dimensions differ from the first frame".into(),
                });
            }
            let flow = estimate_flow(p, &frame, &cfg.flow).map_err(|e| PipelineError::Numeric(e.to_string()))?;
            clock.lap(&mut timings.flow);
            check_flow(&flow, &mut shape, &path)?;
            w.push(&flow, &path, timings)?;
        }
        prev = Some(frame);
    }
    Ok(w.pending())
}

fn write_outputs(
    cfg: &PipelineConfig,
    index: usize,
    report: &WindowReport,
    outcome: &WindowOutcome,
) -> Result<(), PipelineError> {
    let Some(dir) = &cfg.output.dir else { return Ok(()) };
    let arts = &cfg.output.artifacts;
    let name = |suffix: &str| dir.join(format!("window-{index:04}{suffix}"));
    if arts.contains(&Artifact::RegionsJson) {
        let p = name(".json");
        fs::write(&p, report.to_json()).map_err(|e| PipelineError::Output { path: p, detail: e.to_string() })?;
    }
    if arts.contains(&Artifact::PhiMap) {
        io::write_pfm(outcome.phi.phi(), name("-phi.pfm")).map_err(PipelineError::from_output)?;
    }
    if arts.contains(&Artifact::PhiHatMap) {
        io::write_pfm(&outcome.detection.phi_hat, name("-phi-hat.pfm")).map_err(PipelineError::from_output)?;
    }
    if arts.contains(&Artifact::Mask) {
        io::write_mask(&outcome.detection.mask, name("-mask.pgm")).map_err(PipelineError::from_output)?;
    }
    if arts.contains(&Artifact::HeatmapImage) {
        io::write_heatmap(outcome.phi.phi(), name("-heatmap.pgm")).map_err(PipelineError::from_output)?;
    }
    Ok(())
}

/// Runs every complete window of the configured input.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let adv = cfg.advection_config()?;
    if let Some(dir) = &cfg.output.dir {
        fs::create_dir_all(dir).map_err(|e| PipelineError::Output { path: dir.clone(), detail: e.to_string() })?;
    }
    let started = Instant::now();
    let mut timings = StageTimings::default();
    let mut windows = Vec::new();
    let mut reports = Vec::new();
    let mut seeds_processed = 0usize;

    let mut sink = |mean: VectorField2<f64>, flows: [usize; 2], t: &mut StageTimings| -> Result<(), PipelineError> {
        let outcome = process_window(&mean, &adv, &cfg.saliency, t)?;
        let index = windows.len();
        let report = WindowReport {
            frame_window: flows,
            alpha_used: outcome.detection.alpha,
            regions: outcome.detection.regions.regions.clone(),
        };
        let mut clock = Clock::start();
        write_outputs(cfg, index, &report, &outcome)?;
        clock.lap(&mut t.output);
        info!("window {index} frames {:?}: {} regions", flows, report.regions.len());
        seeds_processed += outcome.phi.shape().len();
        windows.push(WindowSummary {
            index,
            frame_window: flows,
            alpha_used: report.alpha_used,
            alpha_fallback: outcome.detection.alpha_fallback,
            regions: report.regions.len(),
        });
        reports.push(report);
        Ok(())
    };
    let mut w = Windower { tau: cfg.tau, acc: None, flows_seen: 0, sink: &mut sink };

    let skipped = match &cfg.input {
        InputSource::Frames(dir) => {
            let files = list_inputs(dir, &FRAME_EXTENSIONS)?;
            let mut it = files.into_iter().map(|p| {
                let f = io::read_pnm::<f64>(&p).map_err(PipelineError::from_input)?;
                Ok((p, f))
            });
            run_frames(&mut it, cfg, &mut w, &mut timings)?
        }
        InputSource::Flows(dir) => {
            let mut shape = None;
            for p in list_inputs(dir, &["flo"])? {
                let mut clock = Clock::start();
                let flow = io::read_flo::<f64>(&p).map_err(PipelineError::from_input)?;
                clock.lap(&mut timings.input);
                check_flow(&flow, &mut shape, &p)?;
                w.push(&flow, &p, &mut timings)?;
            }
            w.pending()
        }
        InputSource::Scene(name) => {
            let mut clock = Clock::start();
            let spec = load_scene(name)?;
            if cfg.scene.via_frames {
                let origin = PathBuf::from(name);
                let frames = synth::render_frames::<f64>(&spec, cfg.tau + 1, cfg.scene.texture_seed)
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                clock.lap(&mut timings.input);
                let mut it = frames.into_iter().map(|f| Ok((origin.clone(), f)));
                run_frames(&mut it, cfg, &mut w, &mut timings)?
            } else {
                // the scene field is steady, so its window mean is the field itself
                let (field, _) = synth::render_field::<f64>(&spec).map_err(|e| PipelineError::Config(e.to_string()))?;
                clock.lap(&mut timings.input);
                (w.sink)(field, [0, cfg.tau], &mut timings)?;
                0
            }
        }
    };
    if skipped > 0 {
        warn!("skipping {skipped} trailing flow(s) that do not fill a window of {}", cfg.tau);
    }
    let total = started.elapsed();
    let summary = RunSummary {
        windows,
        skipped_trailing: skipped,
        timings,
        total_seconds: total.as_secs_f64(),
        pixels_per_second: seeds_processed as f64 / total.max(Duration::from_nanos(1)).as_secs_f64(),
        reports,
    };
    if let Some(dir) = &cfg.output.dir {
        if cfg.output.artifacts.contains(&Artifact::Timing) {
            let p = dir.join("timing.json");
            let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
            fs::write(&p, text).map_err(|e| PipelineError::Output { path: p, detail: e.to_string() })?;
        }
    }
    Ok(summary)
}

/// The exponent map of one mean field, without detection.
pub fn stability_map(mean: &VectorField2<f64>, adv: &AdvectionConfig<f64>) -> Result<ScalarField<f64>, PipelineError> {
    let map = advect_grid(mean, adv);
    let jac = jacobian_of_flow_map(&map).map_err(|e| PipelineError::Config(e.to_string()))?;
    let phi = stability_exponent(&max_eigenvalue_ctc(&jac), adv.horizon());
    Ok(phi.phi().clone())
}
