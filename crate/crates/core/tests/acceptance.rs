//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use flowsal_core::io::{decode_flo, read_flo, write_flo, IoError, FLO_MAGIC};
use flowsal_core::stability::max_eigenvalue_2x2;
use flowsal_core::synth::{fixture, render_field, render_frames, Element, SceneSpec};
use flowsal_core::{
    advect_point, compute_stability, detect, estimate_flow, magnify, run_pipeline, AdvectionConfig, BoundaryPolicy,
    FlowParams, GridShape, InputSource, PipelineConfig, SaliencyConfig, ScalarField, StabilityField, VectorField2,
};
use nalgebra::{Matrix2, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn within(limit: Duration, t: Instant) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e < limit, format!("took {:.2}s, limit {:.0}s", e.as_secs_f64(), limit.as_secs_f64()))
}

fn shape(w: usize, h: usize) -> GridShape {
    GridShape::new(w, h).unwrap()
}

fn saddle(s: GridShape, cx: f64, cy: f64) -> VectorField2<f64> {
    VectorField2::from_fn(s, move |x: f64, y: f64| (x - cx, -(y - cy)))
}

fn saddle_exponent() -> Outcome {
    let t = Instant::now();
    let field = saddle(shape(64, 64), 31.5, 31.5);
    let cfg = AdvectionConfig::new(1.0, 0.01, 1, BoundaryPolicy::Clamp).unwrap();
    let phi = compute_stability(&field, &cfg).unwrap();
    // seeds whose trajectories stay inside the frame over the horizon
    let mut worst: f64 = 0.0;
    for y in 22..42 {
        for x in 22..42 {
            worst = worst.max((phi.phi().get(x, y) - 1.0).abs());
        }
    }
    ensure(worst <= 1e-3, format!("max |phi - 1| = {worst:.3e}"))?;
    within(Duration::from_secs(5), t)?;
    Ok(format!("max |phi - 1| = {worst:.2e} over 20x20 interior"))
}

fn rk4_order() -> Outcome {
    let t = Instant::now();
    let field = saddle(shape(40, 40), 16.0, 16.0);
    let err = |h: f64| {
        let cfg = AdvectionConfig::new(1.0, h, 1, BoundaryPolicy::Clamp).unwrap();
        let (x, y) = advect_point(&field, 17.0, 17.0, &cfg);
        let e = std::f64::consts::E;
        ((x - 16.0) - e).hypot((y - 16.0) - 1.0 / e)
    };
    let ratio = err(0.2) / err(0.1);
    ensure((12.0..=20.0).contains(&ratio), format!("error ratio {ratio:.3}"))?;
    within(Duration::from_secs(1), t)?;
    Ok(format!("error ratio {ratio:.3}"))
}

fn neutral_stability() -> Outcome {
    let t = Instant::now();
    let field = VectorField2::<f64>::uniform(shape(64, 64), 1.0, 0.0);
    let phi = compute_stability(&field, &AdvectionConfig::with_horizon(10.0).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for y in 5..59 {
        for x in 5..59 {
            worst = worst.max(phi.phi().get(x, y).abs());
        }
    }
    let det = detect(&phi, &SaliencyConfig::default()).unwrap();
    ensure(worst <= 1e-6, format!("max |phi| = {worst:.3e}"))?;
    ensure(det.regions.is_empty(), format!("{} regions", det.regions.len()))?;
    within(Duration::from_secs(1), t)?;
    Ok(format!("max |phi| = {worst:.1e}, no regions"))
}

fn shear_closed_form() -> Outcome {
    const MISQUOTED: f64 = 0.2406;
    let field = VectorField2::from_fn(shape(64, 64), |_x: f64, y: f64| (0.5 * y, 0.0));
    let phi = compute_stability(&field, &AdvectionConfig::with_horizon(1.0).unwrap()).unwrap();
    let got = phi.phi().get(30, 30);
    // numeric eigensolve of the Cauchy-Green tensor of J = [[1, 0.5], [0, 1]]
    let j = Matrix2::new(1.0, 0.5, 0.0, 1.0);
    let lambda: f64 = SymmetricEigen::new(j.transpose() * j).eigenvalues.max();
    let oracle = 0.5 * lambda.ln();
    ensure((got - oracle).abs() <= 1e-3, format!("phi {got:.6} vs oracle {oracle:.6}"))?;
    Ok(format!(
        "phi {got:.6}, eigensolve oracle {oracle:.6}; 0.2406 (half log of the golden ratio) is off by {:.4}",
        oracle - MISQUOTED
    ))
}

fn magnify_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = shape(1000, 10);
    let (mut total, mut upper, mut lower, mut boundary) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..100 {
        let alpha: f64 = rng.gen_range(-1.0..2.0);
        let beta: f64 = if rng.gen_bool(0.1) { 1.0 } else { rng.gen_range(0.5000001..1.0) };
        let vals: Vec<f64> = (0..s.len())
            .map(|_| if rng.gen_bool(0.05) { alpha } else { rng.gen_range(-1.0..2.0) })
            .collect();
        let phi = StabilityField::new(ScalarField::new(s, vals.clone()).unwrap(), 1.0);
        let cfg = SaliencyConfig { beta, ..SaliencyConfig::default() };
        let out = magnify(&phi, &cfg, alpha);
        for (&p, &m) in vals.iter().zip(out.values()) {
            let expect = if p >= alpha { beta * p } else { (1.0 - beta) * p };
            if m.to_bits() != expect.to_bits() {
                return Err(format!("phi {p}, alpha {alpha}, beta {beta}: got {m}, want {expect}"));
            }
            total += 1;
            if p == alpha {
                boundary += 1;
            } else if p > alpha {
                upper += 1;
            } else {
                lower += 1;
            }
        }
    }
    ensure(boundary > 0 && upper > 0 && lower > 0, "a branch was not exercised".into())?;
    Ok(format!("{total} triples bit-exact ({upper} upper, {lower} lower, {boundary} on the boundary)"))
}

fn eigen_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let m: [[f64; 2]; 2] = [
            [rng.gen_range(-1.0..1.0) * scale, rng.gen_range(-1.0..1.0) * scale],
            [rng.gen_range(-1.0..1.0) * scale, rng.gen_range(-1.0..1.0) * scale],
        ];
        let j = Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
        let oracle = SymmetricEigen::new(j.transpose() * j).eigenvalues.max();
        let got = max_eigenvalue_2x2(m);
        worst = worst.max((got - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));
    }
    ensure(worst <= 1e-10, format!("max relative error {worst:.3e}"))?;
    Ok(format!("1e5 Jacobians, max relative error {worst:.2e}"))
}

fn fixture_detection(name: &str, top_only: bool) -> Outcome {
    let t = Instant::now();
    let summary = run_pipeline(&PipelineConfig::new(InputSource::Scene(name.into()))).map_err(|e| e.to_string())?;
    let (_, gt) = render_field::<f64>(&fixture(name).unwrap()).unwrap();
    let regions = &summary.reports[0].regions;
    ensure(!regions.is_empty(), "no regions detected".into())?;
    let considered = if top_only { &regions[..1] } else { &regions[..] };
    let best = considered
        .iter()
        .flat_map(|r| gt.salient_boxes.iter().map(move |b| b.iou(&r.bbox)))
        .fold(0.0, f64::max);
    ensure(best >= 0.5, format!("best IoU {best:.3}"))?;
    within(Duration::from_secs(10), t)?;
    Ok(format!("{} region(s), IoU {best:.3}", regions.len()))
}

fn mean_epe(f: &VectorField2<f64>, truth: (f64, f64)) -> f64 {
    let s = f.shape();
    let m = 8;
    let mut sum = 0.0;
    for y in m..s.height - m {
        for x in m..s.width - m {
            let (u, v) = f.at(x, y);
            sum += (u - truth.0).hypot(v - truth.1);
        }
    }
    sum / ((s.width - 2 * m) * (s.height - 2 * m)) as f64
}

fn flow_accuracy() -> Outcome {
    let t = Instant::now();
    let s = shape(128, 128);
    let pair = |m: f64, d: [f64; 2]| {
        let spec = SceneSpec::new(s, vec![Element::UniformLane { magnitude: m, direction: d, bbox: None }]);
        render_frames::<f64>(&spec, 2, 11).unwrap()
    };
    let one = pair(1.0, [1.0, 0.0]);
    let e1 = mean_epe(&estimate_flow(&one[0], &one[1], &FlowParams::default()).unwrap(), (1.0, 0.0));
    let two = pair(2.0, [0.0, 1.0]);
    let p2 = FlowParams { pyramid_levels: 2, ..FlowParams::default() };
    let e2 = mean_epe(&estimate_flow(&two[0], &two[1], &p2).unwrap(), (0.0, 2.0));
    ensure(e1 <= 0.25, format!("1 px EPE {e1:.4}"))?;
    ensure(e2 <= 0.35, format!("2 px EPE {e2:.4}"))?;
    within(Duration::from_secs(10), t)?;
    Ok(format!("EPE {e1:.4} px (1 px shift), {e2:.4} px (2 px shift, 2 levels)"))
}

fn determinism() -> Outcome {
    let run = |cfg: &PipelineConfig, threads: usize| -> Result<Vec<u8>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = cfg.clone();
        cfg.output.dir = Some(dir.path().into());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        pool.install(|| run_pipeline(&cfg)).map_err(|e| e.to_string())?;
        fs::read(dir.path().join("window-0000.json")).map_err(|e| e.to_string())
    };
    let mut checked = 0;
    for name in ["bottleneck-64", "counterflow-64", "noise-injection-64"] {
        for via_frames in [false, true] {
            let mut cfg = PipelineConfig::new(InputSource::Scene(name.into()));
            cfg.scene.via_frames = via_frames;
            let a = run(&cfg, 1)?;
            ensure(a == run(&cfg, 1)?, format!("{name}: two runs differ"))?;
            ensure(a == run(&cfg, 4)?, format!("{name}: 1 vs 4 workers differ"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} configurations identical across runs and 1/4 workers"))
}

fn flo_format() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = shape(3, 2);
    let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let field = VectorField2::new(s, u.clone(), v.clone()).unwrap();
    let p = dir.path().join("f.flo");
    write_flo(&field, &p).map_err(|e| e.to_string())?;
    let back = read_flo::<f64>(&p).map_err(|e| e.to_string())?;
    for i in 0..6 {
        ensure(back.u()[i] == u[i] as f32 as f64, format!("u[{i}] not f32-exact"))?;
        ensure(back.v()[i] == v[i] as f32 as f64, format!("v[{i}] not f32-exact"))?;
        ensure((back.u()[i] - u[i]).abs() <= u[i].abs() * f32::EPSILON as f64, format!("u[{i}] drift"))?;
    }
    let mut zero_magic = 0.0f32.to_le_bytes().to_vec();
    zero_magic.extend_from_slice(&[3, 0, 0, 0, 2, 0, 0, 0]);
    let bad = decode_flo::<f64>(&zero_magic, dir.path());
    ensure(matches!(bad, Err(IoError::BadMagic { .. })), format!("magic 0.0 gave {bad:?}"))?;
    let mut short = FLO_MAGIC.to_le_bytes().to_vec();
    short.extend_from_slice(&100i32.to_le_bytes());
    short.extend_from_slice(&100i32.to_le_bytes());
    short.extend(std::iter::repeat(0u8).take(50 * 8));
    let trunc = decode_flo::<f64>(&short, dir.path());
    ensure(matches!(trunc, Err(IoError::TruncatedFile { .. })), format!("short payload gave {trunc:?}"))?;
    Ok("3x2 round-trip f32-exact; BadMagic and TruncatedFile raised".into())
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 saddle exponent", Box::new(saddle_exponent)),
        ("2 RK4 order", Box::new(rk4_order)),
        ("3 neutral stability", Box::new(neutral_stability)),
        ("4 shear closed form", Box::new(shear_closed_form)),
        ("5 magnification exactness", Box::new(magnify_exact)),
        ("6 eigenvalue oracle", Box::new(eigen_oracle)),
        ("7 noise-injection detection", Box::new(|| fixture_detection("noise-injection-64", true))),
        ("8 bottleneck detection", Box::new(|| fixture_detection("bottleneck-64", false))),
        ("9 optical-flow accuracy", Box::new(flow_accuracy)),
        ("10 determinism", Box::new(determinism)),
        ("11 flo format", Box::new(flo_format)),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in &criteria {
        let outcome = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
