//! The `hamr` command line tool.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{HamrError, Result};
use crate::fitter::{fit, ParamState, Sample, Schedule};
use crate::io::{
    load_dataset, load_fits, load_json, load_model, parse_resolution, save_dataset, save_fits, save_json, save_model,
    write_obj, write_pgm, FitRecord,
};
use crate::losses::LossWeights;
use crate::metrics::{build_report, linspace, SampleMetrics};
use crate::model::{build_toy_model, lbs_forward, validate_model, HandModel, Mesh, ToyConfig};
use crate::pose::{project, regress_joints};
use crate::raster::{mask_from_projection, mask_iou, project_all, ImageSize, Mask};
use crate::synth::{synth_dataset, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "hamr", version, about = "Parametric hand mesh fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Model JSON; the built-in toy hand when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ModelArg {
    fn load(&self) -> Result<HandModel> {
        match &self.model {
            Some(p) => load_model(p),
            None => build_toy_model(&ToyConfig::default()),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the built-in toy hand model.
    Toy {
        #[arg(long)]
        out: PathBuf,
        /// Seed of the pose-corrective blendshapes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic annotated dataset.
    Synth {
        #[command(flatten)]
        model: ModelArg,
        /// Dataset JSON-lines output; masks are written to `masks/` beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest pose deviation per component, radians.
        #[arg(long, default_value_t = 0.4)]
        perturb: f64,
        #[arg(long, default_value = "128x128")]
        resolution: String,
        /// Generating parameters, one JSON object per line; defaults to
        /// `<out stem>.truth.jsonl` beside the dataset.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        no_mask: bool,
        #[arg(long)]
        no_joints3d: bool,
        #[arg(long)]
        no_keypoints2d: bool,
    },
    /// Fit every sample (or one) of a dataset.
    Fit {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        dataset: PathBuf,
        /// Fit only the sample with this id.
        #[arg(long)]
        sample: Option<String>,
        /// Fit records, one JSON object per line.
        #[arg(long)]
        out: PathBuf,
        /// Loss weights JSON; missing fields keep their defaults.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Schedule JSON; missing fields keep their defaults.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Directory for the fitted meshes (`<id>.obj`); defaults to `meshes/`
        /// beside the output.
        #[arg(long)]
        meshes: Option<PathBuf>,
        /// Keep the per-step loss trace in the records.
        #[arg(long)]
        trace: bool,
    },
    /// Score fits against dataset annotations.
    Eval {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        /// JSON report; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sample CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Largest 3D PCK threshold, model units.
        #[arg(long, default_value_t = 0.2)]
        pck_max_3d: f64,
        /// Largest 2D PCK threshold, pixels.
        #[arg(long, default_value_t = 10.0)]
        pck_max_2d: f64,
        #[arg(long, default_value_t = 21)]
        pck_steps: usize,
    },
    /// Pose the model and export the mesh (and optionally its silhouette).
    Render {
        #[command(flatten)]
        model: ModelArg,
        /// Parameter JSON (`beta`, `theta`, `cam`) or a fit record.
        #[arg(long)]
        params: PathBuf,
        /// OBJ output.
        #[arg(long)]
        out: PathBuf,
        /// Binary silhouette PGM output.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "128x128")]
        resolution: String,
    },
    /// Check a model file's invariants.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
}

/// Runs the tool; returns the process exit code (2 for usage errors).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, HamrError::InvalidArgument(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HAMR_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| HamrError::invalid(format!("HAMR_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(HamrError::invalid("HAMR_THREADS must be positive"));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| HamrError::invalid(format!("thread pool: {e}")))
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Toy { out, seed } => {
            let model = build_toy_model(&ToyConfig { seed, ..ToyConfig::default() })?;
            save_model(&out, &model)?;
            println!("wrote {} ({} vertices, {} faces)", out.display(), model.num_vertices(), model.faces.len());
        }
        Command::Synth { model, out, count, seed, perturb, resolution, truth, no_mask, no_joints3d, no_keypoints2d } => {
            let model = model.load()?;
            let cfg = SynthConfig {
                image_size: parse_resolution(&resolution)?,
                perturb,
                with_keypoints2d: !no_keypoints2d,
                with_joints3d: !no_joints3d,
                with_mask: !no_mask,
                ..SynthConfig::default()
            };
            if no_mask && no_joints3d && no_keypoints2d {
                return Err(HamrError::invalid("at least one annotation type is required"));
            }
            let data = synth_dataset(&model, count, seed, &cfg)?;
            let samples: Vec<Sample> = data.iter().map(|d| d.sample.clone()).collect();
            save_dataset(&out, &samples)?;
            let truth = truth.unwrap_or_else(|| {
                let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
                out.with_file_name(format!("{stem}.truth.jsonl"))
            });
            let mut text = String::new();
            for d in &data {
                let line = serde_json::json!({ "id": d.sample.id, "state": d.truth });
                text.push_str(&line.to_string());
                text.push('\n');
            }
            std::fs::write(&truth, text).map_err(|e| HamrError::io(&truth, e))?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Fit { model, dataset, sample, out, weights, schedule, meshes, trace } => {
            let model = model.load()?;
            let weights: LossWeights = match weights {
                Some(p) => load_json(&p)?,
                None => LossWeights::default(),
            };
            let schedule: Schedule = match schedule {
                Some(p) => load_json(&p)?,
                None => Schedule::default(),
            };
            weights.check()?;
            schedule.check()?;
            let mut samples = load_dataset(&dataset)?;
            if let Some(id) = &sample {
                samples.retain(|s| &s.id == id);
                if samples.is_empty() {
                    return Err(HamrError::invalid(format!("no sample with id `{id}` in {}", dataset.display())));
                }
            }
            let pool = thread_pool()?;
            let results: Vec<Result<(FitRecord, Mesh)>> = pool.install(|| {
                samples
                    .par_iter()
                    .map(|s| {
                        let r = fit(&model, s, &weights, &schedule)?;
                        Ok((FitRecord::new(&s.id, &r, trace), r.mesh))
                    })
                    .collect()
            });
            let meshes = meshes.unwrap_or_else(|| out.with_file_name("meshes"));
            let mut records = Vec::with_capacity(results.len());
            for (s, r) in samples.iter().zip(results) {
                let (rec, mesh) = r?;
                write_obj(&meshes.join(format!("{}.obj", s.id)), &mesh)?;
                println!("{}: objective {:.3e} after {} steps", rec.id, rec.objective, rec.iterations);
                records.push(rec);
            }
            save_fits(&out, &records)?;
        }
        Command::Eval { model, dataset, fits, out, csv, pck_max_3d, pck_max_2d, pck_steps } => {
            let model = model.load()?;
            let samples = load_dataset(&dataset)?;
            let fits = load_fits(&fits)?;
            let report = evaluate(&model, &samples, &fits, pck_max_3d, pck_max_2d, pck_steps)?;
            if let Some(p) = &csv {
                std::fs::write(p, report.to_csv()).map_err(|e| HamrError::io(p, e))?;
            }
            match out {
                Some(p) => save_json(&p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
        }
        Command::Render { model, params, out, mask, resolution } => {
            let model = model.load()?;
            let state = load_state(&params)?;
            let mesh = lbs_forward(&model, &state.beta, &state.theta)?;
            write_obj(&out, &mesh)?;
            if let Some(p) = mask {
                let size = parse_resolution(&resolution)?;
                write_pgm(&p, &silhouette(&mesh, &state, size, size)?)?;
            }
        }
        Command::Validate { model } => {
            let text = std::fs::read_to_string(&model).map_err(|e| HamrError::io(&model, e))?;
            let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| HamrError::Parse { what: model.display().to_string(), msg: e.to_string() })?;
            let version = raw.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
            if version != crate::io::MODEL_VERSION {
                return Err(HamrError::Version { found: version.to_string(), expected: crate::io::MODEL_VERSION });
            }
            let parsed: HandModel = serde_json::from_value(raw).map_err(|e| HamrError::Parse { what: model.display().to_string(), msg: e.to_string() })?;
            let report = validate_model(&parsed);
            if report.is_ok() {
                println!("ok: {} vertices, {} joints", parsed.num_vertices(), parsed.num_joints());
                return Ok(0);
            }
            for f in &report.failures {
                println!("{}: {}", f.invariant, f.location);
            }
            return Ok(1);
        }
    }
    Ok(0)
}

fn load_state(path: &Path) -> Result<ParamState> {
    let value: serde_json::Value = load_json(path)?;
    let inner = value.get("state").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| HamrError::Parse { what: path.display().to_string(), msg: e.to_string() })
}

/// Binary silhouette at `size`, for a camera defined on an `image`-sized frame.
fn silhouette(mesh: &Mesh, state: &ParamState, image: ImageSize, size: ImageSize) -> Result<Mask> {
    state.cam.check()?;
    let (fx, fy) = (size.width as f64 / image.width as f64, size.height as f64 / image.height as f64);
    let proj: Vec<[f64; 2]> = project_all(&mesh.vertices, &state.cam).into_iter().map(|p| [p[0] * fx, p[1] * fy]).collect();
    Ok(mask_from_projection(&proj, &mesh.faces, size))
}

fn evaluate(
    model: &HandModel,
    samples: &[Sample],
    fits: &[FitRecord],
    max_3d: f64,
    max_2d: f64,
    steps: usize,
) -> Result<crate::metrics::EvalReport> {
    let mut rows = Vec::new();
    let (mut e3, mut e2) = (Vec::new(), Vec::new());
    for rec in fits {
        let s = samples
            .iter()
            .find(|s| s.id == rec.id)
            .ok_or_else(|| HamrError::invalid(format!("fit `{}` has no matching sample", rec.id)))?;
        let mesh = lbs_forward(model, &rec.state.beta, &rec.state.theta)?;
        let joints = regress_joints(model, &mesh)?;
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let mpjpe_3d = s.joints3d.as_ref().map(|gt| {
            let d: Vec<f64> = (0..gt.len()).filter(|&i| gt.visible[i]).map(|i| dist(&joints.points[i], &gt.points[i])).collect();
            e3.extend(&d);
            d.iter().sum::<f64>() / d.len().max(1) as f64
        });
        let mpjpe_2d = match &s.keypoints2d {
            Some(gt) => {
                let proj = project(&joints, &rec.state.cam)?;
                let d: Vec<f64> = (0..gt.len()).filter(|&i| gt.visible[i]).map(|i| dist(&proj.points[i], &gt.points[i])).collect();
                e2.extend(&d);
                Some(d.iter().sum::<f64>() / d.len().max(1) as f64)
            }
            None => None,
        };
        let iou = match &s.mask {
            Some(gt) => Some(mask_iou(&silhouette(&mesh, &rec.state, s.image_size, gt.size())?, gt)?),
            None => None,
        };
        rows.push(SampleMetrics { id: rec.id.clone(), mpjpe_3d, mpjpe_2d, iou });
    }
    build_report(rows, &e3, &e2, &linspace(0.0, max_3d, steps), &linspace(0.0, max_2d, steps))
}
