use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::json;

use itse::check::{self, CheckOptions};
use itse::checkpoint;
use itse::image;
use itse::language::Vocab;
use itse::metrics::{self, MetricReport, SampleEval};
use itse::model::{Model, ModelConfig};
use itse::synth::{self, SceneSpec};
use itse::tensor::{DType, Scalar};
use itse::train::{self, SgdConfig, TrainOptions};

use crate::config::RunConfig;
use crate::CliError;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(itse::error::Error::from)?;
    fs::write(path, text + "\n").map_err(itse::error::Error::from)?;
    Ok(())
}

fn io(e: std::io::Error) -> CliError {
    CliError::Run(e.into())
}

pub fn check(cfg: &RunConfig) -> Result<(), CliError> {
    let report = check::run(&CheckOptions {
        seed: cfg.seed,
        dtype: cfg.dtype.unwrap_or(DType::F64),
        fault: cfg.inject_fault,
    })?;
    for s in &report.suites {
        info!(
            "{} {:<28} max error {:.2e} (tol {:e}) {}",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.max_error,
            s.tolerance,
            s.detail
        );
    }
    match &cfg.out {
        Some(_) => write_json(&cfg.out_dir()?.join("check_report.json"), &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(itse::error::Error::from)?),
    }
    if report.passed {
        info!("all {} suites passed", report.suites.len());
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "check failed: {}; suspect ops: {}",
            report.failures.join(", "),
            if report.suspect_ops.is_empty() { "none".into() } else { report.suspect_ops.join(", ") }
        )))
    }
}

fn scene(name: Option<&str>) -> Result<SceneSpec, CliError> {
    Ok(match name {
        None | Some("single-shape") => synth::single_shape_scene(),
        Some("two-square") => synth::two_square_scene(),
        Some(path) => SceneSpec::load(Path::new(path))?,
    })
}

fn vocab(cfg: &RunConfig) -> Result<Vocab, CliError> {
    Ok(match &cfg.vocab {
        Some(path) => Vocab::load(path)?,
        None => Vocab::default_scene(),
    })
}

pub fn overfit(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = scene(cfg.scene.as_deref())?;
    let config = cfg.model_config(ModelConfig {
        seed: cfg.seed,
        ..ModelConfig::default()
    });
    let out = cfg.out_dir()?;
    match config.dtype {
        DType::F32 => overfit_as::<f32>(cfg, config, &spec, out),
        DType::F64 => overfit_as::<f64>(cfg, config, &spec, out),
    }
}

fn overfit_as<T: Scalar>(cfg: &RunConfig, config: ModelConfig, spec: &SceneSpec, out: &Path) -> Result<(), CliError> {
    let model = Model::<T>::new(config, vocab(cfg)?)?;
    let opts = TrainOptions {
        steps: cfg.steps.unwrap_or(300),
        sgd: SgdConfig {
            lr: cfg.lr.unwrap_or(SgdConfig::default().lr),
            ..SgdConfig::default()
        },
        eval_every: 10,
        seed: cfg.seed,
        ..TrainOptions::default()
    };
    info!("training {} parameters for {} steps", model.param_count(), opts.steps);
    let run = train::overfit(model, spec, &opts, |e| {
        if let Some(iou) = e.mean_iou {
            info!("step {:>5}  loss {:.5}  mean IoU {:.4}", e.step, e.loss, iou);
        }
    })?;
    checkpoint::save(&out.join("checkpoint.itse"), &run.model)?;
    write_json(&out.join("trace.json"), &run.trace)?;
    let (report, _) = train::evaluate(&run.model, &run.samples)?;
    write_json(
        &out.join("report.json"),
        &json!({ "final_mean_iou": run.final_mean_iou(), "steps": opts.steps, "report": report }),
    )?;
    println!("{}", report.table());
    info!("final mean IoU {:.4}; wrote {}", run.final_mean_iou(), out.display());
    Ok(())
}

/// Files with extension `ext` in `dir`, sorted by name.
fn listing(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn frame_paths(given: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let frames = match given {
        [dir] if dir.is_dir() => listing(dir, "ppm")?,
        _ => given.to_vec(),
    };
    if frames.is_empty() {
        return Err(CliError::Usage("no frames given".into()));
    }
    Ok(frames)
}

pub fn infer(cfg: &RunConfig) -> Result<(), CliError> {
    let query = cfg.need(&cfg.query, "query")?;
    if query.trim().is_empty() {
        return Err(CliError::Usage("--query must not be empty".into()));
    }
    let ckpt = cfg.need(&cfg.ckpt, "ckpt")?;
    let frames = frame_paths(cfg.need(&cfg.frames, "frames")?)?;
    let bytes = fs::read(ckpt).map_err(io)?;
    let (stored, _) = checkpoint::read_header(&bytes)?;
    let expected = cfg.model_config(stored);
    let out = cfg.out_dir()?;
    match expected.dtype {
        DType::F32 => infer_as::<f32>(&bytes, &expected, &frames, query, out),
        DType::F64 => infer_as::<f64>(&bytes, &expected, &frames, query, out),
    }
}

fn infer_as<T: Scalar>(bytes: &[u8], expected: &ModelConfig, frames: &[PathBuf], query: &str, out: &Path) -> Result<(), CliError> {
    let model = checkpoint::from_bytes::<T>(bytes, Some(expected))?;
    let clip = frames.iter().map(|p| image::read_ppm::<T>(p)).collect::<Result<Vec<_>, _>>()?;
    let masks = train::clip_masks(&model, &clip, query)?;
    let mut names = Vec::with_capacity(masks.len());
    for (t, m) in masks.iter().enumerate() {
        let name = format!("mask_{t:03}.pgm");
        image::write_pgm(&out.join(&name), m)?;
        names.push(name);
    }
    write_json(
        &out.join("index.json"),
        &json!({
            "query": query,
            "frames": frames,
            "masks": names,
            "foreground_pixels": masks.iter().map(|m| m.count()).collect::<Vec<_>>(),
        }),
    )?;
    info!("wrote {} masks to {}", masks.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct NamedEval {
    file: String,
    #[serde(flatten)]
    eval: SampleEval,
}

#[derive(Serialize)]
struct EvalOutput {
    samples: Vec<NamedEval>,
    report: MetricReport,
}

fn names(files: &[PathBuf]) -> Vec<String> {
    files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let pred_dir = cfg.need(&cfg.pred, "pred")?;
    let gt_dir = cfg.need(&cfg.gt, "gt")?;
    let (pred, gt) = (names(&listing(pred_dir, "pgm")?), names(&listing(gt_dir, "pgm")?));
    if pred.is_empty() && gt.is_empty() {
        return Err(CliError::Usage(format!(
            "no PGM masks in {} or {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let mut missing: Vec<String> = gt
        .iter()
        .filter(|n| !pred.contains(n))
        .map(|n| format!("{} has no prediction", n))
        .collect();
    missing.extend(pred.iter().filter(|n| !gt.contains(n)).map(|n| format!("{n} has no ground truth")));
    if !missing.is_empty() {
        return Err(CliError::Failed(format!("unaligned mask directories: {}", missing.join("; "))));
    }
    let mut samples = Vec::with_capacity(gt.len());
    for name in &gt {
        let p = image::read_pgm(&pred_dir.join(name))?;
        let g = image::read_pgm(&gt_dir.join(name))?;
        samples.push(NamedEval {
            file: name.clone(),
            eval: SampleEval::new(&p, &g, None)?,
        });
    }
    let report = metrics::aggregate(&samples.iter().map(|s| s.eval).collect::<Vec<_>>())?;
    println!("{}", report.table());
    let output = EvalOutput { samples, report };
    match &cfg.out {
        Some(_) => write_json(&cfg.out_dir()?.join("eval_report.json"), &output)?,
        None => println!("{}", serde_json::to_string_pretty(&output).map_err(itse::error::Error::from)?),
    }
    Ok(())
}

pub fn dump_fixtures(cfg: &RunConfig) -> Result<(), CliError> {
    let scenes = match cfg.scene.as_deref() {
        Some(name) => {
            let label = Path::new(name).file_stem().map_or(name.into(), |s| s.to_string_lossy().into_owned());
            vec![(label, scene(Some(name))?)]
        }
        None => vec![
            ("single-shape".to_string(), synth::single_shape_scene()),
            ("two-square".to_string(), synth::two_square_scene()),
        ],
    };
    let out = cfg.out_dir()?;
    for (label, spec) in scenes {
        let dir = out.join(&label);
        fs::create_dir_all(&dir).map_err(io)?;
        write_json(&dir.join("scene.json"), &spec)?;
        let samples = synth::generate::<f32>(&spec)?;
        let mut frames = Vec::new();
        for (t, f) in spec.render_clip::<f32>().iter().enumerate() {
            let name = format!("frame_{t:03}.ppm");
            image::write_ppm(&dir.join(&name), f)?;
            frames.push(name);
        }
        let mut entries = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let sub = format!("sample_{i}");
            fs::create_dir_all(dir.join(&sub)).map_err(io)?;
            for (t, m) in s.masks.iter().enumerate() {
                image::write_pgm(&dir.join(&sub).join(format!("mask_{t:03}.pgm")), m)?;
            }
            entries.push(json!({ "query": s.query, "masks": sub }));
        }
        write_json(&dir.join("index.json"), &json!({ "frames": frames, "samples": entries }))?;
        info!("wrote {} ({} frames, {} samples)", dir.display(), frames.len(), samples.len());
    }
    Ok(())
}
