use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use image::{GrayImage, ImageBuffer, Luma};
use rsag::checkpoint::{self, Checkpoint};
use rsag::config::{Command, ConfigFile, RunConfig};
use rsag::dataio::{load_dataset, training_stream};
use rsag::dcn::decompose as run_decompose;
use rsag::evalkit::{error_heatmap, evaluate};
use rsag::graph::Graph;
use rsag::model::{predict, predict_tiled, Rsag, Trainer};
use rsag::numerics::{bicubic_resize, Direction, Grid2D, Units};
use rsag::{ParamStore, Tensor};
use serde_json::json;

use crate::inputs::{self, Input};

pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
const QUANT_LEVELS: f64 = 65535.0;

/// Resolve the run configuration, layering a checkpoint's architecture
/// under the user's settings when one is referenced.
pub fn resolve(run: &RunConfig, env_root: Option<&str>) -> Result<ConfigFile> {
    let first = run.resolve(env_root)?;
    match (&first.checkpoint, run.command) {
        (Some(path), cmd) if cmd != Command::Train => {
            let ck = checkpoint::load(path)?;
            Ok(run.resolve_layered(ConfigFile::architecture_of(&ck.config), env_root)?)
        }
        _ => Ok(first),
    }
}

fn load_model(cfg: &ConfigFile) -> Result<(Rsag, ParamStore<f32>, Option<Checkpoint>)> {
    let (model, mut params) = Rsag::new::<f32>(cfg.model())?;
    let ck = match &cfg.checkpoint {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            ck.restore_into(&mut params)
                .with_context(|| format!("checkpoint {} does not fit the configured model", path.display()))?;
            Some(ck)
        }
        None => None,
    };
    Ok((model, params, ck))
}

pub fn train(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let samples = load_dataset(&cfg.dataset_spec(cfg.train_split))?;
    let mut cfg = cfg.clone();
    if cfg.dataset_range.is_none() {
        let r = samples[0].dataset_range;
        if samples.iter().any(|s| s.dataset_range != r) {
            bail!("training samples mix normalization ranges; set dataset_range explicitly");
        }
        cfg.dataset_range = Some(r);
        cfg.write_echo(out)?;
    }
    let mut stream = training_stream(&samples, cfg.stream())?;
    let mut trainer = Trainer::<f32>::new(cfg.model())?;
    log::info!(
        "{} samples, {} patches, {} parameters",
        samples.len(),
        stream.patch_count(),
        trainer.params.scalar_count()
    );

    let mut log = BufWriter::new(File::create(out.join(TRAIN_LOG))?);
    let losses: Vec<String> = (0..=cfg.recursion_steps).map(|k| format!("loss_{k}")).collect();
    writeln!(log, "step,loss_total,{},learning_rate,wall_time_s", losses.join(","))?;
    let start = Instant::now();
    let echo = cfg.to_json();
    for step in 1..=cfg.steps {
        let batch = stream.next_batch()?;
        let rate = trainer.optimizer.current_rate();
        let report = trainer.step(&batch)?;
        let per: Vec<String> = report.per_step.iter().map(|l| format!("{l:.8e}")).collect();
        writeln!(
            log,
            "{step},{:.8e},{},{rate:.6e},{:.3}",
            report.total,
            per.join(","),
            start.elapsed().as_secs_f64()
        )?;
        log.flush()?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps) {
            eprintln!("step {step}/{}: loss {:.6}", cfg.steps, report.total);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            checkpoint::save(&out.join(format!("checkpoint_{step:07}.ckpt")), &echo, step as u64, &trainer.params)?;
        }
    }
    checkpoint::save(&out.join(MODEL_FILE), &echo, cfg.steps as u64, &trainer.params)?;
    Ok(())
}

fn trained_range(ck: &Option<Checkpoint>) -> Option<f64> {
    ck.as_ref()
        .and_then(|c| c.config.get("dataset_range"))
        .and_then(|v| v.as_f64())
}

pub fn eval(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let (model, params, ck) = load_model(cfg)?;
    let samples = load_dataset(&cfg.dataset_spec(cfg.eval_split))?;
    let (report, evals) = evaluate(&model, &params, &samples, cfg.dataset, &cfg.eval_options(trained_range(&ck)))?;
    report.write_csv(&out.join(METRICS_FILE))?;
    if cfg.error_maps {
        let dir = out.join("error_maps");
        fs::create_dir_all(&dir)?;
        for e in &evals {
            let max_error = 0.1 * e.ground_truth.dataset_range;
            let img = error_heatmap(&e.prediction, &e.ground_truth.depth, &e.ground_truth.mask, max_error)?;
            img.save(dir.join(format!("{}.png", e.metrics.name)))?;
        }
    }
    let m = &report.mean;
    eprintln!("{} samples: mean MAD {:.4}, mean RMSE {:.4}", report.rows.len(), m.mad, m.rmse);
    Ok(())
}

fn units_label(u: Units) -> &'static str {
    match u {
        Units::Normalized => "normalized",
        Units::DisparityLevels => "disparity_levels",
        Units::Meters => "meters",
        Units::Relative => "relative",
    }
}

/// Write `value = offset + scale · pixel` as a 16-bit PNG plus JSON sidecar.
fn write_affine(path: &Path, grid: &Grid2D, offset: f64, scale: f64, units: &str) -> Result<()> {
    let (h, w) = grid.dims();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (grid.get(y as usize, x as usize) - offset) / scale;
        Luma([v.round().clamp(0.0, QUANT_LEVELS) as u16])
    });
    buf.save(path).with_context(|| format!("cannot write {}", path.display()))?;
    let sidecar = json!({ "offset": offset, "scale": scale, "units": units, "height": h, "width": w });
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

fn predict_input(cfg: &ConfigFile, model: &Rsag, params: &ParamStore<f32>, input: &Input) -> Result<Grid2D> {
    Ok(if cfg.tile > 0 {
        predict_tiled(model, params, &input.d_lr, &input.image, cfg.tile, cfg.tile_margin)?
    } else {
        predict(model, params, &input.d_lr, &input.image)?
    })
}

pub fn infer(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let (model, params, _) = load_model(cfg)?;
    let dir = out.join("predictions");
    fs::create_dir_all(&dir)?;
    for input in inputs::collect(cfg, &model.config)? {
        let pred = predict_input(cfg, &model, &params, &input)?;
        let path = dir.join(format!("{}.png", input.name));
        write_affine(&path, &pred, 0.0, input.dataset_range / QUANT_LEVELS, units_label(input.units))?;
    }
    Ok(())
}

pub fn decompose(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let (model, params, _) = load_model(cfg)?;
    for input in inputs::collect(cfg, &model.config)? {
        let dir = out.join("decompose").join(&input.name);
        fs::create_dir_all(&dir)?;
        let d_bic = bicubic_resize(&input.d_lr, model.config.scale, Direction::Up)?.clamp_normalized();
        let pair = run_decompose(&d_bic, &model.dcn, &params)?;
        let unit = 1.0 / QUANT_LEVELS;
        write_affine(&dir.join("bic.png"), &d_bic, 0.0, unit, "normalized")?;
        write_affine(&dir.join("hf.png"), &pair.hf, 0.0, unit, "normalized")?;
        // lf = bic − hf lies in (−1, 1)
        write_affine(&dir.join("lf.png"), &pair.lf, -1.0, 2.0 * unit, "normalized")?;
        for (i, h) in pair.intermediates.iter().enumerate() {
            write_affine(&dir.join(format!("h{}.png", i + 1)), h, 0.0, unit, "normalized")?;
        }
    }
    Ok(())
}

/// Channel-averaged magnitude, stretched to 8 bits.
fn feature_map(t: &Tensor<f32>) -> GrayImage {
    let [_, c, h, w] = t.shape();
    let mut m = vec![0f32; h * w];
    for ch in 0..c {
        for (a, v) in m.iter_mut().zip(t.plane(0, ch)) {
            *a += v.abs() / c as f32;
        }
    }
    let (lo, hi) = m.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([((m[y as usize * w + x as usize] - lo) / span * 255.0).round() as u8])
    })
}

pub fn viz(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let (model, params, _) = load_model(cfg)?;
    let gammas: Vec<f32> = model
        .attention
        .blocks
        .iter()
        .map(|b| params.get(b.gamma).data()[0])
        .collect();
    for input in inputs::collect(cfg, &model.config)? {
        let dir = out.join("viz").join(&input.name);
        fs::create_dir_all(&dir)?;
        let mut g = Graph::new(&params);
        let d_bic = g.input(bicubic_resize(&input.d_lr, model.config.scale, Direction::Up)?.to_tensor());
        let image = g.input(input.image.to_tensor());
        let fwd = model.forward_graph(&mut g, d_bic, image)?;
        for (k, step) in fwd.steps.iter().enumerate() {
            for (l, level) in step.guidance.attention.iter().enumerate() {
                feature_map(g.value(level.structure)).save(dir.join(format!("step{k}_level{l}_sa.png")))?;
                feature_map(g.value(level.mixed_image)).save(dir.join(format!("step{k}_level{l}_mixed.png")))?;
            }
        }
        fs::write(dir.join("gamma.json"), serde_json::to_string_pretty(&json!({ "gamma": gammas }))? + "\n")?;
    }
    Ok(())
}
