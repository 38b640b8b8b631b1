//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p rsag-core --test acceptance` runs everything; extra
//! arguments select criteria whose label contains any of them
//! (e.g. `-- bicubic overfit`). Failures are reported but only change the
//! exit status when `RSAG_ACCEPTANCE_STRICT=1`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsag::attention::GuidanceMode;
use rsag::dataio::synthetic::scene;
use rsag::dataio::{degrade, training_stream, DatasetKind, Sample, StreamConfig};
use rsag::dcn::{decompose, kernel_schedule, DcnConfig};
use rsag::evalkit::{evaluate, mad, rmse, EvalOptions};
use rsag::model::{
    forward_recurrent, loss_and_gradients, loss_graph, smooth_l1, total_loss, upsample_batch, Batch, RecursionTrace, Rsag, RsagConfig,
    Trainer,
};
use rsag::reconstruct::DualHeadOutput;
use rsag::numerics::{bicubic_resize, Direction};
use rsag::{Graph, Grid2D, ImagePlane, Mask, ParamStore, Real, Units};

type Outcome = Result<String, String>;

/// Set to 1 to exit non-zero when any criterion fails.
const STRICT_ENV: &str = "RSAG_ACCEPTANCE_STRICT";

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, units: Units) -> Grid2D {
    Grid2D::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(), units).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePlane {
    ImagePlane::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Multiply every parameter by an independent factor in [0.5, 2).
fn jitter<T: Real>(params: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v = T::from_f64_lossy(v.as_f64() * rng.random_range(0.5..2.0));
        }
    }
}

fn tiny(k: usize) -> RsagConfig {
    RsagConfig {
        scale: 4,
        recursion_steps: k,
        base_channels: 4,
        pyramid_levels: 3,
        cbam_reduction: 4,
        lf_fusion_levels: 2,
        ..Default::default()
    }
    .with_default_weights()
}

fn decomposition_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for trial in 0..20 {
        let layers = rng.random_range(1..5);
        let cfg = RsagConfig {
            dcn: DcnConfig { layers, width: rng.random_range(1..5) },
            seed: trial,
            ..tiny(0)
        };
        let (model, mut params) = Rsag::new::<f32>(cfg).map_err(|e| e.to_string())?;
        jitter(&mut params, &mut rng);
        let (h, w) = (rng.random_range(8..40), rng.random_range(8..40));
        let d_bic = random_grid(&mut rng, h, w, Units::Normalized);
        let pair = decompose(&d_bic, &model.dcn, &params).map_err(|e| e.to_string())?;
        for ((l, h), b) in pair.lf.values().iter().zip(pair.hf.values()).zip(d_bic.values()) {
            // the sum is formed in single precision, as the network does
            let sum = (*l as f32 + *h as f32) as f64;
            worst = worst.max((sum - (*b as f32) as f64).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max residual {worst:e}"))?;
    Ok(format!("max |lf + hf - d_bic| = {worst:e} over 20 inputs"))
}

fn schedule() -> Outcome {
    let s = kernel_schedule(3).map_err(|e| e.to_string())?;
    ensure(s == vec![(7, 5), (5, 3), (3, 1)], || format!("got {s:?}"))?;
    Ok(format!("{s:?}"))
}

fn range_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut hf_n, mut gate_n, mut joint_n) = (0usize, 0usize, 0usize);
    let open = |v: f32| v > 0.0 && v < 1.0;
    for trial in 0..100 {
        let cfg = RsagConfig {
            seed: 1000 + trial,
            ..tiny(0)
        };
        let (model, mut params) = Rsag::new::<f32>(cfg).map_err(|e| e.to_string())?;
        jitter(&mut params, &mut rng);
        let d = random_grid(&mut rng, 16, 16, Units::Normalized);
        let img = random_image(&mut rng, 16, 16);
        let mut g = Graph::new(&params);
        let dv = g.input(d.to_tensor());
        let iv = g.input(img.to_tensor());
        let out = model.forward_graph(&mut g, dv, iv).map_err(|e| e.to_string())?;
        for &v in g.value(out.hf).data() {
            ensure(open(v), || format!("trial {trial}: hf value {v}"))?;
            hf_n += 1;
        }
        for level in &out.steps[0].guidance.attention {
            for var in [level.gate.channel_weights, level.gate.spatial_map] {
                for &v in g.value(var).data() {
                    ensure(open(v), || format!("trial {trial}: gate value {v}"))?;
                    gate_n += 1;
                }
            }
            for &v in g.value(level.contrast.joint).data() {
                ensure(v >= 0.0, || format!("trial {trial}: joint contrast {v}"))?;
                joint_n += 1;
            }
        }
    }
    Ok(format!("100 trials: {hf_n} hf, {gate_n} gate, {joint_n} joint values in range"))
}

/// Loss of `batch` plus the branch pattern of every non-smooth op.
fn loss_with_pattern(model: &Rsag, params: &ParamStore<f64>, batch: &Batch) -> Result<(f64, Vec<usize>), String> {
    let mut g = Graph::new(params);
    let d_bic = g.input(upsample_batch(&batch.d_lr, model.config.scale).map_err(|e| e.to_string())?);
    let y = g.input(batch.image[0].to_tensor());
    let out = model.forward_graph(&mut g, d_bic, y).map_err(|e| e.to_string())?;
    let (total, _) = loss_graph(
        &mut g,
        &out.predictions(),
        &batch.gt[0].to_tensor(),
        &batch.mask[0].to_tensor(),
        &model.config,
    )
    .map_err(|e| e.to_string())?;
    Ok((g.value(total).data()[0], g.branch_pattern()))
}

fn gradient_oracle() -> Outcome {
    let cfg = RsagConfig { seed: 4, ..tiny(1) };
    let (model, mut params) = Rsag::new::<f64>(cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut batch = Batch::default();
    let lr = random_grid(&mut rng, 4, 4, Units::Normalized);
    let img = random_image(&mut rng, 16, 16);
    let gt = random_grid(&mut rng, 16, 16, Units::Normalized);
    let mask = Mask::new(16, 16, (0..256).map(|_| rng.random_bool(0.9)).collect()).unwrap();
    batch.push(lr, img, gt, mask);
    let (_, grads) = loss_and_gradients(&model, &params, &batch).map_err(|e| e.to_string())?;
    let (_, pattern) = loss_with_pattern(&model, &params, &batch)?;

    let coords: Vec<(rsag::ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect();
    let sample = (coords.len() / 100).max(1);
    let picks = rand::seq::index::sample(&mut rng, coords.len(), sample);
    let h = 1e-3;
    let (mut good, mut smooth, mut smooth_good) = (0, 0, 0);
    for p in picks.iter() {
        let (id, i) = coords[p];
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
        let base = params.get(id).data()[i];
        params.get_mut(id).data_mut()[i] = base + h;
        let (up, pu) = loss_with_pattern(&model, &params, &batch)?;
        params.get_mut(id).data_mut()[i] = base - h;
        let (down, pd) = loss_with_pattern(&model, &params, &batch)?;
        params.get_mut(id).data_mut()[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        let ok = rel < 1e-3;
        good += usize::from(ok);
        if pu == pattern && pd == pattern {
            smooth += 1;
            smooth_good += usize::from(ok);
        }
    }
    let detail = format!(
        "{good}/{sample} sampled coordinates within 1e-3 of {} parameters; \
         {smooth_good}/{smooth} where the difference stencil crosses no ReLU, abs or max branch",
        coords.len()
    );
    ensure(good as f64 >= 0.99 * sample as f64, || detail.clone())?;
    Ok(detail)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let (h, w) = (rng.random_range(1..30), rng.random_range(1..30));
        let scale = 10f64.powi(rng.random_range(-2..4));
        let pred = Grid2D::new(h, w, (0..h * w).map(|_| rng.random_range(-1.0..1.0) * scale).collect(), Units::Meters)
            .unwrap();
        let gt = Grid2D::new(h, w, (0..h * w).map(|_| rng.random_range(-1.0..1.0) * scale).collect(), Units::Meters)
            .unwrap();
        let mut flags: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.7)).collect();
        flags[rng.random_range(0..h * w)] = true;
        let mask = Mask::new(h, w, flags).unwrap();
        let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if mask.flags()[y * w + x] {
                    let d = pred.get(y, x) - gt.get(y, x);
                    abs += d.abs();
                    sq += d * d;
                    n += 1;
                }
            }
        }
        let (m, r) = (mad(&pred, &gt, &mask).unwrap(), rmse(&pred, &gt, &mask).unwrap());
        let (om, or) = (abs / n as f64, (sq / n as f64).sqrt());
        ensure((m - om).abs() <= 1e-12 * om.abs(), || format!("case {case}: mad {m} vs {om}"))?;
        ensure((r - or).abs() <= 1e-12 * or.abs(), || format!("case {case}: rmse {r} vs {or}"))?;
        ensure(r >= m, || format!("case {case}: rmse {r} < mad {m}"))?;
    }
    Ok("100 fuzzed cases agree with the double loop; rmse >= mad".into())
}

fn oracle_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x.powi(3) - 2.5 * x.powi(2) + 1.0
    } else if x < 2.0 {
        -0.5 * x.powi(3) + 2.5 * x.powi(2) - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Direct 4×4 cubic convolution at half-pixel centres with border replication.
fn oracle_resize(src: &Grid2D, ho: usize, wo: usize) -> Vec<f64> {
    let (h, w) = src.dims();
    let (ry, rx) = (h as f64 / ho as f64, w as f64 / wo as f64);
    let mut out = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        for ox in 0..wo {
            let sy = (oy as f64 + 0.5) * ry - 0.5;
            let sx = (ox as f64 + 0.5) * rx - 0.5;
            let (by, bx) = (sy.floor() as isize, sx.floor() as isize);
            let mut acc = 0.0;
            for iy in by - 1..=by + 2 {
                for ix in bx - 1..=bx + 2 {
                    let wgt = oracle_kernel(sy - iy as f64) * oracle_kernel(sx - ix as f64);
                    let cy = iy.clamp(0, h as isize - 1) as usize;
                    let cx = ix.clamp(0, w as isize - 1) as usize;
                    acc += wgt * src.get(cy, cx);
                }
            }
            out.push(acc);
        }
    }
    out
}

fn bicubic_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0f64;
    for case in 0..50 {
        let s = [2, 4, 8, 16][case % 4];
        let up = case % 2 == 0;
        let (h, w) = if up {
            (rng.random_range(1..12), rng.random_range(1..12))
        } else {
            (s * rng.random_range(1..5), s * rng.random_range(1..5))
        };
        let g = random_grid(&mut rng, h, w, Units::DisparityLevels);
        let (dir, ho, wo) = if up { (Direction::Up, h * s, w * s) } else { (Direction::Down, h / s, w / s) };
        let got = bicubic_resize(&g, s, dir).map_err(|e| e.to_string())?;
        for (a, b) in got.values().iter().zip(oracle_resize(&g, ho, wo)) {
            worst = worst.max((a - b).abs());
        }
        let c = rng.random_range(-5.0..300.0);
        let flat = Grid2D::constant(h, w, c, Units::DisparityLevels).unwrap();
        let r = bicubic_resize(&flat, s, dir).map_err(|e| e.to_string())?;
        ensure(r.values().iter().all(|&v| v == c), || format!("case {case}: constant {c} not preserved"))?;
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("50 grids, max deviation {worst:e}; constants exact"))
}

fn loss_arithmetic() -> Outcome {
    for (x, want) in [(0.5, 0.125), (-2.0, 1.5), (1.0, 0.5), (-1.0, 0.5)] {
        ensure(smooth_l1(x) == want, || format!("smooth_l1({x}) = {}", smooth_l1(x)))?;
    }
    let cfg = RsagConfig {
        recursion_steps: 0,
        loss_weights: vec![0.5],
        ..Default::default()
    };
    let one = |v| Grid2D::constant(1, 1, v, Units::Relative).unwrap();
    let trace = RecursionTrace::<f64> {
        d_bic: one(0.0),
        hf: one(0.0),
        lf: one(0.0),
        guidance: vec![],
        outputs: vec![DualHeadOutput {
            prediction: one(0.5),
            hf_out: one(0.0),
            lf_out: one(0.0),
        }],
    };
    let gt = Grid2D::constant(1, 1, 0.0, Units::Normalized).unwrap();
    let r = total_loss(&trace, &gt, &Mask::all_valid(1, 1), &cfg).map_err(|e| e.to_string())?;
    ensure(r.total == 0.0625, || format!("single-pixel loss {}", r.total))?;
    Ok("smooth_l1 spot values and single-pixel loss 0.0625 exact".into())
}

fn masked_rmse(pred: &Grid2D, gt: &Grid2D, mask: &Mask) -> Result<f64, String> {
    let pred = pred.clamp_normalized();
    rmse(&pred, gt, mask).map_err(|e| e.to_string())
}

fn overfit() -> Outcome {
    let s = 8;
    let sample = scene("Overfit", 160, 160, 21).crop(32, 32, 96, 96).map_err(|e| e.to_string())?;
    let gt = sample.normalized_depth().map_err(|e| e.to_string())?;
    let lr = bicubic_resize(&gt, s, Direction::Down).map_err(|e| e.to_string())?;
    let mut batch = Batch::default();
    batch.push(lr.clone(), sample.image.clone(), gt.clone(), sample.mask.clone());
    let cfg = RsagConfig {
        scale: s,
        base_channels: 16,
        seed: 8,
        ..Default::default()
    }
    .with_default_weights();
    let mut trainer = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    for step in 1..=500 {
        let r = trainer.step(&batch).map_err(|e| e.to_string())?;
        if step % 100 == 0 {
            eprintln!("  step {step}: loss {:.4}", r.total);
        }
    }
    let trace = forward_recurrent(&trainer.model, &trainer.params, &lr, &sample.image).map_err(|e| e.to_string())?;
    let final_rmse = masked_rmse(trace.final_prediction(), &gt, &sample.mask)?;
    let bic = bicubic_resize(&lr, s, Direction::Up).map_err(|e| e.to_string())?;
    let bic_rmse = masked_rmse(&bic, &gt, &sample.mask)?;
    ensure(final_rmse < 0.02, || format!("final RMSE {final_rmse:.4} (bicubic {bic_rmse:.4})"))?;
    Ok(format!("final RMSE {final_rmse:.4} after 500 steps (bicubic {bic_rmse:.4})"))
}

/// Toy split for the ablation: a 2×3 grid of crops from each of two
/// scenes, assigned to train and test in a checkerboard so both halves see
/// the same scene statistics without sharing pixels.
fn toy_split() -> (Vec<Sample>, Vec<Sample>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for k in 0..2u64 {
        let big = scene(&format!("toy{k}"), 2 * ABLATION_CROP, 3 * ABLATION_CROP, 500 + k);
        for i in 0..6 {
            let (r, c) = (i / 3, i % 3);
            let crop = big.crop(r * ABLATION_CROP, c * ABLATION_CROP, ABLATION_CROP, ABLATION_CROP).unwrap();
            if (r + c) % 2 == 0 {
                train.push(crop);
            } else {
                test.push(crop);
            }
        }
    }
    (train, test)
}

const ABLATION_CROP: usize = 96;
const ABLATION_PATCH: usize = 32;
const ABLATION_STEPS: usize = 2000;
const ABLATION_SEEDS: [u64; 3] = [11, 12, 13];

fn ablation_config(guidance: GuidanceMode, k: usize, seed: u64) -> RsagConfig {
    RsagConfig {
        scale: 8,
        recursion_steps: k,
        base_channels: 8,
        pyramid_levels: 3,
        cbam_reduction: 4,
        lf_fusion_levels: 2,
        guidance,
        step0_guidance: guidance,
        seed,
        ..Default::default()
    }
    .with_default_weights()
}

fn train_and_test(cfg: RsagConfig, train: &[Sample], test: &[Sample]) -> Result<f64, String> {
    let stream = StreamConfig {
        scale: cfg.scale,
        patch: ABLATION_PATCH,
        stride: ABLATION_PATCH / 2,
        batch_size: 8,
        seed: cfg.seed,
    };
    let mut batches = training_stream(train, stream).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    for _ in 0..ABLATION_STEPS {
        let batch = batches.next_batch().map_err(|e| e.to_string())?;
        trainer.step(&batch).map_err(|e| e.to_string())?;
    }
    let options = EvalOptions {
        scale: trainer.model.config.scale,
        margin: 0,
        tile: None,
        tile_margin: 0,
        trained_range: None,
    };
    let (report, _) = evaluate(&trainer.model, &trainer.params, test, DatasetKind::Middlebury2005, &options)
        .map_err(|e| e.to_string())?;
    Ok(report.mean.rmse)
}

fn ablation() -> Outcome {
    let (train, test) = toy_split();
    let mean = |guidance, k| -> Result<f64, String> {
        let runs = ABLATION_SEEDS
            .iter()
            .map(|&seed| train_and_test(ablation_config(guidance, k, seed), &train, &test))
            .collect::<Result<Vec<_>, _>>()?;
        eprintln!("  {guidance:?} K={k}: {runs:.3?}");
        Ok(runs.iter().sum::<f64>() / runs.len() as f64)
    };
    let full = mean(GuidanceMode::StructureAttention, 2)?;
    let concat = mean(GuidanceMode::Concat, 2)?;
    let single = mean(GuidanceMode::StructureAttention, 0)?;
    let detail = format!("test RMSE full {full:.3}, concat {concat:.3}, K=0 {single:.3}");
    ensure(full <= concat && full <= single, || detail.clone())?;
    Ok(detail)
}

fn trace_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let lr = random_grid(&mut rng, 4, 4, Units::Normalized);
    let img = random_image(&mut rng, 16, 16);
    let mut counts = Vec::new();
    for k in 0..=4 {
        let (model, params) = Rsag::new::<f32>(tiny(k)).map_err(|e| e.to_string())?;
        let trace = forward_recurrent(&model, &params, &lr, &img).map_err(|e| e.to_string())?;
        ensure(trace.predictions().len() == k + 1, || format!("K={k}: {} predictions", trace.predictions().len()))?;
        counts.push(params.scalar_count());
    }
    ensure(counts.windows(2).all(|w| w[0] == w[1]), || format!("parameter counts {counts:?}"))?;
    Ok(format!("K = 0..=4 give K + 1 predictions; {} parameters each", counts[0]))
}

/// Library-level replay of the decompose and eval commands; the binary
/// itself is exercised by the CLI crate's integration tests.
fn round_trips() -> Outcome {
    let sample = scene("Roundtrip", 48, 64, 31);
    let cfg = RsagConfig {
        seed: 3,
        dcn: DcnConfig { layers: 3, width: 4 },
        ..tiny(2)
    };
    let (lr, _) = degrade(&sample, cfg.scale, cfg.pyramid_levels).map_err(|e| e.to_string())?;
    let (model, params) = Rsag::new::<f32>(cfg.clone()).map_err(|e| e.to_string())?;
    let bic = bicubic_resize(&lr, cfg.scale, Direction::Up).map_err(|e| e.to_string())?;
    let pair = decompose(&bic, &model.dcn, &params).map_err(|e| e.to_string())?;
    let quant = |v: f64, offset: f64, step: f64| offset + step * ((v - offset) / step).round().clamp(0.0, 65535.0);
    let unit = 1.0 / 65535.0;
    let mut worst = 0f64;
    for ((b, h), l) in bic.values().iter().zip(pair.hf.values()).zip(pair.lf.values()) {
        let sum = quant(*h, 0.0, unit) + quant(*l, -1.0, 2.0 * unit);
        worst = worst.max((sum - quant(*b, 0.0, unit)).abs());
    }
    ensure(worst <= 2.0 * unit + 1e-12, || format!("re-sum error {worst:e}"))?;

    let csv = || -> Result<String, String> {
        let mut trainer = Trainer::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
        let (lr, cropped) = degrade(&sample, cfg.scale, cfg.pyramid_levels).map_err(|e| e.to_string())?;
        let mut batch = Batch::default();
        batch.push(lr, cropped.image.clone(), cropped.normalized_depth().unwrap(), cropped.mask.clone());
        for _ in 0..3 {
            trainer.step(&batch).map_err(|e| e.to_string())?;
        }
        let options = EvalOptions {
            scale: cfg.scale,
            margin: 0,
            tile: None,
            tile_margin: 0,
            trained_range: Some(255.0),
        };
        let (report, _) = evaluate(&trainer.model, &trainer.params, std::slice::from_ref(&sample), DatasetKind::Middlebury2005, &options)
            .map_err(|e| e.to_string())?;
        Ok(report.to_csv())
    };
    let (a, b) = (csv()?, csv()?);
    ensure(a == b, || "metrics CSV differs between reruns".into())?;
    Ok(format!("re-sum within {worst:.1e}; metrics CSV identical across reruns"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("decomposition identity", decomposition_identity),
        ("kernel schedule", schedule),
        ("range invariants", range_invariants),
        ("gradient oracle", gradient_oracle),
        ("metric oracles", metric_oracles),
        ("bicubic oracle", bicubic_oracle),
        ("loss arithmetic", loss_arithmetic),
        ("overfit sanity", overfit),
        ("directional ablation", ablation),
        ("trace contract", trace_contract),
        ("cli round-trips", round_trips),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (label, run)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {label}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {label}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{failed} criteria failed");
    let strict = std::env::var(STRICT_ENV).is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
