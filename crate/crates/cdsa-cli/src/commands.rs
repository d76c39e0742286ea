//! The six subcommands: data generation, training, imputation, evaluation,
//! benchmarking, and attention-map export.

use crate::config::RunConfig;
use crate::manifest::{Manifest, OutputGuard};
use anyhow::{bail, Context, Result};
use cdsa_core::attention::Variant;
use cdsa_core::data::{
    self, apply_removal, burst_mask, load_cube, load_mask, metrics, normalize, save_cube,
    save_mask, DataCube, Mask, MissingSpec, SynthKind,
};
use cdsa_core::model::{
    load_checkpoint, prepare_training, save_checkpoint, LossKind, Model, TrainReport,
};
use cdsa_core::perf::{count_flops, time_forward, PerfDims, TimingReport};
use cdsa_core::tensor::{Shape3, Tensor};
use clap::Args;
use serde_json::json;
use std::path::{Path, PathBuf};

fn parse_shape3(s: &str) -> Result<Shape3> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        bail!("shape must be TxLxM, got {s:?}");
    }
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse().with_context(|| format!("bad extent {p:?} in {s:?}")))
        .collect::<Result<_>>()?;
    Ok(Shape3::new(dims[0], dims[1], dims[2])?)
}

fn parse_shape4(s: &str) -> Result<(Shape3, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 4 {
        bail!("dims must be TxLxMxC, got {s:?}");
    }
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse().with_context(|| format!("bad extent {p:?} in {s:?}")))
        .collect::<Result<_>>()?;
    Ok((Shape3::new(dims[0], dims[1], dims[2])?, dims[3]))
}

fn eprint_constant_warnings(cube: &DataCube) {
    if let Some(stats) = &cube.stats {
        for (m, st) in stats.iter().enumerate() {
            if st.constant {
                eprintln!("warning: measurement {m} has no observed variance; scaled by 1");
            }
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Generator family: seasonal, cross-measurement, or spatial.
    #[arg(long)]
    kind: String,
    /// Cube extents as TxLxM, e.g. 96x6x2.
    #[arg(long, value_parser = parse_shape3)]
    shape: Shape3,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian noise level added to every cell.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let kind: SynthKind = args.kind.parse()?;
    let cube = data::synth_gen(kind, args.shape, args.seed, args.noise)?;
    let mut guard = OutputGuard::new(&args.out, args.force)?;
    let cube_path = guard.target("cube.csv")?;
    save_cube(&cube, &cube_path)?;
    let params = json!({
        "kind": kind.to_string(),
        "shape": args.shape.to_string(),
        "noise": args.noise,
    });
    let mut manifest = Manifest::new("gen-data", args.seed, &params)?;
    manifest.params = params;
    guard.commit(manifest)?;
    println!("wrote {}", cube_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training cube CSV.
    #[arg(long)]
    cube: Option<PathBuf>,
    /// Removal mask CSV; mutually exclusive with --missing-rate.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Generate a burst-removal mask targeting this overall missing rate.
    #[arg(long)]
    missing_rate: Option<f64>,
    /// Expected burst length for generated masks.
    #[arg(long)]
    burst_mean: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training loss: rmse, mae, mse, or rmse+mae.
    #[arg(long)]
    loss: Option<String>,
    /// Attention variant: independent, joint, shared, or decomposed.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut rc = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        rc.encoder.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        rc.encoder.epochs = epochs;
    }
    if let Some(loss) = &args.loss {
        rc.encoder.loss = loss.parse::<LossKind>()?;
    }
    if let Some(variant) = &args.variant {
        rc.encoder.variant = variant.parse::<Variant>()?;
    }
    if let Some(lr) = args.learning_rate {
        rc.encoder.learning_rate = lr;
    }
    if let Some(cube) = &args.cube {
        rc.cube = Some(cube.clone());
    }
    if let Some(mask) = &args.mask {
        rc.mask = Some(mask.clone());
    }
    if let Some(out) = &args.out {
        rc.out = Some(out.clone());
    }
    if let Some(rate) = args.missing_rate {
        let mut spec = rc.missing.unwrap_or(MissingSpec {
            seed: rc.encoder.seed,
            ..MissingSpec::default()
        });
        spec.target_rate = rate;
        if let Some(mean) = args.burst_mean {
            spec.burst_len_mean = mean;
        }
        rc.missing = Some(spec);
    }
    rc.encoder.validate()?;

    let cube_path = rc.cube.clone().context("no training cube (--cube or config)")?;
    let out = rc.out.clone().context("no output directory (--out or config)")?;
    let cube = load_cube(&cube_path)?;

    // Validate dimensions before any work.
    if rc.encoder.window_len_t > cube.shape.t {
        bail!(
            "window length {} exceeds the cube's {} time stamps",
            rc.encoder.window_len_t,
            cube.shape.t
        );
    }

    let (removal, generated_mask) = match (&rc.mask, &rc.missing) {
        (Some(path), _) => {
            let mask = load_mask(path)?;
            if mask.shape != cube.shape {
                bail!(
                    "mask shape {} does not match cube {}",
                    mask.shape,
                    cube.shape
                );
            }
            (mask, false)
        }
        (None, Some(spec)) => (burst_mask(&cube, spec)?, true),
        (None, None) => bail!("provide --mask or --missing-rate (or set them in the config)"),
    };

    let data = prepare_training(&cube, &removal, rc.encoder.train_target)?;
    eprint_constant_warnings(&data.input);
    let mut model = Model::new(rc.encoder.clone(), cube.shape.l, cube.shape.m)?;
    let report = model.train(&data)?;

    let mut guard = OutputGuard::new(&out, args.force)?;
    let ckpt_path = guard.target("model.cdsa")?;
    save_checkpoint(&model, &ckpt_path)?;
    let trace_path = guard.target("trace.csv")?;
    write_trace(&trace_path, &report)?;
    if generated_mask {
        let mask_path = guard.target("mask.csv")?;
        save_mask(&removal, &mask_path)?;
    }

    let mut manifest = Manifest::new("train", rc.encoder.seed, &rc)?;
    manifest.add_input(&cube_path)?;
    if let Some(path) = &rc.mask {
        manifest.add_input(path)?;
    }
    manifest.params = serde_json::to_value(&rc)?;
    guard.commit(manifest)?;
    println!(
        "trained {} epochs ({} steps each); final loss {}",
        report.epoch_loss.len(),
        report.steps_per_epoch,
        report.epoch_loss.last().map_or("n/a".into(), |l| l.to_string())
    );
    Ok(())
}

fn write_trace(path: &Path, report: &TrainReport) -> Result<()> {
    let mut body = String::from("epoch,loss\n");
    for (i, loss) in report.epoch_loss.iter().enumerate() {
        body.push_str(&format!("{i},{loss}\n"));
    }
    std::fs::write(path, body)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ImputeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    /// Removal mask to hide cells before imputation.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn impute(args: ImputeArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let cube = load_cube(&args.cube)?;
    let visible = match &args.mask {
        Some(path) => {
            let mask = load_mask(path)?;
            apply_removal(&cube, &mask)?
        }
        None => cube.clone(),
    };
    let normalized = normalize(&visible)?;
    eprint_constant_warnings(&normalized);
    let imputed = model.impute(&normalized)?;

    let mut guard = OutputGuard::new(&args.out, args.force)?;
    let out_path = guard.target("imputed.csv")?;
    save_cube(&imputed, &out_path)?;
    let mut manifest = Manifest::new("impute", model.cfg.seed, &model.cfg)?;
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.cube)?;
    if let Some(path) = &args.mask {
        manifest.add_input(path)?;
    }
    guard.commit(manifest)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to impute with; or use --pred for a precomputed cube.
    #[arg(long, conflicts_with = "pred")]
    checkpoint: Option<PathBuf>,
    /// Precomputed dense prediction cube CSV.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth cube CSV.
    #[arg(long)]
    cube: PathBuf,
    /// Removal mask(s) defining the evaluation cells; repeatable.
    #[arg(long, required = true)]
    mask: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn eval_threads() -> usize {
    std::env::var("CDSA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let truth = load_cube(&args.cube)?;
    let masks: Vec<Mask> = args
        .mask
        .iter()
        .map(|p| {
            let m = load_mask(p)?;
            if m.shape != truth.shape {
                bail!("mask shape {} does not match cube {}", m.shape, truth.shape);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;

    enum Source {
        Model(Box<Model>),
        Pred(DataCube),
    }
    let source = match (&args.checkpoint, &args.pred) {
        (Some(ckpt), None) => Source::Model(Box::new(load_checkpoint(ckpt)?)),
        (None, Some(pred)) => Source::Pred(load_cube(pred)?),
        _ => bail!("provide exactly one of --checkpoint or --pred"),
    };

    let eval_one = |mask: &Mask| -> Result<data::MetricsReport> {
        // Only removed cells with known truth are scored.
        let eval_mask: Vec<bool> = (0..truth.shape.cells())
            .map(|i| mask.removed[i] && truth.observed[i])
            .collect();
        let pred_values: Tensor = match &source {
            Source::Pred(cube) => cube.values.clone(),
            Source::Model(model) => {
                let visible = apply_removal(&truth, mask)?;
                let normalized = normalize(&visible)?;
                model.impute(&normalized)?.values
            }
        };
        Ok(metrics(&pred_values, &truth.values, &eval_mask)?)
    };

    let threads = eval_threads().min(masks.len());
    let reports: Vec<data::MetricsReport> = if threads > 1 {
        let chunks: Vec<Result<Vec<(usize, data::MetricsReport)>>> = std::thread::scope(|scope| {
            let eval_one = &eval_one;
            masks
                .chunks(masks.len().div_ceil(threads))
                .enumerate()
                .map(|(ci, chunk)| {
                    let base = ci * masks.len().div_ceil(threads);
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .enumerate()
                            .map(|(i, m)| Ok((base + i, eval_one(m)?)))
                            .collect()
                    })
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect()
        });
        let mut indexed: Vec<(usize, data::MetricsReport)> =
            chunks.into_iter().collect::<Result<Vec<_>>>()?.concat();
        indexed.sort_by_key(|(i, _)| *i);
        indexed.into_iter().map(|(_, r)| r).collect()
    } else {
        masks.iter().map(eval_one).collect::<Result<_>>()?
    };

    let mut guard = OutputGuard::new(&args.out, args.force)?;
    if reports.len() == 1 {
        let path = guard.target("metrics.json")?;
        std::fs::write(&path, serde_json::to_string_pretty(&reports[0])?)?;
        println!("wrote {}", path.display());
    } else {
        for (i, rep) in reports.iter().enumerate() {
            let path = guard.target(&format!("metrics_{i}.json"))?;
            std::fs::write(&path, serde_json::to_string_pretty(rep)?)?;
        }
        println!("wrote {} metric reports", reports.len());
    }
    let seed = match &source {
        Source::Model(m) => m.cfg.seed,
        Source::Pred(_) => 0,
    };
    let mut manifest = Manifest::new("eval", seed, &args.mask)?;
    if let Some(p) = &args.checkpoint {
        manifest.add_input(p)?;
    }
    if let Some(p) = &args.pred {
        manifest.add_input(p)?;
    }
    manifest.add_input(&args.cube)?;
    for p in &args.mask {
        manifest.add_input(p)?;
    }
    guard.commit(manifest)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Cube dimensions plus channels as TxLxMxC; repeatable for sweeps.
    #[arg(long, required = true)]
    dims: Vec<String>,
    /// Comma-separated variant list, or "all".
    #[arg(long, default_value = "all")]
    variants: String,
    /// Per-unit query/key width.
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Per-unit value width.
    #[arg(long, default_value_t = 16)]
    v: usize,
    /// Per-dimension stream width.
    #[arg(long, default_value_t = 16)]
    ds: usize,
    #[arg(long, default_value_t = 32)]
    ff_hidden: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let variants: Vec<Variant> = if args.variants == "all" {
        Variant::ALL.to_vec()
    } else {
        args.variants
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<cdsa_core::Result<_>>()?
    };
    let mut rows: Vec<(PerfDims, Variant, u64, u64, u64, TimingReport)> = Vec::new();
    for dims_str in &args.dims {
        let (shape, c) = parse_shape4(dims_str)?;
        let dims = PerfDims {
            shape,
            c,
            d: args.d,
            v: args.v,
            d_t: args.ds,
            d_l: args.ds,
            d_m: args.ds,
            ff_hidden: args.ff_hidden,
            n_layers: args.n_layers,
        };
        for &variant in &variants {
            let flops = count_flops(variant, &dims)?;
            let timing = time_forward(variant, &dims, args.reps, args.seed)?;
            rows.push((
                dims,
                variant,
                flops.flops,
                flops.variables,
                flops.peak_map_cells,
                timing,
            ));
        }
    }

    let mut guard = OutputGuard::new(&args.out, args.force)?;
    let csv_path = guard.target("bench.csv")?;
    let mut csv = String::from(
        "variant,t,l,m,c,d,v,d_t,d_l,d_m,ff_hidden,n_layers,flops,variables,peak_map_cells,median_secs,iqr_secs,status\n",
    );
    for (dims, variant, flops, vars, peak, timing) in &rows {
        let status = timing.skipped.clone().unwrap_or_else(|| "ok".into());
        csv.push_str(&format!(
            "{variant},{},{},{},{},{},{},{},{},{},{},{},{flops},{vars},{peak},{},{},{}\n",
            dims.shape.t,
            dims.shape.l,
            dims.shape.m,
            dims.c,
            dims.d,
            dims.v,
            dims.d_t,
            dims.d_l,
            dims.d_m,
            dims.ff_hidden,
            dims.n_layers,
            timing.median_secs,
            timing.iqr_secs,
            status.replace(',', ";"),
        ));
    }
    std::fs::write(&csv_path, csv)?;

    let json_path = guard.target("bench.json")?;
    let entries: Vec<serde_json::Value> = rows
        .iter()
        .map(|(dims, variant, flops, vars, peak, timing)| {
            json!({
                "variant": variant.to_string(),
                "dims": dims,
                "flops": flops,
                "variables": vars,
                "peak_map_cells": peak,
                "timing": timing,
            })
        })
        .collect();
    std::fs::write(&json_path, serde_json::to_string_pretty(&entries)?)?;

    let mut manifest = Manifest::new("bench", args.seed, &args.dims)?;
    manifest.params = json!({
        "variants": variants.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
        "reps": args.reps,
    });
    guard.commit(manifest)?;
    println!("wrote {} rows to {}", rows.len(), csv_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    /// Removal mask to hide cells before the forward pass.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn export_attention(args: ExportAttentionArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let cube = load_cube(&args.cube)?;
    let visible = match &args.mask {
        Some(path) => apply_removal(&cube, &load_mask(path)?)?,
        None => cube.clone(),
    };
    let normalized = normalize(&visible)?;
    let layers = model.export_attention(&normalized)?;

    let mut guard = OutputGuard::new(&args.out, args.force)?;
    let mut count = 0;
    for (li, maps) in layers.iter().enumerate() {
        for (label, map) in maps {
            let path = guard.target(&format!("layer{li}_{label}.csv"))?;
            write_matrix_csv(&path, map)?;
            count += 1;
        }
    }
    let mut manifest = Manifest::new("export-attention", model.cfg.seed, &model.cfg)?;
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.cube)?;
    if let Some(p) = &args.mask {
        manifest.add_input(p)?;
    }
    guard.commit(manifest)?;
    println!("wrote {count} attention maps to {}", args.out.display());
    Ok(())
}

fn write_matrix_csv(path: &Path, map: &Tensor) -> Result<()> {
    let (n, m) = map.as_matrix_dims()?;
    let mut body = String::from("idx");
    for j in 0..m {
        body.push_str(&format!(",{j}"));
    }
    body.push('\n');
    for i in 0..n {
        body.push_str(&i.to_string());
        for j in 0..m {
            body.push_str(&format!(",{}", map.data()[i * m + j]));
        }
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}
