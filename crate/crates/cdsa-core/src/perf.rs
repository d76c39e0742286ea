//! Analytic FLOPs and trainable-variable counting per attention variant,
//! plus a wall-clock micro-benchmark.
//!
//! Counting rules (declared here, used consistently): a multiply-add in a
//! matrix product is 2 FLOPs, a bias add is 1 per output element, softmax
//! costs 3 per entry (exp, accumulate, divide), and the score scaling is 1
//! per entry. FLOPs cover one full attention-layer forward pass: query/key/
//! value projections, score matrices, softmax, map application, and the
//! output projection. Variable counts cover the whole encoder.

use crate::attention::{attention_forward, init_attention_params, AttnDims, Fusion, ParamIds, Variant};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::tensor::{Dim, Shape3, Tensor, JOINT_CAPACITY};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// Dimensions a profile run is evaluated at.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerfDims {
    pub shape: Shape3,
    pub c: usize,
    pub d: usize,
    pub v: usize,
    pub d_t: usize,
    pub d_l: usize,
    pub d_m: usize,
    pub ff_hidden: usize,
    pub n_layers: usize,
}

impl PerfDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c", self.c),
            ("d", self.d),
            ("v", self.v),
            ("d_t", self.d_t),
            ("d_l", self.d_l),
            ("d_m", self.d_m),
            ("ff_hidden", self.ff_hidden),
            ("n_layers", self.n_layers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("perf dim {name} must be >= 1")));
            }
        }
        Ok(())
    }

    fn attn_dims(&self) -> AttnDims {
        AttnDims {
            shape: self.shape,
            c: self.c,
            d: self.d,
            v: self.v,
            d_t: self.d_t,
            d_l: self.d_l,
            d_m: self.d_m,
            stream_depth: 1,
        }
    }

    fn row_width(&self, dim: Dim) -> usize {
        self.shape.cells() / self.shape.extent(dim) * self.c
    }

    fn stream_width(&self, dim: Dim) -> usize {
        match dim {
            Dim::Time => self.d_t,
            Dim::Location => self.d_l,
            Dim::Measurement => self.d_m,
        }
    }
}

/// Analytic profile of one variant at fixed dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsReport {
    pub variant: Variant,
    pub dims: PerfDims,
    /// One attention-layer forward pass.
    pub flops: u64,
    /// Trainable scalars of the full encoder.
    pub variables: u64,
    /// Largest attention map the variant materializes.
    pub peak_map_cells: u64,
}

fn matmul_flops(n: usize, k: usize, m: usize) -> u64 {
    2 * (n as u64) * (k as u64) * (m as u64)
}

fn affine_flops(rows: usize, in_w: usize, out_w: usize) -> u64 {
    matmul_flops(rows, in_w, out_w) + (rows * out_w) as u64
}

fn scores_flops(rows: usize, width: usize) -> u64 {
    matmul_flops(rows, width, rows) + (rows * rows) as u64
}

fn softmax_flops(rows: usize, cols: usize) -> u64 {
    3 * (rows * cols) as u64
}

fn mode_apply_flops(extent: usize, cells: usize, width: usize) -> u64 {
    2 * (extent as u64) * (cells as u64) * (width as u64)
}

/// FLOPs of one attention-layer forward pass under the declared rules.
pub fn count_flops(variant: Variant, dims: &PerfDims) -> Result<FlopsReport> {
    dims.validate()?;
    let s = dims.shape;
    let cells = s.cells();
    let unit_vo = affine_flops(cells, dims.c, dims.v) + affine_flops(cells, dims.v, dims.c);
    let flops = match variant {
        Variant::Decomposed => {
            let mut total = unit_vo;
            for dim in Dim::ALL {
                let e = s.extent(dim);
                let row = dims.row_width(dim);
                let w = dims.stream_width(dim);
                total += 2 * affine_flops(e, row, w);
                total += scores_flops(e, w);
                total += softmax_flops(e, e);
                total += mode_apply_flops(e, cells, dims.v);
            }
            total
        }
        Variant::Shared => {
            let mut total = 2 * affine_flops(cells, dims.c, dims.d) + unit_vo;
            for dim in Dim::ALL {
                let e = s.extent(dim);
                total += scores_flops(e, cells / e * dims.d);
                total += softmax_flops(e, e);
                total += mode_apply_flops(e, cells, dims.v);
            }
            total
        }
        Variant::Joint => {
            2 * affine_flops(cells, dims.c, dims.d)
                + unit_vo
                + scores_flops(cells, dims.d)
                + softmax_flops(cells, cells)
                + matmul_flops(cells, cells, dims.v)
        }
        Variant::Independent => {
            let mut total = 0;
            for dim in Dim::ALL {
                let e = s.extent(dim);
                let row = dims.row_width(dim);
                let w = dims.stream_width(dim);
                total += 2 * affine_flops(e, row, w);
                total += scores_flops(e, w);
                total += softmax_flops(e, e);
                total += affine_flops(e, row, row); // stream values
                total += matmul_flops(e, e, row); // map application
                total += affine_flops(e, row, row); // stream output
            }
            // Fusion: three scalar multiplies and two adds per hidden cell.
            total + 5 * (cells * dims.c) as u64
        }
    };
    Ok(FlopsReport {
        variant,
        dims: *dims,
        flops,
        variables: count_variables(variant, dims)?,
        peak_map_cells: peak_map_cells(variant, dims),
    })
}

/// Largest attention map the variant materializes at these dimensions.
pub fn peak_map_cells(variant: Variant, dims: &PerfDims) -> u64 {
    let s = dims.shape;
    match variant {
        Variant::Joint => (s.cells() as u64) * (s.cells() as u64),
        _ => {
            let e = s.t.max(s.l).max(s.m) as u64;
            e * e
        }
    }
}

fn affine_vars(in_w: usize, out_w: usize) -> u64 {
    (in_w * out_w + out_w) as u64
}

/// Exact trainable scalar count of a full encoder (embedding, `n_layers`
/// attention layers with norms and feed-forward blocks, output head) with
/// single-sub-layer independent streams and trainable fusion. Mirrors the
/// live parameter registry exactly.
pub fn count_variables(variant: Variant, dims: &PerfDims) -> Result<u64> {
    dims.validate()?;
    let s = dims.shape;
    let attn: u64 = match variant {
        Variant::Joint | Variant::Shared => {
            2 * affine_vars(dims.c, dims.d)
                + affine_vars(dims.c, dims.v)
                + affine_vars(dims.v, dims.c)
        }
        Variant::Decomposed => {
            let maps: u64 = Dim::ALL
                .iter()
                .map(|&dim| 2 * affine_vars(dims.row_width(dim), dims.stream_width(dim)))
                .sum();
            maps + affine_vars(dims.c, dims.v) + affine_vars(dims.v, dims.c)
        }
        Variant::Independent => {
            let streams: u64 = Dim::ALL
                .iter()
                .map(|&dim| {
                    let row = dims.row_width(dim);
                    2 * affine_vars(row, dims.stream_width(dim)) + 2 * affine_vars(row, row)
                })
                .sum();
            streams + 3
        }
    };
    let embed = 2 * (s.m * dims.c) as u64;
    let norms = 4 * dims.c as u64;
    let ff = affine_vars(dims.c, dims.ff_hidden) + affine_vars(dims.ff_hidden, dims.c);
    let head = affine_vars(dims.c, 1);
    Ok(embed + dims.n_layers as u64 * (attn + norms + ff) + head)
}

/// Wall-clock result for repeated attention-layer forwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub variant: Variant,
    pub dims: PerfDims,
    pub reps: usize,
    pub median_secs: f64,
    pub iqr_secs: f64,
    pub samples_secs: Vec<f64>,
    /// Set when the configuration was not run (joint capacity guard).
    pub skipped: Option<String>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Times `reps` forward passes of one attention layer after two warm-up
/// runs; parameters and input are seeded, so the numerical output is
/// identical across reps. Runs on the calling thread only.
pub fn time_forward(variant: Variant, dims: &PerfDims, reps: usize, seed: u64) -> Result<TimingReport> {
    dims.validate()?;
    if reps < 5 {
        return Err(Error::Contract(format!("reps must be >= 5, got {reps}")));
    }
    let attn = dims.attn_dims();
    let cells = dims.shape.cells();
    if variant == Variant::Joint && cells > JOINT_CAPACITY {
        return Ok(TimingReport {
            variant,
            dims: *dims,
            reps,
            median_secs: 0.0,
            iqr_secs: 0.0,
            samples_secs: Vec::new(),
            skipped: Some(format!(
                "joint map over {cells} cells exceeds the {JOINT_CAPACITY}-cell capacity guard"
            )),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    init_attention_params("attn", variant, &attn, Fusion::Trainable, &mut rng, &mut params)?;
    let s = dims.shape;
    let h = Tensor::from_fn(&[s.t, s.l, s.m, dims.c], |_| rng.random_range(-1.0..1.0));

    let run = || -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (n, t) in &params {
            ids.insert(n.clone(), tape.constant(t.clone()));
        }
        let hid = tape.constant(h.clone());
        let start = Instant::now();
        let (out, _) = attention_forward(
            &mut tape,
            &ParamIds(&ids),
            "attn",
            variant,
            &attn,
            hid,
            crate::attention::CANONICAL_ORDER,
            Fusion::Trainable,
        )?;
        let elapsed = start.elapsed().as_secs_f64();
        Ok((elapsed, tape.value(out)?.clone()))
    };

    let (_, first) = run()?;
    let (_, second) = run()?;
    debug_assert!(first.max_abs_diff(&second) == 0.0);
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        samples.push(run()?.0);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimingReport {
        variant,
        dims: *dims,
        reps,
        median_secs: quantile(&sorted, 0.5),
        iqr_secs: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        samples_secs: samples,
        skipped: None,
    })
}
