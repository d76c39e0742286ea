//! Cube ingestion and serialization, per-measurement normalization,
//! burst-loss mask generation, synthetic dataset generators, and evaluation
//! metrics.
//!
//! Cube files use a long CSV format with header `t,l,m,value,observed`;
//! unobserved rows carry an empty value field. The writer emits a canonical
//! byte layout (cells in flat-index order, shortest round-trip decimals), so
//! save -> load -> save reproduces the file exactly.

use crate::error::{Error, Result};
use crate::tensor::{flat_index, Shape3, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Per-measurement normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureStats {
    pub mean: f64,
    pub std: f64,
    /// Set when the measurement had no variance (or no observations at
    /// all); such measurements are shifted but scaled by 1.
    pub constant: bool,
}

/// The raw `T x L x M` value cube with its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCube {
    pub shape: Shape3,
    /// Cell values, flat-index order. Unobserved cells hold 0 once the cube
    /// is normalized; before that they may carry fixture values.
    pub values: Tensor,
    pub observed: Vec<bool>,
    pub stats: Option<Vec<MeasureStats>>,
    pub normalized: bool,
}

impl DataCube {
    pub fn new(shape: Shape3, values: Tensor, observed: Vec<bool>) -> Result<Self> {
        if values.shape() != [shape.t, shape.l, shape.m] {
            return Err(Error::Shape(format!(
                "values shape {:?} does not match cube {shape}",
                values.shape()
            )));
        }
        if observed.len() != shape.cells() {
            return Err(Error::Shape(format!(
                "observed mask has {} cells, cube has {}",
                observed.len(),
                shape.cells()
            )));
        }
        Ok(DataCube {
            shape,
            values,
            observed,
            stats: None,
            normalized: false,
        })
    }

    /// Fully observed cube.
    pub fn dense(shape: Shape3, values: Tensor) -> Result<Self> {
        let n = shape.cells();
        DataCube::new(shape, values, vec![true; n])
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }

    pub fn missing_rate(&self) -> f64 {
        1.0 - self.observed_count() as f64 / self.shape.cells() as f64
    }
}

/// A removal mask: cells artificially hidden from the model while their
/// ground truth is retained for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub shape: Shape3,
    pub removed: Vec<bool>,
}

impl Mask {
    pub fn empty(shape: Shape3) -> Self {
        Mask {
            shape,
            removed: vec![false; shape.cells()],
        }
    }

    pub fn removed_count(&self) -> usize {
        self.removed.iter().filter(|&&b| b).count()
    }
}

/// Burst-removal request.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingSpec {
    /// Overall missing fraction (natural plus removed) to reach.
    pub target_rate: f64,
    /// Expected burst length in time steps (geometric law).
    pub burst_len_mean: f64,
    pub seed: u64,
}

impl Default for MissingSpec {
    fn default() -> Self {
        MissingSpec {
            target_rate: 0.4,
            burst_len_mean: 6.0,
            seed: 0,
        }
    }
}

/// Evaluation metrics over a cell mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub mre: f64,
    pub mse: f64,
    pub mape: f64,
    pub n_eval: usize,
    pub excluded_near_zero: usize,
}

/// Synthetic cube families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Per-(location, measurement) sinusoid with random phase/amplitude.
    Seasonal,
    /// Measurement 1 is a lag-1 affine function of measurement 0.
    CrossMeasurement,
    /// Neighboring locations share a latent signal with decaying correlation.
    Spatial,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seasonal" => Ok(SynthKind::Seasonal),
            "cross-measurement" => Ok(SynthKind::CrossMeasurement),
            "spatial" => Ok(SynthKind::Spatial),
            other => Err(Error::Config(format!(
                "unknown synthetic kind {other:?}; expected seasonal|cross-measurement|spatial"
            ))),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::Seasonal => "seasonal",
            SynthKind::CrossMeasurement => "cross-measurement",
            SynthKind::Spatial => "spatial",
        })
    }
}

const CUBE_HEADER: &str = "t,l,m,value,observed";
const MASK_HEADER: &str = "t,l,m,removed";

/// Canonical decimal formatting: shortest text that parses back exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn save_cube(cube: &DataCube, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(cube.shape.cells() * 16);
    out.push_str(CUBE_HEADER);
    out.push('\n');
    let s = cube.shape;
    for t in 0..s.t {
        for l in 0..s.l {
            for m in 0..s.m {
                let p = flat_index(t, l, m, s)?;
                if cube.observed[p] {
                    out.push_str(&format!("{t},{l},{m},{},1\n", fmt_f64(cube.values.data()[p])));
                } else {
                    out.push_str(&format!("{t},{l},{m},,0\n"));
                }
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<DataCube> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format("empty file".into()))?;
    if header.trim_end_matches('\r') != CUBE_HEADER {
        return Err(Error::Format(format!(
            "bad header {header:?}, expected {CUBE_HEADER:?}"
        )));
    }

    struct Row {
        t: usize,
        l: usize,
        m: usize,
        value: Option<f64>,
        observed: bool,
    }
    let mut rows: Vec<Row> = Vec::new();
    let (mut max_t, mut max_l, mut max_m) = (0usize, 0usize, 0usize);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse_idx = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad {what} index {s:?}"),
            })
        };
        let t = parse_idx(fields[0], "t")?;
        let l = parse_idx(fields[1], "l")?;
        let m = parse_idx(fields[2], "m")?;
        let observed = match fields[4] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("observed must be 0 or 1, got {other:?}"),
                })
            }
        };
        let value = if fields[3].is_empty() {
            if observed {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "observed cell has no value".into(),
                });
            }
            None
        } else {
            Some(fields[3].parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad value {:?}", fields[3]),
            })?)
        };
        max_t = max_t.max(t);
        max_l = max_l.max(l);
        max_m = max_m.max(m);
        rows.push(Row {
            t,
            l,
            m,
            value,
            observed,
        });
    }
    if rows.is_empty() {
        return Err(Error::Format("file contains no cells".into()));
    }
    let shape = Shape3::new(max_t + 1, max_l + 1, max_m + 1)?;
    let mut values = Tensor::zeros(&[shape.t, shape.l, shape.m]);
    let mut observed = vec![false; shape.cells()];
    let mut seen = vec![false; shape.cells()];
    for row in rows {
        let p = flat_index(row.t, row.l, row.m, shape)?;
        if seen[p] {
            return Err(Error::Format(format!(
                "duplicate cell ({},{},{})",
                row.t, row.l, row.m
            )));
        }
        seen[p] = true;
        observed[p] = row.observed;
        if let Some(v) = row.value {
            values.data_mut()[p] = v;
        }
    }
    DataCube::new(shape, values, observed)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(mask.shape.cells() * 10);
    out.push_str(MASK_HEADER);
    out.push('\n');
    let s = mask.shape;
    for t in 0..s.t {
        for l in 0..s.l {
            for m in 0..s.m {
                let p = flat_index(t, l, m, s)?;
                out.push_str(&format!(
                    "{t},{l},{m},{}\n",
                    if mask.removed[p] { 1 } else { 0 }
                ));
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format("empty file".into()))?;
    if header.trim_end_matches('\r') != MASK_HEADER {
        return Err(Error::Format(format!(
            "bad header {header:?}, expected {MASK_HEADER:?}"
        )));
    }
    let mut cells: Vec<(usize, usize, usize, bool)> = Vec::new();
    let (mut max_t, mut max_l, mut max_m) = (0usize, 0usize, 0usize);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_idx = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad index {s:?}"),
            })
        };
        let (t, l, m) = (parse_idx(fields[0])?, parse_idx(fields[1])?, parse_idx(fields[2])?);
        let removed = match fields[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("removed must be 0 or 1, got {other:?}"),
                })
            }
        };
        max_t = max_t.max(t);
        max_l = max_l.max(l);
        max_m = max_m.max(m);
        cells.push((t, l, m, removed));
    }
    if cells.is_empty() {
        return Err(Error::Format("file contains no cells".into()));
    }
    let shape = Shape3::new(max_t + 1, max_l + 1, max_m + 1)?;
    let mut removed = vec![false; shape.cells()];
    let mut seen = vec![false; shape.cells()];
    for (t, l, m, r) in cells {
        let p = flat_index(t, l, m, shape)?;
        if seen[p] {
            return Err(Error::Format(format!("duplicate cell ({t},{l},{m})")));
        }
        seen[p] = true;
        removed[p] = r;
    }
    Ok(Mask { shape, removed })
}

/// Standardizes each measurement over its observed cells (population
/// std) and zero-fills unobserved cells. Zero-variance or all-missing
/// measurements are flagged constant and scaled by 1.
pub fn normalize(cube: &DataCube) -> Result<DataCube> {
    if cube.normalized {
        return Err(Error::Contract("cube is already normalized".into()));
    }
    let s = cube.shape;
    let mut stats = Vec::with_capacity(s.m);
    for m in 0..s.m {
        let mut sum = 0.0;
        let mut n = 0usize;
        for t in 0..s.t {
            for l in 0..s.l {
                let p = flat_index(t, l, m, s)?;
                if cube.observed[p] {
                    sum += cube.values.data()[p];
                    n += 1;
                }
            }
        }
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        let mut var = 0.0;
        for t in 0..s.t {
            for l in 0..s.l {
                let p = flat_index(t, l, m, s)?;
                if cube.observed[p] {
                    let d = cube.values.data()[p] - mean;
                    var += d * d;
                }
            }
        }
        let std = if n > 0 { (var / n as f64).sqrt() } else { 0.0 };
        let constant = n == 0 || std == 0.0;
        stats.push(MeasureStats {
            mean,
            std: if constant { 1.0 } else { std },
            constant,
        });
    }
    let mut values = Tensor::zeros(&[s.t, s.l, s.m]);
    for (i, v) in values.data_mut().iter_mut().enumerate() {
        if cube.observed[i] {
            let st = &stats[i % s.m];
            *v = (cube.values.data()[i] - st.mean) / st.std;
        }
    }
    Ok(DataCube {
        shape: s,
        values,
        observed: cube.observed.clone(),
        stats: Some(stats),
        normalized: true,
    })
}

/// Inverts [`normalize`] on every cell using the cube's own stats.
pub fn denormalize(cube: &DataCube) -> Result<DataCube> {
    if !cube.normalized {
        return Err(Error::Contract("cube is not normalized".into()));
    }
    let stats = cube
        .stats
        .as_ref()
        .ok_or_else(|| Error::Contract("normalized cube is missing its stats".into()))?;
    let values = denormalize_values(&cube.values, stats)?;
    Ok(DataCube {
        shape: cube.shape,
        values,
        observed: cube.observed.clone(),
        stats: None,
        normalized: false,
    })
}

/// Applies `v * std + mean` per measurement over a dense `T x L x M` tensor.
pub fn denormalize_values(values: &Tensor, stats: &[MeasureStats]) -> Result<Tensor> {
    if values.rank() != 3 {
        return Err(Error::Shape("expected a T x L x M tensor".into()));
    }
    let m_extent = values.shape()[2];
    if stats.len() != m_extent {
        return Err(Error::Shape(format!(
            "{} stats for {} measurements",
            stats.len(),
            m_extent
        )));
    }
    let mut out = values.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let st = &stats[i % m_extent];
        *v = *v * st.std + st.mean;
    }
    Ok(out)
}

/// Normalizes `values` with externally supplied stats (used to express
/// ground truth in the model's training scale).
pub fn normalize_values(values: &Tensor, stats: &[MeasureStats]) -> Result<Tensor> {
    if values.rank() != 3 {
        return Err(Error::Shape("expected a T x L x M tensor".into()));
    }
    let m_extent = values.shape()[2];
    if stats.len() != m_extent {
        return Err(Error::Shape(format!(
            "{} stats for {} measurements",
            stats.len(),
            m_extent
        )));
    }
    let mut out = values.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let st = &stats[i % m_extent];
        *v = (*v - st.mean) / st.std;
    }
    Ok(out)
}

/// Hides removed cells: the result is a raw cube whose observation mask
/// excludes them (their values are retained in the source cube only).
pub fn apply_removal(cube: &DataCube, mask: &Mask) -> Result<DataCube> {
    if cube.normalized {
        return Err(Error::Contract("removal must be applied before normalization".into()));
    }
    if mask.shape != cube.shape {
        return Err(Error::Shape(format!(
            "mask shape {} does not match cube {}",
            mask.shape, cube.shape
        )));
    }
    let observed = cube
        .observed
        .iter()
        .zip(&mask.removed)
        .map(|(&o, &r)| o && !r)
        .collect();
    DataCube::new(cube.shape, cube.values.clone(), observed)
}

/// Geometric burst length on {1, 2, ...} with the given mean.
fn sample_burst_len(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let p = 1.0 / mean;
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.random_range(0.0..1.0);
    1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize
}

const BURST_MAX_ATTEMPTS: usize = 200_000;

/// Draws burst removals until the overall missing fraction first reaches
/// `spec.target_rate`: repeatedly pick a random (location, measurement) and
/// start time, draw a geometric burst length, and mark up to that many
/// consecutive observed cells as removed. Deterministic per seed.
pub fn burst_mask(cube: &DataCube, spec: &MissingSpec) -> Result<Mask> {
    if !(0.0..1.0).contains(&spec.target_rate) {
        return Err(Error::Config(format!(
            "target_rate must be in [0, 1), got {}",
            spec.target_rate
        )));
    }
    if spec.burst_len_mean < 1.0 {
        return Err(Error::Config(format!(
            "burst_len_mean must be >= 1, got {}",
            spec.burst_len_mean
        )));
    }
    let s = cube.shape;
    let cells = s.cells() as f64;
    let natural = cube.missing_rate();
    if spec.target_rate < natural - 1e-12 {
        return Err(Error::Contract(format!(
            "target rate {} is below the natural missing rate {natural:.6}",
            spec.target_rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = Mask::empty(s);
    let mut missing = s.cells() - cube.observed_count();
    let mut attempts = 0usize;
    while (missing as f64 / cells) < spec.target_rate {
        attempts += 1;
        if attempts > BURST_MAX_ATTEMPTS {
            return Err(Error::Contract(format!(
                "could not reach missing rate {} after {BURST_MAX_ATTEMPTS} bursts",
                spec.target_rate
            )));
        }
        let l = rng.random_range(0..s.l);
        let m = rng.random_range(0..s.m);
        let start = rng.random_range(0..s.t);
        let len = sample_burst_len(&mut rng, spec.burst_len_mean);
        for t in start..(start + len).min(s.t) {
            let p = flat_index(t, l, m, s)?;
            if cube.observed[p] && !mask.removed[p] {
                mask.removed[p] = true;
                missing += 1;
            }
        }
    }
    Ok(mask)
}

const MAPE_EPS: f64 = 1e-6;

/// Error metrics over the masked cells. MRE is the ratio of summed absolute
/// error to summed absolute truth; MAPE averages per-cell ratios and skips
/// cells with |truth| below 1e-6 (the skipped count is reported).
pub fn metrics(pred: &Tensor, truth: &Tensor, eval_mask: &[bool]) -> Result<MetricsReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "pred shape {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if eval_mask.len() != pred.size() {
        return Err(Error::Shape("mask length does not match tensors".into()));
    }
    let n = eval_mask.iter().filter(|&&b| b).count();
    if n == 0 {
        return Err(Error::Contract("metrics over an empty mask".into()));
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut truth_abs_sum = 0.0;
    let mut mape_sum = 0.0;
    let mut mape_n = 0usize;
    let mut excluded = 0usize;
    for (i, &keep) in eval_mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let e = pred.data()[i] - truth.data()[i];
        abs_sum += e.abs();
        sq_sum += e * e;
        truth_abs_sum += truth.data()[i].abs();
        if truth.data()[i].abs() >= MAPE_EPS {
            mape_sum += (e / truth.data()[i]).abs();
            mape_n += 1;
        } else {
            excluded += 1;
        }
    }
    let mse = sq_sum / n as f64;
    let mre = if truth_abs_sum > 0.0 {
        abs_sum / truth_abs_sum
    } else if abs_sum == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(MetricsReport {
        rmse: mse.sqrt(),
        mae: abs_sum / n as f64,
        mre,
        mse,
        mape: if mape_n > 0 { mape_sum / mape_n as f64 } else { 0.0 },
        n_eval: n,
        excluded_near_zero: excluded,
    })
}

/// Default period (in time steps) of the synthetic seasonal signals.
pub const SYNTH_PERIOD: f64 = 24.0;

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic synthetic cubes, fully observed.
pub fn synth_gen(kind: SynthKind, shape: Shape3, seed: u64, noise: f64) -> Result<DataCube> {
    if noise < 0.0 {
        return Err(Error::Config("noise must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = shape;
    let mut values = Tensor::zeros(&[s.t, s.l, s.m]);
    match kind {
        SynthKind::Seasonal => {
            for l in 0..s.l {
                for m in 0..s.m {
                    let offset = rng.random_range(-1.0..1.0);
                    let amp = rng.random_range(0.5..1.5);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    for t in 0..s.t {
                        let p = flat_index(t, l, m, s)?;
                        values.data_mut()[p] = offset
                            + amp * (std::f64::consts::TAU * t as f64 / SYNTH_PERIOD + phase).sin();
                    }
                }
            }
        }
        SynthKind::CrossMeasurement => {
            if s.m < 2 {
                return Err(Error::Config(
                    "cross-measurement cubes need at least 2 measurements".into(),
                ));
            }
            for l in 0..s.l {
                // Smooth two-tone base for measurement 0; measurement 1 is a
                // lag-1 affine image of it (exact at zero noise, including
                // t = 0 via the closed-form base).
                let offset = rng.random_range(-0.5..0.5);
                let amp1 = rng.random_range(0.6..1.2);
                let amp2 = rng.random_range(0.2..0.5);
                let phase1 = rng.random_range(0.0..std::f64::consts::TAU);
                let phase2 = rng.random_range(0.0..std::f64::consts::TAU);
                let gain = rng.random_range(0.8..1.2);
                let shift = rng.random_range(-0.5..0.5);
                let base = |t: f64| {
                    offset
                        + amp1 * (std::f64::consts::TAU * t / SYNTH_PERIOD + phase1).sin()
                        + amp2 * (std::f64::consts::TAU * t / (SYNTH_PERIOD / 2.0) + phase2).sin()
                };
                for t in 0..s.t {
                    let p0 = flat_index(t, l, 0, s)?;
                    values.data_mut()[p0] = base(t as f64);
                    let p1 = flat_index(t, l, 1, s)?;
                    values.data_mut()[p1] = gain * base(t as f64 - 1.0) + shift;
                }
                for m in 2..s.m {
                    let amp = rng.random_range(0.5..1.5);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    for t in 0..s.t {
                        let p = flat_index(t, l, m, s)?;
                        values.data_mut()[p] =
                            amp * (std::f64::consts::TAU * t as f64 / SYNTH_PERIOD + phase).sin();
                    }
                }
            }
        }
        SynthKind::Spatial => {
            // First-order autoregression across the location index: each
            // location blends its neighbor's signal with a private wave, so
            // correlation decays with location distance.
            let rho: f64 = 0.8;
            let mut prev: Vec<f64> = Vec::new();
            for l in 0..s.l {
                let mut own = vec![0.0; s.t * s.m];
                for m in 0..s.m {
                    let amp = rng.random_range(0.5..1.5);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    for t in 0..s.t {
                        own[t * s.m + m] =
                            amp * (std::f64::consts::TAU * t as f64 / SYNTH_PERIOD + phase).sin();
                    }
                }
                let cur: Vec<f64> = if l == 0 {
                    own
                } else {
                    own.iter()
                        .zip(&prev)
                        .map(|(o, p)| rho * p + (1.0 - rho * rho).sqrt() * o)
                        .collect()
                };
                for t in 0..s.t {
                    for m in 0..s.m {
                        let p = flat_index(t, l, m, s)?;
                        values.data_mut()[p] = cur[t * s.m + m];
                    }
                }
                prev = cur;
            }
        }
    }
    if noise > 0.0 {
        for v in values.data_mut() {
            *v += noise * box_muller(&mut rng);
        }
    }
    DataCube::dense(s, values)
}
