//! Masked-imputation encoder: input embedding, a stack of identical
//! attention layers with residual connections and per-cell normalization, a
//! feed-forward output head, and the training loop.

use crate::attention::{
    attention_forward, init_attention_params, AttnDims, CapturedMaps, Fusion, ParamIds, Variant,
    CANONICAL_ORDER,
};
use crate::autograd::{GradSet, NodeId, Tape};
use crate::data::{denormalize_values, normalize, normalize_values, DataCube, Mask};
use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Training loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "rmse")]
    Rmse,
    #[serde(rename = "mae")]
    Mae,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "rmse+mae")]
    RmseMae,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(LossKind::Rmse),
            "mae" => Ok(LossKind::Mae),
            "mse" => Ok(LossKind::Mse),
            "rmse+mae" => Ok(LossKind::RmseMae),
            other => Err(Error::Config(format!(
                "unknown loss {other:?}; expected rmse|mae|mse|rmse+mae"
            ))),
        }
    }
}

/// Which cells the training loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainTarget {
    /// Observed-and-visible cells plus artificially removed ones (default).
    Both,
    /// Only cells the model can see (self-reconstruction).
    Visible,
    /// Only artificially removed cells with known truth.
    Removed,
}

/// Everything needed to build and train an encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub n_layers: usize,
    /// Hidden channel width.
    pub c: usize,
    /// Per-unit query/key and value widths.
    pub d: usize,
    pub v: usize,
    /// Per-dimension stream widths.
    pub d_t: usize,
    pub d_l: usize,
    pub d_m: usize,
    pub ff_hidden: usize,
    /// Attention sub-layers per independent stream.
    pub stream_depth: usize,
    /// Learned additive positional tables (off by default).
    pub positional: bool,
    /// Fixes the independent fusion weights instead of training them.
    pub freeze_fusion: Option<[f64; 3]>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Length of the consecutive-time training windows; also the time extent
    /// the model is built for.
    pub window_len_t: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub train_target: TrainTarget,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: Variant::Decomposed,
            n_layers: 2,
            c: 16,
            d: 16,
            v: 16,
            d_t: 16,
            d_l: 16,
            d_m: 16,
            ff_hidden: 32,
            stream_depth: 1,
            positional: false,
            freeze_fusion: None,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            window_len_t: 24,
            seed: 0,
            loss: LossKind::Rmse,
            train_target: TrainTarget::Both,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("c", self.c),
            ("d", self.d),
            ("v", self.v),
            ("d_t", self.d_t),
            ("d_l", self.d_l),
            ("d_m", self.d_m),
            ("ff_hidden", self.ff_hidden),
            ("stream_depth", self.stream_depth),
            ("window_len_t", self.window_len_t),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Named trainable tensors in a fixed registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    pub entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.size()).sum()
    }

    /// Registers every entry on a tape; returns name -> node handles.
    pub fn register_on(&self, tape: &mut Tape) -> Result<BTreeMap<String, NodeId>> {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.entries {
            ids.insert(name.clone(), tape.param(name, t.clone())?);
        }
        Ok(ids)
    }
}

const LN_EPS: f64 = 1e-12;

/// One training window: normalized zero-filled inputs, normalized truth, and
/// the loss mask, all over the window's `T x L x M` cells.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub values: Tensor,
    pub truth: Tensor,
    pub mask: Vec<bool>,
}

/// A cube prepared for training: the visible normalized input, the ground
/// truth expressed in the same normalization, and the training-loss mask.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub input: DataCube,
    pub truth_norm: Tensor,
    pub loss_cells: Vec<bool>,
}

/// Hides the removed cells, normalizes over what remains visible, and
/// expresses the ground truth in the same scale. The loss mask covers
/// originally observed cells filtered by `target`.
pub fn prepare_training(raw: &DataCube, removal: &Mask, target: TrainTarget) -> Result<TrainingSet> {
    if raw.normalized {
        return Err(Error::Contract("training expects a raw cube".into()));
    }
    if removal.shape != raw.shape {
        return Err(Error::Shape(format!(
            "removal mask shape {} does not match cube {}",
            removal.shape, raw.shape
        )));
    }
    let visible = crate::data::apply_removal(raw, removal)?;
    let input = normalize(&visible)?;
    let stats = input.stats.as_ref().expect("normalize sets stats");
    let truth_norm = normalize_values(&raw.values, stats)?;
    let loss_cells = (0..raw.shape.cells())
        .map(|i| {
            let observed = raw.observed[i];
            let removed = removal.removed[i];
            match target {
                TrainTarget::Both => observed,
                TrainTarget::Visible => observed && !removed,
                TrainTarget::Removed => observed && removed,
            }
        })
        .collect();
    Ok(TrainingSet {
        input,
        truth_norm,
        loss_cells,
    })
}

/// Root mean squared error over masked cells.
pub fn masked_rmse(pred: &Tensor, truth: &Tensor, mask: &[bool]) -> Result<f64> {
    if pred.shape() != truth.shape() || mask.len() != pred.size() {
        return Err(Error::Shape("masked_rmse operands must agree in shape".into()));
    }
    let n = mask.iter().filter(|&&b| b).count();
    if n == 0 {
        return Err(Error::Contract("masked_rmse over an empty mask".into()));
    }
    let mut acc = 0.0;
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            let e = pred.data()[i] - truth.data()[i];
            acc += e * e;
        }
    }
    Ok((acc / n as f64).sqrt())
}

/// Per-epoch loss trace and bookkeeping from a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub steps_per_epoch: usize,
    pub seed: u64,
}

/// Adam optimizer state (first/second moments per parameter).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        AdamState {
            m: params.entries.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.entries.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }

    pub fn apply(
        &mut self,
        params: &mut Params,
        grads: &GradSet,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (name, theta)) in params.entries.iter_mut().enumerate() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name:?}")))?;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..theta.size() {
                let gj = g.data()[j];
                m.data_mut()[j] = beta1 * m.data()[j] + (1.0 - beta1) * gj;
                v.data_mut()[j] = beta2 * v.data()[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m.data()[j] / bc1;
                let v_hat = v.data()[j] / bc2;
                theta.data_mut()[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// A configured encoder with its trainable parameters. The time extent is
/// the training window length; location/measurement extents come from the
/// data.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: EncoderConfig,
    pub shape: Shape3,
    pub params: Params,
}

impl Model {
    /// Initializes parameters for cubes with the given location and
    /// measurement extents; weights are seeded from the config.
    pub fn new(cfg: EncoderConfig, locations: usize, measurements: usize) -> Result<Model> {
        cfg.validate()?;
        let shape = Shape3::new(cfg.window_len_t, locations, measurements)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut entries: Vec<(String, Tensor)> = Vec::new();

        entries.push((
            "embed.w".into(),
            Tensor::from_fn(&[shape.m, cfg.c], |_| rng.random_range(-1.0..1.0)),
        ));
        // A random bias keeps zero-filled (missing) cells away from the
        // all-equal channel vector, which is a singular point of the
        // per-cell normalization.
        entries.push((
            "embed.b".into(),
            Tensor::from_fn(&[shape.m, cfg.c], |_| rng.random_range(-0.5..0.5)),
        ));
        if cfg.positional {
            for (name, n) in [("pos.t", shape.t), ("pos.l", shape.l), ("pos.m", shape.m)] {
                entries.push((
                    name.into(),
                    Tensor::from_fn(&[n, cfg.c], |_| rng.random_range(-0.1..0.1)),
                ));
            }
        }
        let dims = attn_dims(&cfg, shape);
        for layer in 0..cfg.n_layers {
            init_attention_params(
                &format!("enc{layer}.attn"),
                cfg.variant,
                &dims,
                match cfg.freeze_fusion {
                    Some(w) => Fusion::Frozen(w),
                    None => Fusion::Trainable,
                },
                &mut rng,
                &mut entries,
            )?;
            for norm in ["norm1", "norm2"] {
                entries.push((
                    format!("enc{layer}.{norm}.gamma"),
                    Tensor::zeros(&[cfg.c]).map(|_| 1.0),
                ));
                entries.push((format!("enc{layer}.{norm}.beta"), Tensor::zeros(&[cfg.c])));
            }
            let fan_c = 1.0 / (cfg.c as f64).sqrt();
            let fan_ff = 1.0 / (cfg.ff_hidden as f64).sqrt();
            entries.push((
                format!("enc{layer}.ff.w1"),
                Tensor::from_fn(&[cfg.c, cfg.ff_hidden], |_| rng.random_range(-fan_c..fan_c)),
            ));
            entries.push((format!("enc{layer}.ff.b1"), Tensor::zeros(&[cfg.ff_hidden])));
            entries.push((
                format!("enc{layer}.ff.w2"),
                Tensor::from_fn(&[cfg.ff_hidden, cfg.c], |_| rng.random_range(-fan_ff..fan_ff)),
            ));
            entries.push((format!("enc{layer}.ff.b2"), Tensor::zeros(&[cfg.c])));
        }
        let fan_c = 1.0 / (cfg.c as f64).sqrt();
        entries.push((
            "head.w".into(),
            Tensor::from_fn(&[cfg.c, 1], |_| rng.random_range(-fan_c..fan_c)),
        ));
        entries.push(("head.b".into(), Tensor::zeros(&[1])));

        Ok(Model {
            cfg,
            shape,
            params: Params { entries },
        })
    }

    fn fusion(&self) -> Fusion {
        match self.cfg.freeze_fusion {
            Some(w) => Fusion::Frozen(w),
            None => Fusion::Trainable,
        }
    }

    /// Records the full forward pass for one window on the tape: embedding,
    /// encoder layers, and the per-cell output head. Returns the normalized
    /// prediction (`T x L x M`) and the attention maps per layer.
    pub fn forward_window(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, NodeId>,
        window_values: &Tensor,
    ) -> Result<(NodeId, Vec<CapturedMaps>)> {
        let s = self.shape;
        if window_values.shape() != [s.t, s.l, s.m] {
            return Err(Error::Shape(format!(
                "window shape {:?} does not match model {s}",
                window_values.shape()
            )));
        }
        let p = ParamIds(ids);
        let dims = attn_dims(&self.cfg, s);
        let mut h = tape.embed(window_values, p.get("embed.w")?, p.get("embed.b")?)?;
        if self.cfg.positional {
            h = tape.add_positional(h, p.get("pos.t")?, p.get("pos.l")?, p.get("pos.m")?)?;
        }
        let mut all_maps = Vec::with_capacity(self.cfg.n_layers);
        for layer in 0..self.cfg.n_layers {
            let prefix = format!("enc{layer}.attn");
            let (attn, maps) = attention_forward(
                tape,
                &p,
                &prefix,
                self.cfg.variant,
                &dims,
                h,
                CANONICAL_ORDER,
                self.fusion(),
            )?;
            all_maps.push(maps);
            let res1 = tape.add(h, attn)?;
            let h1 = tape.layer_norm(
                res1,
                p.get(&format!("enc{layer}.norm1.gamma"))?,
                p.get(&format!("enc{layer}.norm1.beta"))?,
                LN_EPS,
            )?;
            let flat = tape.reshape(h1, &[s.cells(), self.cfg.c])?;
            let z1 = tape.matmul(flat, p.get(&format!("enc{layer}.ff.w1"))?)?;
            let z1 = tape.add_bias(z1, p.get(&format!("enc{layer}.ff.b1"))?)?;
            let a1 = tape.relu(z1)?;
            let z2 = tape.matmul(a1, p.get(&format!("enc{layer}.ff.w2"))?)?;
            let z2 = tape.add_bias(z2, p.get(&format!("enc{layer}.ff.b2"))?)?;
            let ff = tape.reshape(z2, &[s.t, s.l, s.m, self.cfg.c])?;
            let res2 = tape.add(h1, ff)?;
            h = tape.layer_norm(
                res2,
                p.get(&format!("enc{layer}.norm2.gamma"))?,
                p.get(&format!("enc{layer}.norm2.beta"))?,
                LN_EPS,
            )?;
            if !tape.value(h)?.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activations after encoder layer {layer}"
                )));
            }
        }
        let flat = tape.reshape(h, &[s.cells(), self.cfg.c])?;
        let y = tape.matmul(flat, p.get("head.w")?)?;
        let y = tape.add_bias(y, p.get("head.b")?)?;
        let pred = tape.reshape(y, &[s.t, s.l, s.m])?;
        Ok((pred, all_maps))
    }

    /// Records the configured training loss for one window.
    pub fn build_loss(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, NodeId>,
        batch: &WindowBatch,
    ) -> Result<NodeId> {
        let (pred, _) = self.forward_window(tape, ids, &batch.values)?;
        match self.cfg.loss {
            LossKind::Mse => tape.masked_mse(pred, &batch.truth, &batch.mask),
            LossKind::Rmse => {
                let mse = tape.masked_mse(pred, &batch.truth, &batch.mask)?;
                tape.sqrt(mse)
            }
            LossKind::Mae => tape.masked_mae(pred, &batch.truth, &batch.mask),
            LossKind::RmseMae => {
                let mse = tape.masked_mse(pred, &batch.truth, &batch.mask)?;
                let rmse = tape.sqrt(mse)?;
                let mae = tape.masked_mae(pred, &batch.truth, &batch.mask)?;
                let sum = tape.add(rmse, mae)?;
                tape.scale(sum, 0.5)
            }
        }
    }

    /// Cuts the window starting at `start` out of a training set.
    pub fn window_at(&self, data: &TrainingSet, start: usize) -> Result<WindowBatch> {
        let s = data.input.shape;
        let w = self.cfg.window_len_t;
        if start + w > s.t {
            return Err(Error::Index(format!(
                "window [{start}, {}) exceeds {} time stamps",
                start + w,
                s.t
            )));
        }
        let row = s.l * s.m;
        let lo = start * row;
        let hi = (start + w) * row;
        Ok(WindowBatch {
            values: Tensor::from_vec(&[w, s.l, s.m], data.input.values.data()[lo..hi].to_vec())?,
            truth: Tensor::from_vec(&[w, s.l, s.m], data.truth_norm.data()[lo..hi].to_vec())?,
            mask: data.loss_cells[lo..hi].to_vec(),
        })
    }

    /// Trains in place: every step samples a window of consecutive time
    /// stamps, computes the configured loss over the masked cells, and takes
    /// one Adam step. Deterministic for a fixed seed.
    pub fn train(&mut self, data: &TrainingSet) -> Result<TrainReport> {
        let s = data.input.shape;
        if s.l != self.shape.l || s.m != self.shape.m {
            return Err(Error::Shape(format!(
                "training cube {} does not match model {}",
                s, self.shape
            )));
        }
        let w = self.cfg.window_len_t;
        if w > s.t {
            return Err(Error::Shape(format!(
                "window length {w} exceeds the cube's {} time stamps",
                s.t
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let steps_per_epoch = s.t.div_ceil(w);
        let mut adam = AdamState::new(&self.params);
        let mut epoch_loss = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let mut losses = Vec::with_capacity(steps_per_epoch);
            for _ in 0..steps_per_epoch {
                let batch = self.sample_window(data, &mut rng)?;
                let mut tape = Tape::new();
                let ids = self.params.register_on(&mut tape)?;
                let loss = self.build_loss(&mut tape, &ids, &batch)?;
                losses.push(tape.value(loss)?.data()[0]);
                let grads = tape.backward(loss)?;
                adam.apply(
                    &mut self.params,
                    &grads,
                    self.cfg.learning_rate,
                    self.cfg.beta1,
                    self.cfg.beta2,
                    self.cfg.epsilon,
                )?;
            }
            epoch_loss.push(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        Ok(TrainReport {
            epoch_loss,
            steps_per_epoch,
            seed: self.cfg.seed,
        })
    }

    const WINDOW_RETRIES: usize = 100;

    fn sample_window(&self, data: &TrainingSet, rng: &mut ChaCha8Rng) -> Result<WindowBatch> {
        let s = data.input.shape;
        let w = self.cfg.window_len_t;
        for _ in 0..Self::WINDOW_RETRIES {
            let start = if s.t == w { 0 } else { rng.random_range(0..=s.t - w) };
            let batch = self.window_at(data, start)?;
            if batch.mask.iter().any(|&b| b) {
                return Ok(batch);
            }
        }
        Err(Error::Contract(format!(
            "no window with trainable cells found after {} tries",
            Self::WINDOW_RETRIES
        )))
    }

    /// Reconstructs every cell of a normalized cube and denormalizes with
    /// the cube's own stats. Cubes longer than the model window are imputed
    /// in consecutive windows (a final overlapping window covers the tail;
    /// later windows win on overlap).
    pub fn impute(&self, cube: &DataCube) -> Result<DataCube> {
        if !cube.normalized {
            return Err(Error::Contract("impute expects a normalized cube".into()));
        }
        let stats = cube
            .stats
            .as_ref()
            .ok_or_else(|| Error::Contract("normalized cube is missing its stats".into()))?;
        let s = cube.shape;
        if s.l != self.shape.l || s.m != self.shape.m {
            return Err(Error::Shape(format!(
                "cube {} does not match model {}",
                s, self.shape
            )));
        }
        let w = self.cfg.window_len_t;
        if s.t < w {
            return Err(Error::Shape(format!(
                "cube has {} time stamps, model window needs {w}",
                s.t
            )));
        }
        let mut pred = Tensor::zeros(&[s.t, s.l, s.m]);
        let row = s.l * s.m;
        let mut starts: Vec<usize> = (0..).map(|i| i * w).take_while(|&st| st + w <= s.t).collect();
        if starts.last().map(|&st| st + w) != Some(s.t) {
            starts.push(s.t - w);
        }
        for start in starts {
            let lo = start * row;
            let hi = (start + w) * row;
            let window =
                Tensor::from_vec(&[w, s.l, s.m], cube.values.data()[lo..hi].to_vec())?;
            let mut tape = Tape::new();
            let ids = self.params.register_on(&mut tape)?;
            let (out, _) = self.forward_window(&mut tape, &ids, &window)?;
            pred.data_mut()[lo..hi].copy_from_slice(tape.value(out)?.data());
        }
        let values = denormalize_values(&pred, stats)?;
        DataCube::dense(s, values)
    }

    /// Runs the first window of a normalized cube and returns each layer's
    /// attention maps as plain tensors, labeled for export.
    pub fn export_attention(&self, cube: &DataCube) -> Result<Vec<Vec<(String, Tensor)>>> {
        if !cube.normalized {
            return Err(Error::Contract("export expects a normalized cube".into()));
        }
        let s = cube.shape;
        if s.l != self.shape.l || s.m != self.shape.m || s.t < self.cfg.window_len_t {
            return Err(Error::Shape(format!(
                "cube {} does not match model {}",
                s, self.shape
            )));
        }
        let w = self.cfg.window_len_t;
        let row = s.l * s.m;
        let window = Tensor::from_vec(&[w, s.l, s.m], cube.values.data()[..w * row].to_vec())?;
        let mut tape = Tape::new();
        let ids = self.params.register_on(&mut tape)?;
        let (_, layer_maps) = self.forward_window(&mut tape, &ids, &window)?;
        layer_maps
            .into_iter()
            .map(|maps| {
                maps.entries
                    .iter()
                    .map(|(label, id)| Ok((label.clone(), tape.value(*id)?.clone())))
                    .collect()
            })
            .collect()
    }
}

fn attn_dims(cfg: &EncoderConfig, shape: Shape3) -> AttnDims {
    AttnDims {
        shape,
        c: cfg.c,
        d: cfg.d,
        v: cfg.v,
        d_t: cfg.d_t,
        d_l: cfg.d_l,
        d_m: cfg.d_m,
        stream_depth: cfg.stream_depth,
    }
}

const CHECKPOINT_MAGIC: &str = "CDSA1";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    magic: String,
    config: EncoderConfig,
    locations: usize,
    measurements: usize,
    params: Vec<ParamRecord>,
}

/// Writes a self-describing checkpoint (magic `CDSA1`, config, named
/// parameter tensors). The JSON body round-trips every f64 bitwise.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let doc = CheckpointDoc {
        magic: CHECKPOINT_MAGIC.into(),
        config: model.cfg.clone(),
        locations: model.shape.l,
        measurements: model.shape.m,
        params: model
            .params
            .entries
            .iter()
            .map(|(name, t)| ParamRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let body = serde_json::to_string(&doc)
        .map_err(|e| Error::Format(format!("checkpoint serialization: {e}")))?;
    std::fs::write(path, body)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let body = std::fs::read_to_string(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&body)
        .map_err(|e| Error::Format(format!("checkpoint parse: {e}")))?;
    if doc.magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {CHECKPOINT_MAGIC:?}",
            doc.magic
        )));
    }
    let fresh = Model::new(doc.config.clone(), doc.locations, doc.measurements)?;
    let mut entries = Vec::with_capacity(doc.params.len());
    for rec in doc.params {
        entries.push((rec.name.clone(), Tensor::from_vec(&rec.shape, rec.data)?));
    }
    let loaded = Params { entries };
    let fresh_names: Vec<&String> = fresh.params.entries.iter().map(|(n, _)| n).collect();
    let loaded_names: Vec<&String> = loaded.entries.iter().map(|(n, _)| n).collect();
    if fresh_names != loaded_names {
        return Err(Error::Format(
            "checkpoint parameters do not match the configured architecture".into(),
        ));
    }
    Ok(Model {
        cfg: fresh.cfg,
        shape: fresh.shape,
        params: loaded,
    })
}
