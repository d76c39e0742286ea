//! The four cross-dimensional self-attention variants as differentiable
//! layers over a `T x L x M x C` hidden state.
//!
//! All variants share the layer contract: output shape equals input shape,
//! and every attention map they produce is row-stochastic. The decomposed
//! route never materializes the joint map; it applies the three
//! dimension-specific maps as sequential per-axis products, which agrees
//! with the joint (Kronecker) application in any order.

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Dim, Shape3, Tensor, JOINT_CAPACITY};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How the attention crosses the cube dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Independent,
    Joint,
    Shared,
    Decomposed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Independent,
        Variant::Joint,
        Variant::Shared,
        Variant::Decomposed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Independent => "independent",
            Variant::Joint => "joint",
            Variant::Shared => "shared",
            Variant::Decomposed => "decomposed",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Variant::Independent),
            "joint" => Ok(Variant::Joint),
            "shared" => Ok(Variant::Shared),
            "decomposed" => Ok(Variant::Decomposed),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected independent|joint|shared|decomposed"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometry of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub shape: Shape3,
    /// Hidden channel width carried through the encoder.
    pub c: usize,
    /// Per-unit query/key width (joint, shared).
    pub d: usize,
    /// Per-unit value width (joint, shared, decomposed).
    pub v: usize,
    /// Per-dimension stream query/key widths.
    pub d_t: usize,
    pub d_l: usize,
    pub d_m: usize,
    /// Attention sub-layers per independent stream.
    pub stream_depth: usize,
}

impl AttnDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c", self.c),
            ("d", self.d),
            ("v", self.v),
            ("d_t", self.d_t),
            ("d_l", self.d_l),
            ("d_m", self.d_m),
            ("stream_depth", self.stream_depth),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("attention width {name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Width of a flattened row over `dim`: product of the other extents
    /// times the channel width.
    pub fn row_width(&self, dim: Dim) -> usize {
        self.shape.cells() / self.shape.extent(dim) * self.c
    }

    pub fn stream_width(&self, dim: Dim) -> usize {
        match dim {
            Dim::Time => self.d_t,
            Dim::Location => self.d_l,
            Dim::Measurement => self.d_m,
        }
    }
}

/// The three dimension-specific maps of one layer, as plain tensors.
#[derive(Debug, Clone)]
pub struct DimAttentionMaps {
    pub a_t: Tensor,
    pub a_l: Tensor,
    pub a_m: Tensor,
}

impl DimAttentionMaps {
    pub fn get(&self, dim: Dim) -> &Tensor {
        match dim {
            Dim::Time => &self.a_t,
            Dim::Location => &self.a_l,
            Dim::Measurement => &self.a_m,
        }
    }

    /// Every row must sum to one with nonnegative entries.
    pub fn validate_row_stochastic(&self, tol: f64) -> Result<()> {
        for dim in Dim::ALL {
            check_row_stochastic(self.get(dim), tol)
                .map_err(|e| Error::Numeric(format!("map over {dim:?}: {e}")))?;
        }
        Ok(())
    }
}

pub fn check_row_stochastic(map: &Tensor, tol: f64) -> Result<()> {
    let (n, m) = map.as_matrix_dims()?;
    for i in 0..n {
        let row = &map.data()[i * m..(i + 1) * m];
        if row.iter().any(|&v| v < -tol) {
            return Err(Error::Numeric(format!("row {i} has a negative entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Numeric(format!("row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Attention maps captured during a forward pass, labeled for export.
/// Labels are `a_t`/`a_l`/`a_m` for dimension maps (suffixed `.s<k>` for
/// deeper independent streams) and `joint` for the full-cube map.
#[derive(Debug, Clone, Default)]
pub struct CapturedMaps {
    pub entries: Vec<(String, NodeId)>,
}

impl CapturedMaps {
    fn push(&mut self, label: impl Into<String>, id: NodeId) {
        self.entries.push((label.into(), id));
    }

    /// Extracts the three dimension maps when present under plain labels.
    pub fn dim_maps(&self, tape: &Tape) -> Result<DimAttentionMaps> {
        let find = |label: &str| -> Result<Tensor> {
            self.entries
                .iter()
                .find(|(l, _)| l == label)
                .map(|(_, id)| tape.value(*id).cloned())
                .transpose()?
                .ok_or_else(|| Error::Contract(format!("no captured map labeled {label:?}")))
        };
        Ok(DimAttentionMaps {
            a_t: find("a_t")?,
            a_l: find("a_l")?,
            a_m: find("a_m")?,
        })
    }
}

/// Resolves parameter names registered on a tape.
pub struct ParamIds<'a>(pub &'a BTreeMap<String, NodeId>);

impl ParamIds<'_> {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0.get(name).copied().ok_or_else(|| {
            Error::Contract(format!(
                "parameter {name:?} is not registered; params do not match the requested variant"
            ))
        })
    }
}

fn fan_in_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn push_affine(
    out: &mut Vec<(String, Tensor)>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_w: usize,
    out_w: usize,
) {
    out.push((format!("{name}.w"), fan_in_tensor(rng, &[in_w, out_w], in_w)));
    out.push((format!("{name}.b"), Tensor::zeros(&[out_w])));
}

/// Creates the trainable tensors of one attention layer under `prefix`.
///
/// With `fusion: Fusion::Frozen(..)` the independent variant's fusion
/// weights are not created (they enter the forward pass as constants), and
/// neither are the parameters of streams frozen at weight zero: such a
/// stream contributes exactly zero output and zero gradient, so it is
/// omitted from the model entirely.
pub fn init_attention_params(
    prefix: &str,
    variant: Variant,
    dims: &AttnDims,
    fusion: Fusion,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<(String, Tensor)>,
) -> Result<()> {
    dims.validate()?;
    match variant {
        Variant::Joint | Variant::Shared => {
            push_affine(out, rng, &format!("{prefix}.unit.q"), dims.c, dims.d);
            push_affine(out, rng, &format!("{prefix}.unit.k"), dims.c, dims.d);
            push_affine(out, rng, &format!("{prefix}.unit.v"), dims.c, dims.v);
            push_affine(out, rng, &format!("{prefix}.unit.o"), dims.v, dims.c);
        }
        Variant::Decomposed => {
            for dim in Dim::ALL {
                let row = dims.row_width(dim);
                let w = dims.stream_width(dim);
                let d = dim.label();
                push_affine(out, rng, &format!("{prefix}.{d}.q"), row, w);
                push_affine(out, rng, &format!("{prefix}.{d}.k"), row, w);
            }
            push_affine(out, rng, &format!("{prefix}.unit.v"), dims.c, dims.v);
            push_affine(out, rng, &format!("{prefix}.unit.o"), dims.v, dims.c);
        }
        Variant::Independent => {
            for (i, dim) in Dim::ALL.into_iter().enumerate() {
                if let Fusion::Frozen(w) = fusion {
                    if w[i] == 0.0 {
                        continue;
                    }
                }
                let row = dims.row_width(dim);
                let w = dims.stream_width(dim);
                let d = dim.label();
                for s in 0..dims.stream_depth {
                    push_affine(out, rng, &format!("{prefix}.{d}.s{s}.q"), row, w);
                    push_affine(out, rng, &format!("{prefix}.{d}.s{s}.k"), row, w);
                    push_affine(out, rng, &format!("{prefix}.{d}.s{s}.v"), row, row);
                    push_affine(out, rng, &format!("{prefix}.{d}.s{s}.o"), row, row);
                }
            }
            if matches!(fusion, Fusion::Trainable) {
                for dim in Dim::ALL {
                    out.push((
                        format!("{prefix}.fusion.alpha_{}", dim.label()),
                        Tensor::scalar(1.0 / 3.0),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn affine(tape: &mut Tape, ids: &ParamIds, name: &str, x: NodeId) -> Result<NodeId> {
    let w = ids.get(&format!("{name}.w"))?;
    let b = ids.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Builds the row-stochastic map over one dimension from flattened rows:
/// reshape, affine queries/keys, scaled dot-product scores, row softmax.
pub fn attn_map_for_dim(
    tape: &mut Tape,
    ids: &ParamIds,
    qk_prefix: &str,
    h: NodeId,
    dim: Dim,
) -> Result<NodeId> {
    let rows = tape.dim_rows(h, dim)?;
    let q = affine(tape, ids, &format!("{qk_prefix}.q"), rows)?;
    let k = affine(tape, ids, &format!("{qk_prefix}.k"), rows)?;
    let s = tape.scaled_scores(q, k)?;
    tape.softmax_rows(s)
}

/// Per-unit value projection `C -> v` applied cell-wise.
fn unit_values(
    tape: &mut Tape,
    ids: &ParamIds,
    prefix: &str,
    h: NodeId,
    dims: &AttnDims,
) -> Result<NodeId> {
    let s = dims.shape;
    let flat = tape.reshape(h, &[s.cells(), dims.c])?;
    let v = affine(tape, ids, &format!("{prefix}.unit.v"), flat)?;
    tape.reshape(v, &[s.t, s.l, s.m, dims.v])
}

/// Per-unit output projection `v -> C` applied cell-wise.
fn unit_output(
    tape: &mut Tape,
    ids: &ParamIds,
    prefix: &str,
    x: NodeId,
    dims: &AttnDims,
) -> Result<NodeId> {
    let s = dims.shape;
    let flat = tape.reshape(x, &[s.cells(), dims.v])?;
    let o = affine(tape, ids, &format!("{prefix}.unit.o"), flat)?;
    tape.reshape(o, &[s.t, s.l, s.m, dims.c])
}

/// Decomposed attention: dimension-specific maps built from flattened rows,
/// applied to the per-unit value tensor as sequential per-axis products in
/// the given order. The output does not depend on the order.
pub fn decomposed_forward(
    tape: &mut Tape,
    ids: &ParamIds,
    prefix: &str,
    dims: &AttnDims,
    h: NodeId,
    order: [Dim; 3],
) -> Result<(NodeId, CapturedMaps)> {
    let mut maps = CapturedMaps::default();
    let mut by_dim = BTreeMap::new();
    for dim in Dim::ALL {
        let map = attn_map_for_dim(tape, ids, &format!("{prefix}.{}", dim.label()), h, dim)?;
        maps.push(format!("a_{}", dim.label()), map);
        by_dim.insert(dim.label(), map);
    }
    let mut x = unit_values(tape, ids, prefix, h, dims)?;
    for dim in order {
        x = tape.mode_apply(by_dim[dim.label()], x, dim)?;
    }
    let out = unit_output(tape, ids, prefix, x, dims)?;
    Ok((out, maps))
}

/// Joint attention: one `TLM x TLM` map over all flattened cells. Guarded to
/// small cubes since the map is materialized.
pub fn joint_forward(
    tape: &mut Tape,
    ids: &ParamIds,
    prefix: &str,
    dims: &AttnDims,
    h: NodeId,
) -> Result<(NodeId, CapturedMaps)> {
    let s = dims.shape;
    let cells = s.cells();
    if cells > JOINT_CAPACITY {
        return Err(Error::Capacity(format!(
            "joint attention over {cells} cells would need a {cells}x{cells} map; cap is {JOINT_CAPACITY}"
        )));
    }
    let flat = tape.reshape(h, &[cells, dims.c])?;
    let q = affine(tape, ids, &format!("{prefix}.unit.q"), flat)?;
    let k = affine(tape, ids, &format!("{prefix}.unit.k"), flat)?;
    let scores = tape.scaled_scores(q, k)?;
    let map = tape.softmax_rows(scores)?;
    let mut maps = CapturedMaps::default();
    maps.push("joint", map);
    let vals = affine(tape, ids, &format!("{prefix}.unit.v"), flat)?;
    let mixed = tape.matmul(map, vals)?;
    let o = affine(tape, ids, &format!("{prefix}.unit.o"), mixed)?;
    let out = tape.reshape(o, &[s.t, s.l, s.m, dims.c])?;
    Ok((out, maps))
}

/// Shared attention: per-unit queries/keys reshaped per dimension to build
/// all three maps (scores scaled by the square root of the full row length),
/// applied sequentially to the per-unit values.
pub fn shared_forward(
    tape: &mut Tape,
    ids: &ParamIds,
    prefix: &str,
    dims: &AttnDims,
    h: NodeId,
) -> Result<(NodeId, CapturedMaps)> {
    let s = dims.shape;
    let flat = tape.reshape(h, &[s.cells(), dims.c])?;
    let q = affine(tape, ids, &format!("{prefix}.unit.q"), flat)?;
    let k = affine(tape, ids, &format!("{prefix}.unit.k"), flat)?;
    let q4 = tape.reshape(q, &[s.t, s.l, s.m, dims.d])?;
    let k4 = tape.reshape(k, &[s.t, s.l, s.m, dims.d])?;
    let mut maps = CapturedMaps::default();
    let mut x = unit_values(tape, ids, prefix, h, dims)?;
    for dim in Dim::ALL {
        let qd = tape.dim_rows(q4, dim)?;
        let kd = tape.dim_rows(k4, dim)?;
        let scores = tape.scaled_scores(qd, kd)?;
        let map = tape.softmax_rows(scores)?;
        maps.push(format!("a_{}", dim.label()), map);
        x = tape.mode_apply(map, x, dim)?;
    }
    let out = unit_output(tape, ids, prefix, x, dims)?;
    Ok((out, maps))
}

/// Fusion weights for the independent variant: trainable scalars by default,
/// or fixed constants for ablations.
#[derive(Debug, Clone, Copy)]
pub enum Fusion {
    Trainable,
    Frozen([f64; 3]),
}

/// Independent attention: one self-attention stream per dimension over its
/// flattened rows, outputs fused by per-stream scalar weights.
pub fn independent_forward(
    tape: &mut Tape,
    ids: &ParamIds,
    prefix: &str,
    dims: &AttnDims,
    h: NodeId,
    fusion: Fusion,
) -> Result<(NodeId, CapturedMaps)> {
    let s = dims.shape;
    let mut maps = CapturedMaps::default();
    let mut fused: Option<NodeId> = None;
    for (i, dim) in Dim::ALL.into_iter().enumerate() {
        // A stream frozen at weight zero contributes exactly zero output and
        // receives zero gradient, so it need not be evaluated at all.
        if let Fusion::Frozen(w) = fusion {
            if w[i] == 0.0 {
                continue;
            }
        }
        let d = dim.label();
        let mut rows = tape.dim_rows(h, dim)?;
        for sub in 0..dims.stream_depth {
            let sp = format!("{prefix}.{d}.s{sub}");
            let q = affine(tape, ids, &format!("{sp}.q"), rows)?;
            let k = affine(tape, ids, &format!("{sp}.k"), rows)?;
            let scores = tape.scaled_scores(q, k)?;
            let map = tape.softmax_rows(scores)?;
            let label = if dims.stream_depth == 1 {
                format!("a_{d}")
            } else {
                format!("a_{d}.s{sub}")
            };
            maps.push(label, map);
            let vals = affine(tape, ids, &format!("{sp}.v"), rows)?;
            let mixed = tape.matmul(map, vals)?;
            rows = affine(tape, ids, &format!("{sp}.o"), mixed)?;
        }
        let stream = tape.dim_rows_inv(rows, dim, s, dims.c)?;
        let weighted = match fusion {
            Fusion::Trainable => {
                let alpha = ids.get(&format!("{prefix}.fusion.alpha_{d}"))?;
                tape.scale_by_scalar(stream, alpha)?
            }
            Fusion::Frozen(w) => tape.scale(stream, w[i])?,
        };
        fused = Some(match fused {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let out = match fused {
        Some(id) => id,
        // Every stream frozen at zero.
        None => tape.constant(Tensor::zeros(&[s.t, s.l, s.m, dims.c])),
    };
    Ok((out, maps))
}

/// Dispatches to the variant's forward pass.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    tape: &mut Tape,
    ids: &ParamIds,
    prefix: &str,
    variant: Variant,
    dims: &AttnDims,
    h: NodeId,
    order: [Dim; 3],
    fusion: Fusion,
) -> Result<(NodeId, CapturedMaps)> {
    let expect = [dims.shape.t, dims.shape.l, dims.shape.m, dims.c];
    if tape.value(h)?.shape() != expect {
        return Err(Error::Shape(format!(
            "attention input shape {:?} does not match dims {} with {} channels",
            tape.value(h)?.shape(),
            dims.shape,
            dims.c
        )));
    }
    match variant {
        Variant::Decomposed => decomposed_forward(tape, ids, prefix, dims, h, order),
        Variant::Joint => joint_forward(tape, ids, prefix, dims, h),
        Variant::Shared => shared_forward(tape, ids, prefix, dims, h),
        Variant::Independent => independent_forward(tape, ids, prefix, dims, h, fusion),
    }
}

/// Canonical application order; any permutation yields the same output.
pub const CANONICAL_ORDER: [Dim; 3] = [Dim::Time, Dim::Location, Dim::Measurement];

/// All six application orders, for the order-independence checks.
pub const ALL_ORDERS: [[Dim; 3]; 6] = [
    [Dim::Time, Dim::Location, Dim::Measurement],
    [Dim::Time, Dim::Measurement, Dim::Location],
    [Dim::Location, Dim::Time, Dim::Measurement],
    [Dim::Location, Dim::Measurement, Dim::Time],
    [Dim::Measurement, Dim::Time, Dim::Location],
    [Dim::Measurement, Dim::Location, Dim::Time],
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kron3;
    use rand::SeedableRng;

    fn dims(t: usize, l: usize, m: usize, c: usize) -> AttnDims {
        AttnDims {
            shape: Shape3::new(t, l, m).unwrap(),
            c,
            d: 3,
            v: 3,
            d_t: 2,
            d_l: 2,
            d_m: 2,
            stream_depth: 1,
        }
    }

    struct Layer {
        params: Vec<(String, Tensor)>,
    }

    impl Layer {
        fn new(variant: Variant, dims: &AttnDims, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = Vec::new();
            init_attention_params("attn", variant, dims, Fusion::Trainable, &mut rng, &mut params).unwrap();
            Layer { params }
        }

        fn zero_qk(mut self) -> Self {
            for (name, t) in &mut self.params {
                if name.contains(".q.") || name.contains(".k.") {
                    *t = Tensor::zeros(t.shape());
                }
            }
            self
        }

        fn run(
            &self,
            variant: Variant,
            dims: &AttnDims,
            h: &Tensor,
            order: [Dim; 3],
            fusion: Fusion,
        ) -> (Tensor, Vec<(String, Tensor)>) {
            let mut tape = Tape::new();
            let mut ids = BTreeMap::new();
            for (n, t) in &self.params {
                ids.insert(n.clone(), tape.param(n, t.clone()).unwrap());
            }
            let hid = tape.constant(h.clone());
            let (out, maps) = attention_forward(
                &mut tape,
                &ParamIds(&ids),
                "attn",
                variant,
                dims,
                hid,
                order,
                fusion,
            )
            .unwrap();
            let maps = maps
                .entries
                .iter()
                .map(|(l, id)| (l.clone(), tape.value(*id).unwrap().clone()))
                .collect();
            (tape.value(out).unwrap().clone(), maps)
        }
    }

    fn random_hidden(dims: &AttnDims, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[dims.shape.t, dims.shape.l, dims.shape.m, dims.c], |_| {
            rng.random_range(-1.0..1.0)
        })
    }

    #[test]
    fn map_for_dim_zero_weights_is_uniform() {
        let d = dims(3, 2, 2, 2);
        let layer = Layer::new(Variant::Decomposed, &d, 1).zero_qk();
        let h = random_hidden(&d, 2);
        let (_, maps) = layer.run(Variant::Decomposed, &d, &h, CANONICAL_ORDER, Fusion::Trainable);
        for (label, map) in &maps {
            let n = map.shape()[0];
            for &v in map.data() {
                assert!((v - 1.0 / n as f64).abs() < 1e-15, "{label} not uniform");
            }
        }
    }

    #[test]
    fn map_for_extent_one_is_identity() {
        let d = dims(1, 1, 1, 2);
        let layer = Layer::new(Variant::Decomposed, &d, 3);
        let h = random_hidden(&d, 4);
        let (_, maps) = layer.run(Variant::Decomposed, &d, &h, CANONICAL_ORDER, Fusion::Trainable);
        for (_, map) in &maps {
            assert_eq!(map.data(), &[1.0]);
        }
    }

    #[test]
    fn maps_are_row_stochastic_for_every_variant() {
        let d = dims(3, 2, 2, 2);
        let h = random_hidden(&d, 5);
        for variant in Variant::ALL {
            let layer = Layer::new(variant, &d, 6);
            let (out, maps) = layer.run(variant, &d, &h, CANONICAL_ORDER, Fusion::Trainable);
            assert_eq!(out.shape(), h.shape(), "{variant} changed the shape");
            for (label, map) in &maps {
                check_row_stochastic(map, 1e-12)
                    .unwrap_or_else(|e| panic!("{variant}/{label}: {e}"));
            }
        }
    }

    #[test]
    fn decomposed_is_order_independent() {
        let d = dims(3, 2, 2, 2);
        let layer = Layer::new(Variant::Decomposed, &d, 7);
        let h = random_hidden(&d, 8);
        let (base, _) = layer.run(Variant::Decomposed, &d, &h, CANONICAL_ORDER, Fusion::Trainable);
        for order in ALL_ORDERS {
            let (out, _) = layer.run(Variant::Decomposed, &d, &h, order, Fusion::Trainable);
            assert!(out.max_abs_diff(&base) < 1e-10, "order {order:?} diverged");
        }
    }

    #[test]
    fn decomposed_matches_joint_application_of_its_maps() {
        // Random small cubes (up to 16 cells): the decomposed output must
        // equal applying the materialized joint map to the flattened values.
        use rand::SeedableRng;
        let mut shape_rng = ChaCha8Rng::seed_from_u64(99);
        for instance in 0..8u64 {
            let (t, l, m) = loop {
                let t = shape_rng.random_range(1..=3);
                let l = shape_rng.random_range(1..=3);
                let m = shape_rng.random_range(1..=3);
                if t * l * m <= 16 {
                    break (t, l, m);
                }
            };
            let d = dims(t, l, m, 2);
            let layer = Layer::new(Variant::Decomposed, &d, 900 + instance);
            let h = random_hidden(&d, 910 + instance);
            let (out, maps) =
                layer.run(Variant::Decomposed, &d, &h, CANONICAL_ORDER, Fusion::Trainable);

            let find = |l: &str| maps.iter().find(|(n, _)| n == l).unwrap().1.clone();
            let triple = DimAttentionMaps {
                a_t: find("a_t"),
                a_l: find("a_l"),
                a_m: find("a_m"),
            };
            triple.validate_row_stochastic(1e-12).unwrap();
            let joint = kron3(&triple.a_t, &triple.a_l, &triple.a_m).unwrap();

            // Recompute the value/output path by hand on plain tensors.
            let get = |n: &str| layer.params.iter().find(|(p, _)| p == n).unwrap().1.clone();
            let cells = d.shape.cells();
            let flat = h.reshaped(&[cells, d.c]).unwrap();
            let mut vals = flat.matmul(&get("attn.unit.v.w")).unwrap();
            let bv = get("attn.unit.v.b");
            for i in 0..cells {
                for j in 0..d.v {
                    vals.data_mut()[i * d.v + j] += bv.data()[j];
                }
            }
            let mixed = joint.matmul(&vals).unwrap();
            let mut o = mixed.matmul(&get("attn.unit.o.w")).unwrap();
            let bo = get("attn.unit.o.b");
            for i in 0..cells {
                for j in 0..d.c {
                    o.data_mut()[i * d.c + j] += bo.data()[j];
                }
            }
            let out_flat = out.reshaped(&[cells, d.c]).unwrap();
            let diff = out_flat.max_abs_diff(&o);
            assert!(diff < 1e-12, "instance {instance} ({t}x{l}x{m}): diff {diff}");
        }
    }

    #[test]
    fn joint_degenerate_and_uniform_cases() {
        // Single-cell cube: the map is [[1]] and the layer reduces to the
        // output projection of the value projection.
        let d = dims(1, 1, 1, 2);
        let layer = Layer::new(Variant::Joint, &d, 11);
        let h = random_hidden(&d, 12);
        let (out, maps) = layer.run(Variant::Joint, &d, &h, CANONICAL_ORDER, Fusion::Trainable);
        assert_eq!(maps[0].1.data(), &[1.0]);
        let get = |n: &str| layer.params.iter().find(|(p, _)| p == n).unwrap().1.clone();
        let flat = h.reshaped(&[1, 2]).unwrap();
        let mut vals = flat.matmul(&get("attn.unit.v.w")).unwrap();
        for (j, dv) in vals.data_mut().iter_mut().enumerate() {
            *dv += get("attn.unit.v.b").data()[j];
        }
        let mut o = vals.matmul(&get("attn.unit.o.w")).unwrap();
        for (j, dv) in o.data_mut().iter_mut().enumerate() {
            *dv += get("attn.unit.o.b").data()[j];
        }
        assert!(out.reshaped(&[1, 2]).unwrap().max_abs_diff(&o) < 1e-14);

        // Zero query/key weights: uniform map, so every output unit sees the
        // mean value row.
        let d = dims(2, 2, 1, 2);
        let layer = Layer::new(Variant::Joint, &d, 13).zero_qk();
        let h = random_hidden(&d, 14);
        let (out, maps) = layer.run(Variant::Joint, &d, &h, CANONICAL_ORDER, Fusion::Trainable);
        let cells = 4;
        for &w in maps[0].1.data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        let first = &out.data()[0..2];
        for i in 1..cells {
            assert!(
                (out.data()[i * 2] - first[0]).abs() < 1e-12
                    && (out.data()[i * 2 + 1] - first[1]).abs() < 1e-12,
                "uniform attention must yield identical unit outputs"
            );
        }
    }

    #[test]
    fn joint_capacity_guard() {
        let d = dims(17, 16, 16, 1);
        let layer = Layer::new(Variant::Joint, &d, 15);
        let h = Tensor::zeros(&[17, 16, 16, 1]);
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (n, t) in &layer.params {
            ids.insert(n.clone(), tape.param(n, t.clone()).unwrap());
        }
        let hid = tape.constant(h);
        let err = joint_forward(&mut tape, &ParamIds(&ids), "attn", &d, hid);
        assert!(matches!(err, Err(Error::Capacity(_))));
    }

    #[test]
    fn shared_zero_qk_gives_uniform_maps() {
        let d = dims(3, 2, 2, 2);
        let layer = Layer::new(Variant::Shared, &d, 16).zero_qk();
        let h = random_hidden(&d, 17);
        let (_, maps) = layer.run(Variant::Shared, &d, &h, CANONICAL_ORDER, Fusion::Trainable);
        for (label, map) in &maps {
            let n = map.shape()[0];
            for &v in map.data() {
                assert!((v - 1.0 / n as f64).abs() < 1e-15, "{label} not uniform");
            }
        }
    }

    #[test]
    fn independent_fusion_is_linear_in_alpha() {
        let d = dims(2, 3, 2, 2);
        let layer = Layer::new(Variant::Independent, &d, 18);
        let h = random_hidden(&d, 19);
        let (zero, _) = layer.run(
            Variant::Independent,
            &d,
            &h,
            CANONICAL_ORDER,
            Fusion::Frozen([0.0; 3]),
        );
        assert!(zero.max_abs_diff(&Tensor::zeros(h.shape())) < 1e-15);

        let run_frozen = |w: [f64; 3]| {
            layer
                .run(Variant::Independent, &d, &h, CANONICAL_ORDER, Fusion::Frozen(w))
                .0
        };
        let t_only = run_frozen([1.0, 0.0, 0.0]);
        let l_only = run_frozen([0.0, 1.0, 0.0]);
        let m_only = run_frozen([0.0, 0.0, 1.0]);
        let all = run_frozen([1.0, 1.0, 1.0]);
        let sum = t_only.add(&l_only).unwrap().add(&m_only).unwrap();
        assert!(sum.max_abs_diff(&all) < 1e-12);
    }
}
