//! Dense tensor storage and the mode-wise attention primitives.
//!
//! Everything here is pure and allocation-based: 64-bit reals in row-major
//! order (last axis fastest). The canonical cell ordering is t-major,
//! m-fastest, so the lifted map of a time attention matrix is
//! `A_T ⊗ I_L ⊗ I_M` under the standard Kronecker convention.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest `T*L*M` for which joint (cell-by-cell) attention maps may be
/// materialized. The joint route is an oracle and small-scale backend, not a
/// production path.
pub const JOINT_CAPACITY: usize = 4096;

/// Extents of the (time, location, measurement) cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub t: usize,
    pub l: usize,
    pub m: usize,
}

impl Shape3 {
    pub fn new(t: usize, l: usize, m: usize) -> Result<Self> {
        if t == 0 || l == 0 || m == 0 {
            return Err(Error::Shape(format!(
                "all extents must be at least 1, got {t}x{l}x{m}"
            )));
        }
        t.checked_mul(l)
            .and_then(|tl| tl.checked_mul(m))
            .ok_or_else(|| Error::Shape(format!("{t}x{l}x{m} overflows the index range")))?;
        Ok(Shape3 { t, l, m })
    }

    /// Total cell count `T*L*M`.
    pub fn cells(&self) -> usize {
        self.t * self.l * self.m
    }

    pub fn extent(&self, dim: Dim) -> usize {
        match dim {
            Dim::Time => self.t,
            Dim::Location => self.l,
            Dim::Measurement => self.m,
        }
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.l, self.m)
    }
}

/// Selects one of the three cube dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dim {
    Time,
    Location,
    Measurement,
}

impl Dim {
    pub const ALL: [Dim; 3] = [Dim::Time, Dim::Location, Dim::Measurement];

    pub fn label(&self) -> &'static str {
        match self {
            Dim::Time => "t",
            Dim::Location => "l",
            Dim::Measurement => "m",
        }
    }
}

/// Flat cell index `p(t,l,m) = (t*L + l)*M + m`.
///
/// Bijective over `[0, T*L*M)`; the ordering is what makes the lifted maps of
/// the decomposed route coincide with Kronecker products of the
/// dimension-specific maps with identities.
pub fn flat_index(t: usize, l: usize, m: usize, s: Shape3) -> Result<usize> {
    if t >= s.t || l >= s.l || m >= s.m {
        return Err(Error::Index(format!(
            "({t},{l},{m}) outside cube {s}"
        )));
    }
    Ok((t * s.l + l) * s.m + m)
}

/// Inverse of [`flat_index`].
pub fn unflat_index(p: usize, s: Shape3) -> Result<(usize, usize, usize)> {
    if p >= s.cells() {
        return Err(Error::Index(format!("flat index {p} outside cube {s}")));
    }
    let m = p % s.m;
    let l = (p / s.m) % s.l;
    let t = p / (s.m * s.l);
    Ok((t, l, m))
}

/// Dense tensor of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let size = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; size],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} cells)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut out = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for i in 0..out.data.len() {
            out.data[i] = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        out
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal size.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Accumulate `other` into `self` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.as_matrix_dims()?;
        let (k2, m) = other.as_matrix_dims()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimension: {n}x{k} vs {k2}x{m}"
            )));
        }
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * m..(p + 1) * m];
                let orow = &mut out.data[i * m..(i + 1) * m];
                for (o, &b) in orow.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.as_matrix_dims()?;
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..n {
            for j in 0..m {
                out.data[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(out)
    }

    pub fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected a matrix, got rank {}",
                self.shape.len()
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Largest absolute element difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Checks a 4-axis hidden tensor `T x L x M x C` against the cube shape.
fn check_cube4(x: &Tensor, what: &str) -> Result<(Shape3, usize)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "{what} must have 4 axes (T,L,M,C), got rank {}",
            x.rank()
        )));
    }
    let s = Shape3::new(x.shape()[0], x.shape()[1], x.shape()[2])?;
    Ok((s, x.shape()[3]))
}

/// Flattens a `T x L x M x C` tensor into rows over the selected dimension.
///
/// Columns run over the non-selected axes in canonical `T -> L -> M -> C`
/// order, so the transform round-trips with [`reshape_from_dim`].
pub fn reshape_for_dim(x: &Tensor, dim: Dim) -> Result<Tensor> {
    let (s, c) = check_cube4(x, "reshape_for_dim input")?;
    let rows = s.extent(dim);
    let cols = s.cells() / rows * c;
    let mut out = Tensor::zeros(&[rows, cols]);
    let src = x.data();
    let dst = out.data_mut();
    let mut p = 0;
    for t in 0..s.t {
        for l in 0..s.l {
            for m in 0..s.m {
                for ch in 0..c {
                    let (row, col) = rowcol_for_dim(t, l, m, ch, s, c, dim);
                    dst[row * cols + col] = src[p];
                    p += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`reshape_for_dim`]: scatter rows back into a `T x L x M x C` cube.
pub fn reshape_from_dim(rows: &Tensor, dim: Dim, s: Shape3, c: usize) -> Result<Tensor> {
    let (nr, nc) = rows.as_matrix_dims()?;
    if nr != s.extent(dim) || nc != s.cells() / s.extent(dim) * c {
        return Err(Error::Shape(format!(
            "reshape_from_dim: {nr}x{nc} does not match cube {s} with {c} channels over {:?}",
            dim
        )));
    }
    let mut out = Tensor::zeros(&[s.t, s.l, s.m, c]);
    let src = rows.data();
    let dst = out.data_mut();
    let mut p = 0;
    for t in 0..s.t {
        for l in 0..s.l {
            for m in 0..s.m {
                for ch in 0..c {
                    let (row, col) = rowcol_for_dim(t, l, m, ch, s, c, dim);
                    dst[p] = src[row * nc + col];
                    p += 1;
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn rowcol_for_dim(
    t: usize,
    l: usize,
    m: usize,
    ch: usize,
    s: Shape3,
    c: usize,
    dim: Dim,
) -> (usize, usize) {
    match dim {
        Dim::Time => (t, (l * s.m + m) * c + ch),
        Dim::Location => (l, (t * s.m + m) * c + ch),
        Dim::Measurement => (m, (t * s.l + l) * c + ch),
    }
}

/// Applies a square map along one cube axis of a `T x L x M x V` tensor.
///
/// `out[.., i, .., :] = sum_j a[i,j] * v[.., j, .., :]` with the other axes
/// fixed; equivalent to multiplying `vec(V)` by the map lifted with
/// identities, at `O(extent^2 * cells/extent * V)` cost instead of
/// `O(cells^2)`.
pub fn mode_apply(a: &Tensor, v: &Tensor, dim: Dim) -> Result<Tensor> {
    let (s, c) = check_cube4(v, "mode_apply input")?;
    let (n, m) = a.as_matrix_dims()?;
    let e = s.extent(dim);
    if n != m || n != e {
        return Err(Error::Shape(format!(
            "mode_apply map is {n}x{m}, expected {e}x{e} for {:?} of cube {s}",
            dim
        )));
    }
    let mut out = Tensor::zeros(v.shape());
    let (st, sl, sm) = (s.t, s.l, s.m);
    // Strides of the t, l, m axes in the flat layout.
    let (stride_t, stride_l, stride_m) = (sl * sm * c, sm * c, c);
    let (axis_stride, fixed): (usize, Vec<(usize, usize)>) = match dim {
        Dim::Time => (stride_t, iter_pairs(sl, sm, stride_l, stride_m)),
        Dim::Location => (stride_l, iter_pairs(st, sm, stride_t, stride_m)),
        Dim::Measurement => (stride_m, iter_pairs(st, sl, stride_t, stride_l)),
    };
    let src = v.data();
    let dst = out.data_mut();
    for i in 0..e {
        for j in 0..e {
            let w = a.data()[i * e + j];
            if w == 0.0 {
                continue;
            }
            for &(off_a, off_b) in &fixed {
                let base_out = i * axis_stride + off_a + off_b;
                let base_in = j * axis_stride + off_a + off_b;
                for ch in 0..c {
                    dst[base_out + ch] += w * src[base_in + ch];
                }
            }
        }
    }
    Ok(out)
}

fn iter_pairs(na: usize, nb: usize, sa: usize, sb: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(na * nb);
    for a in 0..na {
        for b in 0..nb {
            v.push((a * sa, b * sb));
        }
    }
    v
}

/// Materializes `a_t ⊗ a_l ⊗ a_m` as a `TLM x TLM` matrix.
///
/// Entry `(p0, p1)` is `a_t[t0,t1] * a_l[l0,l1] * a_m[m0,m1]` with the flat
/// indices decoded via [`flat_index`]. Guarded to small cubes; this is the
/// brute-force oracle for the decomposed route.
pub fn kron3(a_t: &Tensor, a_l: &Tensor, a_m: &Tensor) -> Result<Tensor> {
    let (t, t2) = a_t.as_matrix_dims()?;
    let (l, l2) = a_l.as_matrix_dims()?;
    let (m, m2) = a_m.as_matrix_dims()?;
    if t != t2 || l != l2 || m != m2 {
        return Err(Error::Shape("kron3 factors must be square".into()));
    }
    let s = Shape3::new(t, l, m)?;
    let n = s.cells();
    if n > JOINT_CAPACITY {
        return Err(Error::Capacity(format!(
            "kron3 would materialize a {n}x{n} map; cap is {JOINT_CAPACITY} cells per side"
        )));
    }
    let mut out = Tensor::zeros(&[n, n]);
    for p0 in 0..n {
        let (t0, l0, m0) = unflat_index(p0, s)?;
        for p1 in 0..n {
            let (t1, l1, m1) = unflat_index(p1, s)?;
            out.data_mut()[p0 * n + p1] =
                a_t.data()[t0 * t + t1] * a_l.data()[l0 * l + l1] * a_m.data()[m0 * m + m1];
        }
    }
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(s: &Tensor) -> Result<Tensor> {
    let (n, m) = s.as_matrix_dims()?;
    if !s.is_finite() {
        return Err(Error::Numeric("softmax input contains non-finite entries".into()));
    }
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let row = &s.data()[i * m..(i + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out.data_mut()[i * m..(i + 1) * m];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Scaled dot-product scores `Q K^T / sqrt(d)` where `d` is the row width.
///
/// The same rule covers the per-unit variants: when the rows are flattened
/// over several axes the scale is the square root of the full row length.
pub fn scaled_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, d) = q.as_matrix_dims()?;
    let (_, d2) = k.as_matrix_dims()?;
    if d != d2 {
        return Err(Error::Shape(format!(
            "scaled_scores width mismatch: {d} vs {d2}"
        )));
    }
    if d == 0 {
        return Err(Error::Shape("scaled_scores requires width >= 1".into()));
    }
    let kt = k.transpose()?;
    Ok(q.matmul(&kt)?.scale(1.0 / (d as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn flat_index_origin_and_examples() {
        let s = Shape3::new(2, 3, 4).unwrap();
        assert_eq!(flat_index(0, 0, 0, s).unwrap(), 0);
        assert_eq!(flat_index(1, 0, 0, s).unwrap(), 12);
        assert_eq!(flat_index(1, 2, 3, s).unwrap(), 23);
        assert!(flat_index(2, 0, 0, s).is_err());
        assert!(flat_index(0, 3, 0, s).is_err());
    }

    #[test]
    fn flat_index_bijective_by_enumeration() {
        // Brute-force oracle: enumerate every cell of cubes up to 6x6x6 and
        // confirm the mapping is a bijection onto [0, TLM).
        for t in 1..=6 {
            for l in 1..=6 {
                for m in 1..=6 {
                    let s = Shape3::new(t, l, m).unwrap();
                    let mut seen = vec![false; s.cells()];
                    for it in 0..t {
                        for il in 0..l {
                            for im in 0..m {
                                let p = flat_index(it, il, im, s).unwrap();
                                assert!(!seen[p], "collision at ({it},{il},{im})");
                                seen[p] = true;
                                assert_eq!(unflat_index(p, s).unwrap(), (it, il, im));
                            }
                        }
                    }
                    assert!(seen.iter().all(|&b| b));
                }
            }
        }
    }

    #[test]
    fn reshape_for_dim_trivial_and_rows() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![7.0]).unwrap();
        let r = reshape_for_dim(&x, Dim::Time).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[7.0]);

        // Cells keyed by their enumeration order; row 0 of the Time reshape
        // must hold exactly the t=0 cells in canonical order.
        let s = Shape3::new(2, 3, 4).unwrap();
        let x = Tensor::from_fn(&[2, 3, 4, 1], |idx| {
            flat_index(idx[0], idx[1], idx[2], s).unwrap() as f64
        });
        let r = reshape_for_dim(&x, Dim::Time).unwrap();
        assert_eq!(r.shape(), &[2, 12]);
        let row0: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(&r.data()[0..12], row0.as_slice());
    }

    #[test]
    fn reshape_round_trips_for_all_dims() {
        let s = Shape3::new(3, 2, 4).unwrap();
        let c = 2;
        let x = Tensor::from_fn(&[3, 2, 4, 2], |idx| {
            (idx[0] * 1000 + idx[1] * 100 + idx[2] * 10 + idx[3]) as f64
        });
        for dim in Dim::ALL {
            let r = reshape_for_dim(&x, dim).unwrap();
            let back = reshape_from_dim(&r, dim, s, c).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn reshape_rejects_wrong_arity() {
        let x = Tensor::zeros(&[2, 3, 4]);
        assert!(matches!(
            reshape_for_dim(&x, Dim::Time),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mode_apply_identity_is_noop() {
        let v = Tensor::from_fn(&[2, 3, 2, 2], |idx| (idx[0] + 2 * idx[1] + idx[3]) as f64);
        for dim in Dim::ALL {
            let e = [2usize, 3, 2][match dim {
                Dim::Time => 0,
                Dim::Location => 1,
                Dim::Measurement => 2,
            }];
            let out = mode_apply(&Tensor::eye(e), &v, dim).unwrap();
            assert_eq!(out, v);
        }
    }

    #[test]
    fn mode_apply_scalar_cube() {
        let v = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let a = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        assert_eq!(mode_apply(&a, &v, Dim::Time).unwrap(), v);
    }

    #[test]
    fn mode_apply_extent_mismatch() {
        let v = Tensor::zeros(&[2, 3, 2, 1]);
        let a = Tensor::eye(3);
        assert!(mode_apply(&a, &v, Dim::Time).is_err());
    }

    fn rand_stochastic(n: usize, rng: &mut impl rand::Rng) -> Tensor {
        let scores = Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0..1.0));
        softmax_rows(&scores).unwrap()
    }

    #[test]
    fn mode_apply_matches_kron_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let s = Shape3::new(2, 2, 2).unwrap();
        let v = Tensor::from_fn(&[2, 2, 2, 1], |_| rng.random_range(-1.0..1.0));
        let a = rand_stochastic(2, &mut rng);
        let seq = mode_apply(&a, &v, Dim::Time).unwrap();
        let lifted = kron3(&a, &Tensor::eye(2), &Tensor::eye(2)).unwrap();
        let vec_v = v.reshaped(&[s.cells(), 1]).unwrap();
        let joint = lifted.matmul(&vec_v).unwrap();
        let seq_vec = seq.reshaped(&[s.cells(), 1]).unwrap();
        assert!(seq_vec.max_abs_diff(&joint) < 1e-12);
    }

    #[test]
    fn kron3_identities_and_scalars() {
        let id = kron3(&Tensor::eye(2), &Tensor::eye(3), &Tensor::eye(2)).unwrap();
        assert_eq!(id, Tensor::eye(12));

        let a = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        let c = Tensor::from_vec(&[1, 1], vec![5.0]).unwrap();
        let k = kron3(&a, &b, &c).unwrap();
        assert_eq!(k.data(), &[30.0]);
    }

    #[test]
    fn kron3_of_row_stochastic_is_row_stochastic() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let k = kron3(
            &rand_stochastic(2, &mut rng),
            &rand_stochastic(2, &mut rng),
            &rand_stochastic(2, &mut rng),
        )
        .unwrap();
        for i in 0..8 {
            let sum: f64 = k.data()[i * 8..(i + 1) * 8].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn kron3_capacity_guard() {
        let a = Tensor::eye(17);
        let b = Tensor::eye(16);
        let c = Tensor::eye(16);
        assert!(matches!(kron3(&a, &b, &c), Err(Error::Capacity(_))));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let z = Tensor::zeros(&[3, 3]);
        let y = softmax_rows(&z).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let one = softmax_rows(&Tensor::from_vec(&[1, 1], vec![42.0]).unwrap()).unwrap();
        assert_eq!(one.data(), &[1.0]);

        let row = Tensor::from_vec(&[1, 3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let y = softmax_rows(&row).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance_and_nonfinite() {
        let s = Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 2.0, 700.0, 701.0, 699.0]).unwrap();
        let shifted = s.map(|v| v + 123.456);
        let a = softmax_rows(&s).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);

        let bad = Tensor::from_vec(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn scaled_scores_examples() {
        let z = scaled_scores(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 2]));

        let q = Tensor::from_vec(&[2, 1], vec![2.0, 0.0]).unwrap();
        let k = Tensor::from_vec(&[2, 1], vec![3.0, 1.0]).unwrap();
        let s = scaled_scores(&q, &k).unwrap();
        assert_eq!(s.data(), &[6.0, 2.0, 0.0, 0.0]);

        // Orthonormal rows with width 4 give identity / sqrt(4).
        let mut q = Tensor::zeros(&[2, 4]);
        q.set(&[0, 0], 1.0);
        q.set(&[1, 1], 1.0);
        let s = scaled_scores(&q, &q).unwrap();
        let expect = Tensor::from_vec(&[2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert!(s.max_abs_diff(&expect) < 1e-15);

        assert!(scaled_scores(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn sequential_mode_apply_equals_kron_for_permutations() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = Shape3::new(2, 3, 2).unwrap();
        let v = Tensor::from_fn(&[2, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let a_t = rand_stochastic(2, &mut rng);
        let a_l = rand_stochastic(3, &mut rng);
        let a_m = rand_stochastic(2, &mut rng);

        let joint = kron3(&a_t, &a_l, &a_m).unwrap();
        let v_mat = v.reshaped(&[s.cells(), 2]).unwrap();
        let want = joint.matmul(&v_mat).unwrap();

        let orders: [[Dim; 3]; 6] = [
            [Dim::Time, Dim::Location, Dim::Measurement],
            [Dim::Time, Dim::Measurement, Dim::Location],
            [Dim::Location, Dim::Time, Dim::Measurement],
            [Dim::Location, Dim::Measurement, Dim::Time],
            [Dim::Measurement, Dim::Time, Dim::Location],
            [Dim::Measurement, Dim::Location, Dim::Time],
        ];
        let map_for = |d: Dim| match d {
            Dim::Time => &a_t,
            Dim::Location => &a_l,
            Dim::Measurement => &a_m,
        };
        for order in orders {
            let mut cur = v.clone();
            for d in order {
                cur = mode_apply(map_for(d), &cur, d).unwrap();
            }
            let got = cur.reshaped(&[s.cells(), 2]).unwrap();
            assert!(
                got.max_abs_diff(&want) < 1e-12,
                "order {order:?} disagrees with joint application"
            );
        }
    }
}
