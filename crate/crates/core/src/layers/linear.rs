//! Chirality-equivariant affine maps.
//!
//! The full weight matrix is never stored. A layer keeps a flat vector of
//! free parameters (the unique blocks, row-major, followed by the free bias
//! blocks) and a gather map that assembles the full matrix from it.
//!
//! Sharing rule, for an output row `r` and input column `c` with per-part
//! signs `s(n) = -1`, `s(p) = +1`:
//!
//! * rows of left joints are free;
//! * rows of right joints copy the mirrored left row with the mirrored column,
//!   scaled by `s(row part) * s(col part)`;
//! * center rows read left columns freely (except kept-from-negated, which is
//!   zero), mirror them onto right columns with the same sign rule, and only
//!   connect center columns of the same part.
//!
//! Bias: right = `s(part) *` left, center negated = 0, center kept is free.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::MultCounter;
use crate::autodiff::{GatherMap, Tape, Var};
use crate::codec::MatrixBlob;
use crate::error::{Error, Result};
use crate::layout::{JointLayout, Part, Side};
use crate::tensor::Tensor;

use Part::{Negated as N, Positive as P};
use Side::{Center as C, Left as L};

/// Free weight blocks as `(out side, out part, in side, in part)`.
pub const WEIGHT_BLOCKS: [(Side, Part, Side, Part); 17] = [
    (L, N, L, N),
    (L, N, L, P),
    (L, P, L, N),
    (L, P, L, P),
    (L, N, Side::Right, N),
    (L, N, Side::Right, P),
    (L, P, Side::Right, N),
    (L, P, Side::Right, P),
    (L, N, C, N),
    (L, N, C, P),
    (L, P, C, N),
    (L, P, C, P),
    (C, N, L, N),
    (C, N, L, P),
    (C, P, L, P),
    (C, N, C, N),
    (C, P, C, P),
];

pub const BIAS_BLOCKS: [(Side, Part); 3] = [(L, N), (L, P), (C, P)];

fn part_name(side: Side, part: Part) -> String {
    format!("{}{}", side.tag(), part.tag())
}

/// Name, shape and position of one free block in the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Block structure of a chiral affine map between two layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlan {
    in_layout: JointLayout,
    out_layout: JointLayout,
    blocks: Vec<BlockInfo>,
    n_weights: usize,
    n_params: usize,
    /// Row-major `[n_out, n_in]`.
    weight: Vec<Option<(usize, f64)>>,
    bias: Vec<Option<(usize, f64)>>,
}

impl LinearPlan {
    pub fn new(in_layout: &JointLayout, out_layout: &JointLayout) -> Self {
        let (n_in, n_out) = (in_layout.size(), out_layout.size());
        let mut weight = vec![None; n_out * n_in];
        let mut blocks = Vec::new();
        let mut offset = 0;
        let set = |w: &mut Vec<Option<(usize, f64)>>, r: usize, c: usize, v: (usize, f64)| {
            let slot = &mut w[r * n_in + c];
            assert!(slot.is_none(), "weight entry ({r}, {c}) assigned twice");
            *slot = Some(v);
        };

        for (os, oq, is, iq) in WEIGHT_BLOCKS {
            let rows = out_layout.slots(os, oq);
            let cols = in_layout.slots(is, iq);
            let sign = oq.sign() * iq.sign();
            for (a, &r) in rows.iter().enumerate() {
                for (b, &c) in cols.iter().enumerate() {
                    let k = offset + a * cols.len() + b;
                    set(&mut weight, r, c, (k, 1.0));
                    match (os, is) {
                        (L, _) => set(
                            &mut weight,
                            out_layout.mirror_index(r),
                            in_layout.mirror_index(c),
                            (k, sign),
                        ),
                        (C, L) => set(&mut weight, r, in_layout.mirror_index(c), (k, sign)),
                        _ => {}
                    }
                }
            }
            blocks.push(BlockInfo {
                name: format!("W_{}_{}", part_name(os, oq), part_name(is, iq)),
                rows: rows.len(),
                cols: cols.len(),
                offset,
            });
            offset += rows.len() * cols.len();
        }
        let n_weights = offset;

        let mut bias = vec![None; n_out];
        for (side, part) in BIAS_BLOCKS {
            let rows = out_layout.slots(side, part);
            for (a, &r) in rows.iter().enumerate() {
                let k = offset + a;
                bias[r] = Some((k, 1.0));
                if side == L {
                    bias[out_layout.mirror_index(r)] = Some((k, part.sign()));
                }
            }
            blocks.push(BlockInfo {
                name: format!("b_{}", part_name(side, part)),
                rows: rows.len(),
                cols: 1,
                offset,
            });
            offset += rows.len();
        }

        Self {
            in_layout: in_layout.clone(),
            out_layout: out_layout.clone(),
            blocks,
            n_weights,
            n_params: offset,
            weight,
            bias,
        }
    }

    pub fn in_layout(&self) -> &JointLayout {
        &self.in_layout
    }

    pub fn out_layout(&self) -> &JointLayout {
        &self.out_layout
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&BlockInfo> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Free weight entries (excluding bias).
    pub fn n_weights(&self) -> usize {
        self.n_weights
    }

    pub fn n_bias(&self) -> usize {
        self.n_params - self.n_weights
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_in(&self) -> usize {
        self.in_layout.size()
    }

    pub fn n_out(&self) -> usize {
        self.out_layout.size()
    }

    /// Source of full-matrix entry `(row, col)`; `None` for structural zeros.
    pub fn weight_entry(&self, row: usize, col: usize) -> Option<(usize, f64)> {
        self.weight[row * self.n_in() + col]
    }

    pub fn bias_entry(&self, row: usize) -> Option<(usize, f64)> {
        self.bias[row]
    }

    /// Gather map producing the transposed weight `[n_in, n_out]` from a parameter
    /// vector in which this plan's weights start at `offset`.
    pub fn weight_t_map(&self, offset: usize) -> GatherMap {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let mut map = vec![None; n_in * n_out];
        for r in 0..n_out {
            for c in 0..n_in {
                map[c * n_out + r] = self.weight[r * n_in + c].map(|(k, s)| (k + offset, s));
            }
        }
        map.into()
    }

    /// Gather map for the full bias; bias parameter `k` of the plan is read at `k + offset`.
    pub fn bias_map(&self, offset: usize) -> GatherMap {
        self.bias
            .iter()
            .map(|e| e.map(|(k, s)| (k + offset, s)))
            .collect::<Vec<_>>()
            .into()
    }

    pub fn materialize_weight(&self, theta: &[f64]) -> Tensor {
        let data = self
            .weight
            .iter()
            .map(|e| e.map_or(0.0, |(k, s)| s * theta[k]))
            .collect();
        Tensor::new(vec![self.n_out(), self.n_in()], data).expect("plan shape")
    }

    pub fn materialize_bias(&self, theta: &[f64]) -> Tensor {
        let data = self
            .bias
            .iter()
            .map(|e| e.map_or(0.0, |(k, s)| s * theta[k]))
            .collect();
        Tensor::new(vec![self.n_out()], data).expect("plan shape")
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws.
pub(crate) fn init_uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// A chiral fully connected layer: block structure plus free parameter values.
#[derive(Debug, Clone)]
pub struct ChiralLinearSpec {
    plan: Arc<LinearPlan>,
    theta: Vec<f64>,
    wt_map: GatherMap,
    b_map: GatherMap,
}

impl PartialEq for ChiralLinearSpec {
    fn eq(&self, other: &Self) -> bool {
        self.plan == other.plan && self.theta == other.theta
    }
}

impl ChiralLinearSpec {
    pub fn zeros(in_layout: &JointLayout, out_layout: &JointLayout) -> Self {
        let plan = Arc::new(LinearPlan::new(in_layout, out_layout));
        let theta = vec![0.0; plan.n_params()];
        Self::with_theta(plan, theta)
    }

    /// Every free block (bias included) drawn from the full-fan-in uniform range.
    pub fn random(in_layout: &JointLayout, out_layout: &JointLayout, rng: &mut impl Rng) -> Self {
        let plan = Arc::new(LinearPlan::new(in_layout, out_layout));
        let theta = init_uniform(rng, plan.n_params(), in_layout.size());
        Self::with_theta(plan, theta)
    }

    fn with_theta(plan: Arc<LinearPlan>, theta: Vec<f64>) -> Self {
        let wt_map = plan.weight_t_map(0);
        let b_map = plan.bias_map(0);
        Self {
            plan,
            theta,
            wt_map,
            b_map,
        }
    }

    pub fn plan(&self) -> &LinearPlan {
        &self.plan
    }

    pub fn in_layout(&self) -> &JointLayout {
        self.plan.in_layout()
    }

    pub fn out_layout(&self) -> &JointLayout {
        self.plan.out_layout()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.plan.n_params() {
            return Err(Error::shape(
                "set_theta",
                format!(
                    "{} values for {} parameters",
                    theta.len(),
                    self.plan.n_params()
                ),
            ));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        let b = self.plan.block(name)?;
        Some(&self.theta[b.offset..b.offset + b.len()])
    }

    pub fn set_block(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let b = self
            .plan
            .block(name)
            .ok_or_else(|| Error::validation(format!("unknown block {name}")))?
            .clone();
        if values.len() != b.len() {
            return Err(Error::shape(
                "set_block",
                format!(
                    "{name} is {}x{}, got {} values",
                    b.rows,
                    b.cols,
                    values.len()
                ),
            ));
        }
        self.theta[b.offset..b.offset + b.len()].copy_from_slice(values);
        Ok(())
    }

    pub fn materialize_weight(&self) -> Tensor {
        self.plan.materialize_weight(&self.theta)
    }

    pub fn materialize_bias(&self) -> Tensor {
        self.plan.materialize_bias(&self.theta)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.plan.n_in() {
            return Err(Error::shape(
                "chiral_linear_forward",
                format!(
                    "input has {cols} features, layout expects {}",
                    self.plan.n_in()
                ),
            ));
        }
        Ok(())
    }

    /// `y = x W^T + b` row by row, on a `[.., n_in]` tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.cols())?;
        let w = self.materialize_weight();
        let b = self.materialize_bias();
        let rows = x.rows();
        let xm = x.clone().reshape(vec![rows, x.cols()])?;
        let mut y = xm.matmul(&w.transpose()?)?;
        for r in 0..rows {
            y.row_slice_mut(r)
                .iter_mut()
                .zip(b.data())
                .for_each(|(v, bb)| *v += bb);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("shape") = self.plan.n_out();
        y.reshape(shape)
    }

    /// Differentiable forward with the parameter vector supplied as a tape value.
    pub fn forward_var<'t>(&self, theta: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        linear_var(&self.plan, &self.wt_map, &self.b_map, theta, x)
    }

    /// Differentiable forward reading this layer's own parameters as constants.
    pub fn forward_tape<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let theta = tape.constant(Tensor::new(vec![self.theta.len()], self.theta.clone())?);
        self.forward_var(theta, x)
    }

    /// Precomputes the paired-sum inference path.
    pub fn symmetric(&self) -> SymmetricMatvec {
        SymmetricMatvec::new(&self.plan, &self.theta)
    }

    /// Symmetric matvec on one input vector; returns the output and the multiplication count.
    pub fn symmetric_matvec(&self, x: &[f64]) -> Result<(Vec<f64>, u64)> {
        self.check_input(x.len())?;
        let mut counter = MultCounter::default();
        let y = self.symmetric().apply(x, &mut counter);
        Ok((y, counter.count()))
    }

    pub fn to_record(&self) -> LinearRecord {
        LinearRecord {
            in_layout: self.in_layout().clone(),
            out_layout: self.out_layout().clone(),
            blocks: blocks_to_map(&self.plan, &self.theta, 0),
        }
    }

    pub fn from_record(rec: &LinearRecord) -> Result<Self> {
        let mut spec = Self::zeros(&rec.in_layout, &rec.out_layout);
        let theta = blocks_from_map(&spec.plan, &rec.blocks, 0, spec.theta.len())?;
        spec.theta = theta;
        Ok(spec)
    }
}

/// Shared differentiable affine map; `theta` holds the plan's parameters at the offsets baked into the maps.
pub(crate) fn linear_var<'t>(
    plan: &LinearPlan,
    wt_map: &GatherMap,
    b_map: &GatherMap,
    theta: Var<'t>,
    x: Var<'t>,
) -> Result<Var<'t>> {
    if x.cols() != plan.n_in() {
        return Err(Error::shape(
            "chiral_linear_forward",
            format!(
                "input has {} features, layout expects {}",
                x.cols(),
                plan.n_in()
            ),
        ));
    }
    let wt = theta
        .gather(wt_map)?
        .reshape(vec![plan.n_in(), plan.n_out()])?;
    let b = theta.gather(b_map)?;
    let rows = x.rows();
    let x2 = if x.shape().len() == 2 {
        x
    } else {
        x.reshape(vec![rows, plan.n_in()])?
    };
    x2.matmul(wt)?.add_row(b)
}

pub(crate) fn blocks_to_map(
    plan: &LinearPlan,
    theta: &[f64],
    offset: usize,
) -> BTreeMap<String, MatrixBlob> {
    plan.blocks()
        .iter()
        .map(|b| {
            let start = offset + b.offset;
            (
                b.name.clone(),
                MatrixBlob::new(b.rows, b.cols, theta[start..start + b.len()].to_vec()),
            )
        })
        .collect()
}

pub(crate) fn blocks_from_map(
    plan: &LinearPlan,
    blocks: &BTreeMap<String, MatrixBlob>,
    offset: usize,
    total: usize,
) -> Result<Vec<f64>> {
    let mut theta = vec![0.0; total];
    for b in plan.blocks() {
        let blob = blocks
            .get(&b.name)
            .ok_or_else(|| Error::validation(format!("missing block {}", b.name)))?;
        if blob.rows != b.rows || blob.cols != b.cols || blob.data.0.len() != b.len() {
            return Err(Error::validation(format!(
                "block {} should be {}x{}, found {}x{} with {} values",
                b.name,
                b.rows,
                b.cols,
                blob.rows,
                blob.cols,
                blob.data.0.len()
            )));
        }
        let start = offset + b.offset;
        theta[start..start + b.len()].copy_from_slice(&blob.data.0);
    }
    if let Some(extra) = blocks.keys().find(|k| plan.block(k).is_none()) {
        return Err(Error::validation(format!("unexpected block {extra}")));
    }
    Ok(theta)
}

/// Serialized chiral linear parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRecord {
    pub in_layout: JointLayout,
    pub out_layout: JointLayout,
    pub blocks: BTreeMap<String, MatrixBlob>,
}

#[derive(Debug, Clone)]
struct PairTerm {
    row: usize,
    mirror_row: usize,
    col: usize,
    half_sum: f64,
    half_diff: f64,
    sign: f64,
}

#[derive(Debug, Clone)]
struct SharedTerm {
    row: usize,
    mirror_row: usize,
    col: usize,
    w: f64,
    sign: f64,
}

#[derive(Debug, Clone)]
struct CenterTerm {
    row: usize,
    col: usize,
    w: f64,
    /// Reads the paired sum (`true`) or difference (`false`) of a left column
    /// and its mirror; `None` reads a center column directly.
    pair: Option<bool>,
}

/// Inference path that folds mirrored input coordinates before multiplying.
///
/// For a left output row `r`, its mirror `r'`, a left input column `c` and its
/// mirror `c'`, the four entries are `A, B` and `s*B, s*A`, so with
/// `u = x_c + x_c'` and `v = x_c - x_c'` both outputs come from the two
/// products `(A+B)/2 * u` and `(A-B)/2 * v`. Center columns feed a left row
/// and its mirror with one product; center rows see `F*(x_c +/- x_c')`.
#[derive(Debug, Clone)]
pub struct SymmetricMatvec {
    n_in: usize,
    n_out: usize,
    /// Left input columns, paired with their mirrors.
    pair_cols: Vec<(usize, usize)>,
    pair_terms: Vec<PairTerm>,
    shared_terms: Vec<SharedTerm>,
    center_terms: Vec<CenterTerm>,
    bias: Vec<f64>,
}

impl SymmetricMatvec {
    pub fn new(plan: &LinearPlan, theta: &[f64]) -> Self {
        let (inl, outl) = (plan.in_layout(), plan.out_layout());
        let w = plan.materialize_weight(theta);
        let n_in = inl.size();
        let value = |r: usize, c: usize| w.data()[r * n_in + c];

        let left_cols: Vec<usize> = [N, P].into_iter().flat_map(|q| inl.slots(L, q)).collect();
        let pair_index = |c: usize| left_cols.iter().position(|&x| x == c).expect("left col");
        let center_cols: Vec<usize> = [N, P].into_iter().flat_map(|q| inl.slots(C, q)).collect();
        let pair_cols = left_cols
            .iter()
            .map(|&c| (c, inl.mirror_index(c)))
            .collect();

        let mut pair_terms = Vec::new();
        let mut shared_terms = Vec::new();
        let mut center_terms = Vec::new();

        for oq in [N, P] {
            for r in outl.slots(L, oq) {
                let mirror_row = outl.mirror_index(r);
                for &c in &left_cols {
                    let (a, b) = (value(r, c), value(r, inl.mirror_index(c)));
                    let iq = inl.locate(c).2;
                    pair_terms.push(PairTerm {
                        row: r,
                        mirror_row,
                        col: pair_index(c),
                        half_sum: 0.5 * (a + b),
                        half_diff: 0.5 * (a - b),
                        sign: oq.sign() * iq.sign(),
                    });
                }
                for &c in &center_cols {
                    let iq = inl.locate(c).2;
                    shared_terms.push(SharedTerm {
                        row: r,
                        mirror_row,
                        col: c,
                        w: value(r, c),
                        sign: oq.sign() * iq.sign(),
                    });
                }
            }
            for r in outl.slots(C, oq) {
                for &c in &left_cols {
                    if plan.weight_entry(r, c).is_none() {
                        continue;
                    }
                    // entry at the mirror column is s * F, so the product reads x_c + s * x_c'
                    let iq = inl.locate(c).2;
                    center_terms.push(CenterTerm {
                        row: r,
                        col: pair_index(c),
                        w: value(r, c),
                        pair: Some(oq.sign() * iq.sign() > 0.0),
                    });
                }
                for &c in &center_cols {
                    if plan.weight_entry(r, c).is_none() {
                        continue;
                    }
                    center_terms.push(CenterTerm {
                        row: r,
                        col: c,
                        w: value(r, c),
                        pair: None,
                    });
                }
            }
        }

        Self {
            n_in,
            n_out: outl.size(),
            pair_cols,
            pair_terms,
            shared_terms,
            center_terms,
            bias: plan.materialize_bias(theta).into_data(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// Multiplications performed per input vector.
    pub fn mults_per_call(&self) -> u64 {
        (2 * self.pair_terms.len() + self.shared_terms.len() + self.center_terms.len()) as u64
    }

    pub fn apply(&self, x: &[f64], counter: &mut MultCounter) -> Vec<f64> {
        assert_eq!(x.len(), self.n_in, "symmetric matvec input size");
        let sums: Vec<f64> = self.pair_cols.iter().map(|&(a, b)| x[a] + x[b]).collect();
        let diffs: Vec<f64> = self.pair_cols.iter().map(|&(a, b)| x[a] - x[b]).collect();
        let mut y = self.bias.clone();
        for t in &self.pair_terms {
            let p = t.half_sum * sums[t.col];
            let m = t.half_diff * diffs[t.col];
            y[t.row] += p + m;
            y[t.mirror_row] += t.sign * (p - m);
        }
        for t in &self.shared_terms {
            let p = t.w * x[t.col];
            y[t.row] += p;
            y[t.mirror_row] += t.sign * p;
        }
        for t in &self.center_terms {
            let input = match t.pair {
                Some(true) => sums[t.col],
                Some(false) => diffs[t.col],
                None => x[t.col],
            };
            y[t.row] += t.w * input;
        }
        counter.add(self.mults_per_call());
        y
    }
}

/// Dense `W x + b` with one multiplication per matrix entry.
pub fn naive_matvec(w: &Tensor, b: &[f64], x: &[f64], counter: &mut MultCounter) -> Vec<f64> {
    let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), n_in, "naive matvec input size");
    let mut y = b.to_vec();
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w.data()[r * n_in..(r + 1) * n_in];
        *yr += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    counter.add((n_out * n_in) as u64);
    y
}
