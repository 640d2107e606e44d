//! Joint layouts and the chirality transform.
//!
//! A [`JointLayout`] describes one side of a layer (input, output or hidden):
//! which joints are left, right and center, how many coordinates each joint
//! carries and which of those coordinates flip sign under mirroring.
//!
//! Flattened index convention: joints are ordered left, right, center. Inside
//! each joint the negated coordinates come first (in ascending dim order),
//! followed by the kept coordinates. Left joint `i` and right joint `i` form a
//! mirror pair.
//!
//! The [`ChiralityTransform`] of a layout negates the designated coordinates
//! and swaps every left joint with its paired right joint. It is stored as a
//! signed permutation and is its own inverse.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Joint names of the common 17-joint Human3.6M skeleton.
pub const H36M17_JOINTS: [&str; 17] = [
    "Hip",
    "RHip",
    "RKnee",
    "RFoot",
    "LHip",
    "LKnee",
    "LFoot",
    "Spine",
    "Thorax",
    "Nose",
    "Head",
    "LShoulder",
    "LElbow",
    "LWrist",
    "RShoulder",
    "RElbow",
    "RWrist",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Center,
}

impl Side {
    pub fn tag(self) -> char {
        match self {
            Side::Left => 'l',
            Side::Right => 'r',
            Side::Center => 'c',
        }
    }

    pub fn mirror(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Center => Side::Center,
        }
    }
}

/// Whether a coordinate is negated (`n`) or kept (`p`) by the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Negated,
    Positive,
}

impl Part {
    pub fn tag(self) -> char {
        match self {
            Part::Negated => 'n',
            Part::Positive => 'p',
        }
    }

    /// Sign the transform applies to coordinates of this part.
    pub fn sign(self) -> f64 {
        match self {
            Part::Negated => -1.0,
            Part::Positive => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayoutRepr {
    left: Vec<String>,
    right: Vec<String>,
    center: Vec<String>,
    dims: usize,
    negated_dims: Vec<usize>,
}

/// Left/right/center partition of joints plus the negated coordinate set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct JointLayout {
    left: Vec<String>,
    right: Vec<String>,
    center: Vec<String>,
    dims: usize,
    /// Sorted, deduplicated.
    negated_dims: Vec<usize>,
}

impl TryFrom<LayoutRepr> for JointLayout {
    type Error = Error;

    fn try_from(r: LayoutRepr) -> Result<Self> {
        JointLayout::build(r.left, r.right, r.center, r.dims, &r.negated_dims)
    }
}

impl From<JointLayout> for LayoutRepr {
    fn from(l: JointLayout) -> Self {
        LayoutRepr {
            left: l.left,
            right: l.right,
            center: l.center,
            dims: l.dims,
            negated_dims: l.negated_dims,
        }
    }
}

impl JointLayout {
    /// Validates and builds a layout.
    pub fn build<A: Into<String>, B: Into<String>, C: Into<String>>(
        left: impl IntoIterator<Item = A>,
        right: impl IntoIterator<Item = B>,
        center: impl IntoIterator<Item = C>,
        dims: usize,
        negated_dims: &[usize],
    ) -> Result<Self> {
        let left: Vec<String> = left.into_iter().map(Into::into).collect();
        let right: Vec<String> = right.into_iter().map(Into::into).collect();
        let center: Vec<String> = center.into_iter().map(Into::into).collect();
        if left.len() != right.len() {
            return Err(Error::validation(format!(
                "left and right joint lists must pair up: {} left vs {} right",
                left.len(),
                right.len()
            )));
        }
        if dims == 0 {
            return Err(Error::validation("dims per joint must be positive"));
        }
        let mut seen = BTreeSet::new();
        for id in left.iter().chain(&right).chain(&center) {
            if !seen.insert(id.as_str()) {
                return Err(Error::validation(format!("duplicate joint id {id:?}")));
            }
        }
        let mut neg = BTreeSet::new();
        for &d in negated_dims {
            if d >= dims {
                return Err(Error::validation(format!(
                    "negated dim {d} out of range for {dims} dims per joint"
                )));
            }
            if !neg.insert(d) {
                return Err(Error::validation(format!("negated dim {d} listed twice")));
            }
        }
        Ok(Self {
            left,
            right,
            center,
            dims,
            negated_dims: neg.into_iter().collect(),
        })
    }

    /// Layout with generated joint names: `{prefix}l{i}`, `{prefix}r{i}`, `{prefix}c{i}`.
    pub fn synthetic(
        prefix: &str,
        pairs: usize,
        centers: usize,
        dims: usize,
        negated_dims: &[usize],
    ) -> Result<Self> {
        Self::build(
            (0..pairs).map(|i| format!("{prefix}l{i}")),
            (0..pairs).map(|i| format!("{prefix}r{i}")),
            (0..centers).map(|i| format!("{prefix}c{i}")),
            dims,
            negated_dims,
        )
    }

    /// The 17-joint Human3.6M skeleton, split by the `L`/`R` name prefix.
    pub fn h36m17(dims: usize, negated_dims: &[usize]) -> Result<Self> {
        let left: Vec<&str> = H36M17_JOINTS
            .iter()
            .copied()
            .filter(|n| n.starts_with('L'))
            .collect();
        let right: Vec<String> = left.iter().map(|n| format!("R{}", &n[1..])).collect();
        let center = H36M17_JOINTS
            .iter()
            .filter(|n| !n.starts_with('L') && !n.starts_with('R'))
            .map(|s| s.to_string());
        Self::build(
            left.into_iter().map(String::from),
            right,
            center,
            dims,
            negated_dims,
        )
    }

    pub fn left(&self) -> &[String] {
        &self.left
    }

    pub fn right(&self) -> &[String] {
        &self.right
    }

    pub fn center(&self) -> &[String] {
        &self.center
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn negated_dims(&self) -> &[usize] {
        &self.negated_dims
    }

    pub fn num_pairs(&self) -> usize {
        self.left.len()
    }

    pub fn num_center(&self) -> usize {
        self.center.len()
    }

    pub fn num_joints(&self) -> usize {
        2 * self.left.len() + self.center.len()
    }

    pub fn num_negated(&self) -> usize {
        self.negated_dims.len()
    }

    pub fn num_positive(&self) -> usize {
        self.dims - self.negated_dims.len()
    }

    /// Flattened feature count.
    pub fn size(&self) -> usize {
        self.num_joints() * self.dims
    }

    /// Same joints, nothing negated: its transform is the pure left/right swap.
    pub fn without_negation(&self) -> Self {
        Self {
            negated_dims: Vec::new(),
            ..self.clone()
        }
    }

    pub fn joints_on(&self, side: Side) -> usize {
        match side {
            Side::Left | Side::Right => self.left.len(),
            Side::Center => self.center.len(),
        }
    }

    pub fn dims_in(&self, part: Part) -> usize {
        match part {
            Part::Negated => self.num_negated(),
            Part::Positive => self.num_positive(),
        }
    }

    /// Per-joint coordinate order: negated dims first, then kept dims.
    pub fn slot_order(&self) -> Vec<usize> {
        let mut order = self.negated_dims.clone();
        order.extend((0..self.dims).filter(|d| !self.negated_dims.contains(d)));
        order
    }

    fn joint_base(&self, side: Side, joint: usize) -> usize {
        let p = self.left.len();
        let j = match side {
            Side::Left => joint,
            Side::Right => p + joint,
            Side::Center => 2 * p + joint,
        };
        j * self.dims
    }

    /// Flat index of coordinate `dim` (original dim numbering) of a joint.
    pub fn feature_index(&self, side: Side, joint: usize, dim: usize) -> usize {
        let slot = self
            .slot_order()
            .iter()
            .position(|&d| d == dim)
            .expect("dim in range");
        self.joint_base(side, joint) + slot
    }

    /// Flat indices of every coordinate on `side` belonging to `part`,
    /// joint-major, in slot order.
    pub fn slots(&self, side: Side, part: Part) -> Vec<usize> {
        let (lo, hi) = match part {
            Part::Negated => (0, self.num_negated()),
            Part::Positive => (self.num_negated(), self.dims),
        };
        (0..self.joints_on(side))
            .flat_map(|j| {
                let base = self.joint_base(side, j);
                (lo..hi).map(move |s| base + s)
            })
            .collect()
    }

    /// Side, joint and part of a flat index.
    pub fn locate(&self, index: usize) -> (Side, usize, Part) {
        let joint = index / self.dims;
        let slot = index % self.dims;
        let p = self.left.len();
        let (side, j) = if joint < p {
            (Side::Left, joint)
        } else if joint < 2 * p {
            (Side::Right, joint - p)
        } else {
            (Side::Center, joint - 2 * p)
        };
        let part = if slot < self.num_negated() {
            Part::Negated
        } else {
            Part::Positive
        };
        (side, j, part)
    }

    /// Flat index of the mirrored coordinate (left <-> right, center fixed).
    pub fn mirror_index(&self, index: usize) -> usize {
        let p = self.left.len();
        let joint = index / self.dims;
        let slot = index % self.dims;
        let mirrored = if joint < p {
            joint + p
        } else if joint < 2 * p {
            joint - p
        } else {
            joint
        };
        mirrored * self.dims + slot
    }

    pub fn transform(&self) -> ChiralityTransform {
        ChiralityTransform::from_layout(self)
    }
}

/// Signed permutation realizing negate-after-swap.
///
/// `apply` computes `y[i] = sign[i] * x[perm[i]]`; since `perm` is an
/// involution this is the same as sending source `i` to destination `perm[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChiralityTransform {
    perm: Vec<usize>,
    sign: Vec<i8>,
}

impl ChiralityTransform {
    pub fn from_layout(layout: &JointLayout) -> Self {
        let n = layout.size();
        let perm = (0..n).map(|i| layout.mirror_index(i)).collect();
        let sign = (0..n)
            .map(|i| match layout.locate(i).2 {
                Part::Negated => -1,
                Part::Positive => 1,
            })
            .collect();
        Self { perm, sign }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            sign: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn sign(&self) -> &[i8] {
        &self.sign
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p) && self.sign.iter().all(|&s| s == 1)
    }

    pub fn apply_slice(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.perm.len());
        for ((o, &p), &s) in out.iter_mut().zip(&self.perm).zip(&self.sign) {
            *o = if s < 0 { -x[p] } else { x[p] };
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_slice(x, &mut out);
        out
    }

    /// Applies the transform along the last axis; leading axes are mapped row by row.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.len() {
            return Err(Error::shape(
                "apply_transform",
                format!("feature axis {} vs transform size {}", x.cols(), self.len()),
            ));
        }
        let mut out = Tensor::zeros(x.shape().to_vec());
        for r in 0..x.rows() {
            self.apply_slice(x.row_slice(r), out.row_slice_mut(r));
        }
        Ok(out)
    }

    /// Dense `N x N` signed permutation matrix with `dense * x == apply(x)`.
    pub fn to_dense(&self) -> Tensor {
        let n = self.len();
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data_mut()[i * n + self.perm[i]] = f64::from(self.sign[i]);
        }
        t
    }

    /// Gather map usable by the autodiff engine: output `i` reads input `perm[i]` scaled by `sign[i]`.
    pub fn gather_map(&self) -> Vec<Option<(usize, f64)>> {
        self.perm
            .iter()
            .zip(&self.sign)
            .map(|(&p, &s)| Some((p, f64::from(s))))
            .collect()
    }
}
