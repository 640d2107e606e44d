//! Batch normalization with statistics taken over the mirror-augmented batch.
//!
//! Training statistics are those of `B ∪ T(B)` without materializing the
//! doubled batch: the mean is `(m + T m) / 2` for the plain column mean `m`,
//! and since that mean is a fixed point of `T`, the variance is
//! `(v + swap(v)) / 2` for the centered second moment `v`.
//!
//! Scale is shared between mirrored joints. Shift follows the bias pattern of
//! the chiral linear layer: odd on negated coordinates, zero on negated center
//! coordinates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GatherMap, Tape, Var};
use crate::codec::F64Blob;
use crate::error::{Error, Result};
use crate::layout::{JointLayout, Part, Side};
use crate::tensor::Tensor;

const GAMMA_BLOCKS: [(Side, Part); 4] = [
    (Side::Left, Part::Negated),
    (Side::Left, Part::Positive),
    (Side::Center, Part::Negated),
    (Side::Center, Part::Positive),
];
const BETA_BLOCKS: [(Side, Part); 3] = [
    (Side::Left, Part::Negated),
    (Side::Left, Part::Positive),
    (Side::Center, Part::Positive),
];

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Augmented-batch statistics from one training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance of the augmented batch.
    pub var: Vec<f64>,
    /// Size of the augmented batch (twice the number of rows).
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiralBatchNorm {
    layout: JointLayout,
    /// gamma blocks (ln, lp, cn, cp) then beta blocks (ln, lp, cp).
    theta: Vec<f64>,
    block_sizes: Vec<(String, usize)>,
    gamma_map: GatherMap,
    beta_map: GatherMap,
    transform_map: GatherMap,
    swap_map: GatherMap,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    epsilon: f64,
}

impl ChiralBatchNorm {
    pub fn new(layout: &JointLayout, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::validation(format!(
                "momentum {momentum} outside [0, 1]"
            )));
        }
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::validation("epsilon must be positive"));
        }
        let n = layout.size();
        let mut theta = Vec::new();
        let mut block_sizes = Vec::new();
        let mut gamma_map = vec![None; n];
        for (side, part) in GAMMA_BLOCKS {
            for s in layout.slots(side, part) {
                let k = theta.len();
                theta.push(1.0);
                gamma_map[s] = Some((k, 1.0));
                if side == Side::Left {
                    gamma_map[layout.mirror_index(s)] = Some((k, 1.0));
                }
            }
            block_sizes.push((
                format!("gamma_{}{}", side.tag(), part.tag()),
                layout.slots(side, part).len(),
            ));
        }
        let mut beta_map = vec![None; n];
        for (side, part) in BETA_BLOCKS {
            for s in layout.slots(side, part) {
                let k = theta.len();
                theta.push(0.0);
                beta_map[s] = Some((k, 1.0));
                if side == Side::Left {
                    beta_map[layout.mirror_index(s)] = Some((k, part.sign()));
                }
            }
            block_sizes.push((
                format!("beta_{}{}", side.tag(), part.tag()),
                layout.slots(side, part).len(),
            ));
        }
        let t = layout.transform();
        let swap_map: Vec<_> = t.perm().iter().map(|&p| Some((p, 1.0))).collect();
        Ok(Self {
            layout: layout.clone(),
            theta,
            block_sizes,
            gamma_map: gamma_map.into(),
            beta_map: beta_map.into(),
            transform_map: t.gather_map().into(),
            swap_map: swap_map.into(),
            running_mean: vec![0.0; n],
            running_var: vec![1.0; n],
            momentum,
            epsilon,
        })
    }

    pub fn layout(&self) -> &JointLayout {
        &self.layout
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_momentum(&mut self, m: f64) {
        self.momentum = m;
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        let mut off = 0;
        for (n, len) in &self.block_sizes {
            if n == name {
                return Some(&self.theta[off..off + len]);
            }
            off += len;
        }
        None
    }

    pub fn materialize_gamma(&self) -> Vec<f64> {
        gather_plain(&self.gamma_map, &self.theta)
    }

    pub fn materialize_beta(&self) -> Vec<f64> {
        gather_plain(&self.beta_map, &self.theta)
    }

    /// Differentiable forward on `[rows, n]`. Training mode also returns the
    /// batch statistics for [`Self::update_running`].
    pub fn forward_var<'t>(
        &self,
        theta: Var<'t>,
        x: Var<'t>,
        training: bool,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let n = self.layout.size();
        if x.cols() != n {
            return Err(Error::shape(
                "chiral_batchnorm_forward",
                format!("{} features vs layout size {n}", x.cols()),
            ));
        }
        let rows = x.rows();
        if rows == 0 {
            return Err(Error::shape("chiral_batchnorm_forward", "empty batch"));
        }
        let tape = x.tape();
        let gamma = theta.gather(&self.gamma_map)?;
        let beta = theta.gather(&self.beta_map)?;
        let (centered, inv_std, stats) = if training {
            let m = x.mean_rows()?;
            let mean = m.add(m.gather(&self.transform_map)?)?.scale(0.5);
            let centered = x.add_row(mean.scale(-1.0))?;
            let v = centered.square().mean_rows()?;
            let var = v.add(v.gather(&self.swap_map)?)?.scale(0.5);
            let inv_std = var.offset(self.epsilon).sqrt().recip();
            let stats = BatchStats {
                mean: mean.value().into_data(),
                var: var.value().into_data(),
                count: 2 * rows,
            };
            (centered, inv_std, Some(stats))
        } else {
            let mean = tape.constant(Tensor::new(vec![n], self.running_mean.clone())?);
            let inv: Vec<f64> = self
                .running_var
                .iter()
                .map(|v| 1.0 / (v + self.epsilon).sqrt())
                .collect();
            let centered = x.add_row(mean.scale(-1.0))?;
            (centered, tape.constant(Tensor::new(vec![n], inv)?), None)
        };
        let y = centered.mul_row(inv_std)?.mul_row(gamma)?.add_row(beta)?;
        Ok((y, stats))
    }

    /// Exponential moving average update; variance is stored unbiased.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * (b * unbias);
        }
    }

    /// Plain forward; in training mode the running statistics are updated.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (y, stats) = self.forward_const(x, training)?;
        if let Some(s) = stats {
            self.update_running(&s);
        }
        Ok(y)
    }

    /// Plain forward without touching the running statistics.
    pub fn forward_const(
        &self,
        x: &Tensor,
        training: bool,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        let tape = Tape::new();
        let theta = tape.constant(Tensor::new(vec![self.theta.len()], self.theta.clone())?);
        let rows = x.rows();
        let xv = tape.constant(x.clone().reshape(vec![rows, x.cols()])?);
        let (y, stats) = self.forward_var(theta, xv, training)?;
        Ok((y.value().reshape(x.shape().to_vec())?, stats))
    }

    pub fn to_record(&self) -> BatchNormRecord {
        BatchNormRecord {
            layout: self.layout.clone(),
            momentum: self.momentum,
            epsilon: self.epsilon,
            params: F64Blob(self.theta.clone()),
            running_mean: F64Blob(self.running_mean.clone()),
            running_var: F64Blob(self.running_var.clone()),
        }
    }

    pub fn from_record(rec: &BatchNormRecord) -> Result<Self> {
        let mut bn = Self::new(&rec.layout, rec.momentum, rec.epsilon)?;
        let n = rec.layout.size();
        if rec.params.0.len() != bn.theta.len()
            || rec.running_mean.0.len() != n
            || rec.running_var.0.len() != n
        {
            return Err(Error::validation(
                "batchnorm record sizes do not match layout",
            ));
        }
        bn.theta = rec.params.0.clone();
        bn.running_mean = rec.running_mean.0.clone();
        bn.running_var = rec.running_var.0.clone();
        Ok(bn)
    }
}

fn gather_plain(map: &GatherMap, src: &[f64]) -> Vec<f64> {
    map.iter()
        .map(|m| m.map_or(0.0, |(k, s)| s * src[k]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormRecord {
    pub layout: JointLayout,
    pub momentum: f64,
    pub epsilon: f64,
    /// gamma_ln, gamma_lp, gamma_cn, gamma_cp, beta_ln, beta_lp, beta_cp.
    pub params: F64Blob,
    pub running_mean: F64Blob,
    pub running_var: F64Blob,
}
