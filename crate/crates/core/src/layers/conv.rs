//! Dilated 1-D temporal convolution built from per-tap chiral linear maps.
//!
//! Output frame `j` sits at input time `t = (k - 1) * dilation + j * stride`
//! and computes `y_j = sum_tau W_tau x_{t - tau * dilation} + b`. Every tap
//! follows the chiral block pattern independently; the bias is shared across
//! time.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::{blocks_from_map, blocks_to_map, init_uniform, ChiralLinearSpec, LinearPlan};
use crate::autodiff::{GatherMap, Tape, Var};
use crate::codec::MatrixBlob;
use crate::error::{Error, Result};
use crate::layout::JointLayout;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ChiralConv1dSpec {
    plan: Arc<LinearPlan>,
    kernel_size: usize,
    dilation: usize,
    stride: usize,
    /// `kernel_size` weight sets, then one bias set.
    theta: Vec<f64>,
    tap_maps: Vec<GatherMap>,
    bias_map: GatherMap,
}

impl PartialEq for ChiralConv1dSpec {
    fn eq(&self, other: &Self) -> bool {
        self.plan == other.plan
            && self.kernel_size == other.kernel_size
            && self.dilation == other.dilation
            && self.stride == other.stride
            && self.theta == other.theta
    }
}

impl ChiralConv1dSpec {
    pub fn zeros(
        in_layout: &JointLayout,
        out_layout: &JointLayout,
        kernel_size: usize,
        dilation: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel_size == 0 || dilation == 0 || stride == 0 {
            return Err(Error::validation(
                "kernel size, dilation and stride must be positive",
            ));
        }
        let plan = Arc::new(LinearPlan::new(in_layout, out_layout));
        let nw = plan.n_weights();
        let tap_maps = (0..kernel_size)
            .map(|t| plan.weight_t_map(t * nw))
            .collect();
        let bias_map = plan.bias_map((kernel_size - 1) * nw);
        let theta = vec![0.0; kernel_size * nw + plan.n_bias()];
        Ok(Self {
            plan,
            kernel_size,
            dilation,
            stride,
            theta,
            tap_maps,
            bias_map,
        })
    }

    /// Uniform init with the fan-in of the whole window.
    pub fn random(
        in_layout: &JointLayout,
        out_layout: &JointLayout,
        kernel_size: usize,
        dilation: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut spec = Self::zeros(in_layout, out_layout, kernel_size, dilation, stride)?;
        spec.theta = init_uniform(rng, spec.theta.len(), kernel_size * in_layout.size());
        Ok(spec)
    }

    pub fn plan(&self) -> &LinearPlan {
        &self.plan
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn receptive_field(&self) -> usize {
        (self.kernel_size - 1) * self.dilation + 1
    }

    pub fn output_len(&self, time: usize) -> Result<usize> {
        let rf = self.receptive_field();
        if time < rf {
            return Err(Error::shape(
                "chiral_conv1d_forward",
                format!("{time} frames is shorter than the receptive field {rf}"),
            ));
        }
        Ok((time - rf) / self.stride + 1)
    }

    /// Tap `tau` as a standalone linear layer carrying the shared bias.
    pub fn tap(&self, tau: usize) -> ChiralLinearSpec {
        let nw = self.plan.n_weights();
        let mut theta = self.theta[tau * nw..(tau + 1) * nw].to_vec();
        theta.extend_from_slice(&self.theta[self.kernel_size * nw..]);
        let mut spec = ChiralLinearSpec::zeros(self.plan.in_layout(), self.plan.out_layout());
        spec.set_theta(theta).expect("tap size");
        spec
    }

    /// Sum of all taps with the shared bias: the response to a constant-in-time input.
    pub fn collapsed(&self) -> ChiralLinearSpec {
        let nw = self.plan.n_weights();
        let mut theta = vec![0.0; nw];
        for tau in 0..self.kernel_size {
            for (acc, v) in theta.iter_mut().zip(&self.theta[tau * nw..(tau + 1) * nw]) {
                *acc += v;
            }
        }
        theta.extend_from_slice(&self.theta[self.kernel_size * nw..]);
        let mut spec = ChiralLinearSpec::zeros(self.plan.in_layout(), self.plan.out_layout());
        spec.set_theta(theta).expect("collapsed size");
        spec
    }

    /// Input row (within one sequence) read by tap `tau` for output frame `j`.
    pub fn source_frame(&self, j: usize, tau: usize) -> usize {
        (self.kernel_size - 1) * self.dilation + j * self.stride - tau * self.dilation
    }

    /// Differentiable forward on batch-major rows `[batch * time, n_in]`.
    /// Returns `[batch * time_out, n_out]` and `time_out`.
    pub fn forward_var<'t>(
        &self,
        theta: Var<'t>,
        x: Var<'t>,
        batch: usize,
        time: usize,
    ) -> Result<(Var<'t>, usize)> {
        let n_in = self.plan.n_in();
        if x.cols() != n_in || x.rows() != batch * time {
            return Err(Error::shape(
                "chiral_conv1d_forward",
                format!("expected [{batch}*{time}, {n_in}], got {:?}", x.shape()),
            ));
        }
        let t_out = self.output_len(time)?;
        let n_out = self.plan.n_out();
        let mut acc: Option<Var<'t>> = None;
        for tau in 0..self.kernel_size {
            let rows: Arc<[usize]> = (0..batch)
                .flat_map(|b| (0..t_out).map(move |j| (b, j)))
                .map(|(b, j)| b * time + self.source_frame(j, tau))
                .collect::<Vec<_>>()
                .into();
            let xs = x.select_rows(&rows)?;
            let wt = theta
                .gather(&self.tap_maps[tau])?
                .reshape(vec![n_in, n_out])?;
            let term = xs.matmul(wt)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        let y = acc
            .expect("kernel_size > 0")
            .add_row(theta.gather(&self.bias_map)?)?;
        Ok((y, t_out))
    }

    /// Plain forward on `[batch, time, n_in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 3 {
            return Err(Error::shape(
                "chiral_conv1d_forward",
                format!("expected [batch, time, features], got {:?}", x.shape()),
            ));
        }
        let (batch, time) = (x.shape()[0], x.shape()[1]);
        let tape = Tape::new();
        let theta = tape.constant(Tensor::new(vec![self.theta.len()], self.theta.clone())?);
        let xv = tape.constant(x.clone().reshape(vec![batch * time, x.cols()])?);
        let (y, t_out) = self.forward_var(theta, xv, batch, time)?;
        y.value().reshape(vec![batch, t_out, self.plan.n_out()])
    }

    pub fn to_record(&self) -> ConvRecord {
        let nw = self.plan.n_weights();
        let weights_only = |m: BTreeMap<String, MatrixBlob>| {
            m.into_iter().filter(|(k, _)| k.starts_with("W_")).collect()
        };
        let taps = (0..self.kernel_size)
            .map(|tau| weights_only(blocks_to_map(&self.plan, &self.theta, tau * nw)))
            .collect();
        let bias = blocks_to_map(&self.plan, &self.theta, (self.kernel_size - 1) * nw)
            .into_iter()
            .filter(|(k, _)| k.starts_with("b_"))
            .collect();
        ConvRecord {
            in_layout: self.plan.in_layout().clone(),
            out_layout: self.plan.out_layout().clone(),
            kernel_size: self.kernel_size,
            dilation: self.dilation,
            stride: self.stride,
            taps,
            bias,
        }
    }

    pub fn from_record(rec: &ConvRecord) -> Result<Self> {
        let mut spec = Self::zeros(
            &rec.in_layout,
            &rec.out_layout,
            rec.kernel_size,
            rec.dilation,
            rec.stride,
        )?;
        if rec.taps.len() != rec.kernel_size {
            return Err(Error::validation(format!(
                "{} taps recorded for kernel size {}",
                rec.taps.len(),
                rec.kernel_size
            )));
        }
        let nw = spec.plan.n_weights();
        for (tau, tap) in rec.taps.iter().enumerate() {
            let mut blocks = tap.clone();
            blocks.extend(rec.bias.clone());
            let part = blocks_from_map(&spec.plan, &blocks, 0, spec.plan.n_params())?;
            spec.theta[tau * nw..(tau + 1) * nw].copy_from_slice(&part[..nw]);
            if tau == 0 {
                let start = spec.kernel_size * nw;
                spec.theta[start..].copy_from_slice(&part[nw..]);
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvRecord {
    pub in_layout: JointLayout,
    pub out_layout: JointLayout,
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
    pub taps: Vec<BTreeMap<String, MatrixBlob>>,
    pub bias: BTreeMap<String, MatrixBlob>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut ChaCha8Rng, b: usize, t: usize, n: usize) -> Tensor {
        Tensor::new(
            vec![b, t, n],
            (0..b * t * n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn kernel_one_is_framewise_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = JointLayout::synthetic("a", 2, 1, 2, &[0]).unwrap();
        let b = JointLayout::synthetic("b", 1, 2, 3, &[1]).unwrap();
        let conv = ChiralConv1dSpec::random(&a, &b, 1, 1, 1, &mut rng).unwrap();
        let x = random_seq(&mut rng, 2, 5, a.size());
        let y = conv.forward(&x).unwrap();
        let lin = conv.tap(0).forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, b.size()]);
        assert!(y.max_abs_diff(&lin) <= 1e-14);
    }

    #[test]
    fn constant_input_gives_collapsed_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = JointLayout::synthetic("a", 1, 1, 2, &[0]).unwrap();
        let conv = ChiralConv1dSpec::random(&a, &a, 3, 2, 1, &mut rng).unwrap();
        let frame: Vec<f64> = (0..a.size()).map(|i| i as f64 * 0.3 - 0.5).collect();
        let x = Tensor::new(vec![1, 7, a.size()], frame.repeat(7)).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, a.size()]);
        let once = conv.collapsed().forward(&Tensor::row(frame)).unwrap();
        for j in 0..3 {
            let row = &y.data()[j * a.size()..(j + 1) * a.size()];
            for (p, q) in row.iter().zip(once.data()) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn too_short_sequences_are_rejected() {
        let a = JointLayout::synthetic("a", 1, 0, 1, &[0]).unwrap();
        let conv = ChiralConv1dSpec::zeros(&a, &a, 3, 3, 1).unwrap();
        assert_eq!(conv.receptive_field(), 7);
        assert!(conv.forward(&Tensor::zeros(vec![1, 6, 2])).is_err());
        assert!(conv.forward(&Tensor::zeros(vec![1, 7, 2])).is_ok());
    }

    #[test]
    fn strided_output_length() {
        let a = JointLayout::synthetic("a", 1, 0, 1, &[0]).unwrap();
        let conv = ChiralConv1dSpec::zeros(&a, &a, 3, 1, 2).unwrap();
        assert_eq!(conv.output_len(9).unwrap(), 4);
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = JointLayout::synthetic("a", 1, 1, 2, &[1]).unwrap();
        let conv = ChiralConv1dSpec::random(&a, &a, 3, 1, 1, &mut rng).unwrap();
        let json = serde_json::to_string(&conv.to_record()).unwrap();
        let back = ChiralConv1dSpec::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, conv);
    }
}
