//! Unconstrained fully connected layer, used by the baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::init_uniform;
use crate::autodiff::{GatherMap, Tape, Var};
use crate::codec::MatrixBlob;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y = x W^T + b` with `W` stored row-major `[n_out, n_in]` followed by `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSpec {
    n_in: usize,
    n_out: usize,
    theta: Vec<f64>,
}

impl DenseSpec {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            theta: vec![0.0; n_in * n_out + n_out],
        }
    }

    pub fn random(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            n_in,
            n_out,
            theta: init_uniform(rng, n_in * n_out + n_out, n_in),
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn weight(&self) -> Tensor {
        Tensor::new(
            vec![self.n_out, self.n_in],
            self.theta[..self.n_in * self.n_out].to_vec(),
        )
        .expect("weight shape")
    }

    pub fn bias(&self) -> &[f64] {
        &self.theta[self.n_in * self.n_out..]
    }

    pub fn weight_t_map(&self) -> GatherMap {
        let mut map = Vec::with_capacity(self.n_in * self.n_out);
        for c in 0..self.n_in {
            for r in 0..self.n_out {
                map.push(Some((r * self.n_in + c, 1.0)));
            }
        }
        map.into()
    }

    pub fn bias_map(&self) -> GatherMap {
        let off = self.n_in * self.n_out;
        (0..self.n_out)
            .map(|k| Some((off + k, 1.0)))
            .collect::<Vec<_>>()
            .into()
    }

    pub fn forward_var<'t>(
        &self,
        theta: Var<'t>,
        x: Var<'t>,
        wt_map: &GatherMap,
        b_map: &GatherMap,
    ) -> Result<Var<'t>> {
        if x.cols() != self.n_in {
            return Err(Error::shape(
                "dense_forward",
                format!("{} features vs {} inputs", x.cols(), self.n_in),
            ));
        }
        let wt = theta.gather(wt_map)?.reshape(vec![self.n_in, self.n_out])?;
        x.matmul(wt)?.add_row(theta.gather(b_map)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let theta = tape.constant(Tensor::new(vec![self.theta.len()], self.theta.clone())?);
        let rows = x.rows();
        let xv = tape.constant(x.clone().reshape(vec![rows, x.cols()])?);
        let y = self.forward_var(theta, xv, &self.weight_t_map(), &self.bias_map())?;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = self.n_out;
        y.value().reshape(shape)
    }

    pub fn to_record(&self) -> DenseRecord {
        DenseRecord {
            in_features: self.n_in,
            out_features: self.n_out,
            weight: MatrixBlob::new(
                self.n_out,
                self.n_in,
                self.theta[..self.n_in * self.n_out].to_vec(),
            ),
            bias: MatrixBlob::new(1, self.n_out, self.bias().to_vec()),
        }
    }

    pub fn from_record(rec: &DenseRecord) -> Result<Self> {
        let (i, o) = (rec.in_features, rec.out_features);
        if rec.weight.rows != o
            || rec.weight.cols != i
            || rec.weight.data.0.len() != i * o
            || rec.bias.data.0.len() != o
        {
            return Err(Error::validation("dense record sizes are inconsistent"));
        }
        let mut theta = rec.weight.data.0.clone();
        theta.extend_from_slice(&rec.bias.data.0);
        Ok(Self {
            n_in: i,
            n_out: o,
            theta,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseRecord {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: MatrixBlob,
    pub bias: MatrixBlob,
}
