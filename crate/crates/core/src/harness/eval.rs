//! Plain and flip-averaged evaluation.

use serde::{Deserialize, Serialize};

use super::model::{MatvecMode, Model};
use super::task::{mpjpe, Dataset};
use crate::accounting::MultCounter;
use crate::error::{Error, Result};
use crate::layout::ChiralityTransform;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// One forward pass.
    #[default]
    Plain,
    /// Mean of `F(x)` and `T_out(F(T_in(x)))`.
    FlipAveraged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mode: EvalMode,
    pub samples: usize,
    pub mpjpe: f64,
    pub mse: f64,
    /// Multiplications per sample: the symmetric routine for one plain pass,
    /// the naive routine twice for flip averaging.
    pub mults_per_sample: u64,
}

/// Predictions for `[samples, frames, n_in]` inputs.
pub fn predict(
    model: &Model,
    x: &Tensor,
    mode: EvalMode,
    t_in: &ChiralityTransform,
    t_out: &ChiralityTransform,
) -> Result<Tensor> {
    let y = model.forward(x)?;
    match mode {
        EvalMode::Plain => Ok(y),
        EvalMode::FlipAveraged => {
            let back = t_out.apply(&model.forward(&t_in.apply(x)?)?)?;
            let data = y
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            Tensor::new(y.shape().to_vec(), data)
        }
    }
}

/// Multiplications spent on one sample under `mode`.
pub fn count_mults(model: &Model, sample: &Tensor, mode: EvalMode) -> Result<u64> {
    let mut counter = MultCounter::default();
    match mode {
        EvalMode::Plain => {
            model.forward_counted(sample, MatvecMode::Symmetric, &mut counter)?;
        }
        EvalMode::FlipAveraged => {
            model.forward_counted(sample, MatvecMode::Naive, &mut counter)?;
            model.forward_counted(sample, MatvecMode::Naive, &mut counter)?;
        }
    }
    Ok(counter.count())
}

/// Targets at the frames the model's outputs are aligned with.
pub fn aligned_targets(model: &Model, data: &Dataset) -> Result<Tensor> {
    let frames = model.frame_map(data.frames())?;
    let (s, t, n) = (data.len(), data.frames(), data.y.cols());
    let mut out = Vec::with_capacity(s * frames.len() * n);
    for i in 0..s {
        for &f in &frames {
            out.extend_from_slice(&data.y.data()[(i * t + f) * n..(i * t + f + 1) * n]);
        }
    }
    Tensor::new(vec![s, frames.len(), n], out)
}

pub fn evaluate(
    model: &Model,
    data: &Dataset,
    dims: usize,
    t_in: &ChiralityTransform,
    t_out: &ChiralityTransform,
    mode: EvalMode,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    let pred = predict(model, &data.x, mode, t_in, t_out)?;
    let target = aligned_targets(model, data)?;
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "predictions {:?} vs targets {:?}",
                pred.shape(),
                target.shape()
            ),
        ));
    }
    let rows = pred.len() / dims;
    let err = mpjpe(
        &pred.clone().reshape(vec![rows, dims])?,
        &target.clone().reshape(vec![rows, dims])?,
    )?;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    let first = data.range(0, 1).x;
    Ok(EvalMetrics {
        mode,
        samples: data.len(),
        mpjpe: err,
        mse,
        mults_per_sample: count_mults(model, &first, mode)?,
    })
}
