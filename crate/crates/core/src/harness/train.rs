//! Mini-batch training with chirality augmentation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{LossKind, OptimizerConfig};
use super::eval::{aligned_targets, evaluate, EvalMode};
use super::model::{train_rng, Layer, Model, ModelRecord};
use super::task::{augment, mpjpe_var, mse_var, Dataset, SyntheticPoseTask};
use super::SCHEMA;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layout::ChiralityTransform;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub train_samples: usize,
    /// Mean training loss of every epoch, measured during the epoch.
    pub loss_curve: Vec<f64>,
    /// Evaluation-mode MPJPE on the training samples after training.
    pub train_mpjpe: f64,
    pub val_mpjpe: Option<f64>,
    pub loss_threshold: Option<f64>,
    pub threshold_met: Option<bool>,
}

/// A trained model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub schema: String,
    pub model: ModelRecord,
    pub metrics: TrainReport,
}

impl TrainedModel {
    pub fn new(model: &Model, metrics: TrainReport) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            model: model.to_record(),
            metrics,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        super::parse_versioned(text)
    }

    pub fn to_json(&self) -> Result<String> {
        super::to_json(self)
    }
}

struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    fn new(cfg: OptimizerConfig, model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .layers()
            .iter()
            .map(|l| vec![0.0; l.theta().len()])
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, layers: &mut [Layer], grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        for (i, layer) in layers.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let theta = layer.theta_mut();
            match self.cfg {
                OptimizerConfig::Adam {
                    betas: (b1, b2),
                    eps,
                    ..
                } => {
                    let c1 = 1.0 - b1.powi(self.t);
                    let c2 = 1.0 - b2.powi(self.t);
                    for k in 0..theta.len() {
                        let m = &mut self.m[i][k];
                        let v = &mut self.v[i][k];
                        *m = b1 * *m + (1.0 - b1) * g[k];
                        *v = b2 * *v + (1.0 - b2) * g[k] * g[k];
                        theta[k] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
                OptimizerConfig::Sgd { momentum, .. } => {
                    for k in 0..theta.len() {
                        let v = &mut self.m[i][k];
                        *v = momentum * *v + g[k];
                        theta[k] -= lr * *v;
                    }
                }
            }
        }
    }
}

/// Trains on the first `frac` of the task's training split and reports
/// validation error on its held-out split.
pub fn train(model: &mut Model, task: &SyntheticPoseTask, frac: f64) -> Result<TrainReport> {
    let data = task.train_subset(frac)?;
    let (_, val) = task.split();
    let (t_in, t_out) = task.transforms();
    let val = (!val.is_empty()).then_some(val);
    train_on(
        model,
        &data,
        val.as_ref(),
        &t_in,
        &t_out,
        task.spec.out_layout.dims(),
    )
}

pub fn train_on(
    model: &mut Model,
    data: &Dataset,
    val: Option<&Dataset>,
    t_in: &ChiralityTransform,
    t_out: &ChiralityTransform,
    dims: usize,
) -> Result<TrainReport> {
    if model.input().size() != data.x.cols() || model.output().size() != data.y.cols() {
        return Err(Error::validation(format!(
            "model maps {} -> {} features, task has {} -> {}",
            model.input().size(),
            model.output().size(),
            data.x.cols(),
            data.y.cols()
        )));
    }
    if data.is_empty() {
        return Err(Error::validation("no training samples"));
    }
    let cfg = model.training().clone();
    let mut rng = train_rng(cfg.seed);
    let frames = data.frames();
    let frame_map = model.frame_map(frames)?;
    let targets = aligned_targets(model, data)?;
    let (n_in, n_out) = (data.x.cols(), data.y.cols());
    let mut opt = Optimizer::new(cfg.optimizer, model);
    let mut lr = cfg.optimizer.lr();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut xb = Vec::with_capacity(b * frames * n_in);
            let mut yb = Vec::with_capacity(b * frame_map.len() * n_out);
            for &i in chunk {
                let x = Tensor::new(
                    vec![frames, n_in],
                    data.x.data()[i * frames * n_in..(i + 1) * frames * n_in].to_vec(),
                )?;
                let tl = frame_map.len();
                let y = Tensor::new(
                    vec![tl, n_out],
                    targets.data()[i * tl * n_out..(i + 1) * tl * n_out].to_vec(),
                )?;
                let (x, y) = augment(&x, &y, t_in, t_out, cfg.augmentation_prob, &mut rng)?;
                xb.extend(x.into_data());
                yb.extend(y.into_data());
            }
            let tape = Tape::new();
            let params = model.param_vars(&tape, true)?;
            let xv = tape.constant(Tensor::new(vec![b * frames, n_in], xb)?);
            let yv = tape.constant(Tensor::new(vec![b * frame_map.len(), n_out], yb)?);
            let pass = model.forward_var(&params, xv, b, frames, true, &mut rng)?;
            let loss = match cfg.loss {
                LossKind::Mpjpe => mpjpe_var(pass.output, yv, dims)?,
                LossKind::Mse => mse_var(pass.output, yv)?,
            };
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: steps,
                    loss: value,
                });
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = params
                .iter()
                .map(|p| p.and_then(|v| grads.get(v).map(<[f64]>::to_vec)))
                .collect();
            if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step: steps,
                    loss: f64::NAN,
                });
            }
            model.apply_bn_stats(&pass.bn_stats);
            opt.step(model.layers_mut(), &grads, lr);
            total += value * b as f64;
            steps += 1;
        }
        loss_curve.push(total / data.len() as f64);
        lr *= cfg.lr_decay;
        model.scale_bn_momentum(cfg.bn_momentum_decay);
    }

    let train_mpjpe = evaluate(model, data, dims, t_in, t_out, EvalMode::Plain)?.mpjpe;
    if !train_mpjpe.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            step: steps,
            loss: train_mpjpe,
        });
    }
    let val_mpjpe = match val {
        Some(v) => Some(evaluate(model, v, dims, t_in, t_out, EvalMode::Plain)?.mpjpe),
        None => None,
    };
    let threshold_met = cfg
        .loss_threshold
        .map(|th| loss_curve.last().is_some_and(|&l| l <= th));
    Ok(TrainReport {
        epochs: cfg.epochs,
        steps,
        train_samples: data.len(),
        loss_curve,
        train_mpjpe,
        val_mpjpe,
        loss_threshold: cfg.loss_threshold,
        threshold_met,
    })
}
