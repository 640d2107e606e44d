//! Parameter-matched unconstrained baselines and the limited-data comparison.

use serde::{Deserialize, Serialize};

use super::config::{LayerConfig, ModelConfig};
use super::model::{Layer, Model};
use super::task::{SyntheticPoseTask, TaskSpec};
use super::train::train;
use crate::error::{Error, Result};
use crate::layers::ActivationKind;

/// Two dense layers whose hidden width makes the total parameter count as
/// close as possible to that of the chiral model built from `cfg`.
pub fn param_matched_baseline(cfg: &ModelConfig) -> Result<ModelConfig> {
    let chiral = Model::from_config(cfg)?;
    let target = chiral.n_params();
    let (n_in, n_out) = (chiral.input().size(), chiral.output().size());
    let activation = chiral
        .layers()
        .iter()
        .find_map(|l| match l {
            Layer::Activation(k) => Some(*k),
            _ => None,
        })
        .unwrap_or(ActivationKind::Tanh);
    // (n_in + 1) h + (h + 1) n_out = target
    let h = ((target as f64 - n_out as f64) / (n_in + 1 + n_out) as f64)
        .round()
        .max(1.0) as usize;
    let mut base = ModelConfig::new(
        format!("{}-dense-baseline", cfg.name),
        vec![
            LayerConfig::Dense {
                in_features: n_in,
                out_features: h,
            },
            LayerConfig::Activation { activation },
            LayerConfig::Dense {
                in_features: h,
                out_features: n_out,
            },
        ],
    );
    base.training = cfg.training.clone();
    Ok(base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRun {
    pub seed: u64,
    pub chiral_val_mpjpe: f64,
    pub baseline_val_mpjpe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub fraction: f64,
    pub chiral_params: usize,
    pub baseline_params: usize,
    pub runs: Vec<StudyRun>,
    pub chiral_median: f64,
    pub baseline_median: f64,
}

/// Trains the chiral model and its matched baseline on `frac` of the
/// training data for every seed; the seed drives both data and init.
pub fn limited_data_study(
    cfg: &ModelConfig,
    spec: &TaskSpec,
    frac: f64,
    seeds: &[u64],
) -> Result<StudyReport> {
    if seeds.is_empty() {
        return Err(Error::validation("at least one seed is required"));
    }
    let mut runs = Vec::new();
    let (mut cp, mut bp) = (0, 0);
    for &seed in seeds {
        let mut s = spec.clone();
        s.seed = seed;
        let task = SyntheticPoseTask::generate(s)?;
        let mut c = cfg.clone();
        c.training.seed = seed;
        let b = param_matched_baseline(&c)?;
        let mut chiral = Model::from_config(&c)?;
        let mut base = Model::from_config(&b)?;
        cp = chiral.n_params();
        bp = base.n_params();
        let rc = train(&mut chiral, &task, frac)?;
        let rb = train(&mut base, &task, frac)?;
        runs.push(StudyRun {
            seed,
            chiral_val_mpjpe: rc
                .val_mpjpe
                .ok_or_else(|| Error::validation("task has no validation split"))?,
            baseline_val_mpjpe: rb
                .val_mpjpe
                .ok_or_else(|| Error::validation("task has no validation split"))?,
        });
    }
    let chiral_median = median(runs.iter().map(|r| r.chiral_val_mpjpe).collect());
    let baseline_median = median(runs.iter().map(|r| r.baseline_val_mpjpe).collect());
    Ok(StudyReport {
        fraction: frac,
        chiral_params: cp,
        baseline_params: bp,
        runs,
        chiral_median,
        baseline_median,
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
