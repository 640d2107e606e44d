//! Synthetic pose regression data and the losses used on it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SCHEMA;
use crate::autodiff::{Tape, Var};
use crate::codec::MatrixBlob;
use crate::error::{Error, Result};
use crate::layers::{ChiralLinearSpec, LinearRecord};
use crate::layout::{ChiralityTransform, JointLayout};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// A single chiral affine map.
    #[default]
    Linear,
    /// Chiral affine, tanh, chiral affine; the hidden layout equals the input layout.
    Mlp,
}

fn one() -> usize {
    1
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub in_layout: JointLayout,
    pub out_layout: JointLayout,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub frames: usize,
    #[serde(default)]
    pub teacher: TeacherKind,
    /// Trailing share of samples held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl TaskSpec {
    pub fn new(
        in_layout: JointLayout,
        out_layout: JointLayout,
        samples: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        Self {
            in_layout,
            out_layout,
            samples,
            noise,
            seed,
            frames: 1,
            teacher: TeacherKind::Linear,
            val_fraction: default_val_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::validation("samples must be positive"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::validation(format!(
                "noise {} must be finite and >= 0",
                self.noise
            )));
        }
        if self.frames == 0 {
            return Err(Error::validation("frames must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::validation(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Inputs `[samples, frames, n_in]` and targets `[samples, frames, n_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.shape().len() != 3 || y.shape().len() != 3 || x.shape()[..2] != y.shape()[..2] {
            return Err(Error::shape(
                "dataset",
                format!(
                    "inputs {:?} and targets {:?} must be [samples, frames, n]",
                    x.shape(),
                    y.shape()
                ),
            ));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let pick = |t: &Tensor| {
            let per = t.shape()[1] * t.shape()[2];
            let mut data = Vec::with_capacity(idx.len() * per);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
            Tensor::new(vec![idx.len(), t.shape()[1], t.shape()[2]], data).expect("subset shape")
        };
        Dataset {
            x: pick(&self.x),
            y: pick(&self.y),
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Dataset {
        self.select(&(start..end).collect::<Vec<_>>())
    }
}

/// Layout file read by `gen-task`: the input layout, an optional output
/// layout (the input layout when absent) and generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFile {
    pub schema: String,
    pub input: JointLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<JointLayout>,
    #[serde(default = "one")]
    pub frames: usize,
    #[serde(default)]
    pub teacher: TeacherKind,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl LayoutFile {
    pub fn new(input: JointLayout, output: Option<JointLayout>) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            input,
            output,
            frames: 1,
            teacher: TeacherKind::default(),
            val_fraction: default_val_fraction(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        super::parse_versioned(text)
    }

    pub fn to_json(&self) -> Result<String> {
        super::to_json(self)
    }

    pub fn task_spec(&self, samples: usize, noise: f64, seed: u64) -> TaskSpec {
        let out = self.output.clone().unwrap_or_else(|| self.input.clone());
        let mut spec = TaskSpec::new(self.input.clone(), out, samples, noise, seed);
        spec.frames = self.frames;
        spec.teacher = self.teacher;
        spec.val_fraction = self.val_fraction;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoseTask {
    pub schema: String,
    pub spec: TaskSpec,
    /// The frozen teacher maps, applied framewise.
    pub teacher: Vec<LinearRecord>,
    pub x: MatrixBlob,
    pub y: MatrixBlob,
}

impl SyntheticPoseTask {
    pub fn generate(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (inl, outl) = (&spec.in_layout, &spec.out_layout);
        let teacher = match spec.teacher {
            TeacherKind::Linear => vec![ChiralLinearSpec::random(inl, outl, &mut rng)],
            TeacherKind::Mlp => vec![
                ChiralLinearSpec::random(inl, inl, &mut rng),
                ChiralLinearSpec::random(inl, outl, &mut rng),
            ],
        };
        let rows = spec.samples * spec.frames;
        let x: Vec<f64> = (0..rows * inl.size())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x = Tensor::new(vec![rows, inl.size()], x)?;
        let mut y = run_teacher(&teacher, &x)?;
        if spec.noise > 0.0 {
            for v in y.data_mut() {
                *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let per_in = spec.frames * inl.size();
        let per_out = spec.frames * outl.size();
        Ok(Self {
            schema: SCHEMA.to_string(),
            teacher: teacher.iter().map(ChiralLinearSpec::to_record).collect(),
            x: MatrixBlob::new(spec.samples, per_in, x.into_data()),
            y: MatrixBlob::new(spec.samples, per_out, y.into_data()),
            spec,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let task: Self = super::parse_versioned(text)?;
        task.spec.validate()?;
        let s = &task.spec;
        let ok = task.x.rows == s.samples
            && task.y.rows == s.samples
            && task.x.cols == s.frames * s.in_layout.size()
            && task.y.cols == s.frames * s.out_layout.size()
            && task.x.data.0.len() == task.x.rows * task.x.cols
            && task.y.data.0.len() == task.y.rows * task.y.cols;
        if !ok {
            return Err(Error::validation("task data sizes do not match its spec"));
        }
        Ok(task)
    }

    pub fn to_json(&self) -> Result<String> {
        super::to_json(self)
    }

    pub fn teacher(&self) -> Result<Vec<ChiralLinearSpec>> {
        self.teacher
            .iter()
            .map(ChiralLinearSpec::from_record)
            .collect()
    }

    pub fn dataset(&self) -> Dataset {
        let s = &self.spec;
        Dataset {
            x: Tensor::new(
                vec![s.samples, s.frames, s.in_layout.size()],
                self.x.data.0.clone(),
            )
            .expect("validated"),
            y: Tensor::new(
                vec![s.samples, s.frames, s.out_layout.size()],
                self.y.data.0.clone(),
            )
            .expect("validated"),
        }
    }

    pub fn n_val(&self) -> usize {
        (self.spec.samples as f64 * self.spec.val_fraction).round() as usize
    }

    /// Leading training share and trailing validation share.
    pub fn split(&self) -> (Dataset, Dataset) {
        let all = self.dataset();
        let n_train = all.len() - self.n_val();
        (all.range(0, n_train), all.range(n_train, all.len()))
    }

    /// The first `ceil(frac * n_train)` training samples.
    pub fn train_subset(&self, frac: f64) -> Result<Dataset> {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::validation(format!(
                "training fraction {frac} outside (0, 1]"
            )));
        }
        let (train, _) = self.split();
        let n = ((train.len() as f64 * frac).ceil() as usize).clamp(1, train.len().max(1));
        if train.is_empty() {
            return Err(Error::validation("task has no training samples"));
        }
        Ok(train.range(0, n))
    }

    pub fn transforms(&self) -> (ChiralityTransform, ChiralityTransform) {
        (
            self.spec.in_layout.transform(),
            self.spec.out_layout.transform(),
        )
    }
}

fn run_teacher(teacher: &[ChiralLinearSpec], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, layer) in teacher.iter().enumerate() {
        if i > 0 {
            h = h.map(f64::tanh);
        }
        h = layer.forward(&h)?;
    }
    Ok(h)
}

/// With probability `prob`, transforms input and target together.
pub fn augment(
    x: &Tensor,
    y: &Tensor,
    t_in: &ChiralityTransform,
    t_out: &ChiralityTransform,
    prob: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::validation(format!(
            "augmentation probability {prob} outside [0, 1]"
        )));
    }
    if rng.random_bool(prob) {
        Ok((t_in.apply(x)?, t_out.apply(y)?))
    } else {
        Ok((x.clone(), y.clone()))
    }
}

/// Mean Euclidean distance over the last axis, averaged over everything else.
pub fn mpjpe(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape().len() < 2 {
        return Err(Error::shape(
            "mpjpe_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let d = pred.cols();
    let n = pred.len() / d.max(1);
    if n == 0 || d == 0 {
        return Err(Error::shape("mpjpe_loss", "empty input"));
    }
    let total: f64 = pred
        .data()
        .chunks(d)
        .zip(target.data().chunks(d))
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Differentiable MPJPE on rows `[rows, joints * dims]`.
pub fn mpjpe_var<'t>(pred: Var<'t>, target: Var<'t>, dims: usize) -> Result<Var<'t>> {
    let n = pred.cols();
    if dims == 0 || !n.is_multiple_of(dims) {
        return Err(Error::shape(
            "mpjpe_loss",
            format!("{n} features do not split into joints of {dims}"),
        ));
    }
    let joints = n / dims;
    let mut sum = Tensor::zeros(vec![n, joints]);
    for j in 0..joints {
        for d in 0..dims {
            sum.data_mut()[(j * dims + d) * joints + j] = 1.0;
        }
    }
    let tape: &'t Tape = pred.tape();
    let sq = pred.sub(target)?.square();
    Ok(sq.matmul(tape.constant(sum))?.sqrt().mean())
}

/// Differentiable mean squared error.
pub fn mse_var<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    Ok(pred.sub(target)?.square().mean())
}
