//! Layer stacks built from a [`ModelConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LayerConfig, ModelConfig, TrainingConfig};
use super::SCHEMA;
use crate::accounting::MultCounter;
use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    check_invariant_layout, naive_matvec, ActivationKind, BatchNormRecord, BatchStats,
    ChiralBatchNorm, ChiralConv1dSpec, ChiralLinearSpec, ConvRecord, DenseRecord, DenseSpec,
    Dropout, LinearRecord, SymmetricMatvec,
};
use crate::layout::{ChiralityTransform, JointLayout};
use crate::recurrent::{CellKind, CellRecord, RecurrentCell};
use crate::tensor::Tensor;

/// What flows between layers: a structured pose vector or plain features.
#[derive(Debug, Clone, PartialEq)]
pub enum Stream {
    Layout(JointLayout),
    Features(usize),
}

impl Stream {
    pub fn size(&self) -> usize {
        match self {
            Stream::Layout(l) => l.size(),
            Stream::Features(n) => *n,
        }
    }

    pub fn layout(&self) -> Option<&JointLayout> {
        match self {
            Stream::Layout(l) => Some(l),
            Stream::Features(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(ChiralLinearSpec),
    Conv(ChiralConv1dSpec),
    BatchNorm(ChiralBatchNorm),
    Activation(ActivationKind),
    Dropout(Dropout),
    Recurrent(RecurrentCell),
    Head(ChiralLinearSpec),
    Dense(DenseSpec),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "chiral_linear",
            Layer::Conv(_) => "chiral_conv1d",
            Layer::BatchNorm(_) => "chiral_batchnorm",
            Layer::Activation(_) => "activation",
            Layer::Dropout(_) => "dropout",
            Layer::Recurrent(c) => match c.kind() {
                CellKind::Lstm => "chiral_lstm",
                CellKind::Gru => "chiral_gru",
            },
            Layer::Head(_) => "invariance_head",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn theta(&self) -> &[f64] {
        match self {
            Layer::Linear(s) | Layer::Head(s) => s.theta(),
            Layer::Conv(s) => s.theta(),
            Layer::BatchNorm(s) => s.theta(),
            Layer::Recurrent(s) => s.theta(),
            Layer::Dense(s) => s.theta(),
            Layer::Activation(_) | Layer::Dropout(_) => &[],
        }
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        match self {
            Layer::Linear(s) | Layer::Head(s) => s.theta_mut(),
            Layer::Conv(s) => s.theta_mut(),
            Layer::BatchNorm(s) => s.theta_mut(),
            Layer::Recurrent(s) => s.theta_mut(),
            Layer::Dense(s) => s.theta_mut(),
            Layer::Activation(_) | Layer::Dropout(_) => &mut [],
        }
    }

    pub fn is_chiral(&self) -> bool {
        !matches!(self, Layer::Dense(_))
    }

    /// The stream this layer requires, if it constrains its input.
    fn input(&self) -> Option<Stream> {
        match self {
            Layer::Linear(s) | Layer::Head(s) => Some(Stream::Layout(s.in_layout().clone())),
            Layer::Conv(s) => Some(Stream::Layout(s.plan().in_layout().clone())),
            Layer::BatchNorm(s) => Some(Stream::Layout(s.layout().clone())),
            Layer::Recurrent(s) => Some(Stream::Layout(s.in_layout().clone())),
            Layer::Dense(s) => Some(Stream::Features(s.n_in())),
            Layer::Activation(_) | Layer::Dropout(_) => None,
        }
    }

    fn output(&self, input: &Stream) -> Stream {
        match self {
            Layer::Linear(s) | Layer::Head(s) => Stream::Layout(s.out_layout().clone()),
            Layer::Conv(s) => Stream::Layout(s.plan().out_layout().clone()),
            Layer::Recurrent(s) => Stream::Layout(s.hidden_layout().clone()),
            Layer::Dense(s) => Stream::Features(s.n_out()),
            Layer::BatchNorm(_) | Layer::Activation(_) | Layer::Dropout(_) => input.clone(),
        }
    }

    /// Differentiable forward on batch-major rows `[batch * time, n]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_var<'t>(
        &self,
        theta: Option<Var<'t>>,
        x: Var<'t>,
        batch: usize,
        time: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t>, usize, Option<BatchStats>)> {
        let theta = || theta.expect("parametrized layer");
        Ok(match self {
            Layer::Linear(s) | Layer::Head(s) => (s.forward_var(theta(), x)?, time, None),
            Layer::Conv(s) => {
                let (y, t) = s.forward_var(theta(), x, batch, time)?;
                (y, t, None)
            }
            Layer::BatchNorm(s) => {
                let (y, stats) = s.forward_var(theta(), x, training)?;
                (y, time, stats)
            }
            Layer::Activation(k) => (k.apply_var(x), time, None),
            Layer::Dropout(d) => (d.forward_var(x, training, rng)?, time, None),
            Layer::Recurrent(c) => (
                c.unroll_var(theta(), x, batch, time, None, None)?,
                time,
                None,
            ),
            Layer::Dense(d) => (
                d.forward_var(theta(), x, &d.weight_t_map(), &d.bias_map())?,
                time,
                None,
            ),
        })
    }

    fn from_config(cfg: &LayerConfig, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let r = |l: &super::LayoutRef| l.resolve(&model.layouts);
        Ok(match cfg {
            LayerConfig::ChiralLinear {
                in_layout,
                out_layout,
            } => Layer::Linear(ChiralLinearSpec::random(
                &r(in_layout)?,
                &r(out_layout)?,
                rng,
            )),
            LayerConfig::ChiralConv1d {
                in_layout,
                out_layout,
                kernel_size,
                dilation,
                stride,
            } => Layer::Conv(ChiralConv1dSpec::random(
                &r(in_layout)?,
                &r(out_layout)?,
                *kernel_size,
                *dilation,
                *stride,
                rng,
            )?),
            LayerConfig::ChiralBatchnorm {
                layout,
                momentum,
                epsilon,
            } => Layer::BatchNorm(ChiralBatchNorm::new(&r(layout)?, *momentum, *epsilon)?),
            LayerConfig::Activation { activation } => Layer::Activation(*activation),
            LayerConfig::Dropout { p } => Layer::Dropout(Dropout::new(*p)?),
            LayerConfig::ChiralLstm {
                in_layout,
                hidden_layout,
                gate_sharing,
            } => Layer::Recurrent(RecurrentCell::random(
                CellKind::Lstm,
                &r(in_layout)?,
                &r(hidden_layout)?,
                *gate_sharing,
                rng,
            )),
            LayerConfig::ChiralGru {
                in_layout,
                hidden_layout,
                gate_sharing,
            } => Layer::Recurrent(RecurrentCell::random(
                CellKind::Gru,
                &r(in_layout)?,
                &r(hidden_layout)?,
                *gate_sharing,
                rng,
            )),
            LayerConfig::InvarianceHead {
                in_layout,
                out_layout,
            } => {
                let out = r(out_layout)?;
                check_invariant_layout(&out)?;
                Layer::Head(ChiralLinearSpec::random(&r(in_layout)?, &out, rng))
            }
            LayerConfig::Dense {
                in_features,
                out_features,
            } => {
                if *in_features == 0 || *out_features == 0 {
                    return Err(Error::validation("dense layer sizes must be positive"));
                }
                Layer::Dense(DenseSpec::random(*in_features, *out_features, rng))
            }
        })
    }

    fn to_record(&self) -> LayerRecord {
        match self {
            Layer::Linear(s) => LayerRecord::ChiralLinear(s.to_record()),
            Layer::Conv(s) => LayerRecord::ChiralConv1d(s.to_record()),
            Layer::BatchNorm(s) => LayerRecord::ChiralBatchnorm(s.to_record()),
            Layer::Activation(k) => LayerRecord::Activation { activation: *k },
            Layer::Dropout(d) => LayerRecord::Dropout { p: d.rate() },
            Layer::Recurrent(c) => match c.kind() {
                CellKind::Lstm => LayerRecord::ChiralLstm(c.to_record()),
                CellKind::Gru => LayerRecord::ChiralGru(c.to_record()),
            },
            Layer::Head(s) => LayerRecord::InvarianceHead(s.to_record()),
            Layer::Dense(d) => LayerRecord::Dense(d.to_record()),
        }
    }

    fn from_record(rec: &LayerRecord) -> Result<Self> {
        Ok(match rec {
            LayerRecord::ChiralLinear(r) => Layer::Linear(ChiralLinearSpec::from_record(r)?),
            LayerRecord::ChiralConv1d(r) => Layer::Conv(ChiralConv1dSpec::from_record(r)?),
            LayerRecord::ChiralBatchnorm(r) => Layer::BatchNorm(ChiralBatchNorm::from_record(r)?),
            LayerRecord::Activation { activation } => Layer::Activation(*activation),
            LayerRecord::Dropout { p } => Layer::Dropout(Dropout::new(*p)?),
            LayerRecord::ChiralLstm(r) => {
                Layer::Recurrent(RecurrentCell::from_record(CellKind::Lstm, r)?)
            }
            LayerRecord::ChiralGru(r) => {
                Layer::Recurrent(RecurrentCell::from_record(CellKind::Gru, r)?)
            }
            LayerRecord::InvarianceHead(r) => {
                check_invariant_layout(&r.out_layout)?;
                Layer::Head(ChiralLinearSpec::from_record(r)?)
            }
            LayerRecord::Dense(r) => Layer::Dense(DenseSpec::from_record(r)?),
        })
    }
}

/// Serialized layer with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerRecord {
    ChiralLinear(LinearRecord),
    ChiralConv1d(ConvRecord),
    ChiralBatchnorm(BatchNormRecord),
    Activation { activation: ActivationKind },
    Dropout { p: f64 },
    ChiralLstm(CellRecord),
    ChiralGru(CellRecord),
    InvarianceHead(LinearRecord),
    Dense(DenseRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub schema: String,
    pub name: String,
    pub training: TrainingConfig,
    pub layers: Vec<LayerRecord>,
}

/// Which matrix-vector routine the instrumented inference path uses for chiral layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatvecMode {
    Symmetric,
    Naive,
}

/// Result of a differentiable forward pass.
pub struct Pass<'t> {
    /// Batch-major rows `[batch * time, n_out]`.
    pub output: Var<'t>,
    pub time: usize,
    pub bn_stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    name: String,
    layers: Vec<Layer>,
    input: Stream,
    output: Stream,
    training: TrainingConfig,
}

/// Generator for initial parameters.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for training-time randomness (shuffling, augmentation, dropout).
pub fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Model {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        if cfg.schema != SCHEMA {
            return Err(Error::validation(format!(
                "unsupported schema \"{}\"",
                cfg.schema
            )));
        }
        cfg.training.validate()?;
        let mut rng = init_rng(cfg.training.seed);
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for (i, l) in cfg.layers.iter().enumerate() {
            layers.push(
                Layer::from_config(l, cfg, &mut rng)
                    .map_err(|e| Error::validation(format!("layer {i}: {e}")))?,
            );
        }
        Self::from_layers(cfg.name.clone(), layers, cfg.training.clone())
    }

    pub fn from_layers(name: String, layers: Vec<Layer>, training: TrainingConfig) -> Result<Self> {
        let input = layers.iter().find_map(Layer::input).ok_or_else(|| {
            Error::validation("model needs at least one layer with a defined input")
        })?;
        if layers.first().and_then(Layer::input).is_none() {
            return Err(Error::validation(
                "the first layer must define the input layout",
            ));
        }
        let mut stream = input.clone();
        for (i, layer) in layers.iter().enumerate() {
            match (layer.input(), &stream) {
                (Some(Stream::Features(n)), s) if s.size() != n => {
                    return Err(Error::validation(format!(
                        "layer {i} ({}) expects {n} features, previous layer gives {}",
                        layer.kind_name(),
                        s.size()
                    )))
                }
                (Some(Stream::Layout(_)), Stream::Features(_)) => {
                    return Err(Error::validation(format!(
                        "layer {i} ({}) needs a joint layout but follows an unstructured layer",
                        layer.kind_name()
                    )))
                }
                (Some(Stream::Layout(want)), Stream::Layout(have)) if &want != have => {
                    return Err(Error::validation(format!(
                        "layer {i} ({}) input layout does not match the previous output layout",
                        layer.kind_name()
                    )))
                }
                _ => {}
            }
            if let Layer::Activation(k) = layer {
                if let Stream::Layout(l) = &stream {
                    if !k.is_odd() && l.num_negated() > 0 {
                        return Err(Error::validation(format!(
                            "layer {i}: activation {} is not odd and the layout has negated dims",
                            k.name()
                        )));
                    }
                }
            }
            stream = layer.output(&stream);
        }
        training.validate()?;
        Ok(Self {
            name,
            layers,
            input,
            output: stream,
            training,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input(&self) -> &Stream {
        &self.input
    }

    pub fn output(&self) -> &Stream {
        &self.output
    }

    pub fn training(&self) -> &TrainingConfig {
        &self.training
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.theta().len()).sum()
    }

    /// Input and output transforms, when every layer is chiral.
    pub fn transforms(&self) -> Option<(ChiralityTransform, ChiralityTransform)> {
        if !self.layers.iter().all(Layer::is_chiral) {
            return None;
        }
        Some((
            self.input.layout()?.transform(),
            self.output.layout()?.transform(),
        ))
    }

    /// For each output frame, the input frame it is aligned with.
    pub fn frame_map(&self, time: usize) -> Result<Vec<usize>> {
        let mut frames: Vec<usize> = (0..time).collect();
        for layer in &self.layers {
            if let Layer::Conv(c) = layer {
                let t_out = c.output_len(frames.len())?;
                frames = (0..t_out).map(|j| frames[c.source_frame(j, 0)]).collect();
            }
        }
        Ok(frames)
    }

    /// One tape value per parametrized layer.
    pub fn param_vars<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<Vec<Option<Var<'t>>>> {
        self.layers
            .iter()
            .map(|l| {
                let th = l.theta();
                if th.is_empty() {
                    return Ok(None);
                }
                let t = Tensor::new(vec![th.len()], th.to_vec())?;
                Ok(Some(if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }))
            })
            .collect()
    }

    pub fn forward_var<'t>(
        &self,
        params: &[Option<Var<'t>>],
        x: Var<'t>,
        batch: usize,
        time: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Pass<'t>> {
        if x.cols() != self.input.size() || x.rows() != batch * time {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "expected [{batch}*{time}, {}], got {:?}",
                    self.input.size(),
                    x.shape()
                ),
            ));
        }
        let mut h = x;
        let mut t = time;
        let mut bn_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, t_next, stats) = layer.forward_var(params[i], h, batch, t, training, rng)?;
            if let Some(s) = stats {
                bn_stats.push((i, s));
            }
            h = y;
            t = t_next;
        }
        Ok(Pass {
            output: h,
            time: t,
            bn_stats,
        })
    }

    /// Evaluation-mode forward on `[batch, n]` or `[batch, time, n]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, time, three) = batch_time(x, self.input.size())?;
        let tape = Tape::new();
        let params = self.param_vars(&tape, false)?;
        let xv = tape.constant(x.clone().reshape(vec![batch * time, x.cols()])?);
        let mut rng = init_rng(0);
        let pass = self.forward_var(&params, xv, batch, time, false, &mut rng)?;
        let n_out = self.output.size();
        if three {
            pass.output.value().reshape(vec![batch, pass.time, n_out])
        } else {
            pass.output.value().reshape(vec![batch, n_out])
        }
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (i, s) in stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[*i] {
                bn.update_running(s);
            }
        }
    }

    pub fn scale_bn_momentum(&mut self, factor: f64) {
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.set_momentum(bn.momentum() * factor);
            }
        }
    }

    /// Evaluation-mode forward, one sample and frame at a time, counting
    /// multiplications. Chiral affine maps use `mode`; dense layers are
    /// always naive.
    pub fn forward_counted(
        &self,
        x: &Tensor,
        mode: MatvecMode,
        counter: &mut MultCounter,
    ) -> Result<Tensor> {
        let (batch, time, three) = batch_time(x, self.input.size())?;
        let n_in = self.input.size();
        let mut out = Vec::new();
        let mut t_out = 0;
        let execs: Vec<LayerExec> = self
            .layers
            .iter()
            .map(|l| LayerExec::new(l, mode))
            .collect();
        for b in 0..batch {
            let mut frames: Vec<Vec<f64>> = (0..time)
                .map(|t| x.data()[(b * time + t) * n_in..(b * time + t + 1) * n_in].to_vec())
                .collect();
            for exec in &execs {
                frames = exec.run(frames, counter)?;
            }
            t_out = frames.len();
            for f in frames {
                out.extend(f);
            }
        }
        let n_out = self.output.size();
        if three {
            Tensor::new(vec![batch, t_out, n_out], out)
        } else {
            Tensor::new(vec![batch, n_out], out)
        }
    }

    pub fn to_record(&self) -> ModelRecord {
        ModelRecord {
            schema: SCHEMA.to_string(),
            name: self.name.clone(),
            training: self.training.clone(),
            layers: self.layers.iter().map(Layer::to_record).collect(),
        }
    }

    pub fn from_record(rec: &ModelRecord) -> Result<Self> {
        if rec.schema != SCHEMA {
            return Err(Error::validation(format!(
                "unsupported schema \"{}\"",
                rec.schema
            )));
        }
        let layers = rec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Layer::from_record(l).map_err(|e| Error::validation(format!("layer {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(rec.name.clone(), layers, rec.training.clone())
    }
}

fn batch_time(x: &Tensor, n: usize) -> Result<(usize, usize, bool)> {
    let s = x.shape();
    let (batch, time, three) = match s.len() {
        2 => (s[0], 1, false),
        3 => (s[0], s[1], true),
        _ => {
            return Err(Error::shape(
                "model_forward",
                format!("expected [batch, n] or [batch, time, n], got {s:?}"),
            ))
        }
    };
    if x.cols() != n {
        return Err(Error::shape(
            "model_forward",
            format!("{} features, model expects {n}", x.cols()),
        ));
    }
    if batch == 0 || time == 0 {
        return Err(Error::shape("model_forward", "empty input"));
    }
    Ok((batch, time, three))
}

/// A chiral affine map prepared for one instrumented routine.
enum AffineExec {
    Symmetric(SymmetricMatvec),
    Naive(Tensor, Vec<f64>),
}

impl AffineExec {
    fn new(spec: &ChiralLinearSpec, mode: MatvecMode) -> Self {
        match mode {
            MatvecMode::Symmetric => AffineExec::Symmetric(spec.symmetric()),
            MatvecMode::Naive => AffineExec::Naive(
                spec.materialize_weight(),
                spec.materialize_bias().into_data(),
            ),
        }
    }

    fn apply(&self, x: &[f64], counter: &mut MultCounter) -> Vec<f64> {
        match self {
            AffineExec::Symmetric(s) => s.apply(x, counter),
            AffineExec::Naive(w, b) => naive_matvec(w, b, x, counter),
        }
    }
}

enum LayerExec {
    Affine(AffineExec),
    Conv {
        taps: Vec<AffineExec>,
        conv: ChiralConv1dSpec,
    },
    Scale {
        scale: Vec<f64>,
        shift: Vec<f64>,
    },
    Pointwise(ActivationKind),
    Identity,
    Cell {
        kind: CellKind,
        subs: Vec<AffineExec>,
        hidden: usize,
    },
}

impl LayerExec {
    fn new(layer: &Layer, mode: MatvecMode) -> Self {
        match layer {
            Layer::Linear(s) | Layer::Head(s) => LayerExec::Affine(AffineExec::new(s, mode)),
            Layer::Dense(d) => LayerExec::Affine(AffineExec::Naive(d.weight(), d.bias().to_vec())),
            Layer::Conv(c) => {
                let nw = c.plan().n_weights();
                let taps = (0..c.kernel_size())
                    .map(|tau| {
                        let mut s = c.tap(tau);
                        if tau > 0 {
                            s.theta_mut()[nw..].fill(0.0);
                        }
                        AffineExec::new(&s, mode)
                    })
                    .collect();
                LayerExec::Conv {
                    taps,
                    conv: c.clone(),
                }
            }
            Layer::BatchNorm(bn) => {
                let gamma = bn.materialize_gamma();
                let beta = bn.materialize_beta();
                let scale: Vec<f64> = bn
                    .running_var()
                    .iter()
                    .zip(&gamma)
                    .map(|(v, g)| g / (v + bn.epsilon()).sqrt())
                    .collect();
                let shift = beta
                    .iter()
                    .zip(bn.running_mean())
                    .zip(&scale)
                    .map(|((b, m), s)| b - m * s)
                    .collect();
                LayerExec::Scale { scale, shift }
            }
            Layer::Activation(k) => LayerExec::Pointwise(*k),
            Layer::Dropout(_) => LayerExec::Identity,
            Layer::Recurrent(c) => LayerExec::Cell {
                kind: c.kind(),
                subs: c
                    .kind()
                    .keys()
                    .iter()
                    .map(|k| AffineExec::new(&c.affine(k).expect("key"), mode))
                    .collect(),
                hidden: c.hidden_layout().size(),
            },
        }
    }

    fn run(&self, frames: Vec<Vec<f64>>, counter: &mut MultCounter) -> Result<Vec<Vec<f64>>> {
        Ok(match self {
            LayerExec::Affine(a) => frames.iter().map(|f| a.apply(f, counter)).collect(),
            LayerExec::Conv { taps, conv } => {
                let t_out = conv.output_len(frames.len())?;
                (0..t_out)
                    .map(|j| {
                        let mut acc: Option<Vec<f64>> = None;
                        for (tau, tap) in taps.iter().enumerate() {
                            let y = tap.apply(&frames[conv.source_frame(j, tau)], counter);
                            acc = Some(match acc {
                                None => y,
                                Some(a) => a.iter().zip(&y).map(|(p, q)| p + q).collect(),
                            });
                        }
                        acc.expect("taps")
                    })
                    .collect()
            }
            LayerExec::Scale { scale, shift } => frames
                .iter()
                .map(|f| {
                    counter.add(f.len() as u64);
                    f.iter()
                        .zip(scale)
                        .zip(shift)
                        .map(|((x, s), b)| x * s + b)
                        .collect()
                })
                .collect(),
            LayerExec::Pointwise(k) => {
                let u = k.unary();
                frames
                    .iter()
                    .map(|f| f.iter().map(|&v| u.eval(v)).collect())
                    .collect()
            }
            LayerExec::Identity => frames,
            LayerExec::Cell { kind, subs, hidden } => {
                let n = *hidden;
                let mut h = vec![0.0; n];
                let mut c = vec![0.0; n];
                let mut out = Vec::with_capacity(frames.len());
                let add = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> {
                    a.iter().zip(&b).map(|(p, q)| p + q).collect()
                };
                for x in &frames {
                    match kind {
                        CellKind::Lstm => {
                            let pre = |k: usize, counter: &mut MultCounter| {
                                add(
                                    subs[2 * k].apply(x, counter),
                                    subs[2 * k + 1].apply(&h, counter),
                                )
                            };
                            let i: Vec<f64> = pre(0, counter).into_iter().map(sigmoid).collect();
                            let o: Vec<f64> = pre(1, counter).into_iter().map(sigmoid).collect();
                            let f: Vec<f64> = pre(2, counter).into_iter().map(sigmoid).collect();
                            let g: Vec<f64> = pre(3, counter).into_iter().map(f64::tanh).collect();
                            c = (0..n).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
                            h = (0..n).map(|k| o[k] * c[k].tanh()).collect();
                            counter.add(3 * n as u64);
                        }
                        CellKind::Gru => {
                            let r: Vec<f64> =
                                add(subs[0].apply(x, counter), subs[1].apply(&h, counter))
                                    .into_iter()
                                    .map(sigmoid)
                                    .collect();
                            let z: Vec<f64> =
                                add(subs[2].apply(x, counter), subs[3].apply(&h, counter))
                                    .into_iter()
                                    .map(sigmoid)
                                    .collect();
                            let xn = subs[4].apply(x, counter);
                            let hn = subs[5].apply(&h, counter);
                            let cand: Vec<f64> =
                                (0..n).map(|k| (xn[k] + r[k] * hn[k]).tanh()).collect();
                            h = (0..n).map(|k| cand[k] + z[k] * (h[k] - cand[k])).collect();
                            counter.add(2 * n as u64);
                        }
                    }
                    out.push(h.clone());
                }
                out
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::LayerConfig as L;
    use crate::harness::LayoutRef;
    use rand::Rng;

    fn cfg(layers: Vec<L>) -> ModelConfig {
        ModelConfig::new("t", layers)
            .with_layout("a", JointLayout::synthetic("a", 2, 1, 2, &[0]).unwrap())
            .with_layout("b", JointLayout::synthetic("b", 1, 2, 3, &[1]).unwrap())
    }

    fn name(n: &str) -> LayoutRef {
        LayoutRef::from(n)
    }

    fn mlp() -> ModelConfig {
        cfg(vec![
            L::ChiralLinear {
                in_layout: name("a"),
                out_layout: name("b"),
            },
            L::ChiralBatchnorm {
                layout: name("b"),
                momentum: 0.1,
                epsilon: 1e-5,
            },
            L::Activation {
                activation: ActivationKind::Tanh,
            },
            L::Dropout { p: 0.2 },
            L::ChiralLinear {
                in_layout: name("b"),
                out_layout: name("a"),
            },
        ])
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let c = cfg(vec![
            L::ChiralLinear {
                in_layout: name("a"),
                out_layout: name("b"),
            },
            L::ChiralLinear {
                in_layout: name("a"),
                out_layout: name("b"),
            },
        ]);
        assert!(matches!(Model::from_config(&c), Err(Error::Validation(_))));
    }

    #[test]
    fn relu_after_negated_layout_is_rejected() {
        let c = cfg(vec![
            L::ChiralLinear {
                in_layout: name("a"),
                out_layout: name("b"),
            },
            L::Activation {
                activation: ActivationKind::Relu,
            },
        ]);
        assert!(Model::from_config(&c).is_err());
        let d = cfg(vec![
            L::Dense {
                in_features: 10,
                out_features: 4,
            },
            L::Activation {
                activation: ActivationKind::Relu,
            },
        ]);
        assert!(Model::from_config(&d).is_ok());
    }

    #[test]
    fn counted_forward_matches_forward() {
        let model = Model::from_config(&mlp()).unwrap();
        let mut rng = init_rng(3);
        let x = Tensor::new(
            vec![4, 10],
            (0..40).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = model.forward(&x).unwrap();
        for mode in [MatvecMode::Symmetric, MatvecMode::Naive] {
            let mut c = MultCounter::default();
            let z = model.forward_counted(&x, mode, &mut c).unwrap();
            assert!(y.max_abs_diff(&z) <= 1e-12);
            assert!(c.count() > 0);
        }
    }

    #[test]
    fn record_round_trip_is_byte_stable() {
        let model = Model::from_config(&mlp()).unwrap();
        let a = crate::harness::to_json(&model.to_record()).unwrap();
        let rec: ModelRecord = crate::harness::parse_versioned(&a).unwrap();
        let back = Model::from_record(&rec).unwrap();
        assert_eq!(back, model);
        assert_eq!(crate::harness::to_json(&back.to_record()).unwrap(), a);
    }

    #[test]
    fn conv_frame_alignment() {
        let c = cfg(vec![
            L::ChiralConv1d {
                in_layout: name("a"),
                out_layout: name("a"),
                kernel_size: 3,
                dilation: 1,
                stride: 1,
            },
            L::ChiralConv1d {
                in_layout: name("a"),
                out_layout: name("a"),
                kernel_size: 3,
                dilation: 3,
                stride: 1,
            },
        ]);
        let model = Model::from_config(&c).unwrap();
        assert_eq!(model.frame_map(9).unwrap(), vec![8]);
        assert_eq!(model.frame_map(10).unwrap(), vec![8, 9]);
        assert!(model.frame_map(8).is_err());
    }
}
