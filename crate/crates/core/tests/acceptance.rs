//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chirality_core::accounting::{mult_reduction_factor, param_reduction_factor};
use chirality_core::harness::baseline::limited_data_study;
use chirality_core::harness::eval::count_mults;
use chirality_core::harness::suite::{
    commutation_violation, equivariance_violation, gradcheck_model, random_layout, random_tensor,
    recurrent_step_violation,
};
use chirality_core::harness::{
    predict, train, EvalMode, Layer, LayerConfig, LossKind, Model, ModelConfig, ModelRecord,
    OptimizerConfig, SyntheticPoseTask, TaskSpec, TeacherKind, TrainedModel,
};
use chirality_core::layers::{
    ActivationKind, ChiralBatchNorm, ChiralConv1dSpec, ChiralLinearSpec, Dropout,
};
use chirality_core::recurrent::{swap_only, CellKind, GateSharing, RecurrentCell};
use chirality_core::{JointLayout, Result};

const TRIALS: usize = 100;
const EQ_TOL: f64 = 1e-10;

type Criterion = fn() -> Result<Outcome>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Criterion)> = vec![
        ("equivariance suite", equivariance_suite),
        ("commutation identity", commutation_identity),
        ("negative controls", negative_controls),
        ("accounting exactness", accounting_exactness),
        ("gradient checks", gradient_checks),
        ("flip-average equivalence", flip_average_equivalence),
        ("synthetic convergence", synthetic_convergence),
        ("limited-data trend", limited_data_trend),
        ("batchnorm fixed points", batchnorm_fixed_points),
        ("serialization", serialization),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let (passed, detail) = match run() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {detail} [{:.2?}]", start.elapsed());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn layouts(rng: &mut ChaCha8Rng) -> (JointLayout, JointLayout) {
    (random_layout(rng, "i", 8, 4), random_layout(rng, "o", 8, 4))
}

fn equivariance_suite() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let mut w = 0.0f64;
    for _ in 0..TRIALS {
        let (a, b) = layouts(&mut rng);
        let s = ChiralLinearSpec::random(&a, &b, &mut rng);
        let x = random_tensor(&mut rng, vec![4, a.size()]);
        w = w.max(equivariance_violation(
            |x| s.forward(x),
            &x,
            &a.transform(),
            &b.transform(),
        )?);
    }
    worst.push(("linear", w));

    for (name, dilation) in [("conv k3 d1", 1), ("conv k3 d3", 3)] {
        let mut w = 0.0f64;
        for _ in 0..TRIALS {
            let (a, b) = layouts(&mut rng);
            let c = ChiralConv1dSpec::random(&a, &b, 3, dilation, 1, &mut rng)?;
            let t = c.receptive_field() + rng.random_range(0..4);
            let x = random_tensor(&mut rng, vec![2, t, a.size()]);
            w = w.max(equivariance_violation(
                |x| c.forward(x),
                &x,
                &a.transform(),
                &b.transform(),
            )?);
        }
        worst.push((name, w));
    }

    let (mut tr, mut ev) = (0.0f64, 0.0f64);
    for _ in 0..TRIALS {
        let a = random_layout(&mut rng, "b", 8, 4);
        let t = a.transform();
        let mut bn = ChiralBatchNorm::new(&a, 0.3, 1e-5)?;
        for v in bn.theta_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
        for _ in 0..3 {
            let shift = rng.random_range(-1.0..1.0);
            let x = random_tensor(&mut rng, vec![5, a.size()]).map(|v| 2.0 * v + shift);
            bn.forward(&x, true)?;
        }
        let x = random_tensor(&mut rng, vec![6, a.size()]);
        tr = tr.max(equivariance_violation(
            |x| Ok(bn.forward_const(x, true)?.0),
            &x,
            &t,
            &t,
        )?);
        ev = ev.max(equivariance_violation(
            |x| Ok(bn.forward_const(x, false)?.0),
            &x,
            &t,
            &t,
        )?);
    }
    worst.push(("batchnorm train", tr));
    worst.push(("batchnorm eval", ev));

    let mut w = 0.0f64;
    let d = Dropout::new(0.4)?;
    for _ in 0..TRIALS {
        let a = random_layout(&mut rng, "d", 8, 4);
        let x = random_tensor(&mut rng, vec![4, a.size()]);
        let f =
            |x: &chirality_core::Tensor| Ok(d.forward(x, false, &mut ChaCha8Rng::seed_from_u64(0)));
        w = w.max(equivariance_violation(
            f,
            &x,
            &a.transform(),
            &a.transform(),
        )?);
    }
    worst.push(("dropout eval", w));

    for kind in [
        ActivationKind::Tanh,
        ActivationKind::HardTanh,
        ActivationKind::Softsign,
    ] {
        let mut w = 0.0f64;
        for _ in 0..TRIALS {
            let a = random_layout(&mut rng, "a", 8, 4);
            let x = random_tensor(&mut rng, vec![4, a.size()]).map(|v| 3.0 * v);
            w = w.max(equivariance_violation(
                |x| Ok(kind.apply(x)),
                &x,
                &a.transform(),
                &a.transform(),
            )?);
        }
        worst.push((kind.name(), w));
    }

    for (name, kind) in [("lstm step", CellKind::Lstm), ("gru step", CellKind::Gru)] {
        let mut w = 0.0f64;
        for _ in 0..TRIALS {
            let (a, h) = layouts(&mut rng);
            let cell =
                RecurrentCell::random(kind, &a, &h, GateSharing::NegationInvariant, &mut rng);
            w = w.max(recurrent_step_violation(&cell, 1, &mut rng)?.0);
        }
        worst.push((name, w));
    }

    let mut w = 0.0f64;
    for _ in 0..TRIALS {
        let a = random_layout(&mut rng, "i", 8, 4);
        let centers = rng.random_range(1..=4);
        let dims = rng.random_range(1..=4);
        let o = JointLayout::synthetic("o", 0, centers, dims, &[])?;
        let s = ChiralLinearSpec::random(&a, &o, &mut rng);
        let x = random_tensor(&mut rng, vec![4, a.size()]);
        let y = s.forward(&x)?;
        w = w.max(y.max_abs_diff(&s.forward(&a.transform().apply(&x)?)?));
    }
    worst.push(("invariance head", w));

    let elapsed = start.elapsed();
    let max = worst.iter().map(|(_, v)| *v).fold(0.0, f64::max);
    let list: Vec<String> = worst.iter().map(|(n, v)| format!("{n} {v:.1e}")).collect();
    outcome(
        max <= EQ_TOL && elapsed < Duration::from_secs(60),
        format!(
            "{} kinds x {TRIALS} trials, max violation {max:.2e} (tol {EQ_TOL:e}), {} (limit 60s); {}",
            worst.len(),
            secs(elapsed),
            list.join(", ")
        ),
    )
}

fn commutation_identity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b) = layouts(&mut rng);
        worst = worst.max(commutation_violation(&ChiralLinearSpec::random(
            &a, &b, &mut rng,
        ))?);
    }
    outcome(
        worst <= 1e-14,
        format!("100 specs, max entry difference {worst:.2e} (tol 1e-14)"),
    )
}

fn negative_controls() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let l = JointLayout::h36m17(2, &[0])?;
    let t = l.transform();
    let mut relu_min = f64::INFINITY;
    for _ in 0..20 {
        let s = ChiralLinearSpec::random(&l, &l, &mut rng);
        let x = random_tensor(&mut rng, vec![4, l.size()]);
        let f = |x: &chirality_core::Tensor| Ok(ActivationKind::Relu.apply(&s.forward(x)?));
        relu_min = relu_min.min(equivariance_violation(f, &x, &t, &t)?);
    }
    let h = JointLayout::synthetic("h", 2, 1, 2, &[0])?;
    let mut lstm_min = f64::INFINITY;
    for _ in 0..20 {
        let cell = RecurrentCell::random(CellKind::Lstm, &l, &h, GateSharing::FullChiral, &mut rng);
        lstm_min = lstm_min.min(recurrent_step_violation(&cell, 1, &mut rng)?.0);
    }
    outcome(
        relu_min > 1e-3 && lstm_min > 1e-3,
        format!("smallest violation over 20 instances: relu {relu_min:.2e}, fully chiral lstm gates {lstm_min:.2e} (need > 1e-3)"),
    )
}

fn accounting_exactness() -> Result<Outcome> {
    let l = JointLayout::h36m17(3, &[0])?;
    let p = param_reduction_factor(&l, &l);
    let m = mult_reduction_factor(&l);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = ChiralLinearSpec::random(&l, &l, &mut rng);
    let x: Vec<f64> = (0..l.size()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, sym) = s.symmetric_matvec(&x)?;
    let naive = (l.size() * l.size()) as u64;
    let ratio = Ratio::new(sym, naive);
    outcome(
        p == Ratio::new(121, 289) && m == Ratio::new(11, 17) && ratio <= Ratio::new(11, 17),
        format!(
            "param factor {p}, mult factor {m}, instrumented mults {sym}/{naive} = {:.4}",
            sym as f64 / naive as f64
        ),
    )
}

fn gradient_checks() -> Result<Outcome> {
    let a = JointLayout::synthetic("a", 2, 1, 2, &[0])?;
    let h = JointLayout::synthetic("h", 2, 2, 2, &[1])?;
    let c = JointLayout::synthetic("c", 0, 2, 2, &[])?;
    let lin = |i: &JointLayout, o: &JointLayout| LayerConfig::ChiralLinear {
        in_layout: i.clone().into(),
        out_layout: o.clone().into(),
    };
    let act = |k| LayerConfig::Activation { activation: k };
    let models = vec![
        vec![
            lin(&a, &h),
            LayerConfig::ChiralBatchnorm {
                layout: h.clone().into(),
                momentum: 0.1,
                epsilon: 1e-5,
            },
            act(ActivationKind::Tanh),
            LayerConfig::Dropout { p: 0.3 },
            lin(&h, &h),
            act(ActivationKind::HardTanh),
            lin(&h, &h),
            act(ActivationKind::Softsign),
            LayerConfig::InvarianceHead {
                in_layout: h.clone().into(),
                out_layout: c.clone().into(),
            },
            LayerConfig::Dense {
                in_features: c.size(),
                out_features: 3,
            },
        ],
        vec![
            LayerConfig::ChiralConv1d {
                in_layout: a.clone().into(),
                out_layout: h.clone().into(),
                kernel_size: 3,
                dilation: 1,
                stride: 1,
            },
            act(ActivationKind::Tanh),
            LayerConfig::ChiralConv1d {
                in_layout: h.clone().into(),
                out_layout: a.clone().into(),
                kernel_size: 3,
                dilation: 3,
                stride: 1,
            },
        ],
        vec![LayerConfig::ChiralLstm {
            in_layout: a.clone().into(),
            hidden_layout: h.clone().into(),
            gate_sharing: GateSharing::NegationInvariant,
        }],
        vec![LayerConfig::ChiralGru {
            in_layout: a.clone().into(),
            hidden_layout: h.clone().into(),
            gate_sharing: GateSharing::NegationInvariant,
        }],
    ];
    let mut worst = 0.0f64;
    let mut checks = 0;
    let mut failures = Vec::new();
    for (i, layers) in models.into_iter().enumerate() {
        let mut cfg = ModelConfig::new(format!("grad{i}"), layers);
        cfg.training.seed = 100 + i as u64;
        let model = Model::from_config(&cfg)?;
        let report = gradcheck_model(&model, 1e-6, 1e-5, 7 + i as u64)?;
        for ch in &report.checks {
            worst = worst.max(ch.max_violation);
            checks += 1;
            if !ch.passed {
                failures.push(format!("model {i} {}", ch.name));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{checks} layer checks, max relative error {worst:.2e} (tol 1e-5){}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    )
}

fn mlp_layouts() -> Result<(JointLayout, JointLayout, JointLayout)> {
    Ok((
        JointLayout::synthetic("i", 3, 2, 2, &[0])?,
        JointLayout::synthetic("h", 3, 2, 4, &[0, 1])?,
        JointLayout::synthetic("o", 3, 2, 3, &[0])?,
    ))
}

fn adam(lr: f64) -> OptimizerConfig {
    OptimizerConfig::Adam {
        lr,
        betas: (0.9, 0.9999),
        eps: 1e-8,
    }
}

fn bn_mlp(epochs: usize) -> Result<(ModelConfig, SyntheticPoseTask)> {
    let (i, h, o) = mlp_layouts()?;
    let mut cfg = ModelConfig::new(
        "bn-mlp",
        vec![
            LayerConfig::ChiralLinear {
                in_layout: "in".into(),
                out_layout: "hidden".into(),
            },
            LayerConfig::ChiralBatchnorm {
                layout: "hidden".into(),
                momentum: 0.1,
                epsilon: 1e-5,
            },
            LayerConfig::Activation {
                activation: ActivationKind::Tanh,
            },
            LayerConfig::Dropout { p: 0.1 },
            LayerConfig::ChiralLinear {
                in_layout: "hidden".into(),
                out_layout: "out".into(),
            },
        ],
    )
    .with_layout("in", i.clone())
    .with_layout("hidden", h)
    .with_layout("out", o.clone());
    cfg.training.optimizer = adam(5e-3);
    cfg.training.epochs = epochs;
    cfg.training.batch_size = 32;
    cfg.training.augmentation_prob = 0.5;
    cfg.training.seed = 3;
    let mut spec = TaskSpec::new(i, o, 320, 0.01, 5);
    spec.teacher = TeacherKind::Mlp;
    Ok((cfg, SyntheticPoseTask::generate(spec)?))
}

fn flip_average_equivalence() -> Result<Outcome> {
    let (cfg, task) = bn_mlp(20)?;
    let mut model = Model::from_config(&cfg)?;
    train(&mut model, &task, 1.0)?;
    let (_, val) = task.split();
    let (ti, to) = task.transforms();
    let plain = predict(&model, &val.x, EvalMode::Plain, &ti, &to)?;
    let flip = predict(&model, &val.x, EvalMode::FlipAveraged, &ti, &to)?;
    let diff = plain.max_abs_diff(&flip);
    let one = val.select(&[0]);
    let mp = count_mults(&model, &one.x, EvalMode::Plain)?;
    let mf = count_mults(&model, &one.x, EvalMode::FlipAveraged)?;
    outcome(
        diff <= 1e-10 && 2 * mp <= mf,
        format!("{} samples, max difference {diff:.2e} (tol 1e-10); mults per sample {mp} vs two-pass {mf}", val.len()),
    )
}

fn synthetic_convergence() -> Result<Outcome> {
    let (i, _, o) = mlp_layouts()?;
    let task = SyntheticPoseTask::generate(TaskSpec::new(i.clone(), o.clone(), 320, 0.0, 1))?;
    let mut cfg = ModelConfig::new(
        "linear",
        vec![LayerConfig::ChiralLinear {
            in_layout: i.into(),
            out_layout: o.into(),
        }],
    );
    cfg.training.optimizer = adam(1e-2);
    cfg.training.lr_decay = 0.99;
    cfg.training.epochs = 500;
    cfg.training.loss = LossKind::Mse;
    let start = Instant::now();
    let mut model = Model::from_config(&cfg)?;
    let report = train(&mut model, &task, 1.0)?;
    let elapsed = start.elapsed();
    let val = report.val_mpjpe.unwrap_or(f64::INFINITY);
    outcome(
        report.train_mpjpe <= 1e-3 && val <= 1e-3 && elapsed < Duration::from_secs(30),
        format!(
            "{} epochs, train MPJPE {:.2e}, val MPJPE {val:.2e} (tol 1e-3), {} (limit 30s)",
            report.epochs,
            report.train_mpjpe,
            secs(elapsed)
        ),
    )
}

fn limited_data_trend() -> Result<Outcome> {
    let (i, h, o) = mlp_layouts()?;
    let mut spec = TaskSpec::new(i.clone(), o.clone(), 2000, 0.01, 0);
    spec.teacher = TeacherKind::Mlp;
    let mut cfg = ModelConfig::new(
        "mlp",
        vec![
            LayerConfig::ChiralLinear {
                in_layout: i.into(),
                out_layout: h.clone().into(),
            },
            LayerConfig::Activation {
                activation: ActivationKind::Tanh,
            },
            LayerConfig::ChiralLinear {
                in_layout: h.into(),
                out_layout: o.into(),
            },
        ],
    );
    cfg.training.optimizer = adam(1e-2);
    cfg.training.epochs = 200;
    cfg.training.batch_size = 32;
    let start = Instant::now();
    let r = limited_data_study(&cfg, &spec, 0.05, &[1, 2, 3, 4, 5])?;
    let elapsed = start.elapsed();
    outcome(
        r.chiral_median <= r.baseline_median && elapsed < Duration::from_secs(600),
        format!(
            "5% data, 5 seeds: chiral median {:.4} ({} params) vs dense median {:.4} ({} params), {} (limit 600s)",
            r.chiral_median,
            r.chiral_params,
            r.baseline_median,
            r.baseline_params,
            secs(elapsed)
        ),
    )
}

fn batchnorm_fixed_points() -> Result<Outcome> {
    let (cfg, task) = bn_mlp(130)?;
    let mut model = Model::from_config(&cfg)?;
    let report = train(&mut model, &task, 1.0)?;
    let mut mean_err = 0.0f64;
    let mut var_err = 0.0f64;
    let mut moved = 0.0f64;
    for layer in model.layers() {
        if let Layer::BatchNorm(bn) = layer {
            let mu = bn.running_mean();
            let var = bn.running_var();
            let t = bn.layout().transform();
            let tm = t.apply_vec(mu);
            mean_err = mean_err.max(
                tm.iter()
                    .zip(mu)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
            let sv = swap_only(bn.layout(), var);
            var_err = var_err.max(
                sv.iter()
                    .zip(var)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
            moved = moved.max(mu.iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
    }
    outcome(
        report.steps >= 1000 && mean_err <= 1e-6 && var_err <= 1e-6,
        format!(
            "{} steps at 50% augmentation: |T(mu) - mu| {mean_err:.2e}, |swap(var) - var| {var_err:.2e} (tol 1e-6), max |mu| {moved:.3}",
            report.steps
        ),
    )
}

fn serialization() -> Result<Outcome> {
    let (cfg, task) = bn_mlp(5)?;
    let cfg_json = cfg.to_json()?;
    let cfg_stable = ModelConfig::from_json(&cfg_json)?.to_json()? == cfg_json;

    let run = || -> Result<String> {
        let mut m = Model::from_config(&cfg)?;
        let report = train(&mut m, &task, 1.0)?;
        TrainedModel::new(&m, report).to_json()
    };
    let first = run()?;
    let second = run()?;
    let deterministic = first == second;

    let loaded = TrainedModel::from_json(&first)?;
    let model_stable = loaded.to_json()? == first;
    let rebuilt = Model::from_record(&loaded.model)?;
    let record_stable = chirality_core::harness::to_json(&rebuilt.to_record())?
        == chirality_core::harness::to_json::<ModelRecord>(&loaded.model)?;

    let task_json = task.to_json()?;
    let task_stable = SyntheticPoseTask::from_json(&task_json)?.to_json()? == task_json;
    outcome(
        cfg_stable && deterministic && model_stable && record_stable && task_stable,
        format!(
            "config round trip {cfg_stable}, task round trip {task_stable}, trained model round trip {model_stable}, \
             rebuilt model record {record_stable}, identical bytes across two runs {deterministic}"
        ),
    )
}
