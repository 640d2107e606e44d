//! Parameter and multiplication accounting.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::model::{Layer, Model};
use crate::harness::ModelConfig;
use crate::layers::{ChiralLinearSpec, LinearPlan};
use crate::layout::{JointLayout, Part, Side};
use crate::recurrent::CellKind;

/// Counts multiplications performed by an instrumented inference path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MultCounter {
    count: u64,
}

impl MultCounter {
    pub fn add(&mut self, n: u64) {
        self.count += n;
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// `(|J_l^in| + |J_c^in|)(|J_l^out| + |J_c^out|) / (|J^in| |J^out|)`.
pub fn param_reduction_factor(in_layout: &JointLayout, out_layout: &JointLayout) -> Ratio<u64> {
    let f = |l: &JointLayout| (l.num_pairs() + l.num_center()) as u64;
    Ratio::new(
        f(in_layout) * f(out_layout),
        in_layout.num_joints() as u64 * out_layout.num_joints() as u64,
    )
}

/// `(|J_l^in| + |J_c^in|) / |J^in|`.
pub fn mult_reduction_factor(in_layout: &JointLayout) -> Ratio<u64> {
    Ratio::new(
        (in_layout.num_pairs() + in_layout.num_center()) as u64,
        in_layout.num_joints() as u64,
    )
}

/// Closed-form count of free weights in a chiral linear map.
///
/// Left output rows see every input entry once per mirror pair; center rows
/// see paired input columns only where the signs agree with the output part
/// (negated center rows read negated inputs, positive center rows read
/// positive pair columns and positive center columns).
pub fn chiral_weight_count(in_layout: &JointLayout, out_layout: &JointLayout) -> usize {
    let li = in_layout.num_pairs();
    let ci = in_layout.num_center();
    let (dni, dpi) = (in_layout.num_negated(), in_layout.num_positive());
    let (lo, co) = (out_layout.num_pairs(), out_layout.num_center());
    let (dno, dpo) = (out_layout.num_negated(), out_layout.num_positive());
    let di = in_layout.dims();
    let do_ = out_layout.dims();
    lo * do_ * (2 * li + ci) * di
        + co * dno * (li * di + ci * dni)
        + co * dpo * (li * dpi + ci * dpi)
}

/// Free bias entries: odd left/right pairs plus positive center coordinates.
pub fn chiral_bias_count(out_layout: &JointLayout) -> usize {
    out_layout.num_pairs() * out_layout.dims() + out_layout.num_center() * out_layout.num_positive()
}

/// Dimension of the space of all matrices commuting with the transforms.
pub fn commutant_dimension(in_layout: &JointLayout, out_layout: &JointLayout) -> usize {
    let (pi, ni) = eigen_split(in_layout);
    let (po, no) = eigen_split(out_layout);
    pi * po + ni * no
}

/// Dimensions of the +1 and -1 eigenspaces of the transform.
fn eigen_split(l: &JointLayout) -> (usize, usize) {
    let pairs = l.joints_on(Side::Left) * l.dims();
    let center_pos = l.num_center() * l.dims_in(Part::Positive);
    let center_neg = l.num_center() * l.dims_in(Part::Negated);
    (pairs + center_pos, pairs + center_neg)
}

/// Cost of one layer, per output frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: String,
    pub free_weights: usize,
    pub dense_weights: usize,
    pub free_bias: usize,
    pub dense_bias: usize,
    pub weight_ratio: f64,
    pub param_ratio: f64,
    /// Joint-count formula for the parameter factor, if the layer is chiral and affine.
    pub formula_param_factor: Option<String>,
    pub formula_param_factor_value: Option<f64>,
    /// Joint-count formula for the multiplication factor.
    pub formula_mult_factor: Option<String>,
    pub formula_mult_factor_value: Option<f64>,
    pub naive_mults: u64,
    pub symmetric_mults: u64,
    pub mult_ratio: f64,
}

impl LayerCost {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        kind: impl Into<String>,
        free_weights: usize,
        dense_weights: usize,
        free_bias: usize,
        dense_bias: usize,
        naive_mults: u64,
        symmetric_mults: u64,
    ) -> Self {
        Self {
            index,
            kind: kind.into(),
            free_weights,
            dense_weights,
            free_bias,
            dense_bias,
            weight_ratio: ratio(free_weights as f64, dense_weights as f64),
            param_ratio: ratio(
                (free_weights + free_bias) as f64,
                (dense_weights + dense_bias) as f64,
            ),
            formula_param_factor: None,
            formula_param_factor_value: None,
            formula_mult_factor: None,
            formula_mult_factor_value: None,
            naive_mults,
            symmetric_mults,
            mult_ratio: ratio(symmetric_mults as f64, naive_mults as f64),
        }
    }

    pub fn with_formulas(mut self, in_layout: &JointLayout, out_layout: &JointLayout) -> Self {
        let p = param_reduction_factor(in_layout, out_layout);
        let m = mult_reduction_factor(in_layout);
        self.formula_param_factor = Some(p.to_string());
        self.formula_param_factor_value = Some(to_f64(p));
        self.formula_mult_factor = Some(m.to_string());
        self.formula_mult_factor_value = Some(to_f64(m));
        self
    }
}

/// Per-layer and aggregate costs of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total: LayerCost,
}

impl CostReport {
    pub fn from_layers(layers: Vec<LayerCost>) -> Self {
        let sum = |f: fn(&LayerCost) -> usize| layers.iter().map(f).sum::<usize>();
        let sum64 = |f: fn(&LayerCost) -> u64| layers.iter().map(f).sum::<u64>();
        let total = LayerCost::new(
            layers.len(),
            "total",
            sum(|l| l.free_weights),
            sum(|l| l.dense_weights),
            sum(|l| l.free_bias),
            sum(|l| l.dense_bias),
            sum64(|l| l.naive_mults),
            sum64(|l| l.symmetric_mults),
        );
        Self { layers, total }
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let header = [
            "#",
            "kind",
            "free_w",
            "dense_w",
            "free_b",
            "dense_b",
            "w_ratio",
            "p_ratio",
            "formula_p",
            "naive_mul",
            "sym_mul",
            "mul_ratio",
            "formula_m",
        ];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        let fmt_row = |l: &LayerCost, idx: String| {
            vec![
                idx,
                l.kind.clone(),
                l.free_weights.to_string(),
                l.dense_weights.to_string(),
                l.free_bias.to_string(),
                l.dense_bias.to_string(),
                format!("{:.4}", l.weight_ratio),
                format!("{:.4}", l.param_ratio),
                l.formula_param_factor_value
                    .map_or("-".into(), |v| format!("{v:.4}")),
                l.naive_mults.to_string(),
                l.symmetric_mults.to_string(),
                format!("{:.4}", l.mult_ratio),
                l.formula_mult_factor_value
                    .map_or("-".into(), |v| format!("{v:.4}")),
            ]
        };
        for l in &self.layers {
            rows.push(fmt_row(l, l.index.to_string()));
        }
        rows.push(fmt_row(&self.total, "".into()));
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c == 1 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 || i == rows.len() - 2 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}

/// Builds the model described by `cfg` and audits it.
pub fn audit_model(cfg: &ModelConfig) -> Result<CostReport> {
    audit(&Model::from_config(cfg)?)
}

/// Counts free parameters and instrumented multiplications per layer and
/// checks them against the closed forms and the multiplication bound.
pub fn audit(model: &Model) -> Result<CostReport> {
    let mut rows = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let cost = match layer {
            Layer::Linear(s) | Layer::Head(s) => {
                let (fw, dw, fb, db, naive, sym) = affine_counts(i, layer.kind_name(), s)?;
                LayerCost::new(i, layer.kind_name(), fw, dw, fb, db, naive, sym)
                    .with_formulas(s.in_layout(), s.out_layout())
            }
            Layer::Conv(c) => {
                let k = c.kernel_size();
                let (fw, dw, fb, db, naive, sym) = affine_counts(i, layer.kind_name(), &c.tap(0))?;
                LayerCost::new(
                    i,
                    layer.kind_name(),
                    k * fw,
                    k * dw,
                    fb,
                    db,
                    k as u64 * naive,
                    k as u64 * sym,
                )
                .with_formulas(c.plan().in_layout(), c.plan().out_layout())
            }
            Layer::BatchNorm(bn) => {
                let n = bn.layout().size();
                LayerCost::new(
                    i,
                    layer.kind_name(),
                    0,
                    0,
                    bn.theta().len(),
                    2 * n,
                    n as u64,
                    n as u64,
                )
            }
            Layer::Recurrent(cell) => {
                let mut acc = (0, 0, 0, 0, 0u64, 0u64);
                for key in cell.kind().keys() {
                    let spec = cell.affine(key).expect("cell key");
                    let (fw, dw, fb, db, naive, sym) =
                        affine_counts(i, &format!("{} {key}", layer.kind_name()), &spec)?;
                    acc = (
                        acc.0 + fw,
                        acc.1 + dw,
                        acc.2 + fb,
                        acc.3 + db,
                        acc.4 + naive,
                        acc.5 + sym,
                    );
                }
                let h = cell.hidden_layout().size() as u64;
                let gating = match cell.kind() {
                    CellKind::Lstm => 3 * h,
                    CellKind::Gru => 2 * h,
                };
                LayerCost::new(
                    i,
                    layer.kind_name(),
                    acc.0,
                    acc.1,
                    acc.2,
                    acc.3,
                    acc.4 + gating,
                    acc.5 + gating,
                )
            }
            Layer::Dense(d) => {
                let (w, b) = (d.n_in() * d.n_out(), d.n_out());
                LayerCost::new(i, layer.kind_name(), w, w, b, b, w as u64, w as u64)
            }
            Layer::Activation(_) | Layer::Dropout(_) => continue,
        };
        if cost.free_weights > cost.dense_weights || cost.symmetric_mults > cost.naive_mults {
            return Err(Error::Property {
                layer: format!("{i} ({})", cost.kind),
                detail: "free counts exceed dense counts".into(),
            });
        }
        rows.push(cost);
    }
    Ok(CostReport::from_layers(rows))
}

/// Free/dense weight and bias counts and naive/symmetric multiplications of
/// one affine map, with the multiplication count measured by running the
/// instrumented routine.
fn affine_counts(
    index: usize,
    kind: &str,
    spec: &ChiralLinearSpec,
) -> Result<(usize, usize, usize, usize, u64, u64)> {
    let plan: &LinearPlan = spec.plan();
    let (inl, outl) = (spec.in_layout(), spec.out_layout());
    let offending = |detail: String| Error::Property {
        layer: format!("{index} ({kind})"),
        detail,
    };
    let free = plan.n_weights();
    let expected = chiral_weight_count(inl, outl);
    if free != expected {
        return Err(offending(format!(
            "{free} free weights, closed form gives {expected}"
        )));
    }
    let mut counter = MultCounter::default();
    spec.symmetric().apply(&vec![0.0; inl.size()], &mut counter);
    let sym = counter.count();
    let naive = (inl.size() * outl.size()) as u64;
    if sym != free as u64 {
        return Err(offending(format!(
            "{sym} multiplications for {free} free weights"
        )));
    }
    if naive > 0 && Ratio::new(sym, naive) > mult_reduction_factor(inl) {
        return Err(offending(format!(
            "multiplication ratio {sym}/{naive} exceeds the bound {}",
            mult_reduction_factor(inl)
        )));
    }
    Ok((
        free,
        inl.size() * outl.size(),
        plan.n_bias(),
        outl.size(),
        naive,
        sym,
    ))
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        1.0
    } else {
        a / b
    }
}

pub fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
