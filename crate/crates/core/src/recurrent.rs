//! Chirality-equivariant LSTM and GRU cells.
//!
//! Gates multiply the cell path elementwise, so a gate must map mirrored
//! inputs to the swapped gate vector without any sign change. Gate affine maps
//! therefore use the hidden layout with no negated dims as their output
//! layout. The candidate and state paths keep the full hidden layout.
//! [`GateSharing::FullChiral`] gives the gates the full layout instead; that
//! construction is not equivariant and exists as a control.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GatherMap, Tape, Var};
use crate::codec::MatrixBlob;
use crate::error::{Error, Result};
use crate::layers::linear::{blocks_from_map, blocks_to_map, init_uniform, linear_var};
use crate::layers::{ChiralLinearSpec, LinearPlan};
use crate::layout::{JointLayout, Part};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSharing {
    #[default]
    NegationInvariant,
    FullChiral,
}

pub const LSTM_KEYS: [&str; 8] = ["ii", "hi", "io", "ho", "if", "hf", "ig", "hg"];
pub const GRU_KEYS: [&str; 6] = ["ir", "hr", "iz", "hz", "in", "hn"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            CellKind::Lstm => &LSTM_KEYS,
            CellKind::Gru => &GRU_KEYS,
        }
    }

    /// Keys whose affine maps produce gate pre-activations.
    fn is_gate(self, key: &str) -> bool {
        match self {
            CellKind::Lstm => !key.ends_with('g'),
            CellKind::Gru => !key.ends_with('n'),
        }
    }
}

#[derive(Debug, Clone)]
struct Sub {
    key: &'static str,
    plan: Arc<LinearPlan>,
    offset: usize,
    wt_map: GatherMap,
    b_map: GatherMap,
}

/// Parameters shared by both cell kinds: one chiral affine map per key, all
/// stored in a single flat vector.
#[derive(Debug, Clone)]
pub struct RecurrentCell {
    kind: CellKind,
    in_layout: JointLayout,
    hidden_layout: JointLayout,
    sharing: GateSharing,
    subs: Vec<Sub>,
    theta: Vec<f64>,
}

impl PartialEq for RecurrentCell {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.in_layout == other.in_layout
            && self.hidden_layout == other.hidden_layout
            && self.sharing == other.sharing
            && self.theta == other.theta
    }
}

/// Per-step gate activations, exposed for covariance checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates {
    /// LSTM: input, output, forget. GRU: reset, update.
    pub values: Vec<(&'static str, Tensor)>,
}

impl RecurrentCell {
    pub fn zeros(
        kind: CellKind,
        in_layout: &JointLayout,
        hidden_layout: &JointLayout,
        sharing: GateSharing,
    ) -> Self {
        let gate_layout = match sharing {
            GateSharing::NegationInvariant => hidden_layout.without_negation(),
            GateSharing::FullChiral => hidden_layout.clone(),
        };
        let mut subs = Vec::new();
        let mut offset = 0;
        for &key in kind.keys() {
            let src = if key.starts_with('i') {
                in_layout
            } else {
                hidden_layout
            };
            let dst = if kind.is_gate(key) {
                &gate_layout
            } else {
                hidden_layout
            };
            let plan = Arc::new(LinearPlan::new(src, dst));
            let wt_map = plan.weight_t_map(offset);
            let b_map = plan.bias_map(offset);
            let n = plan.n_params();
            subs.push(Sub {
                key,
                plan,
                offset,
                wt_map,
                b_map,
            });
            offset += n;
        }
        Self {
            kind,
            in_layout: in_layout.clone(),
            hidden_layout: hidden_layout.clone(),
            sharing,
            subs,
            theta: vec![0.0; offset],
        }
    }

    /// Uniform init scaled by each map's input width; LSTM forget bias set to 1.
    pub fn random(
        kind: CellKind,
        in_layout: &JointLayout,
        hidden_layout: &JointLayout,
        sharing: GateSharing,
        rng: &mut impl Rng,
    ) -> Self {
        let mut cell = Self::zeros(kind, in_layout, hidden_layout, sharing);
        for i in 0..cell.subs.len() {
            let (off, n, fan) = {
                let s = &cell.subs[i];
                (s.offset, s.plan.n_params(), s.plan.n_in())
            };
            let vals = init_uniform(rng, n, fan);
            cell.theta[off..off + n].copy_from_slice(&vals);
        }
        if kind == CellKind::Lstm {
            cell.set_forget_bias(1.0);
        }
        cell
    }

    /// Fills the non-odd bias blocks of the forget-gate input map.
    pub fn set_forget_bias(&mut self, value: f64) {
        let sub = self.sub("if").expect("lstm").clone();
        for name in ["b_lp", "b_cp"] {
            if let Some(info) = sub.plan.block(name) {
                let start = sub.offset + info.offset;
                self.theta[start..start + info.len()].fill(value);
            }
        }
    }

    fn sub(&self, key: &str) -> Option<&Sub> {
        self.subs.iter().find(|s| s.key == key)
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn in_layout(&self) -> &JointLayout {
        &self.in_layout
    }

    pub fn hidden_layout(&self) -> &JointLayout {
        &self.hidden_layout
    }

    pub fn sharing(&self) -> GateSharing {
        self.sharing
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// The affine map stored under `key` as a standalone layer.
    pub fn affine(&self, key: &str) -> Option<ChiralLinearSpec> {
        let s = self.sub(key)?;
        let mut spec = ChiralLinearSpec::zeros(s.plan.in_layout(), s.plan.out_layout());
        spec.set_theta(self.theta[s.offset..s.offset + s.plan.n_params()].to_vec())
            .expect("sub size");
        Some(spec)
    }

    fn pre<'t>(
        &self,
        theta: Var<'t>,
        key_x: &str,
        key_h: &str,
        x: Var<'t>,
        h: Var<'t>,
    ) -> Result<Var<'t>> {
        let a = self.apply(theta, key_x, x)?;
        let b = self.apply(theta, key_h, h)?;
        a.add(b)
    }

    fn apply<'t>(&self, theta: Var<'t>, key: &str, x: Var<'t>) -> Result<Var<'t>> {
        let s = self.sub(key).expect("known key");
        linear_var(&s.plan, &s.wt_map, &s.b_map, theta, x)
    }

    fn check_state(&self, op: &'static str, x: Var<'_>, h: Var<'_>) -> Result<()> {
        if x.cols() != self.in_layout.size() || h.cols() != self.hidden_layout.size() {
            return Err(Error::shape(
                op,
                format!(
                    "input {:?} / state {:?} vs layouts {} / {}",
                    x.shape(),
                    h.shape(),
                    self.in_layout.size(),
                    self.hidden_layout.size()
                ),
            ));
        }
        if x.rows() != h.rows() {
            return Err(Error::shape(op, "input and state batch sizes differ"));
        }
        Ok(())
    }

    /// One LSTM step; returns `(h, c, gates)`.
    pub fn lstm_step_var<'t>(
        &self,
        theta: Var<'t>,
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, [Var<'t>; 3])> {
        assert_eq!(self.kind, CellKind::Lstm);
        self.check_state("lstm_step", x, h)?;
        if c.shape() != h.shape() {
            return Err(Error::shape(
                "lstm_step",
                "cell and hidden state shapes differ",
            ));
        }
        let i = self.pre(theta, "ii", "hi", x, h)?.sigmoid();
        let o = self.pre(theta, "io", "ho", x, h)?.sigmoid();
        let f = self.pre(theta, "if", "hf", x, h)?.sigmoid();
        let g = self.pre(theta, "ig", "hg", x, h)?.tanh();
        let c_next = f.mul(c)?.add(i.mul(g)?)?;
        let h_next = o.mul(c_next.tanh())?;
        Ok((h_next, c_next, [i, o, f]))
    }

    /// One GRU step; returns `(h, gates)`.
    pub fn gru_step_var<'t>(
        &self,
        theta: Var<'t>,
        x: Var<'t>,
        h: Var<'t>,
    ) -> Result<(Var<'t>, [Var<'t>; 2])> {
        assert_eq!(self.kind, CellKind::Gru);
        self.check_state("gru_step", x, h)?;
        let r = self.pre(theta, "ir", "hr", x, h)?.sigmoid();
        let z = self.pre(theta, "iz", "hz", x, h)?.sigmoid();
        let n = self
            .apply(theta, "in", x)?
            .add(r.mul(self.apply(theta, "hn", h)?)?)?
            .tanh();
        // (1 - z) * n + z * h
        let h_next = n.add(z.mul(h.sub(n)?)?)?;
        Ok((h_next, [r, z]))
    }

    /// Runs the cell over batch-major rows `[batch * time, n_in]`, returning
    /// batch-major hidden states `[batch * time, n_h]`.
    pub fn unroll_var<'t>(
        &self,
        theta: Var<'t>,
        x: Var<'t>,
        batch: usize,
        time: usize,
        h0: Option<Var<'t>>,
        c0: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        if time == 0 || batch == 0 {
            return Err(Error::shape("recurrent_unroll", "empty sequence"));
        }
        if x.rows() != batch * time {
            return Err(Error::shape(
                "recurrent_unroll",
                format!("{} rows for batch {batch} x time {time}", x.rows()),
            ));
        }
        let tape = x.tape();
        let nh = self.hidden_layout.size();
        let zero = || tape.constant(Tensor::zeros(vec![batch, nh]));
        let mut h = h0.unwrap_or_else(zero);
        let mut c = c0.unwrap_or_else(zero);
        let mut outs = Vec::with_capacity(time);
        for t in 0..time {
            let idx: Arc<[usize]> = (0..batch).map(|b| b * time + t).collect::<Vec<_>>().into();
            let xt = x.select_rows(&idx)?;
            match self.kind {
                CellKind::Lstm => {
                    let (hn, cn, _) = self.lstm_step_var(theta, xt, h, c)?;
                    h = hn;
                    c = cn;
                }
                CellKind::Gru => {
                    h = self.gru_step_var(theta, xt, h)?.0;
                }
            }
            outs.push(h);
        }
        let stacked = tape.stack_rows(&outs)?;
        let order: Arc<[usize]> = (0..batch)
            .flat_map(|b| (0..time).map(move |t| t * batch + b))
            .collect::<Vec<_>>()
            .into();
        stacked.select_rows(&order)
    }

    fn theta_const<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(Tensor::new(vec![self.theta.len()], self.theta.clone()).expect("theta"))
    }

    /// Plain LSTM step on `[batch, n]` tensors.
    pub fn lstm_step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let (hn, cn, _) = self.lstm_step_var(
            self.theta_const(&tape),
            tape.constant(as_rows(x)?),
            tape.constant(as_rows(h)?),
            tape.constant(as_rows(c)?),
        )?;
        Ok((hn.value(), cn.value()))
    }

    /// Plain GRU step on `[batch, n]` tensors.
    pub fn gru_step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let (hn, _) = self.gru_step_var(
            self.theta_const(&tape),
            tape.constant(as_rows(x)?),
            tape.constant(as_rows(h)?),
        )?;
        Ok(hn.value())
    }

    /// Gate activations for one step from state `h` (and zero cell state).
    pub fn gates(&self, x: &Tensor, h: &Tensor) -> Result<Gates> {
        let tape = Tape::new();
        let theta = self.theta_const(&tape);
        let xv = tape.constant(as_rows(x)?);
        let hv = tape.constant(as_rows(h)?);
        let values = match self.kind {
            CellKind::Lstm => {
                let c = tape.constant(Tensor::zeros(hv.shape()));
                let (_, _, [i, o, f]) = self.lstm_step_var(theta, xv, hv, c)?;
                vec![
                    ("input", i.value()),
                    ("output", o.value()),
                    ("forget", f.value()),
                ]
            }
            CellKind::Gru => {
                let (_, [r, z]) = self.gru_step_var(theta, xv, hv)?;
                vec![("reset", r.value()), ("update", z.value())]
            }
        };
        Ok(Gates { values })
    }

    /// Plain unroll on `[batch, time, n_in]` with optional `[batch, n_h]` initial states.
    pub fn unroll(&self, x: &Tensor, h0: Option<&Tensor>, c0: Option<&Tensor>) -> Result<Tensor> {
        if x.shape().len() != 3 {
            return Err(Error::shape(
                "recurrent_unroll",
                format!("expected [batch, time, features], got {:?}", x.shape()),
            ));
        }
        let (batch, time) = (x.shape()[0], x.shape()[1]);
        let tape = Tape::new();
        let xv = tape.constant(x.clone().reshape(vec![batch * time, x.cols()])?);
        let h0 = h0
            .map(|h| as_rows(h).map(|t| tape.constant(t)))
            .transpose()?;
        let c0 = c0
            .map(|c| as_rows(c).map(|t| tape.constant(t)))
            .transpose()?;
        let y = self.unroll_var(self.theta_const(&tape), xv, batch, time, h0, c0)?;
        y.value()
            .reshape(vec![batch, time, self.hidden_layout.size()])
    }

    pub fn to_record(&self) -> CellRecord {
        let cells = self
            .subs
            .iter()
            .map(|s| {
                (
                    s.key.to_string(),
                    blocks_to_map(&s.plan, &self.theta, s.offset),
                )
            })
            .collect();
        CellRecord {
            in_layout: self.in_layout.clone(),
            hidden_layout: self.hidden_layout.clone(),
            gate_sharing: self.sharing,
            cells,
        }
    }

    pub fn from_record(kind: CellKind, rec: &CellRecord) -> Result<Self> {
        let mut cell = Self::zeros(kind, &rec.in_layout, &rec.hidden_layout, rec.gate_sharing);
        for s in cell.subs.clone() {
            let blocks = rec.cells.get(s.key).ok_or_else(|| {
                Error::validation(format!("missing cell parameters \"{}\"", s.key))
            })?;
            let vals = blocks_from_map(&s.plan, blocks, 0, s.plan.n_params())?;
            cell.theta[s.offset..s.offset + vals.len()].copy_from_slice(&vals);
        }
        if rec.cells.len() != cell.subs.len() {
            return Err(Error::validation("unexpected cell parameter keys"));
        }
        Ok(cell)
    }
}

fn as_rows(t: &Tensor) -> Result<Tensor> {
    let rows = t.rows();
    t.clone().reshape(vec![rows, t.cols()])
}

/// Hidden-layout swap without negation: the action on gate vectors.
pub fn swap_only(layout: &JointLayout, v: &[f64]) -> Vec<f64> {
    layout.without_negation().transform().apply_vec(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub in_layout: JointLayout,
    pub hidden_layout: JointLayout,
    pub gate_sharing: GateSharing,
    pub cells: BTreeMap<String, BTreeMap<String, MatrixBlob>>,
}

/// Equivariant LSTM cell.
pub type ChiralLstmSpec = RecurrentCell;
/// Equivariant GRU cell.
pub type ChiralGruSpec = RecurrentCell;

/// Whether the gate maps of a cell have any negated output coordinates.
pub fn gates_have_negation(cell: &RecurrentCell) -> bool {
    cell.subs
        .iter()
        .filter(|s| cell.kind.is_gate(s.key))
        .any(|s| s.plan.out_layout().dims_in(Part::Negated) > 0)
}
