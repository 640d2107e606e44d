//! Pointwise activations. Only odd functions commute with sign flips, so the
//! chiral stack refuses anything else.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Tanh,
    HardTanh,
    Softsign,
    Relu,
}

impl ActivationKind {
    pub fn is_odd(self) -> bool {
        !matches!(self, ActivationKind::Relu)
    }

    pub fn unary(self) -> Unary {
        match self {
            ActivationKind::Tanh => Unary::Tanh,
            ActivationKind::HardTanh => Unary::HardTanh,
            ActivationKind::Softsign => Unary::Softsign,
            ActivationKind::Relu => Unary::Relu,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::HardTanh => "hard_tanh",
            ActivationKind::Softsign => "softsign",
            ActivationKind::Relu => "relu",
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        let u = self.unary();
        x.map(|v| u.eval(v))
    }

    pub fn apply_var<'t>(self, x: Var<'t>) -> Var<'t> {
        x.unary(self.unary())
    }
}

/// An activation that is known to be odd.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OddActivation(ActivationKind);

impl OddActivation {
    pub fn new(kind: ActivationKind) -> Result<Self> {
        if !kind.is_odd() {
            return Err(Error::validation(format!(
                "activation {} is not odd and cannot follow a layer with negated coordinates",
                kind.name()
            )));
        }
        Ok(Self(kind))
    }

    pub fn kind(self) -> ActivationKind {
        self.0
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        self.0.apply(x)
    }

    pub fn apply_var<'t>(self, x: Var<'t>) -> Var<'t> {
        self.0.apply_var(x)
    }
}
