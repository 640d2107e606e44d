//! Chiral layers and the unconstrained baselines.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod linear;

pub use activation::{ActivationKind, OddActivation};
pub use batchnorm::{BatchNormRecord, BatchStats, ChiralBatchNorm};
pub use conv::{ChiralConv1dSpec, ConvRecord};
pub use dense::{DenseRecord, DenseSpec};
pub use dropout::Dropout;
pub use linear::{
    naive_matvec, BlockInfo, ChiralLinearSpec, LinearPlan, LinearRecord, SymmetricMatvec,
    BIAS_BLOCKS, WEIGHT_BLOCKS,
};

use crate::error::{Error, Result};
use crate::layout::JointLayout;

/// An output layout suitable for a chirality-invariant head: every coordinate
/// is a positive center coordinate, so the head output is unchanged by the
/// transform.
pub fn check_invariant_layout(out: &JointLayout) -> Result<()> {
    if out.num_pairs() > 0 || out.num_negated() > 0 {
        return Err(Error::validation(format!(
            "an invariant head needs center-only joints with no negated dims, got {} pairs and {} negated dims",
            out.num_pairs(),
            out.num_negated()
        )));
    }
    Ok(())
}
