//! Dilated causal 1-D convolution and the gated activation unit.
//!
//! These are "valid" (unpadded) convolutions: the time axis shrinks by
//! `dilation * (kernel_size - 1)` per layer, and with the dilation stack
//! sized so the receptive field equals the input length, the final layer's
//! temporal dimension is exactly one.
//!
//! ```
//! use qgwnet::temporal::receptive_field;
//!
//! assert_eq!(receptive_field(2, &[1]), 2);
//! assert_eq!(receptive_field(2, &[1, 2, 4, 8]), 16);
//! assert_eq!(receptive_field(2, &[1, 2, 1, 2]), 7);
//! ```

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Parameters of one gated temporal layer: two parallel convolution branches
/// (filter and gate) with their biases, sharing a dilation.
#[derive(Debug, Clone)]
pub struct TcnLayerParams {
    pub filter_weight: Tensor,
    pub filter_bias: Tensor,
    pub gate_weight: Tensor,
    pub gate_bias: Tensor,
    pub dilation: usize,
}

impl TcnLayerParams {
    pub fn new(
        filter_weight: Tensor,
        filter_bias: Tensor,
        gate_weight: Tensor,
        gate_bias: Tensor,
        dilation: usize,
    ) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::invalid("TcnLayerParams", "dilation must be >= 1"));
        }
        if filter_weight.ndim() != 3 || filter_weight.shape()[0] == 0 {
            return Err(Error::invalid(
                "TcnLayerParams",
                format!("kernel must be (k>=1, c_in, c_out), got {:?}", filter_weight.shape()),
            ));
        }
        if filter_weight.shape() != gate_weight.shape() {
            return Err(Error::ShapeMismatch {
                op: "TcnLayerParams",
                lhs: filter_weight.shape().to_vec(),
                rhs: gate_weight.shape().to_vec(),
            });
        }
        Ok(TcnLayerParams {
            filter_weight,
            filter_bias,
            gate_weight,
            gate_bias,
            dilation,
        })
    }
}

/// Dilated causal convolution: `y[t] = sum_j w[j] . x[t - j*d]`.
///
/// `x` is `(T, ..., C_in)` (middle axes are batch), `w` is
/// `(k, C_in, C_out)`; the output keeps only the `T - d*(k-1)` positions
/// whose full backward-looking support exists, so no future leaks in.
pub fn dilated_causal_conv<'t>(x: Var<'t>, w: Var<'t>, dilation: usize) -> Result<Var<'t>> {
    x.conv1d(w, dilation)
}

/// Gated activation `tanh(a) * sigmoid(b)`, elementwise.
pub fn gated_activation<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.tanh()?.mul(b.sigmoid()?)
}

/// Receptive field of a stack of dilated convolutions:
/// `1 + (kernel_size - 1) * sum(dilations)`.
pub fn receptive_field(kernel_size: usize, dilations: &[usize]) -> usize {
    1 + (kernel_size - 1) * dilations.iter().sum::<usize>()
}
