//! Hand-written neural network kernels with explicit backward passes: LSTM
//! sequences, bidirectional frequency-LSTM stacks, the multi-view frequency
//! LSTM, the shared backend (projection + time LSTM + classifier), softmax
//! cross-entropy, and a finite-difference gradient checker.
//!
//! All kernels read their parameters from a [`crate::ParameterStore`] by
//! name and write gradients into a [`crate::GradStore`] under the same
//! names, which is what makes per-partition gradient routing a structural
//! property rather than a masking step.

mod backend;
mod flstm;
pub mod gradcheck;
mod loss;
mod lstm;

pub use backend::{backend_backward, backend_forward, backend_tensor_specs, BackendCache, BackendConfig};
pub use flstm::{
    mv_flstm_backward, mv_flstm_forward, mv_flstm_tensor_specs, MvFlstmCache, MvFlstmConfig,
};
pub use gradcheck::{finite_diff_max_rel_err, kernel_gradcheck_reports, GradCheckReport};
pub use loss::softmax_ce;
pub use lstm::{lstm_seq_backward, lstm_seq_forward, lstm_step, LstmCache, LstmParamsRef};

use crate::error::Result;
use crate::params::ParameterStore;

/// Fetch the three tensors of one LSTM layer-direction as parameter views.
pub(crate) fn lstm_params<'a>(
    store: &'a ParameterStore,
    prefix: &str,
) -> Result<LstmParamsRef<'a>> {
    let w_x = store.get(&format!("{prefix}.w_x"))?;
    let w_h = store.get(&format!("{prefix}.w_h"))?;
    let b = store.get(&format!("{prefix}.b"))?;
    Ok(LstmParamsRef {
        w_x: w_x.as_mat(),
        w_h: w_h.as_mat(),
        b: &b.data,
    })
}
