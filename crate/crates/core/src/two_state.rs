//! Two-state toy model: particles flip `1 → 2` at rate `λ` and `2 → 1` at
//! rate `τ`, with an additive control on `λ`.
//!
//! Its fluid limit and fluctuation law are available in closed form, which
//! makes it the reference model for the numerical oracles.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlBox, JumpVector, ModelParts, ModelSpec, TransitionType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStateParams {
    pub lambda: f64,
    pub tau: f64,
    /// Control half-width `D`.
    pub d_box: f64,
}

impl Default for TwoStateParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 1.0,
            d_box: 5.0,
        }
    }
}

pub fn two_state_model(params: &TwoStateParams) -> Result<ModelSpec> {
    let TwoStateParams { lambda, tau, d_box } = params.clone();
    if !(lambda > 0.0 && tau > 0.0) || !(d_box >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "two-state rates must be positive and D nonnegative: {params:?}"
        )));
    }
    let types = vec![
        TransitionType {
            name: "forward".into(),
            max_participants: 1,
            jumps: vec![JumpVector::single(2, 0, 1)],
        },
        TransitionType {
            name: "backward".into(),
            max_participants: 1,
            jumps: vec![JumpVector::single(2, 1, 0)],
        },
    ];
    ModelSpec::new(ModelParts {
        name: "two_state".into(),
        d: 2,
        state_labels: vec!["1".into(), "2".into()],
        types,
        base_rate: Arc::new(move |r, id| if id == 0 { lambda * r[0] } else { tau * r[1] }),
        prelimit_rate: Arc::new(move |n, r, u, id| {
            let nf = n as f64;
            if id == 0 {
                nf * r[0] * (lambda + u)
            } else {
                nf * r[1] * tau
            }
        }),
        h1: Arc::new(|r, id| if id == 0 { r[0] } else { 0.0 }),
        h2: Arc::new(move |_, id, out| {
            if id == 0 {
                out[0] = lambda;
            } else {
                out[1] = tau;
            }
        }),
        control_coord: vec![Some(0), None],
        control_box: ControlBox::symmetric(1, d_box),
        nondegenerate: vec![0, 1],
    })
}
