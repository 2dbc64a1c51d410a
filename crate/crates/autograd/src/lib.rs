//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] fills the
//! gradients of every leaf created with [`Tape::param`]. Parameters live in
//! a [`ParamSet`], which is also the unit of checkpointing and of the
//! [`Adam`] update.

pub mod adam;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AutogradError, Result};
pub use gradcheck::{finite_diff_check, relative_error, FdConfig, FdReport, Probe};
pub use params::ParamSet;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Bind every entry of `params` onto `tape`, trainable or not, returning the
/// leaf handles in the same order.
pub fn bind(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Bound {
    let vars = params
        .iter()
        .map(|(n, t)| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            (n.to_string(), v)
        })
        .collect();
    Bound { vars }
}

/// Name → leaf mapping produced by [`bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Gradients of the bound leaves as a `ParamSet`; leaves that received
    /// no gradient contribute zeros.
    pub fn grads(&self, tape: &Tape) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, v) in &self.vars {
            let t = tape
                .grad_tensor(*v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
            out.insert(name.clone(), t);
        }
        out
    }
}
