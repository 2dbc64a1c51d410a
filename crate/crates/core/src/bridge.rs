//! Scale-and-shift calibration of the utterance representation conditioned
//! on the SNR coefficient.

use ser_autograd::{Bound, ParamSet, Tape, Tensor, Var};

use crate::error::{invalid, Result};
use crate::ser::EMBED_DIM;

/// Identity initialisation: `w1 = 0, b1 = 1, w2 = 0, b2 = 0`.
pub fn init_bridge() -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("bridge.w1", Tensor::zeros(&[1, EMBED_DIM]));
    p.insert("bridge.b1", Tensor::full(&[1, EMBED_DIM], 1.0));
    p.insert("bridge.w2", Tensor::zeros(&[1, EMBED_DIM]));
    p.insert("bridge.b2", Tensor::zeros(&[1, EMBED_DIM]));
    p
}

/// `h̃ = (w1·c + b1) ⊙ h + (w2·c + b2)` with `h: [1, D]` and single-element `c`.
pub fn calibrate_graph(tape: &mut Tape, p: &Bound, h: Var, c: Var) -> Result<Var> {
    let w1c = tape.scale_by(p.var("bridge.w1")?, c)?;
    let gamma = tape.add(w1c, p.var("bridge.b1")?)?;
    let w2c = tape.scale_by(p.var("bridge.w2")?, c)?;
    let beta = tape.add(w2c, p.var("bridge.b2")?)?;
    let scaled = tape.mul(gamma, h)?;
    Ok(tape.add(scaled, beta)?)
}

/// Plain evaluation of the calibration.
pub fn calibrate(h: &[f64], c: f64, p: &ParamSet) -> Result<Vec<f64>> {
    let (w1, b1, w2, b2) = (
        p.get("bridge.w1")?.data(),
        p.get("bridge.b1")?.data(),
        p.get("bridge.w2")?.data(),
        p.get("bridge.b2")?.data(),
    );
    if h.len() != w1.len() {
        return Err(invalid(format!("representation has {} dims, bridge {}", h.len(), w1.len())));
    }
    Ok((0..h.len())
        .map(|i| (w1[i] * c + b1[i]) * h[i] + (w2[i] * c + b2[i]))
        .collect())
}

pub fn loss_high(h_s: &[f64], h_tilde: &[f64]) -> Result<f64> {
    if h_s.len() != h_tilde.len() {
        return Err(invalid(format!("loss_high: {} vs {} dims", h_s.len(), h_tilde.len())));
    }
    Ok(h_s.iter().zip(h_tilde).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h_s.len() as f64)
}
