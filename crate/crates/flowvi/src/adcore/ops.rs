//! Composite tape operations built from the primitive set.
//!
//! These are the numerically safe building blocks the model zoo and flow
//! families share: Gaussian log-densities parameterized by log-scale,
//! softplus/log-sigmoid for Bernoulli likelihoods, dot products, and the
//! clamp used on flow log-scales.

use super::{NodeId, Tape};
use crate::error::Result;

pub const LN_2PI: f64 = 1.8378770664093453;

/// `Σ coeff_i · x_i + bias` as a tape node.
pub fn affine(tape: &mut Tape, bias: f64, coeffs: &[f64], xs: &[NodeId]) -> Result<NodeId> {
    debug_assert_eq!(coeffs.len(), xs.len());
    let mut acc = tape.constant(bias);
    for (&c, &x) in coeffs.iter().zip(xs) {
        if c == 0.0 {
            continue;
        }
        let cn = tape.constant(c);
        let term = tape.mul(cn, x)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// log N(x | mean, exp(log_scale)) with the scale kept in log space:
/// `-½ln2π - log_scale - ½((x-mean)·e^{-log_scale})²`.
pub fn gaussian_logpdf(tape: &mut Tape, x: NodeId, mean: NodeId, log_scale: NodeId) -> Result<NodeId> {
    let diff = tape.sub(x, mean)?;
    let neg_ls = tape.neg(log_scale)?;
    let inv_scale = tape.exp(neg_ls)?;
    let zscore = tape.mul(diff, inv_scale)?;
    let z2 = tape.square(zscore)?;
    let half = tape.constant(-0.5);
    let quad = tape.mul(half, z2)?;
    let c = tape.constant(-0.5 * LN_2PI);
    let a = tape.add(quad, c)?;
    tape.sub(a, log_scale)
}

/// |x| composed from two ReLUs (relu(x) + relu(-x)).
pub fn abs(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let nx = tape.neg(x)?;
    let p = tape.relu(x)?;
    let n = tape.relu(nx)?;
    tape.add(p, n)
}

/// Overflow-free softplus: `relu(x) + log(1 + exp(-|x|))`.
pub fn softplus(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let a = abs(tape, x)?;
    let na = tape.neg(a)?;
    let e = tape.exp(na)?;
    let one = tape.constant(1.0);
    let oe = tape.add(one, e)?;
    let l = tape.log(oe)?;
    let r = tape.relu(x)?;
    tape.add(r, l)
}

/// log σ(x) = -softplus(-x), stable for large |x|.
pub fn log_sigmoid(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let nx = tape.neg(x)?;
    let sp = softplus(tape, nx)?;
    tape.neg(sp)
}

/// Bernoulli log-likelihood with logit parameterization:
/// `y·logσ(η) + (1-y)·log(1-σ(η))`.
pub fn bernoulli_logit_logpmf(tape: &mut Tape, logit: NodeId, y: f64) -> Result<NodeId> {
    // log(1-σ(η)) = logσ(-η)
    if y == 1.0 {
        log_sigmoid(tape, logit)
    } else if y == 0.0 {
        let neg = tape.neg(logit)?;
        log_sigmoid(tape, neg)
    } else {
        let lp = log_sigmoid(tape, logit)?;
        let neg = tape.neg(logit)?;
        let ln = log_sigmoid(tape, neg)?;
        let cy = tape.constant(y);
        let c1y = tape.constant(1.0 - y);
        let a = tape.mul(cy, lp)?;
        let b = tape.mul(c1y, ln)?;
        tape.add(a, b)
    }
}

/// Differentiable clamp of `x` to `[lo, hi]` built from ReLUs:
/// `lo + relu(x-lo) - relu(x-hi)`. Gradient is 1 strictly inside and 0 outside.
/// Returns the node and whether the clamp was active at the forward value.
pub fn clamp(tape: &mut Tape, x: NodeId, lo: f64, hi: f64) -> Result<(NodeId, bool)> {
    let v = tape.value(x);
    let active = v < lo || v > hi;
    let clo = tape.constant(lo);
    let chi = tape.constant(hi);
    let dlo = tape.sub(x, clo)?;
    let rlo = tape.relu(dlo)?;
    let dhi = tape.sub(x, chi)?;
    let rhi = tape.relu(dhi)?;
    let base = tape.add(clo, rlo)?;
    let out = tape.sub(base, rhi)?;
    Ok((out, active))
}

/// Sum of a node slice; zero constant for an empty slice.
pub fn sum(tape: &mut Tape, xs: &[NodeId]) -> Result<NodeId> {
    let mut acc = match xs.first() {
        Some(&x) => x,
        None => return Ok(tape.constant(0.0)),
    };
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}
