//! Invertible transformations: full-rank affine, forward/inverse
//! autoregressive flows, the generalized forward flow with a translation term,
//! and the model-informed flow (MIF) with its ablation flags.
//!
//! All flows here are a single layer. Autoregressive conditioners have a fixed
//! input arity per coordinate: a slot per latent index (zero-padded where the
//! value is not yet generated), plus, for the model-informed variants, one
//! slot each for the prior mean and prior log-scale, and for translation
//! conditioners a slot per base-noise index. Structural zeros are skipped
//! rather than multiplied out, which changes nothing (the weights on those
//! slots simply receive no gradient).
//!
//! Log-scales are clamped to ±[`LOG_SCALE_CLAMP`] before exponentiation; the
//! clamp is differentiable (ReLU-composed) and activation is counted so runs
//! can verify it never binds at convergence.

use crate::adcore::{ops, NodeId, Tape};
use crate::error::{Error, Result};
use crate::modelzoo::ModelGraph;

pub const LOG_SCALE_CLAMP: f64 = 30.0;

/// Variational family tags for flow-shaped families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FlowFamily {
    /// Forward autoregressive: conditioners see previously generated `z`.
    Faf,
    /// Inverse autoregressive: conditioners see base noise only.
    Iaf,
    /// Forward autoregressive plus a translation term `t(ε, z)`.
    Gfaf,
    /// Generalized flow fed with the model's prior mean and log-scale, in
    /// topological order.
    Mif,
}

/// MIF ablation flags. Only meaningful for [`FlowFamily::Mif`]; the defaults
/// are the full architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MifFlags {
    /// Evaluate the translation conditioner (`t_i`).
    pub use_translation: bool,
    /// Feed `f_i`, `log g_i` to the conditioners.
    pub use_prior_inputs: bool,
    /// Process coordinates in the model's topological order; when false a
    /// fixed adversarial permutation (reverse order) is used.
    pub respect_order: bool,
    /// Condition on previously processed base noise instead of generated
    /// latents (the IAF-like variant).
    pub eps_conditioning: bool,
}

impl Default for MifFlags {
    fn default() -> Self {
        MifFlags {
            use_translation: true,
            use_prior_inputs: true,
            respect_order: true,
            eps_conditioning: false,
        }
    }
}

/// A flow family instance: family, dimension, conditioner hidden width, flags.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowSpec {
    pub family: FlowFamily,
    pub dim: usize,
    /// Hidden width of the conditioners' nonlinear component; 0 means purely
    /// affine conditioners.
    pub hidden: usize,
    #[serde(default)]
    pub flags: MifFlags,
}

impl FlowSpec {
    pub fn new(family: FlowFamily, dim: usize, hidden: usize) -> Self {
        FlowSpec { family, dim, hidden, flags: MifFlags::default() }
    }

    pub fn mif(dim: usize, hidden: usize, flags: MifFlags) -> Self {
        FlowSpec { family: FlowFamily::Mif, dim, hidden, flags }
    }

    /// Structural validation. Returns warnings (currently: an order-ablation
    /// flag that has no effect because the reversed order is still valid for
    /// the model).
    pub fn validate(&self, model: Option<&ModelGraph>) -> Result<Vec<String>> {
        if self.family != FlowFamily::Mif && self.flags != MifFlags::default() {
            return Err(Error::Config(format!(
                "ablation flags are only legal on MIF, not {:?}",
                self.family
            )));
        }
        let mut warnings = Vec::new();
        if self.family == FlowFamily::Mif {
            let model = model.ok_or_else(|| {
                Error::Config("MIF requires a model graph for prior inputs and ordering".into())
            })?;
            if model.dim() != self.dim {
                return Err(Error::Config(format!(
                    "flow dimension {} does not match model dimension {}",
                    self.dim,
                    model.dim()
                )));
            }
            if !self.flags.respect_order && model.sites.iter().all(|s| s.parents.is_empty()) {
                warnings.push(
                    "order ablation has no effect: reversed order is still topological for this model"
                        .to_string(),
                );
            }
        }
        Ok(warnings)
    }

    /// Parameter layout. The layout depends on family, dimension and hidden
    /// width only — ablation flags leave unused conditioners in place so that
    /// parameter vectors stay comparable across flag settings.
    pub fn layout(&self) -> FlowLayout {
        let d = self.dim;
        let (m_arity, t_arity) = match self.family {
            FlowFamily::Faf | FlowFamily::Iaf => (d, None),
            FlowFamily::Gfaf => (d, Some(2 * d)),
            FlowFamily::Mif => (d + 2, Some(2 * d + 2)),
        };
        let mut coords = Vec::with_capacity(d);
        let mut offset = 0;
        for _ in 0..d {
            let m = CondLayout::new(offset, m_arity, self.hidden);
            offset += m.param_count();
            let s = CondLayout::new(offset, m_arity, self.hidden);
            offset += s.param_count();
            let t = t_arity.map(|a| {
                let c = CondLayout::new(offset, a, self.hidden);
                offset += c.param_count();
                c
            });
            coords.push(CoordConds { m, s, t });
        }
        FlowLayout { coords, total: offset }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Conditioners of one coordinate.
#[derive(Debug, Clone)]
pub struct CoordConds {
    pub m: CondLayout,
    pub s: CondLayout,
    pub t: Option<CondLayout>,
}

#[derive(Debug, Clone)]
pub struct FlowLayout {
    pub coords: Vec<CoordConds>,
    pub total: usize,
}

/// One conditioner: a linear map plus an optional one-hidden-layer component
/// (ReLU activation, linear output) over the same inputs; the output is the
/// sum of the two components. Parameters live in a flat vector at `offset`,
/// ordered `[w_lin, b_lin, W1 row-major, b1, w2, b2]`.
#[derive(Debug, Clone)]
pub struct CondLayout {
    pub offset: usize,
    pub arity: usize,
    pub hidden: usize,
}

impl CondLayout {
    pub fn new(offset: usize, arity: usize, hidden: usize) -> Self {
        CondLayout { offset, arity, hidden }
    }

    pub fn param_count(&self) -> usize {
        let linear = self.arity + 1;
        let mlp = if self.hidden > 0 { self.hidden * (self.arity + 1) + self.hidden + 1 } else { 0 };
        linear + mlp
    }

    /// Evaluate on tape nodes. `inputs` has length `arity`; `None` entries are
    /// structural zeros and are skipped.
    pub fn apply(&self, tape: &mut Tape, params: &[NodeId], inputs: &[Option<NodeId>]) -> Result<NodeId> {
        if inputs.len() != self.arity {
            return Err(Error::Usage(format!(
                "conditioner arity {} but {} inputs supplied",
                self.arity,
                inputs.len()
            )));
        }
        let p = &params[self.offset..self.offset + self.param_count()];
        let mut acc = p[self.arity]; // linear bias
        for (j, input) in inputs.iter().enumerate() {
            if let Some(x) = input {
                let term = tape.mul(p[j], *x)?;
                acc = tape.add(acc, term)?;
            }
        }
        if self.hidden > 0 {
            let w1 = self.arity + 1;
            let b1 = w1 + self.hidden * self.arity;
            let w2 = b1 + self.hidden;
            let b2 = w2 + self.hidden;
            let mut out = p[b2];
            for u in 0..self.hidden {
                let mut pre = p[b1 + u];
                for (j, input) in inputs.iter().enumerate() {
                    if let Some(x) = input {
                        let term = tape.mul(p[w1 + u * self.arity + j], *x)?;
                        pre = tape.add(pre, term)?;
                    }
                }
                let hid = tape.relu(pre)?;
                let term = tape.mul(p[w2 + u], hid)?;
                out = tape.add(out, term)?;
            }
            acc = tape.add(acc, out)?;
        }
        Ok(acc)
    }
}

/// Layout of the Gaussian base: mean, raw log-diagonal, and (full-rank only)
/// strictly lower-triangular entries in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineBaseLayout {
    pub dim: usize,
    pub full_rank: bool,
}

impl AffineBaseLayout {
    pub fn param_count(&self) -> usize {
        2 * self.dim + if self.full_rank { self.dim * (self.dim - 1) / 2 } else { 0 }
    }

    pub fn mu(&self, i: usize) -> usize {
        i
    }

    /// Raw diagonal entry; the Cholesky diagonal is `exp(raw)`.
    pub fn raw_diag(&self, i: usize) -> usize {
        self.dim + i
    }

    /// Strictly lower entry (i, j), j < i.
    pub fn lower(&self, i: usize, j: usize) -> usize {
        debug_assert!(self.full_rank && j < i);
        2 * self.dim + i * (i - 1) / 2 + j
    }

    /// Materialize the Cholesky factor rows (row i has i+1 entries).
    pub fn cholesky_rows(&self, values: &[f64]) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| {
                let mut row = Vec::with_capacity(i + 1);
                for j in 0..i {
                    row.push(if self.full_rank { values[self.lower(i, j)] } else { 0.0 });
                }
                row.push(values[self.raw_diag(i)].exp());
                row
            })
            .collect()
    }
}

/// Output of a flow forward pass.
#[derive(Debug)]
pub struct FlowOutput {
    pub z: Vec<NodeId>,
    /// log |det ∂z/∂ε| — triangular, so the sum of realized log-scales.
    pub logdet: NodeId,
    /// Number of coordinates where the log-scale clamp was active.
    pub clamp_events: u32,
}

/// `z = mu + L·eps`, `logdet = Σ log L_ii = Σ raw_i`.
pub fn full_rank_forward(
    tape: &mut Tape,
    layout: &AffineBaseLayout,
    params: &[NodeId],
    eps: &[f64],
) -> Result<(Vec<NodeId>, NodeId)> {
    let d = layout.dim;
    if eps.len() != d {
        return Err(Error::Usage(format!("eps length {} != dim {d}", eps.len())));
    }
    for (k, e) in eps.iter().enumerate() {
        if !e.is_finite() {
            return Err(Error::Domain(format!("eps[{k}] = {e} is not finite")));
        }
    }
    let mut z = Vec::with_capacity(d);
    let mut logdet = tape.constant(0.0);
    for i in 0..d {
        let mut acc = params[layout.mu(i)];
        if layout.full_rank {
            for j in 0..i {
                if eps[j] != 0.0 {
                    let c = tape.constant(eps[j]);
                    let term = tape.mul(params[layout.lower(i, j)], c)?;
                    acc = tape.add(acc, term)?;
                }
            }
        }
        let raw = params[layout.raw_diag(i)];
        let diag = tape.exp(raw)?;
        let ei = tape.constant(eps[i]);
        let term = tape.mul(diag, ei)?;
        acc = tape.add(acc, term)?;
        z.push(acc);
        logdet = tape.add(logdet, raw)?;
    }
    Ok((z, logdet))
}

/// Dispatch a flow-family forward pass. `model` is required for MIF.
pub fn flow_forward(
    tape: &mut Tape,
    spec: &FlowSpec,
    params: &[NodeId],
    model: Option<&ModelGraph>,
    eps: &[f64],
) -> Result<FlowOutput> {
    match spec.family {
        FlowFamily::Faf => autoregressive_forward(tape, spec, params, eps, Conditioning::Latents),
        FlowFamily::Iaf => autoregressive_forward(tape, spec, params, eps, Conditioning::Noise),
        FlowFamily::Gfaf => gfaf_forward(tape, spec, params, eps),
        FlowFamily::Mif => {
            let model = model.ok_or_else(|| Error::Usage("MIF forward requires a model".into()))?;
            mif_forward(tape, model, spec, params, eps)
        }
    }
}

enum Conditioning {
    Latents,
    Noise,
}

/// FAF (`z_i = m_i(z_<i) + s_i(z_<i)·ε_i`) and IAF (`z_i = m_i(ε_<i) +
/// s_i(ε_<i)·ε_i`) share one loop; only the slot contents differ.
fn autoregressive_forward(
    tape: &mut Tape,
    spec: &FlowSpec,
    params: &[NodeId],
    eps: &[f64],
    conditioning: Conditioning,
) -> Result<FlowOutput> {
    let d = spec.dim;
    check_eps(d, eps)?;
    let layout = spec.layout();
    let mut slots: Vec<Option<NodeId>> = vec![None; d];
    let mut z = Vec::with_capacity(d);
    let mut logdet = tape.constant(0.0);
    let mut clamp_events = 0;
    for i in 0..d {
        let coord = &layout.coords[i];
        let m = coord.m.apply(tape, params, &slots)?;
        let s_raw = coord.s.apply(tape, params, &slots)?;
        let (log_s, clamped) = ops::clamp(tape, s_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)?;
        clamp_events += clamped as u32;
        let scale = tape.exp(log_s)?;
        let ei = tape.constant(eps[i]);
        let se = tape.mul(scale, ei).map_err(|e| at_coord(e, i))?;
        let zi = tape.add(m, se).map_err(|e| at_coord(e, i))?;
        logdet = tape.add(logdet, log_s)?;
        slots[i] = match conditioning {
            Conditioning::Latents => Some(zi),
            Conditioning::Noise => Some(ei),
        };
        z.push(zi);
    }
    Ok(FlowOutput { z, logdet, clamp_events })
}

/// Generalized forward autoregressive flow:
/// `z_i = m_i(z_<i) + s_i(z_<i)·(ε_i - t_i(ε_<i, z_<i))`.
/// The translation term does not touch the Jacobian diagonal, so the
/// log-determinant is still `Σ log s_i`.
fn gfaf_forward(tape: &mut Tape, spec: &FlowSpec, params: &[NodeId], eps: &[f64]) -> Result<FlowOutput> {
    let d = spec.dim;
    check_eps(d, eps)?;
    let layout = spec.layout();
    let mut z_slots: Vec<Option<NodeId>> = vec![None; d];
    let mut eps_slots: Vec<Option<NodeId>> = vec![None; d];
    let mut z = Vec::with_capacity(d);
    let mut logdet = tape.constant(0.0);
    let mut clamp_events = 0;
    for i in 0..d {
        let coord = &layout.coords[i];
        let m = coord.m.apply(tape, params, &z_slots)?;
        let s_raw = coord.s.apply(tape, params, &z_slots)?;
        let (log_s, clamped) = ops::clamp(tape, s_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)?;
        clamp_events += clamped as u32;
        let scale = tape.exp(log_s)?;

        let t_inputs: Vec<Option<NodeId>> =
            z_slots.iter().chain(eps_slots.iter()).copied().collect();
        let t = coord.t.as_ref().expect("gfaf layout has t").apply(tape, params, &t_inputs)?;

        let ei = tape.constant(eps[i]);
        let shifted = tape.sub(ei, t)?;
        let se = tape.mul(scale, shifted).map_err(|e| at_coord(e, i))?;
        let zi = tape.add(m, se).map_err(|e| at_coord(e, i))?;
        logdet = tape.add(logdet, log_s)?;
        z_slots[i] = Some(zi);
        eps_slots[i] = Some(ei);
        z.push(zi);
    }
    Ok(FlowOutput { z, logdet, clamp_events })
}

/// Model-informed flow (ablations included):
///
/// For each coordinate, in topological order (or reverse order when the order
/// flag is off): build `u_i = [z_<i, f_i(π(z_i)), log g_i(π(z_i))]`, evaluate
/// `m_i = C_m(u_i)`, `log s_i = C_s(u_i)`, `t_i = C_t([u_i, ε_<i])`, and set
/// `z_i = m_i + exp(log s_i)·(ε_i - t_i)`.
///
/// - translation off: `t_i = 0`;
/// - prior inputs off (or a site's parents not yet generated under the
///   adversarial order, or a non-Gaussian site): the `f`/`log g` slots are
///   structural zeros;
/// - noise conditioning on: the latent slots carry previously processed `ε`
///   instead of `z` (prior inputs, when on, still come from realized latents).
pub fn mif_forward(
    tape: &mut Tape,
    model: &ModelGraph,
    spec: &FlowSpec,
    params: &[NodeId],
    eps: &[f64],
) -> Result<FlowOutput> {
    let d = spec.dim;
    if model.dim() != d {
        return Err(Error::Usage(format!("model dim {} != flow dim {d}", model.dim())));
    }
    check_eps(d, eps)?;
    let flags = spec.flags;
    let layout = spec.layout();
    let order: Vec<usize> =
        if flags.respect_order { (0..d).collect() } else { (0..d).rev().collect() };

    let zero = tape.constant(0.0);
    let mut z_dense: Vec<NodeId> = vec![zero; d];
    let mut generated = vec![false; d];
    let mut z_slots: Vec<Option<NodeId>> = vec![None; d];
    let mut eps_slots: Vec<Option<NodeId>> = vec![None; d];
    let mut z_out: Vec<Option<NodeId>> = vec![None; d];
    let mut logdet = tape.constant(0.0);
    let mut clamp_events = 0;

    for &i in &order {
        let coord = &layout.coords[i];
        // prior inputs need every parent realized; under the adversarial
        // order that can fail, in which case the slots stay zero
        let parents_ready = model.sites[i].parents.iter().all(|&p| generated[p]);
        let (f_slot, g_slot) = if flags.use_prior_inputs && parents_ready {
            let f = model.site_mean_node(tape, i, &z_dense)?;
            let g = model.site_log_scale_node(tape, i, &z_dense)?;
            (Some(f), Some(g))
        } else {
            (None, None)
        };

        let mut u: Vec<Option<NodeId>> = Vec::with_capacity(d + 2);
        if flags.eps_conditioning {
            u.extend(eps_slots.iter().copied());
        } else {
            u.extend(z_slots.iter().copied());
        }
        u.push(f_slot);
        u.push(g_slot);

        let m = coord.m.apply(tape, params, &u)?;
        let s_raw = coord.s.apply(tape, params, &u)?;
        let (log_s, clamped) = ops::clamp(tape, s_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)?;
        clamp_events += clamped as u32;
        let scale = tape.exp(log_s)?;

        let ei = tape.constant(eps[i]);
        let inner = if flags.use_translation {
            let t_inputs: Vec<Option<NodeId>> =
                u.iter().chain(eps_slots.iter()).copied().collect();
            let t = coord.t.as_ref().expect("mif layout has t").apply(tape, params, &t_inputs)?;
            tape.sub(ei, t)?
        } else {
            ei
        };
        let se = tape.mul(scale, inner).map_err(|e| at_coord(e, i))?;
        let zi = tape.add(m, se).map_err(|e| at_coord(e, i))?;

        logdet = tape.add(logdet, log_s)?;
        z_dense[i] = zi;
        generated[i] = true;
        z_slots[i] = Some(zi);
        eps_slots[i] = Some(ei);
        z_out[i] = Some(zi);
    }

    let z = z_out.into_iter().map(|z| z.expect("all coordinates generated")).collect();
    Ok(FlowOutput { z, logdet, clamp_events })
}

/// Value-level forward pass on a scratch tape (no gradients), for evaluation
/// loops and numeric Jacobian oracles.
pub fn flow_forward_values(
    spec: &FlowSpec,
    params: &[f64],
    model: Option<&ModelGraph>,
    eps: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let nodes = tape.param_vec(params);
    let out = flow_forward(&mut tape, spec, &nodes, model, eps)?;
    Ok((out.z.iter().map(|&id| tape.value(id)).collect(), tape.value(out.logdet)))
}

/// Value-level full-rank forward.
pub fn full_rank_forward_values(
    layout: &AffineBaseLayout,
    params: &[f64],
    eps: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let nodes = tape.param_vec(params);
    let (z, logdet) = full_rank_forward(&mut tape, layout, &nodes, eps)?;
    Ok((z.iter().map(|&id| tape.value(id)).collect(), tape.value(logdet)))
}

/// Conditioner parameters of the affine FAF that reproduces `z = mu + L·eps`
/// exactly: `m_i(z_<i) = mu_i + L_{i,<i}·L_{<i,<i}^{-1}(z_<i - mu_<i)` and
/// `log s_i = log L_ii`. Returns a parameter vector for an affine FAF spec of
/// the same dimension.
pub fn faf_from_full_rank(mu: &[f64], l_rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = mu.len();
    if l_rows.len() != d {
        return Err(Error::Usage("mu and L dimension mismatch".into()));
    }
    for (i, row) in l_rows.iter().enumerate() {
        if row.len() != i + 1 {
            return Err(Error::Usage(format!("L row {i} must have {} entries", i + 1)));
        }
        if row[i] <= 0.0 {
            return Err(Error::Usage(format!("L diagonal must be positive, got {}", row[i])));
        }
    }
    let spec = FlowSpec::new(FlowFamily::Faf, d, 0);
    let layout = spec.layout();
    let mut params = vec![0.0; layout.total];
    for i in 0..d {
        let coord = &layout.coords[i];
        // a^T = L_{i,<i} · L_{<i,<i}^{-1}  ⇔  L_{<i,<i}^T a = L_{i,<i}^T
        let weights = if i > 0 {
            solve_upper_from_lower(&l_rows[..i], &l_rows[i][..i])?
        } else {
            Vec::new()
        };
        let bias = mu[i] - weights.iter().zip(mu).map(|(a, m)| a * m).sum::<f64>();
        let p = coord.m.offset;
        params[p + coord.m.arity] = bias;
        for (j, a) in weights.iter().enumerate() {
            params[p + j] = *a;
        }
        params[coord.s.offset + coord.s.arity] = l_rows[i][i].ln();
    }
    Ok(params)
}

/// Solve `L^T a = b` for the leading lower-triangular block (back
/// substitution on the transpose).
fn solve_upper_from_lower(l_rows: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut a = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in (i + 1)..n {
            acc -= l_rows[j][i] * a[j];
        }
        let diag = l_rows[i][i];
        if diag == 0.0 {
            return Err(Error::Usage("singular leading minor".into()));
        }
        a[i] = acc / diag;
    }
    Ok(a)
}

fn check_eps(d: usize, eps: &[f64]) -> Result<()> {
    if eps.len() != d {
        return Err(Error::Usage(format!("eps length {} != dim {d}", eps.len())));
    }
    for (k, e) in eps.iter().enumerate() {
        if !e.is_finite() {
            return Err(Error::Domain(format!("eps[{k}] = {e} is not finite")));
        }
    }
    Ok(())
}

fn at_coord(e: Error, i: usize) -> Error {
    match e {
        Error::Domain(msg) => Error::Domain(format!("coordinate {i}: {msg}")),
        other => other,
    }
}
