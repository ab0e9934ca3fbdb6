//! Reverse-mode automatic differentiation over scalar computation graphs.
//!
//! A [`Tape`] records primitive operations eagerly during the forward pass and
//! replays them in reverse to accumulate adjoints. Trainable parameters are the
//! first nodes pushed onto a tape; [`Tape::backward`] returns one gradient per
//! parameter slot. Everything is `f64`; there is no vectorization and no
//! higher-order support — benchmark models here are at most a few thousand
//! latent dimensions, so a scalar tape is fast enough and much simpler.
//!
//! Non-finite forward values are rejected at record time so that a single bad
//! Monte Carlo sample surfaces as a recoverable [`Error::Domain`] instead of
//! silently poisoning an average with NaN.

pub mod fd;
pub mod ops;

use crate::error::{Error, Result};

/// Identifier of a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Primitive operation tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Const,
    Param,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    /// `x^c` for a compile-time constant exponent stored in `aux`.
    PowConst,
    Sigmoid,
    Relu,
    Square,
}

/// One recorded node: forward value, operation, and input ids.
///
/// `a`/`b` are input slots (unused slots point at the node itself and are
/// ignored by the interpreter); `aux` carries the constant exponent of
/// [`Op::PowConst`].
#[derive(Debug, Clone, Copy)]
pub struct Node {
    pub value: f64,
    pub aux: f64,
    pub a: u32,
    pub b: u32,
    pub op: Op,
}

/// Append-only record of a scalar computation.
///
/// Parameters must be registered before any dependent computation, via
/// [`Tape::param`] or [`Tape::param_vec`]. A tape is single-threaded; distinct
/// tapes may run concurrently since parameter values are copied in and
/// gradients are returned by value.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), n_params: 0 }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape { nodes: Vec::with_capacity(n), n_params: 0 }
    }

    /// Drop all nodes but keep the allocation. Parameter registration restarts.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.n_params = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.index()].value
    }

    #[inline]
    fn push(&mut self, node: Node) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(node);
        id
    }

    /// Register one trainable parameter. Must precede dependent computation.
    pub fn param(&mut self, value: f64) -> NodeId {
        debug_assert_eq!(
            self.n_params,
            self.nodes.len(),
            "parameters must be registered before other nodes"
        );
        self.n_params += 1;
        self.push(Node { value, aux: 0.0, a: 0, b: 0, op: Op::Param })
    }

    /// Register a slice of parameters; slot `k` of the result maps to gradient
    /// slot `k` of [`Tape::backward`]'s output.
    pub fn param_vec(&mut self, values: &[f64]) -> Vec<NodeId> {
        values.iter().map(|&v| self.param(v)).collect()
    }

    /// A constant leaf (no gradient flows into it).
    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Node { value, aux: 0.0, a: 0, b: 0, op: Op::Const })
    }

    #[inline]
    fn check(&self, id: NodeId) -> Result<()> {
        if id.index() >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "node id {} not on tape (len {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    #[inline]
    fn finish(&mut self, value: f64, aux: f64, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Domain(format!(
                "{op:?} produced non-finite value {value} (inputs {}, {})",
                self.nodes[a.index()].value,
                self.nodes[b.index()].value
            )));
        }
        Ok(self.push(Node { value, aux, a: a.0, b: b.0, op }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a) + self.value(b);
        self.finish(v, 0.0, a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a) - self.value(b);
        self.finish(v, 0.0, a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a) * self.value(b);
        self.finish(v, 0.0, a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let den = self.value(b);
        if den == 0.0 {
            return Err(Error::Domain("division by zero".into()));
        }
        let v = self.value(a) / den;
        self.finish(v, 0.0, a, b, Op::Div)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = -self.value(a);
        self.finish(v, 0.0, a, a, Op::Neg)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).exp();
        self.finish(v, 0.0, a, a, Op::Exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x <= 0.0 {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        self.finish(x.ln(), 0.0, a, a, Op::Log)
    }

    /// `x^c` for constant `c`. Negative bases are only legal for integer `c`.
    pub fn pow_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let x = self.value(a);
        if x < 0.0 && c.fract() != 0.0 {
            return Err(Error::Domain(format!(
                "pow of negative base {x} with non-integer exponent {c}"
            )));
        }
        self.finish(x.powf(c), c, a, a, Op::PowConst)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        // Evaluate from the side that avoids exp overflow.
        let v = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) };
        self.finish(v, 0.0, a, a, Op::Sigmoid)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).max(0.0);
        self.finish(v, 0.0, a, a, Op::Relu)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        self.finish(x * x, 0.0, a, a, Op::Square)
    }

    /// Record an operation by tag; thin dynamic front-end over the typed
    /// methods, mostly useful for random-graph test drivers.
    pub fn record(&mut self, op: Op, inputs: &[NodeId], aux: Option<f64>) -> Result<NodeId> {
        for &id in inputs {
            self.check(id)?;
        }
        let need = match op {
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            Op::Const | Op::Param => {
                return Err(Error::Usage("use Tape::constant / Tape::param for leaves".into()))
            }
            _ => 1,
        };
        if inputs.len() != need {
            return Err(Error::Usage(format!("{op:?} expects {need} inputs, got {}", inputs.len())));
        }
        match op {
            Op::Add => self.add(inputs[0], inputs[1]),
            Op::Sub => self.sub(inputs[0], inputs[1]),
            Op::Mul => self.mul(inputs[0], inputs[1]),
            Op::Div => self.div(inputs[0], inputs[1]),
            Op::Neg => self.neg(inputs[0]),
            Op::Exp => self.exp(inputs[0]),
            Op::Log => self.log(inputs[0]),
            Op::PowConst => self.pow_const(
                inputs[0],
                aux.ok_or_else(|| Error::Usage("pow-const needs an exponent".into()))?,
            ),
            Op::Sigmoid => self.sigmoid(inputs[0]),
            Op::Relu => self.relu(inputs[0]),
            Op::Square => self.square(inputs[0]),
            Op::Const | Op::Param => unreachable!(),
        }
    }

    /// Replay the forward evaluation over the stored nodes and confirm each
    /// recorded value is reproduced bit for bit.
    pub fn verify_replay(&self) -> bool {
        self.nodes.iter().all(|node| {
            let (a, b) = (self.nodes[node.a as usize].value, self.nodes[node.b as usize].value);
            let recomputed = match node.op {
                Op::Const | Op::Param => node.value,
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Neg => -a,
                Op::Exp => a.exp(),
                Op::Log => a.ln(),
                Op::PowConst => a.powf(node.aux),
                Op::Sigmoid => {
                    if a >= 0.0 {
                        1.0 / (1.0 + (-a).exp())
                    } else {
                        let e = a.exp();
                        e / (1.0 + e)
                    }
                }
                Op::Relu => a.max(0.0),
                Op::Square => a * a,
            };
            recomputed.to_bits() == node.value.to_bits()
        })
    }

    /// Reverse sweep from a scalar root. Returns `∂root/∂p` for every
    /// registered parameter slot; parameters unreachable from the root get 0.
    ///
    /// Does not mutate the tape, so repeated calls give identical results.
    pub fn backward(&self, root: NodeId) -> Result<Vec<f64>> {
        self.check(root)?;
        let mut adj = vec![0.0f64; self.nodes.len()];
        adj[root.index()] = 1.0;
        for idx in (self.n_params..=root.index()).rev() {
            let w = adj[idx];
            if w == 0.0 {
                continue;
            }
            let node = self.nodes[idx];
            let (a, b) = (node.a as usize, node.b as usize);
            match node.op {
                Op::Const | Op::Param => {}
                Op::Add => {
                    adj[a] += w;
                    adj[b] += w;
                }
                Op::Sub => {
                    adj[a] += w;
                    adj[b] -= w;
                }
                Op::Mul => {
                    adj[a] += w * self.nodes[b].value;
                    adj[b] += w * self.nodes[a].value;
                }
                Op::Div => {
                    let bv = self.nodes[b].value;
                    adj[a] += w / bv;
                    adj[b] -= w * node.value / bv;
                }
                Op::Neg => adj[a] -= w,
                Op::Exp => adj[a] += w * node.value,
                Op::Log => adj[a] += w / self.nodes[a].value,
                Op::PowConst => {
                    // d(x^c)/dx = c·x^(c-1)
                    let x = self.nodes[a].value;
                    adj[a] += w * node.aux * x.powf(node.aux - 1.0);
                }
                Op::Sigmoid => adj[a] += w * node.value * (1.0 - node.value),
                Op::Relu => {
                    if self.nodes[a].value > 0.0 {
                        adj[a] += w;
                    }
                }
                Op::Square => adj[a] += w * 2.0 * self.nodes[a].value,
            }
        }
        Ok(adj[..self.n_params].to_vec())
    }
}
