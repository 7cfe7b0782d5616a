//! A minimal scalar reverse-mode differentiation engine. Every operation
//! records its parents and local partial derivatives on a growable tape; a
//! single reverse sweep from a root accumulates adjoints for every recorded
//! variable.

use std::cell::RefCell;

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [u32; 2],
    grads: [f64; 2],
}

/// Records the computation graph. Variables borrow the tape, so a tape must
/// outlive every `Var` created on it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A scalar variable on a tape: copyable handle carrying its value.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    pub value: f64,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: [u32; 2], grads: [f64; 2]) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len() as u32;
        nodes.push(Node { parents, grads });
        index
    }

    /// A leaf variable (gradient source or constant).
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.push([0, 0], [0.0, 0.0]);
        Var {
            tape: self,
            index,
            value,
        }
    }

    /// Adjoints of every tape variable with respect to `root`.
    pub fn gradients(&self, root: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![0.0; nodes.len()];
        adjoint[root.index as usize] = 1.0;
        for i in (0..nodes.len()).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for p in 0..2 {
                if node.grads[p] != 0.0 {
                    adjoint[node.parents[p] as usize] += a * node.grads[p];
                }
            }
        }
        adjoint
    }
}

impl<'t> Var<'t> {
    pub fn grad_index(&self) -> usize {
        self.index as usize
    }

    fn unary(self, value: f64, local: f64) -> Var<'t> {
        let index = self.tape.push([self.index, self.index], [local, 0.0]);
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    fn binary(self, other: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        let index = self.tape.push([self.index, other.index], [da, db]);
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    /// A constant living on the same tape (receives no gradient).
    pub fn constant(&self, value: f64) -> Var<'t> {
        self.tape.var(value)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, self.value + other.value, 1.0, 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, self.value - other.value, 1.0, -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, self.value * other.value, other.value, self.value)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(self.value * c, c)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.unary(self.value + c, 1.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = sigmoid_f64(self.value);
        self.unary(s, s * (1.0 - s))
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(self) -> Var<'t> {
        let v = softplus_f64(self.value);
        self.unary(v, sigmoid_f64(self.value))
    }

    pub fn abs(self) -> Var<'t> {
        // Subgradient 0 at the kink.
        let local = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.value.abs(), local)
    }

    pub fn relu(self) -> Var<'t> {
        let local = if self.value > 0.0 { 1.0 } else { 0.0 };
        self.unary(self.value.max(0.0), local)
    }
}

pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
