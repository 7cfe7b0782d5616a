//! Abstraction over plain `f64` and tape variables so the network forward
//! pass is written once and runs both in fast training mode and under the
//! differentiation engine for verification.

use super::tape::{sigmoid_f64, softplus_f64, Var};

pub trait Real: Copy {
    fn value(self) -> f64;
    /// A constant of the same kind (same tape for tracked variables).
    fn lit(self, v: f64) -> Self;
    fn add(self, other: Self) -> Self;
    fn sub(self, other: Self) -> Self;
    fn mul(self, other: Self) -> Self;
    fn neg(self) -> Self;
    fn scale(self, c: f64) -> Self;
    fn add_const(self, c: f64) -> Self;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;
    fn softplus(self) -> Self;
    fn abs(self) -> Self;
    fn relu(self) -> Self;
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lit(self, v: f64) -> Self {
        v
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn sub(self, other: Self) -> Self {
        self - other
    }
    fn mul(self, other: Self) -> Self {
        self * other
    }
    fn neg(self) -> Self {
        -self
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn add_const(self, c: f64) -> Self {
        self + c
    }
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn relu(self) -> Self {
        self.max(0.0)
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.value
    }
    fn lit(self, v: f64) -> Self {
        self.constant(v)
    }
    fn add(self, other: Self) -> Self {
        Var::add(self, other)
    }
    fn sub(self, other: Self) -> Self {
        Var::sub(self, other)
    }
    fn mul(self, other: Self) -> Self {
        Var::mul(self, other)
    }
    fn neg(self) -> Self {
        Var::neg(self)
    }
    fn scale(self, c: f64) -> Self {
        Var::scale(self, c)
    }
    fn add_const(self, c: f64) -> Self {
        Var::add_const(self, c)
    }
    fn sigmoid(self) -> Self {
        Var::sigmoid(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn softplus(self) -> Self {
        Var::softplus(self)
    }
    fn abs(self) -> Self {
        Var::abs(self)
    }
    fn relu(self) -> Self {
        Var::relu(self)
    }
}
