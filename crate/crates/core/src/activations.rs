//! Scalar nonlinearities and their derivatives.

use crate::scalar::Scalar;

/// Fixed SELU constants.
pub struct SeluConstants;

impl SeluConstants {
    pub const ALPHA: f64 = 1.673_263_242_354_377_284_817_042_991_671_7;
    pub const LAMBDA: f64 = 1.050_700_987_355_480_493_419_334_985_294_6;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Selu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => tanh_act(x),
            Activation::Selu => selu(x),
            Activation::Linear => x,
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        derivative(self, x)
    }
}

/// Logistic function, branching on sign so `exp` never overflows.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn tanh_act<T: Scalar>(x: T) -> T {
    x.tanh()
}

#[inline]
pub fn selu<T: Scalar>(x: T) -> T {
    let lambda = T::lit(SeluConstants::LAMBDA);
    if x > T::zero() {
        lambda * x
    } else {
        let alpha = T::lit(SeluConstants::ALPHA);
        lambda * (alpha * x.exp() - alpha)
    }
}

/// Derivative of `f` at `x`. SELU takes the right-hand slope `λ` at zero.
#[inline]
pub fn derivative<T: Scalar>(f: Activation, x: T) -> T {
    match f {
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
        Activation::Tanh => {
            let t = x.tanh();
            T::one() - t * t
        }
        Activation::Selu => {
            let lambda = T::lit(SeluConstants::LAMBDA);
            if x >= T::zero() {
                lambda
            } else {
                lambda * T::lit(SeluConstants::ALPHA) * x.exp()
            }
        }
        Activation::Linear => T::one(),
    }
}
