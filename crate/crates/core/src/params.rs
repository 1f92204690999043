//! Parameter groups, generic over the stored value.
//!
//! Each group is declared once and instantiated both as `Group<Tensor>` (the
//! stored weights) and `Group<Var>` (the same weights bound to a tape for one
//! forward pass). `map` and `visit_mut` walk fields in declaration order, which
//! fixes the parameter order seen by the optimizer and the checkpoint.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

macro_rules! param_group {
    ($(#[$m:meta])* pub struct $name:ident { $($(#[$fm:meta])* $field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = Tensor> {
            $($(#[$fm])* pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field),)*
                }
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}.{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

pub(crate) use param_group;

param_group! {
    /// Affine map `x · w + b`.
    pub struct Linear { w, b }
}

param_group! {
    /// Learned scale and shift applied after normalization.
    pub struct LayerNormAffine { gamma, beta }
}

impl Linear {
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::xavier(&[fan_in, fan_out], rng).param(),
            b: Tensor::zeros(&[fan_out]).param(),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]).param(),
            b: Tensor::zeros(&[fan_out]).param(),
        }
    }
}

impl LayerNormAffine {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[width], 1.0).param(),
            beta: Tensor::zeros(&[width]).param(),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> crate::Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add(y, self.b)
    }
}

impl LayerNormAffine<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> crate::Result<Var> {
        let n = tape.layer_norm(x)?;
        let s = tape.mul(n, self.gamma)?;
        tape.add(s, self.beta)
    }
}
