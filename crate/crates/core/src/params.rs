//! Named parameter groups and their binding onto a [`Tape`](crate::autodiff::Tape).

use crate::autodiff::{Tape, Var};
use crate::tensor::Matrix;

/// Hands out consecutive gradient slots while binding parameters to a tape.
#[derive(Debug, Default)]
pub struct SlotAlloc {
    next: usize,
}

impl SlotAlloc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, value: &Matrix) -> Var {
        let key = self.next;
        self.next += 1;
        tape.param(value.clone(), key)
    }

    pub fn used(&self) -> usize {
        self.next
    }
}

/// Declares a struct of `Matrix` fields together with a same-shaped struct of
/// tape handles, a fixed field order and a binder.
macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident / $vars:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
        pub struct $name {
            $(pub $field: $crate::tensor::Matrix),+
        }

        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $(pub $field: $crate::autodiff::Var),+
        }

        impl $name {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn tensors(&self) -> Vec<&$crate::tensor::Matrix> {
                vec![$(&self.$field),+]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut $crate::tensor::Matrix> {
                vec![$(&mut self.$field),+]
            }

            pub fn bind(&self, tape: &mut $crate::autodiff::Tape, slots: &mut $crate::params::SlotAlloc) -> $vars {
                $vars { $($field: slots.bind(tape, &self.$field)),+ }
            }
        }
    };
}

pub(crate) use param_group;
