//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_with_fault, GradCheckReport};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{BackwardCtx, BackwardFn, LeafGrads, Tape, Var};
