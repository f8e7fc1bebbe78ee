//! A compact CPU framework for convolutional networks.
//!
//! Networks are declared in a small text format ([`netdef`]), instantiated
//! as a DAG of [`layers`] over [`Blob`]s ([`net`]), and trained with
//! momentum SGD ([`solver`]) on batches streamed from disk ([`data`]).

pub mod backend;
pub mod data;
pub mod error;
pub mod layers;
pub mod netdef;
pub mod net;
pub mod real;
pub mod solver;
pub mod tensor;

pub use backend::{Backend, Mode};
pub use error::{Diagnostic, Error, Pos, Result};
pub use real::{Real, Transpose};
pub use tensor::{allocation_count, Blob, Filler, Plane, Shape4};
