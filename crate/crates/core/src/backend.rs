//! The execution backend seam.
//!
//! Layers route their heavy linear algebra through a [`Backend`] so a second
//! kernel set can be slotted in without touching layer code. Only the portable
//! CPU backend ships; every backend must pass the same layer test suite.

use crate::real::{Real, Transpose};

pub trait Backend<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Row-major `c = alpha * op(a) * op(b) + beta * c`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        &self,
        ta: Transpose,
        tb: Transpose,
        m: usize,
        n: usize,
        k: usize,
        alpha: T,
        a: &[T],
        b: &[T],
        beta: T,
        c: &mut [T],
    );
}

/// Portable CPU kernels (blocked GEMM, single-threaded, deterministic).
#[derive(Debug, Clone, Copy, Default)]
pub struct Cpu;

impl<T: Real> Backend<T> for Cpu {
    fn name(&self) -> &'static str {
        "cpu"
    }

    fn gemm(
        &self,
        ta: Transpose,
        tb: Transpose,
        m: usize,
        n: usize,
        k: usize,
        alpha: T,
        a: &[T],
        b: &[T],
        beta: T,
        c: &mut [T],
    ) {
        T::gemm(ta, tb, m, n, k, alpha, a, b, beta, c)
    }
}

static CPU: Cpu = Cpu;

/// The run-mode switch. Flipping it is independent of the model definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Cpu,
}

impl Mode {
    pub const ALL: &'static [Mode] = &[Mode::Cpu];

    pub fn backend<T: Real>(self) -> &'static dyn Backend<T> {
        match self {
            Mode::Cpu => &CPU,
        }
    }
}
