//! Element precision mode.
//!
//! The mode is per thread so that verification suites running in 64-bit mode
//! never leak into concurrently running 32-bit work. Code that hands work to
//! other threads must propagate [`current`] explicitly.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Every stored element is rounded to the nearest `f32`.
    #[default]
    F32,
    /// Full `f64` storage, used by gradient and Taylor verification.
    F64,
}

thread_local! {
    static MODE: Cell<Precision> = const { Cell::new(Precision::F32) };
}

pub fn current() -> Precision {
    MODE.with(|m| m.get())
}

/// Sets the mode for the calling thread and returns the previous one.
pub fn set(mode: Precision) -> Precision {
    MODE.with(|m| m.replace(mode))
}

/// Restores the previous mode when dropped.
#[must_use = "the previous precision is restored when the guard is dropped"]
pub struct PrecisionGuard {
    previous: Precision,
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        set(self.previous);
    }
}

pub fn scoped(mode: Precision) -> PrecisionGuard {
    PrecisionGuard {
        previous: set(mode),
    }
}

#[inline]
pub(crate) fn round_slice(values: &mut [f64]) {
    if current() == Precision::F32 {
        for v in values {
            *v = *v as f32 as f64;
        }
    }
}

#[inline]
pub fn round(value: f64) -> f64 {
    match current() {
        Precision::F32 => value as f32 as f64,
        Precision::F64 => value,
    }
}
