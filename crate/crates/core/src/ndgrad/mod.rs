//! Tape-based reverse-mode automatic differentiation over dense row-major
//! arrays.
//!
//! Every op validates shapes up front and refuses to record a non-finite
//! result, so an overflow surfaces as an error at the op that caused it.

mod tape;
mod tensor;

pub use tape::{Mode, Tape, Var};
pub use tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u32),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    StaleTape,
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

/// Relative slack under which a norm counts as already within the cap.
///
/// Rescaled gradients land within a few ulps of `max_norm`; without the
/// slack a second clip would rescale them again.
const CLIP_SLACK: f64 = 1e-6;

/// Rescales `grads` jointly so their global L2 norm is at most `max_norm`.
///
/// Returns the norm measured before any rescaling.
pub fn clip_global_norm<T: Float>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let norm = global_norm(grads.iter().map(|g| &**g));
    if norm > max_norm * (1.0 + CLIP_SLACK) {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = T::from_f64(x.as_f64() * factor);
            }
        }
    }
    norm
}

/// `sqrt(sum of squares)` over every buffer, accumulated in `f64`.
pub fn global_norm<'a, T: Float>(grads: impl IntoIterator<Item = &'a [T]>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}
