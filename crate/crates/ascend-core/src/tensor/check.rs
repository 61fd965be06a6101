//! Central-difference gradient verification.
//!
//! The checker is the standing oracle for every differentiable operation:
//! it rebuilds the computation with perturbed parameters and compares the
//! two-sided difference quotient against the tape gradient coordinate by
//! coordinate. Run it at `f64`; `f32` round-off swamps the comparison.

use super::{Element, NodeId, Tape, Tensor, TensorError};

/// Default perturbation for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Maximum relative disagreement between the tape gradient and central
/// differences of the scalar function defined by `build`.
///
/// `build` receives a fresh tape with the parameters registered as leaves
/// (in order) and must return the scalar loss node. The relative error for a
/// coordinate is `|g_fd - g_tape| / max(1e-8, |g_fd| + |g_tape|)`.
pub fn finite_difference_check<T, F>(
    params: &[Tensor<T>],
    eps: f64,
    build: F,
) -> Result<f64, TensorError>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let eval = |tensors: &[Tensor<T>], with_grad: bool| -> Result<(f64, Option<Vec<Option<Tensor<T>>>>), TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(TensorError::NonFiniteValue("loss".into()));
        }
        if with_grad {
            let mut grads = tape.backward(loss)?;
            let collected = ids.iter().map(|&id| grads.take(id)).collect();
            Ok((value, Some(collected)))
        } else {
            Ok((value, None))
        }
    };

    let (_, tape_grads) = eval(params, true)?;
    let tape_grads = tape_grads.expect("grads requested");

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.len() {
            let original = param.data()[ci];
            work[pi].data_mut()[ci] = original + T::from_f64(eps);
            let (f_plus, _) = eval(&work, false)?;
            work[pi].data_mut()[ci] = original - T::from_f64(eps);
            let (f_minus, _) = eval(&work, false)?;
            work[pi].data_mut()[ci] = original;

            let g_fd = (f_plus - f_minus) / (2.0 * eps);
            if !g_fd.is_finite() {
                return Err(TensorError::NonFiniteValue(format!("fd gradient p{pi}[{ci}]")));
            }
            let g_tape = tape_grads[pi].as_ref().map(|g| g.data()[ci].to_f64()).unwrap_or(0.0);
            let rel = (g_fd - g_tape).abs() / 1e-8f64.max(g_fd.abs() + g_tape.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
