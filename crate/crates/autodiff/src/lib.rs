//! Minimal dense autodiff for small generative-model experiments.
//!
//! Reverse mode runs over a dynamically recorded [`Tape`]; forward mode is
//! dual-number propagation co-executed with the primal pass, so the
//! Jacobian-vector product of any tape computation comes out of one
//! traversal. [`Var::stopgrad`] blocks both.

mod error;
mod params;
mod tape;
mod tensor;

pub use error::AdError;
pub use params::{ParamStore, ParamVars};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::{broadcast_shape, broadcast_zip, numel, pairwise_sum, Tensor};

/// Value and Jacobian-vector product of `f` at `inputs` along `tangents`.
pub fn jvp<F>(f: F, inputs: &[Tensor], tangents: &[Tensor]) -> Result<(Tensor, Tensor), AdError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if inputs.len() != tangents.len() {
        return Err(AdError::ShapeMismatch(format!(
            "{} inputs but {} tangents",
            inputs.len(),
            tangents.len()
        )));
    }
    for (i, (x, v)) in inputs.iter().zip(tangents).enumerate() {
        if x.shape() != v.shape() {
            return Err(AdError::ShapeMismatch(format!(
                "input {i} has shape {:?}, tangent {:?}",
                x.shape(),
                v.shape()
            )));
        }
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .zip(tangents)
        .map(|(x, v)| tape.dual(x.clone(), v.clone()))
        .collect();
    let out = f(&tape, &vars);
    if let Some(e) = tape.fault() {
        return Err(e);
    }
    Ok(((*out.value()).clone(), out.tangent()))
}

/// Gradient of the scalar `loss_fn` with respect to every entry of `params`.
pub fn grad<F>(loss_fn: F, params: &ParamStore) -> Result<ParamStore, AdError>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let vars = params.on_tape(&tape);
    let loss = loss_fn(&tape, &vars);
    let grads = tape.backward(loss)?;
    Ok(vars.collect_grads(&grads))
}
