//! Differentiable compute core: tensors, a recorded graph with reverse-mode
//! gradients, parameter storage, and the adaptive-moment optimizer.

pub mod checkpoint;
mod gemm;
mod graph;
mod optim;
mod param;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::Adam;
pub use param::{ParamId, ParamSet, Parameter};
pub use tensor::Tensor;

/// `tanh(a) ⊙ sigmoid(b)` on plain tensors.
pub fn gated_activation(a: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.gated(va, vb)?;
    Ok(g.tensor(out))
}

/// Same-length dilated convolution on plain tensors.
pub fn conv1d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weights.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let out = g.conv1d(x, w, b, dilation)?;
    Ok(g.tensor(out))
}

/// Receptive field of a stack of same-length convolutions with kernel `k`.
pub fn receptive_field(kernel_size: usize, dilations: &[usize]) -> usize {
    1 + dilations.iter().map(|d| (kernel_size - 1) * d).sum::<usize>()
}
