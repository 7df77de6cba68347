//! Differentiable-computation substrate: dense networks, reverse-mode
//! gradients, Adam, and a box-constrained quasi-Newton minimizer.

pub mod adam;
pub mod graph;
pub mod lbfgsb;
pub mod network;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Mat, Var};
pub use lbfgsb::{minimize_box, BoxBounds, MinimizeOptions, Minimum};
pub use network::{forward, forward_batch, forward_graph, init_params, Activation, LayerLayout, NetworkSpec};

use crate::error::Result;

/// Value and gradient of a scalar function of several flat parameter blocks.
///
/// `loss_fn` receives one `1 x len` leaf per block and must return a `1 x 1`
/// node built from the graph primitives.
pub fn gradient<F>(blocks: &[&[f64]], loss_fn: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = blocks.iter().map(|b| g.row(b)).collect();
    let out = loss_fn(&mut g, &leaves)?;
    let value = g.scalar(out);
    let grads = g.gradients(out, &leaves)?;
    Ok((value, grads.into_iter().map(|m| m.iter().copied().collect()).collect()))
}
