//! Dense-tensor reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of [`Tensor`] values. Every primitive
//! records its parents, and [`Graph::backward`] walks the arena in reverse
//! insertion order. Gradients of a node that feeds several consumers add up.
//!
//! ```
//! use xald::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{
    analytic_gradient, central_difference, finite_difference_check, finite_difference_probe, REL_FLOOR,
};
pub use graph::{GradientMap, Graph, Var};
pub use tensor::{Real, Tensor};
