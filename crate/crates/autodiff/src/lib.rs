//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar output walks the record in reverse and
//! returns [`Gradients`] for every node that transitively depends on a
//! parameter created with [`Graph::param`]. Constants (frozen weights) can be
//! shared into the graph without copying via [`Graph::constant_shared`].
//!
//! ```
//! use protoprompt_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let p = g.param(Tensor::row(vec![1.0, 2.0, 3.0]));
//! let loss = g.sum(p);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

mod adam;
mod error;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
