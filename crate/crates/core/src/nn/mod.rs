//! Small f64 autodiff used by the codec and the transformer.

mod graph;
mod optim;
mod tensor;

pub use graph::{Grads, Graph, NodeId, Param, ParamStore, Route};
pub use optim::AdamW;
pub use tensor::{gemm, matmul, matmul_nt, matmul_tn, Tensor};
