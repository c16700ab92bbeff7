//! Dense matrices, a gradient tape, and parameter storage.

pub mod archive;
pub mod graph;
pub mod params;

pub use archive::{read_matrix, write_matrix, Archive};
pub use graph::{log_softmax_rows, sigmoid, softmax_rows, Gradients, Graph, Mat, Var};
pub use params::{Bound, ParamGroup, ParamId, ParamStore};
