//! Parameters, a reverse-mode tape, layers and the Gaussian policy head.

pub mod fd;
pub mod gaussian;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use fd::{fd_check, fd_compare, FdReport, DEFAULT_EPS};
pub use gaussian::GaussianHead;
pub use graph::{Bound, Grads, Graph, Var};
pub use layers::{GruCell, GruCellSpec, Mlp, MlpSpec};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{GradSet, ParamSet};
