//! Differentiable tensor substrate: dense tensors, seeded RNG streams, a
//! reverse-mode tape, and the kernels the models need (causal 3D conv,
//! masked attention, normalization, rotary embedding).

pub mod attention;
pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod graph;
pub mod norm;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use attention::AttnMask;
pub use conv::{ConvGeom, Front, TemporalWindow};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Fault, Grads, Graph, TemporalContext, Var, GATHER_ZERO};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamBuilder, ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tensor::{Scalar, Tensor};
