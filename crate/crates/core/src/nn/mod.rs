//! The LinkNet engine: tensors, layer kernels, the network program and its weights.

pub mod linknet;
pub mod ops;
pub mod tensor;
pub mod weights;

pub use linknet::{NetworkConfig, NormKind, ParamGroup, ParamSpec, Program, Rank, Tape};
pub use tensor::{Real, Tensor};
pub use weights::{build_linknet, forward, NamedTensor, Network, NetworkWeights, WeightSet};
