pub mod block;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod linear;
pub mod network;
pub mod norm;
pub mod params;
pub mod pipeline;
pub mod pool;
pub mod real;
pub mod rng;
pub mod tensor;

pub use block::{Block, BlockKind, BlockSpec, Shortcut};
pub use conv::{ConvWeights, KernelSpec};
pub use error::{Error, Result};
pub use layers::{ConvBn, Pass};
pub use linear::{Linear, Matrix};
pub use norm::{BatchNorm, BnMode};
pub use real::Real;
pub use rng::SplitMix64;
pub use tensor::{ClipTensor, FillRule, Shape5};
pub use network::{build_network, ArchSpec, BlockPolicy, InitRule, NetworkGraph, TemporalInit, Widths};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub mod tensors {}
    #[doc = include_str!("../../../book/src/factorized-convolution.md")]
    pub mod factorized_convolution {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    pub mod blocks {}
    #[doc = include_str!("../../../book/src/networks.md")]
    pub mod networks {}
    #[doc = include_str!("../../../book/src/parameter-ledger.md")]
    pub mod parameter_ledger {}
    #[doc = include_str!("../../../book/src/inflation.md")]
    pub mod inflation {}
    #[doc = include_str!("../../../book/src/gradient-checks.md")]
    pub mod gradient_checks {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/features.md")]
    pub mod features {}
    #[doc = include_str!("../../../book/src/checkpoint-format.md")]
    pub mod checkpoint_format {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
