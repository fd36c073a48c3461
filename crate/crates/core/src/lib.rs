//! Residual-network signal propagation at initialization, and the training
//! harness used to compare residual-branch scaling schemes.

pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod models;
pub mod network;
pub mod signalprop;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use models::{BlockVariant, Family, NetworkSpec};
pub use network::Network;
pub use tensor::{Real, Rng, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/signal-propagation.md")]
    mod signal_propagation {}
    #[doc = include_str!("../../../book/src/initialization.md")]
    mod initialization {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/outputs.md")]
    mod outputs {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
