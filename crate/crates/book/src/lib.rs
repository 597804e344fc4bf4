//! Guide chapters compiled as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/phantom-layers.md")]
pub mod phantom_layers {}
#[doc = include_str!("../../../book/src/collectives.md")]
pub mod collectives {}
#[doc = include_str!("../../../book/src/tensor-parallel.md")]
pub mod tensor_parallel {}
#[doc = include_str!("../../../book/src/cost-model.md")]
pub mod cost_model {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
