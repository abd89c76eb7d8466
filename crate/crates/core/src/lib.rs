pub mod checkpoint;
pub mod ctc;
pub mod dataio;
pub mod distributions;
pub mod error;
pub mod ffmodels;
pub mod graph;
pub mod multiview;
pub mod nn;
pub mod pretrain;
pub mod recognizer;
pub mod recrep;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/gaussians.md")]
    pub mod gaussians {}
    #[doc = include_str!("../../../book/src/frame-models.md")]
    pub mod frame_models {}
    #[doc = include_str!("../../../book/src/recrep.md")]
    pub mod recrep {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    pub mod pretraining {}
    #[doc = include_str!("../../../book/src/ctc.md")]
    pub mod ctc {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
