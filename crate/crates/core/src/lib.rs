//! Lung-nodule localization in chest radiographs with residual
//! encoder-decoder networks, epoch self-ensembles and an automated
//! blob/ellipse rating framework.

pub mod dataio;
pub mod ednet;
pub mod ensemble;
mod error;
pub mod fpsweep;
pub mod parallel;
pub mod pipeline;
pub mod preprocess;
pub mod provenance;
pub mod report;
pub mod rater;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    struct Preprocessing;
    #[doc = include_str!("../../../book/src/network.md")]
    struct Network;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/ensemble.md")]
    struct Ensemble;
    #[doc = include_str!("../../../book/src/rater.md")]
    struct Rater;
    #[doc = include_str!("../../../book/src/sweep.md")]
    struct Sweep;
    #[doc = include_str!("../../../book/src/report.md")]
    struct Report;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    struct Pipeline;
}
