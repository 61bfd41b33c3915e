//! Training, evaluation, and visualization around the `fmdnn-core` model
//! library: dataset handling, the SGD loop, checkpoints, PPM/PNG image IO,
//! heatmap and CAM rendering, and the CLI that drives them.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod heatmap;
pub mod ppm;
pub mod selftest;
pub mod synthetic;
pub mod train;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Core(#[from] fmdnn_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("input error: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;
