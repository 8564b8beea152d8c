//! File formats, model persistence, heatmap export, evaluation reports and
//! the synthetic fixture generator.
//!
//! Every dataset is JSON Lines with boxes as `[x, y, w, h]` in top-left,
//! y-down pixel coordinates; records are converted to the internal
//! bottom-left frame on load.

mod formats;
mod model_file;
mod pgm;
mod report;
pub mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use formats::{
    load_annotations, load_corpus, load_detections, parse_annotations, parse_corpus, parse_detections,
    write_annotations, write_corpus, write_detections, Loaded, Strictness,
};
pub use model_file::{load_model, model_from_json, model_to_json, save_model, FORMAT_VERSION};
pub use pgm::{
    decode_heatmap, decode_pgm, encode_heatmap, encode_pgm, mask_from_pgm, mask_to_pgm, write_heatmap, HeatmapScale,
    Pgm,
};
pub use report::{
    evaluate_boxes, evaluate_objects, evaluate_scenes, BoxReport, Method, MetricSummary, ObjectReport, SceneReport,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", .path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}:{line}: {message}", .path.display())]
    Invalid { path: PathBuf, line: usize, message: String },
    #[error("{}:{line}: unknown category {name:?}", .path.display())]
    UnknownCategory { path: PathBuf, line: usize, name: String },
    #[error("{}: unsupported model format version {found}", .path.display())]
    UnsupportedVersion { path: PathBuf, found: u64 },
    #[error("{}: corrupt model: {reason}", .path.display())]
    CorruptModel { path: PathBuf, reason: String },
    #[error("{0}")]
    Contract(String),
}

impl IoError {
    /// True for failures caused by input data rather than by the program.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, IoError::Contract(_))
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}
