use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel-manifest: {0}")]
    KernelManifest(String),

    #[error("kernel-invariant: kernel {id}: {reason}")]
    KernelInvariant { id: u32, reason: String },

    #[error("invalid-image: {0}")]
    InvalidImage(String),

    #[error("group-resolution: group {group} references kernel {kernel_id}, which is not in the bank")]
    GroupResolution { group: u8, kernel_id: u8 },

    #[error("unknown-site: block {block}, position {position}")]
    UnknownSite { block: usize, position: usize },

    #[error("unknown-expert: {0} (experts are numbered 1..=6)")]
    UnknownExpert(usize),

    #[error("shape: {0}")]
    Shape(String),

    #[error("input-size: expected {expected_h}x{expected_w}x{expected_c}, got {got_h}x{got_w}x{got_c}")]
    InputSize {
        expected_h: usize,
        expected_w: usize,
        expected_c: usize,
        got_h: usize,
        got_w: usize,
        got_c: usize,
    },

    #[error("label: {0}")]
    Label(String),

    #[error("config: `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("augment-codec: {0}")]
    AugmentCodec(String),

    #[error("perturb-codec: {0}")]
    PerturbCodec(String),

    #[error("divergence: {message} (diagnostics written to {dump:?})")]
    Divergence { message: String, dump: Option<PathBuf> },

    #[error("ingestion: {message}: {}", display_paths(.paths))]
    Ingestion { message: String, paths: Vec<PathBuf> },

    #[error("empty-result: {0}")]
    EmptyResult(String),

    #[error("degenerate-ap: {0}")]
    DegenerateAp(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn display_paths(paths: &[PathBuf]) -> String {
    if paths.is_empty() {
        return "<none>".to_string();
    }
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, e.g. `"kernel-manifest"`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::KernelManifest(_) => "kernel-manifest",
            Error::KernelInvariant { .. } => "kernel-invariant",
            Error::InvalidImage(_) => "invalid-image",
            Error::GroupResolution { .. } => "group-resolution",
            Error::UnknownSite { .. } => "unknown-site",
            Error::UnknownExpert(_) => "unknown-expert",
            Error::Shape(_) => "shape",
            Error::InputSize { .. } => "input-size",
            Error::Label(_) => "label",
            Error::Config { .. } => "config",
            Error::AugmentCodec(_) => "augment-codec",
            Error::PerturbCodec(_) => "perturb-codec",
            Error::Divergence { .. } => "divergence",
            Error::Ingestion { .. } => "ingestion",
            Error::EmptyResult(_) => "empty-result",
            Error::DegenerateAp(_) => "degenerate-ap",
            Error::Checkpoint(_) => "checkpoint",
            Error::Decode { .. } => "decode",
            Error::Codec(_) => "codec",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::KernelManifest(_) | Error::KernelInvariant { .. }
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
