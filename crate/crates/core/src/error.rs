use std::path::PathBuf;

/// Every failure the toolkit can report. Variant names mirror the stage
/// error codes printed by the CLI (see [`Error::code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("behind-projector: point has non-positive depth {depth:.6} in the projector frame")]
    BehindProjector { depth: f64 },

    #[error("invalid-intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("degenerate-homography: {0}")]
    DegenerateHomography(String),

    #[error("stack-mismatch: expected {expected} scans, got {got}")]
    StackMismatch { expected: usize, got: usize },

    #[error("raster-mismatch: {0}")]
    RasterMismatch(String),

    #[error("missing-code: no decoded scanner pixels near projector pixel ({u:.2}, {v:.2})")]
    MissingCode { u: f64, v: f64 },

    #[error("empty-field: no light blobs found in the scan")]
    EmptyField,

    #[error(
        "overlapping-blobs: blob {blob} has area {area} px, {ratio:.2}x its largest neighbour"
    )]
    OverlappingBlobs {
        blob: usize,
        area: usize,
        ratio: f64,
    },

    #[error("over-clustered: asked for {k} clusters from {n} blobs")]
    OverClustered { k: usize, n: usize },

    #[error("grid-not-found: {0}")]
    GridNotFound(String),

    #[error("not-an-ellipse: {0}")]
    NotAnEllipse(String),

    #[error("degenerate-circle: {0}")]
    DegenerateCircle(String),

    #[error("truncated-blob: back-projection of blob {blob} touches the panel border")]
    TruncatedBlob { blob: usize },

    #[error("insufficient-view: plane {plane} has {pairs} usable pairs, need at least 4")]
    InsufficientView { plane: String, pairs: usize },

    #[error("closed-form-failed: {0}")]
    ClosedFormFailed(String),

    #[error("lm-failed: {0}")]
    LmFailed(String),

    #[error("pnp-degenerate: {0}")]
    PnpDegenerate(String),

    #[error("invalid-config: {path}: {message}")]
    InvalidConfig { path: String, message: String },

    #[error("format: {0}")]
    Format(String),

    #[error("stale-checksum: {path} does not match the manifest")]
    StaleChecksum { path: PathBuf },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short kebab-case code, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            Error::BehindProjector { .. } => "behind-projector",
            Error::InvalidIntrinsics(_) => "invalid-intrinsics",
            Error::DegenerateHomography(_) => "degenerate-homography",
            Error::StackMismatch { .. } => "stack-mismatch",
            Error::RasterMismatch(_) => "raster-mismatch",
            Error::MissingCode { .. } => "missing-code",
            Error::EmptyField => "empty-field",
            Error::OverlappingBlobs { .. } => "overlapping-blobs",
            Error::OverClustered { .. } => "over-clustered",
            Error::GridNotFound(_) => "grid-not-found",
            Error::NotAnEllipse(_) => "not-an-ellipse",
            Error::DegenerateCircle(_) => "degenerate-circle",
            Error::TruncatedBlob { .. } => "truncated-blob",
            Error::InsufficientView { .. } => "insufficient-view",
            Error::ClosedFormFailed(_) => "closed-form-failed",
            Error::LmFailed(_) => "lm-failed",
            Error::PnpDegenerate(_) => "pnp-degenerate",
            Error::InvalidConfig { .. } => "invalid-config",
            Error::Format(_) => "format",
            Error::StaleChecksum { .. } => "stale-checksum",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
