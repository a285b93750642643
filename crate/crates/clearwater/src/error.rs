//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: expected a 3-channel image, found {found} channels")]
    ChannelCount { path: PathBuf, found: u8 },

    #[error("{path}: unsupported bit depth for encoding `{encoding}`")]
    BitDepth { path: PathBuf, encoding: String },

    #[error("{path}: unsupported image format (use .png, .tif, or .tiff)")]
    Format { path: PathBuf },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("water type library is empty")]
    EmptyLibrary,

    #[error("unknown water type `{0}`")]
    UnknownWaterType(String),

    #[error("no veiling-light region found (largest smooth region covers {found:.4} of the image, need {required:.4})")]
    NoVeilingLight { found: f64, required: f64 },

    #[error("degenerate veiling light: channel mean {0:.6} is not positive")]
    DegenerateVeilingLight(f64),

    #[error("region selected for veiling light contains no pixels")]
    EmptyRegion,

    #[error("covariance matrix is singular and cannot be inverted")]
    SingularCovariance,

    #[error("white balance is undefined: channel mean is zero over the mask")]
    ZeroChannelMean,

    #[error("correlation is undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("gray patch has zero mean color")]
    ZeroPatchColor,
}
