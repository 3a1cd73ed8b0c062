use std::path::PathBuf;

use dnerf_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("viewing direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("pixel ({col}, {row}) outside {width}x{height} image")]
    PixelOutOfBounds { col: usize, row: usize, width: usize, height: usize },
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("length mismatch in {what}: expected {expected}, got {actual}")]
    LengthMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("frame {frame} has no {direction} neighbor")]
    MissingNeighbor { frame: usize, direction: &'static str },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),
    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(String),
    #[error("{}: {msg}", path.display())]
    Dataset { path: PathBuf, msg: String },
    #[error("{}: non-binary mask (value {value})", path.display())]
    NonBinaryMask { path: PathBuf, value: u8 },
    #[error("missing optical flow for frame {frame} ({direction})")]
    MissingFlow { frame: usize, direction: &'static str },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("truncated checkpoint")]
    TruncatedCheckpoint,
    #[error("checkpoint architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("invalid synthetic scene: {0}")]
    DegenerateScene(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    ImageSize(usize, usize, usize, usize),
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall { width: usize, height: usize, window: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
