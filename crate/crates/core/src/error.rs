use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum CrispError {
    #[error("row {row} has norm below 1e-12 and cannot be normalized")]
    ZeroVector { row: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("row {row} of the target matrix has no positive entry")]
    EmptyTargetRow { row: usize },

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("duplicate item id `{0}` in batch")]
    DuplicateId(String),

    #[error("pairing is not a bijection ({0}); use the many-to-one objective for shared aerial items")]
    NonBijectivePairing(String),

    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),

    #[error("coordinates are required by this operation but were not supplied")]
    MissingCoordinates,

    #[error("invalid coordinate lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("crop of {crop} pixels does not fit a {height}x{width} raster")]
    CropLargerThanImage { crop: usize, height: usize, width: usize },

    #[error("block set is empty")]
    EmptyBlockSet,

    #[error("observation `{obs_id}` lies in block ({lat_index}, {lon_index}) which has no split assignment")]
    UncoveredBlock {
        obs_id: String,
        lat_index: i64,
        lon_index: i64,
    },

    #[error("cannot sample from an empty set")]
    EmptySet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid target class {target} for {n_classes} classes")]
    InvalidTarget { target: usize, n_classes: usize },

    #[error("learning-rate schedule exhausted at step {step} of {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("empty training subset")]
    EmptySubset,

    #[error("prediction set has no group ids")]
    MissingGroup,

    #[error("prediction set has no frequency bins")]
    MissingBins,

    #[error("unsupported report format `{0}`")]
    UnsupportedFormat(String),

    #[error("k-means needs at least k={k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CrispError> = std::result::Result<T, E>;
