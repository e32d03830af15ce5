use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("query ({x:.4}, {y:.4}) lies outside the height field footprint")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("sensor origin is below the terrain surface (origin z {origin_z:.4}, terrain {terrain_z:.4})")]
    OriginBelowTerrain { origin_z: f64, terrain_z: f64 },
    #[error("cannot project the zero vector")]
    ZeroVector,
    #[error("image has no valid pixel")]
    NoValidPixel,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("heightmap specs differ")]
    SpecMismatch,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
