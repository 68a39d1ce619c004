use thiserror::Error;

/// Unified error type for the library and CLI.
///
/// Variants are grouped by how the CLI reports them: configuration and
/// parameter problems exit with code 1, runtime failures with code 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or unusable combination of settings.
    #[error("config error: {0}")]
    Config(String),

    /// An argument violated an operation's preconditions.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Tensor or image dimensions do not match what the operation expects.
    #[error("shape error: {0}")]
    Shape(String),

    /// Timestep outside the schedule's valid range.
    #[error("timestep error: {0}")]
    Timestep(String),

    /// Patch-grid positions are missing, duplicated, or inconsistent.
    #[error("grid error: {0}")]
    Grid(String),

    /// A checkpoint or cache file is missing, corrupt, or fails validation.
    #[error("load error: {0}")]
    Load(String),

    /// Data that is structurally valid but unusable (e.g. every pixel ignored).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// Training diverged or produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error: 1 for configuration
    /// or parameter mistakes, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parameter(_)
            | Error::Shape(_)
            | Error::Timestep(_)
            | Error::Grid(_) => 1,
            Error::Load(_)
            | Error::Degenerate(_)
            | Error::Numeric(_)
            | Error::Io(_)
            | Error::Image(_)
            | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_exit_1() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Parameter("x".into()).exit_code(), 1);
        assert_eq!(Error::Shape("x".into()).exit_code(), 1);
        assert_eq!(Error::Timestep("x".into()).exit_code(), 1);
    }

    #[test]
    fn runtime_errors_exit_2() {
        assert_eq!(Error::Load("x".into()).exit_code(), 2);
        assert_eq!(Error::Degenerate("x".into()).exit_code(), 2);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 2);
    }
}
