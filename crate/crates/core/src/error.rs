use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("singular Gram matrix (add a ridge term): {0}")]
    SingularGram(String),

    #[error("{0} is not defined for the affine-control model")]
    AffineControl(&'static str),

    #[error("integrator step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        report: Box<crate::training::FitReport>,
    },

    #[error("plant blew up at step {step}")]
    PlantBlowUp {
        step: usize,
        partial: Box<crate::control::ControlResult>,
    },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
