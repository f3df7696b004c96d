use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("delay {delay} is not a whole number of steps of {dt}; nearest commensurate step count is {suggested_steps}")]
    Grid {
        delay: f64,
        dt: f64,
        suggested_steps: usize,
    },

    #[error("divergence at step {step} on path {path}")]
    Divergence { step: usize, path: usize },

    #[error("evaluation of {what} produced a non-finite value at {point}")]
    Evaluation { what: String, point: String },

    #[error("regression at step {step} is ill-conditioned beyond ridge rescue: {detail}")]
    Conditioning { step: usize, detail: String },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("numerical health: {0}")]
    NumericalHealth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
