use ndtensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("layer `{layer}`: singular transform ({detail})")]
    Singular { layer: String, detail: String },
    #[error("layer `{layer}`: non-finite value ({detail})")]
    NonFinite { layer: String, detail: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;

impl FlowError {
    /// Attributes a numerical failure to the layer it happened in.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            FlowError::Tensor(TensorError::Domain(detail)) => FlowError::NonFinite {
                layer: layer.to_string(),
                detail,
            },
            FlowError::Tensor(TensorError::Singular(detail)) => FlowError::Singular {
                layer: layer.to_string(),
                detail,
            },
            other => other,
        }
    }

    /// Name of the layer a numerical failure was attributed to, if any.
    pub fn layer(&self) -> Option<&str> {
        match self {
            FlowError::Singular { layer, .. } | FlowError::NonFinite { layer, .. } => Some(layer),
            _ => None,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FlowError::NonFinite { .. } | FlowError::Singular { .. } | FlowError::Tensor(TensorError::Domain(_))
        )
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FlowError::Config(msg.into()))
}
