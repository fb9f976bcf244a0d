use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("layer norm input row {row} has zero variance")]
    DegenerateRow { row: usize },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dual stream overflow: non-finite entry reached the guard")]
    Overflow,

    #[error("trace or cache does not belong to the current parameters")]
    Stale,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LabError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn at_layer(self, layer: usize) -> Self {
        LabError::Layer {
            layer,
            source: Box::new(self),
        }
    }
}
