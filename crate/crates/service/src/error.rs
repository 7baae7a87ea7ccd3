use thiserror::Error;

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("`{stage}` needs {missing}; run `{run_first}` first")]
    Precondition {
        stage: &'static str,
        missing: String,
        run_first: &'static str,
    },
    #[error("{artifact} was built for backbone {found} but the backbone is now {current}; rerun `{run_first}`")]
    Stale {
        artifact: String,
        found: String,
        current: String,
        run_first: &'static str,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Core(#[from] layercache::error::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// 2 for unmet preconditions, 3 for bad input data, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use layercache::error::Error as E;
        match self {
            ServiceError::Precondition { .. } | ServiceError::Stale { .. } => 2,
            ServiceError::Core(
                E::ShapeMismatch { .. }
                | E::InvalidTensor(_)
                | E::InvalidDistribution { .. }
                | E::MissingBlob { .. }
                | E::BlobSize { .. }
                | E::Cycle { .. }
                | E::UnknownNode(_)
                | E::InvalidGraph(_)
                | E::TooFewRecords { .. }
                | E::EmptySplit(_)
                | E::SampleIdMismatch { .. }
                | E::LabelMismatch { .. }
                | E::Parse { .. }
            ) => 3,
            _ => 1,
        }
    }
}
