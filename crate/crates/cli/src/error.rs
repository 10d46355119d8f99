use std::fmt;
use std::process::ExitCode;

use cxr_core::data::DataError;
use cxr_core::models::ModelError;
use cxr_core::predict::PredictError;
use cxr_core::train::TrainError;
use cxr_serve::ServeError;

/// Failure category; each maps to a fixed process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Model,
    Runtime,
}

impl Category {
    pub fn exit_code(self) -> u8 {
        match self {
            Category::Usage => 2,
            Category::Data => 3,
            Category::Model => 4,
            Category::Runtime => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Data => "data",
            Category::Model => "model",
            Category::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl fmt::Display) -> Self {
        CliError {
            category,
            message: message.to_string(),
        }
    }

    pub fn exit(&self) -> ExitCode {
        ExitCode::from(self.category.exit_code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.category.name(), self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let category = match e {
            DataError::Fraction(_) => Category::Usage,
            _ => Category::Data,
        };
        CliError::new(category, e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let category = match e {
            ModelError::Width(..) | ModelError::Channels(_) => Category::Usage,
            _ => Category::Model,
        };
        CliError::new(category, e)
    }
}

impl From<PredictError> for CliError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::Data(e) => e.into(),
            PredictError::Model(e) => e.into(),
            PredictError::Nn(e) => CliError::new(Category::Runtime, e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let category = match e {
            TrainError::Config(_) => Category::Usage,
            TrainError::Shape(_) | TrainError::EmptySplit(_) => Category::Data,
            _ => Category::Runtime,
        };
        CliError::new(category, e)
    }
}

impl From<ServeError> for CliError {
    fn from(e: ServeError) -> Self {
        match e {
            ServeError::Model { path, source } => {
                let inner = CliError::from(source);
                CliError::new(inner.category, format!("{path}: {}", inner.message))
            }
            ServeError::ChannelMismatch { .. } => CliError::new(Category::Model, e),
            _ => CliError::new(Category::Runtime, e),
        }
    }
}
