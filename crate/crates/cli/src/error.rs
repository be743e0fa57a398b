use std::fmt;

use imfnet_core::Error as CoreError;

/// Failure category; each maps to a distinct process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Input,
    Numeric,
    Contract,
    Verification,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Input => 3,
            Category::Numeric => 4,
            Category::Contract => 5,
            Category::Verification => 6,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn config(violations: &[String]) -> Self {
        let mut message = format!("{} configuration problem(s):", violations.len());
        for v in violations {
            message.push_str("\n  - ");
            message.push_str(v);
        }
        Self::new(Category::Config, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let category = match &e {
            CoreError::Config(v) => return CliError::config(v),
            CoreError::Io(_) | CoreError::Parse { .. } | CoreError::Json(_) => Category::Input,
            CoreError::Numeric(_) | CoreError::Training { .. } => Category::Numeric,
            _ => Category::Contract,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Category::Input, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new(Category::Input, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
