use cdlab_core::Error as CoreError;
use thiserror::Error;

/// Failures of a run, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{check}: {source}")]
    Core {
        check: String,
        #[source]
        source: CoreError,
    },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("failed checks: {}", .0.join(", "))]
    ChecksFailed(Vec<String>),
}

impl CliError {
    /// 1 for bad input, 2 for a numerical failure or a failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io { .. } => 1,
            CliError::Core { source, .. } if !source.is_numerical() => 1,
            CliError::Core { .. } | CliError::ChecksFailed(_) => 2,
        }
    }

    /// Name of the step that failed, for `report.csv`.
    pub fn check(&self) -> String {
        match self {
            CliError::Validation(_) => "config".into(),
            CliError::Core { check, .. } => check.clone(),
            CliError::Io { path, .. } => format!("io:{path}"),
            CliError::ChecksFailed(names) => names.join(";"),
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Tags a core result with the step that produced it.
pub trait Check<T> {
    fn check(self, name: &str) -> CliResult<T>;
}

impl<T> Check<T> for cdlab_core::Result<T> {
    fn check(self, name: &str) -> CliResult<T> {
        self.map_err(|source| CliError::Core { check: name.to_string(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_separate_input_from_numerics() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 1);
        let bad = Err::<(), _>(CoreError::InvalidConfig("j".into())).check("fit").unwrap_err();
        assert_eq!(bad.exit_code(), 1);
        let num = Err::<(), _>(CoreError::NoConvergence { iterations: 3, residual: 1.0 }).check("fit").unwrap_err();
        assert_eq!(num.exit_code(), 2);
        assert_eq!(num.check(), "fit");
        assert_eq!(CliError::ChecksFailed(vec!["c1".into()]).exit_code(), 2);
    }
}
