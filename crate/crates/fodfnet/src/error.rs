use std::fmt;
use std::path::Path;

use fodfnet_core::Error as CoreError;

use crate::nifti::NiftiError;

/// Coarse failure class; decides the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Bad flags, config files or parameter values.
    Config,
    /// Missing, malformed or mutually inconsistent input files, and unwritable outputs.
    Input,
    /// A computation failed: singular systems, non-finite losses.
    Numerical,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Input => 3,
            Category::Numerical => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Input => "input",
            Category::Numerical => "numerical",
        }
    }
}

/// A categorized failure with a short machine-readable kind.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub category: Category,
    pub kind: &'static str,
    pub detail: String,
}

impl CliError {
    pub fn new(category: Category, kind: &'static str, detail: impl Into<String>) -> Self {
        Self {
            category,
            kind,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Self::new(Category::Config, "invalid_config", detail)
    }

    pub fn input(kind: &'static str, detail: impl Into<String>) -> Self {
        Self::new(Category::Input, kind, detail)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(Category::Input, "io", format!("{}: {err}", path.display()))
    }

    /// Prefix the detail with the file it concerns.
    pub fn at(mut self, path: &Path) -> Self {
        self.detail = format!("{}: {}", path.display(), self.detail);
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.category.exit_code()
    }
}

/// `error[category] kind: detail` on one line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let detail = self.detail.replace('\n', " ");
        write!(f, "error[{}] {}: {}", self.category.name(), self.kind, detail)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        use CoreError::*;
        let (category, kind) = match &e {
            NonUnitDirection { .. } => (Category::Input, "non_unit_direction"),
            InvalidOrder(_) | OrderMismatch { .. } | CoefficientCount { .. } => (Category::Input, "sh_order"),
            ShapeMismatch { .. } | LengthMismatch { .. } => (Category::Input, "shape_mismatch"),
            NoB0 => (Category::Input, "no_b0"),
            ShellNotFound { .. } => (Category::Input, "shell_not_found"),
            EmptyMask => (Category::Input, "empty_mask"),
            Empty(_) => (Category::Input, "empty"),
            Singular { .. } => (Category::Numerical, "singular"),
            NonFiniteGradient(_) => (Category::Numerical, "non_finite_gradient"),
            NonFiniteLoss { .. } => (Category::Numerical, "non_finite_loss"),
            AllTied => (Category::Numerical, "all_tied"),
            InvalidParameter(_) => (Category::Config, "invalid_parameter"),
        };
        Self::new(category, kind, e.to_string())
    }
}

impl From<NiftiError> for CliError {
    fn from(e: NiftiError) -> Self {
        let kind = match &e {
            NiftiError::Io { .. } => "io",
            _ => "nifti",
        };
        Self::input(kind, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
