use anyd::AnydError;

/// Anything that ends a run, with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(AnydError),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Run(e) => code(e),
        }
    }
}

fn code(e: &AnydError) -> i32 {
    match e {
        AnydError::Federated { source, .. } => code(source),
        e if e.is_numeric() => 3,
        AnydError::Invalid(_) => 1,
        _ => 2,
    }
}

impl From<AnydError> for Failure {
    fn from(e: AnydError) -> Self {
        Failure::Run(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Run(e) => write!(f, "{e}"),
        }
    }
}
