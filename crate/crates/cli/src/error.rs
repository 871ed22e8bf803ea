use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    Lib(lunit::Error),
    OutputExists(PathBuf),
    Usage(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Lib(lunit::Error::Config(msg.into()))
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Lib(e) => e.code(),
            CliError::OutputExists(_) => "output-exists",
            CliError::Usage(_) => "usage",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::OutputExists(p) => write!(f, "{} already exists; refusing to overwrite", p.display()),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<lunit::Error> for CliError {
    fn from(e: lunit::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}
