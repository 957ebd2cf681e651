use std::fmt;

use scakit::classical::ClassicalError;
use scakit::eval::EvalError;
use scakit::scnet::ScnetError;
use scakit::synth::SynthError;
use scakit::ContainerError;

/// Process exit codes.
pub mod code {
    pub const OK: u8 = 0;
    /// The command ran but the attack did not succeed.
    pub const NOT_SUCCEEDED: u8 = 1;
    pub const INVALID: u8 = 2;
    pub const IO: u8 = 3;
    pub const ATTACK: u8 = 4;
    pub const DIVERGED: u8 = 5;
    pub const SHAPE: u8 = 6;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(code::INVALID, message)
    }

    pub fn io(path: &std::path::Path, err: impl fmt::Display) -> Self {
        Self::new(code::IO, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(code::IO, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::invalid(format!("config: {e}"))
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        Self::new(code::IO, e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::invalid(e.to_string())
    }
}

impl From<ClassicalError> for CliError {
    fn from(e: ClassicalError) -> Self {
        let c = match e {
            ClassicalError::NotBitSelect | ClassicalError::PoiOutOfRange { .. } => code::INVALID,
            ClassicalError::ShapeMismatch { .. } => code::SHAPE,
            _ => code::ATTACK,
        };
        Self::new(c, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let c = match e {
            EvalError::InvalidParameter(_) => code::INVALID,
            EvalError::ShapeMismatch(_) | EvalError::InsufficientTraces { .. } => code::SHAPE,
        };
        Self::new(c, e.to_string())
    }
}

impl From<ScnetError> for CliError {
    fn from(e: ScnetError) -> Self {
        let c = match e {
            ScnetError::Diverged { .. } => code::DIVERGED,
            ScnetError::InputTooShort { .. } | ScnetError::ShapeMismatch(_) | ScnetError::Nn(_) => code::SHAPE,
            ScnetError::BadModelFile(_) | ScnetError::Io(_) | ScnetError::Json(_) => code::IO,
            ScnetError::UnknownArch(_) | ScnetError::InvalidArch(_) | ScnetError::InvalidConfig(_) | ScnetError::LabelMissing(_) => {
                code::INVALID
            }
        };
        Self::new(c, e.to_string())
    }
}
