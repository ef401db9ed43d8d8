use std::fmt::Display;

/// Process exit codes.
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_OUTPUT: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(e: impl Display) -> Self {
        Self {
            code: EXIT_INPUT,
            message: e.to_string(),
        }
    }

    pub fn output(e: impl Display) -> Self {
        Self {
            code: EXIT_OUTPUT,
            message: e.to_string(),
        }
    }

    pub fn numerical(e: impl Display) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: e.to_string(),
        }
    }
}

pub type Outcome = Result<(), Failure>;
