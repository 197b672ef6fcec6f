use thiserror::Error;

/// Errors raised by the simulation and analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument fell outside the domain where the operation is defined.
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    /// Malformed or inconsistent input data.
    #[error("invalid input: {0}")]
    Input(String),

    /// A requested sample window lies outside the available trace.
    #[error("window [{start}, {end}) s outside trace of duration {duration} s")]
    Bounds { start: f64, end: f64, duration: f64 },

    /// An integral does not converge with the given cutoffs.
    #[error("divergent integral: {0}")]
    Divergent(String),

    /// The feedback loop ran away.
    #[error("feedback loop diverged at update {update}: control = {control_hz} Hz")]
    Diverged { update: usize, control_hz: f64 },

    /// A decay envelope never dropped below 1/e on the supplied grid.
    #[error("envelope never crosses 1/e (last value {last}); extend the time grid")]
    NoCrossing { last: f64 },

    /// A least-squares fit failed or was degenerate.
    #[error("fit failed: {0}")]
    Fit(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(what: &'static str, value: f64) -> Error {
    Error::Domain { what, value }
}
