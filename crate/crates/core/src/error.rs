use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} = {value} is outside its valid domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pass never satisfies the link-window constraints")]
    EmptyWindow,

    #[error("time-tag format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("no correlation peak found (best significance {significance:.2} sigma)")]
    NoCorrelation { significance: f64 },

    #[error("correlation peak lost at fine resolution; the clock may be drifting")]
    PeakLost,

    #[error("drift tracking needs at least 2 segments with a significant peak, found {found}")]
    InsufficientSegments { found: usize },

    #[error("no events for this estimate")]
    NoEvents,

    #[error("setting pairs without coincidences: {0:?}")]
    MissingSettings(Vec<(usize, usize)>),

    #[error("visibility {0} cannot violate CHSH (needs V > 1/sqrt(2))")]
    NoViolation(f64),

    #[error("event count {0} exceeds the generation limit")]
    TooManyEvents(f64),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, domain: &'static str) -> Self {
        Error::Domain {
            name,
            value,
            domain,
        }
    }
}
