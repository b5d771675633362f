use crate::model::Link;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("view {view} is outside 1..={total_views}")]
    ViewOutOfRange { view: usize, total_views: usize },

    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),

    #[error("invalid synthesis config: {0}")]
    InvalidSynthesis(String),

    #[error("no transmission distribution for channel {} rate {}", .0.channel, .0.rate)]
    MissingLink(Link),

    #[error("link channel {} rate {} is not part of the cell", .0.channel, .0.rate)]
    MalformedLink(Link),

    #[error("rate index {index} is outside 0..{rates}")]
    RateOutOfRange { index: usize, rates: usize },

    #[error("{broadcasts} broadcasts exceed the enumeration limit of {limit}")]
    OutcomeSpaceTooLarge { broadcasts: usize, limit: usize },

    #[error("malformed loss matrix: {0}")]
    MalformedMatrix(String),

    #[error("invalid zipf subscription: {0}")]
    InvalidZipf(String),

    #[error("invalid phy config: {0}")]
    InvalidPhy(String),

    #[error("invalid workload: {0}")]
    InvalidWorkload(String),

    #[error("invalid message: {0}")]
    InvalidMessage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant breach: {0}")]
    InvariantBreach(String),
}

pub(crate) fn check_probability(p: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::InvalidProbability(p))
    }
}
