use thiserror::Error;

/// Which marginal of a (coupled) particle system an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marginal {
    Single,
    Fine,
    Coarse,
    Anti,
}

impl std::fmt::Display for Marginal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Marginal::Single => "single",
            Marginal::Fine => "fine",
            Marginal::Coarse => "coarse",
            Marginal::Anti => "anti",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{0}")]
    Usage(String),
    #[error("non-finite state at substep {step}")]
    NonFinite { step: usize },
    #[error("all weights are zero (every log-weight is -inf)")]
    Degenerate,
    #[error("filter collapse at time {time} in the {marginal} marginal")]
    FilterCollapse { time: usize, marginal: Marginal },
    #[error("level {level}: {source}")]
    Level {
        level: u32,
        #[source]
        source: Box<Error>,
    },
    #[error(
        "reference standard error {reference_se:.3e} is not below 1/5 of the smallest method standard deviation {min_method_sd:.3e}"
    )]
    ReferencePrecision {
        reference_se: f64,
        min_method_sd: f64,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable, module-qualified error code used by the CLI and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "model.dimension",
            Error::Contract(_) => "contract.violation",
            Error::Usage(_) => "usage",
            Error::NonFinite { .. } => "scheme.non_finite",
            Error::Degenerate => "resample.degenerate",
            Error::FilterCollapse { .. } => "filter.collapse",
            Error::Level { source, .. } => match source.as_ref() {
                Error::FilterCollapse { .. } => "multilevel.collapse",
                _ => "multilevel.level",
            },
            Error::ReferencePrecision { .. } => "bench.reference_precision",
            Error::Config(_) => "cli.config",
            Error::Io(_) => "io",
            Error::Json(_) => "io.json",
            Error::Csv(_) => "io.csv",
        }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
