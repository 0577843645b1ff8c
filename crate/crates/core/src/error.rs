use std::fmt;

use serde::Serialize;

/// Pipeline stage names, used to tag propagated failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Classification,
    Registration,
    Segmentation,
    Retrieval,
    Alignment,
    Fitting,
    Evaluation,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Load,
        Stage::Classification,
        Stage::Registration,
        Stage::Segmentation,
        Stage::Retrieval,
        Stage::Alignment,
        Stage::Fitting,
        Stage::Evaluation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Classification => "classification",
            Stage::Registration => "registration",
            Stage::Segmentation => "segmentation",
            Stage::Retrieval => "retrieval",
            Stage::Alignment => "alignment",
            Stage::Fitting => "fitting",
            Stage::Evaluation => "evaluation",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage '{s}'")))
    }
}

/// Best-attempt statistics carried by a failed coarse registration.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CoarseDiagnostics {
    pub source_points: usize,
    pub target_points: usize,
    pub correspondences: usize,
    pub iterations: usize,
    pub candidates_passing_edge_check: usize,
    pub best_inliers: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("invalid mesh: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("coarse registration failed: no candidate survived ({0:?})")]
    CoarseFailure(CoarseDiagnostics),

    #[error("routing failed: {0}")]
    RoutingFailure(String),

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        trace: Vec<f64>,
    },

    #[error("no candidate matched: {0}")]
    NoMatch(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("classification failed: {0}")]
    Classification(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}

/// Non-fatal conditions reported alongside a result.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    IsolatedVertex { vertex: usize },
    DegenerateFace { face: usize },
    LabelsDropped { format: String },
    EmptyNeighborhood { point: usize },
    ProjectionClamped { parameter: f64 },
    RobustTargetFallback { reference: [f64; 3] },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::IsolatedVertex { vertex } => {
                write!(f, "vertex {vertex} has no incident face; normal set to +z")
            }
            Warning::DegenerateFace { face } => write!(f, "face {face} has zero area"),
            Warning::LabelsDropped { format } => {
                write!(f, "face labels dropped: {format} cannot store them")
            }
            Warning::EmptyNeighborhood { point } => {
                write!(f, "point {point} has no neighbors within the descriptor radius")
            }
            Warning::ProjectionClamped { parameter } => {
                write!(f, "projection clamped to spline end (t = {parameter:.3})")
            }
            Warning::RobustTargetFallback { reference } => write!(
                f,
                "no normal passed the threshold; using reference ({:.3}, {:.3}, {:.3})",
                reference[0], reference[1], reference[2]
            ),
        }
    }
}
