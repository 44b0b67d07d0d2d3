use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("element {element} is degenerate or inverted in the reference configuration")]
    DegenerateElement { element: usize },

    #[error("reference body failed validation: {0}")]
    InvalidBody(String),

    #[error("state has {got} nodes, body has {expected}")]
    NodeCountMismatch { expected: usize, got: usize },

    #[error("points {0} and {1} coincide and softening is zero")]
    CoincidentPoints(usize, usize),

    #[error("octree was built for {built} points, cloud has {given}")]
    StaleTree { built: usize, given: usize },

    #[error("boundary node {0} has no prescribed value")]
    MissingBoundaryNode(usize),

    #[error("node {0} is not a boundary node")]
    NotBoundaryNode(usize),

    #[error("infeasible state: element {element} has det F = {det}")]
    Infeasible { element: usize, det: f64 },

    #[error("voxel resolution {0} is too coarse (need at least 8 voxels per axis)")]
    VoxelResolution(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("refusing to write non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
