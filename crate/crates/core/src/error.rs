use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("invalid regime set: {0}")]
    InvalidRegimes(String),

    #[error("invalid jump measure: {0}")]
    InvalidJumpMeasure(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{faulted} of {total} paths produced non-finite states (limit is 1%)")]
    FaultThreshold { faulted: usize, total: usize },

    #[error("empty path bundle")]
    EmptyBundle,

    #[error("unsupported moment order {0}, expected 2 or 4")]
    MomentOrder(u32),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("design matrix is identically zero")]
    ZeroDesign,

    #[error("{rows} samples for {cols} basis functions without ridge")]
    Underdetermined { rows: usize, cols: usize },

    #[error("penalty {penalty} with time step {dt} breaks the stability rule n*dt <= 1")]
    PenaltyUnstable { penalty: f64, dt: f64 },

    #[error("no regime atom holds enough paths at step {step}")]
    AllAtomsStarved { step: usize },

    #[error("driver needs a jump kernel when the big-jump measure is nonempty")]
    MissingJumpKernel,

    #[error("dual representation requires a state-only driver")]
    UnsupportedDriver,

    #[error("tilt value {value} outside [1, {bound}]")]
    InvalidTilt { value: f64, bound: f64 },

    #[error("bang-bang tilt requires a surface with a finite penalty")]
    ProjectionSurface,

    #[error("need at least two interior atoms, found {0}")]
    TooFewInteriorAtoms(usize),

    #[error("finite-difference stability violated: {0}")]
    Cfl(String),

    #[error("finite-difference solver supports d = 1 only, got d = {0}")]
    FdDimension(usize),

    #[error("query ({t}, {x}) outside the finite-difference grid")]
    OutsideGrid { t: f64, x: f64 },
}
