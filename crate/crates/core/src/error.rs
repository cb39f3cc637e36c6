use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A component of the parameter is zero, which puts it outside the
    /// strictly positive parameter set the likelihood theory requires.
    #[error("parameter on the boundary of the positive parameter set: {0}")]
    Boundary(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),

    #[error("newick syntax error at byte {pos}: {msg}")]
    Newick { pos: usize, msg: String },

    #[error("invalid tree: {0}")]
    Tree(String),

    #[error("operation requires a {expected} tree")]
    UnsupportedTree { expected: &'static str },

    #[error("invalid homology column: {0}")]
    Column(String),

    #[error("malformed homology structure text at line {line}: {msg}")]
    StructureFormat { line: usize, msg: String },

    #[error("fasta: {0}")]
    Fasta(String),

    #[error("stationary distribution undefined: {0}")]
    NonErgodic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
