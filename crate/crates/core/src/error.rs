//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! deliberately fine-grained so that callers (and the CLI) can distinguish
//! validation problems from I/O problems and report precise diagnostics.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric input contained NaN or infinity.
    #[error("non-finite value in {context} at ({row}, {col})")]
    NonFinite {
        context: &'static str,
        row: usize,
        col: usize,
    },

    /// A matrix or vector had the wrong shape for the operation.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    /// An argument was outside its documented range.
    #[error("invalid argument {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    /// A matrix that must be symmetric was not, within tolerance.
    #[error("matrix not symmetric in {context}: |M[{row},{col}] - M[{col},{row}]| = {delta:e}")]
    NotSymmetric {
        context: &'static str,
        row: usize,
        col: usize,
        delta: f64,
    },

    /// The eigensolver failed to reduce the off-diagonal norm in time.
    #[error("eigensolver did not converge after {sweeps} sweeps (off-norm {off_norm:e})")]
    EigenNotConverged { sweeps: usize, off_norm: f64 },

    /// Two nodes in a view structure share the same id.
    #[error("duplicate node id `{id}` in view structure")]
    DuplicateNodeId { id: String },

    /// A node lists a child id that does not exist.
    #[error("node `{parent}` references unknown child `{child}`")]
    UnknownChild { parent: String, child: String },

    /// A child sits on the wrong layer for its parent.
    #[error("node `{parent}` on layer {parent_layer} has child `{child}` on layer {child_layer}, expected layer {expected}")]
    ChildLayerMismatch {
        parent: String,
        parent_layer: usize,
        child: String,
        child_layer: usize,
        expected: usize,
    },

    /// A node is claimed as a child by more than one parent.
    #[error("node `{child}` has multiple parents (`{first}` and `{second}`)")]
    MultipleParents {
        child: String,
        first: String,
        second: String,
    },

    /// A non-root node is not referenced by any parent.
    #[error("node `{id}` on layer {layer} is not reachable from the root")]
    OrphanNode { id: String, layer: usize },

    /// A layer between the leaves and the root contains no nodes.
    #[error("view structure has no nodes on layer {layer}")]
    EmptyLayer { layer: usize },

    /// The top layer must contain exactly one node.
    #[error("top layer {layer} must contain exactly one root node, found {count}")]
    RootCount { layer: usize, count: usize },

    /// A layer-0 node must carry a data block and no children.
    #[error("leaf `{id}` is malformed: {reason}")]
    BadLeaf { id: String, reason: String },

    /// A node above layer 0 must have children and no data block.
    #[error("internal node `{id}` is malformed: {reason}")]
    BadInternalNode { id: String, reason: String },

    /// A leaf names a data view that the dataset does not contain.
    #[error("leaf `{id}` references unknown data view `{view}`")]
    UnknownView { id: String, view: String },

    /// A data view has a different number of samples than the rest.
    #[error("view `{view}` has {found} samples, expected {expected}")]
    SampleCountMismatch {
        view: String,
        expected: usize,
        found: usize,
    },

    /// The structure has no usable layers.
    #[error("view structure is empty or has no agglomeration layer: {reason}")]
    EmptyStructure { reason: String },

    /// Reading or writing a file failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file was read but its contents could not be parsed.
    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    /// A JSON document (manifest, structure, run config) was malformed.
    #[error("malformed JSON in {path}: {reason}")]
    Json { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by the file system rather than by input values.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
