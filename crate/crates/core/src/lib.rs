//! Multi-view clustering through hierarchical graph agglomeration.
//!
//! Each data view learns a latent affinity matrix whose sharpened,
//! row-rescaled activation forms a per-view connection graph. Views are
//! merged bottom-up along a user-defined tree: every internal node mixes
//! its children's graphs with trainable weights and re-activates, ending in
//! one consensus graph S^(c). A rank constraint on the consensus Laplacian,
//! enforced by an adaptive weight λ on the spectral term Tr(Fᵀ L F),
//! pushes S^(c) toward exactly k connected components; the equivalence
//! between component count and the multiplicity of the zero eigenvalue
//! turns the constraint into a terminating doubling/halving schedule.
//! Cluster labels are the connected components themselves, with no
//! post-hoc rounding such as K-means.
//!
//! The optional learnable data space replaces each feature with
//! `tanh(h_j·(x − mean_j))` under trainable per-dimension scales, letting
//! gradients reshape the distance geometry that feeds the graphs.
//!
//! Typical use:
//!
//! ```
//! use agglo_mvc::{evaluate, synth_blobs, train, Mode, TrainerConfig};
//!
//! let (dataset, structure) = synth_blobs(20, 3, 2, 4, 8.0, 1.0, 7).unwrap();
//! let mut config = TrainerConfig::for_mode(Mode::Ann, 3);
//! config.r = 5;
//! let result = train(&config, &dataset, &structure).unwrap();
//! assert!(result.converged);
//! let report = evaluate(&result.labels, dataset.labels().unwrap()).unwrap();
//! assert!(report.nmi > 0.95);
//! ```

pub mod data;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod train;
pub mod view;

pub use data::{
    load_dataset, load_labels, load_structure, save_dataset, save_results, synth_blobs,
    synth_layered, Dataset, Manifest,
};
pub use error::{Error, Result};
pub use graph::{
    activation_row, agglomerate, connected_components, edge_list_csv, laplacian,
    make_connection_graph, to_dot, ConnectionGraph, EDGE_EPS,
};
pub use linalg::{knn_sparsify, pairwise_distances, sym_eigs_smallest, EigenResult};
pub use loss::{
    agglomerate_raw, forward, forward_with_gradients, gradients, init_params, loss_cac,
    loss_gc, loss_sc, project_data, ForwardTrace, Gradients, LossBreakdown, Mode,
    ParameterSet,
};
pub use metrics::{evaluate, MetricsReport};
pub use train::{
    adam_step, schedule_lambda, train, update_f, AdamState, ScheduleAction, ScheduleState,
    TraceRow, TrainResult, TrainerConfig,
};
pub use view::{Node, NodeId, NodeSpec, StructureSpec, ViewStructure};
