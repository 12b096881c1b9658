//! Ground-truth graphs, data simulation, partitioning and evaluation.

mod dag;
mod data;
mod metrics;
mod sem;

pub use dag::{sample_er_dag, threshold_graph, DirectedGraph};
pub use data::{
    center, default_names, load_csv, load_edges, partition, read_table, save_csv, save_edges,
    write_table, ClientDataset, Table,
};
pub use metrics::{evaluate, Metrics};
pub use sem::{
    sample_linear_sem, sample_mlp_sem, sigmoid, simulate, LinearSem, MlpMechanism, MlpSem, Sem,
    GROUND_TRUTH_HIDDEN,
};
