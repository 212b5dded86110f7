//! Round orchestration: client sampling, local training for each algorithm,
//! weighted aggregation and per-round evaluation.

mod aggregate;
mod config;
mod local;
mod report;
mod run;

pub use aggregate::{aggregate, aggregate_slices};
pub use config::{attach_pt_plugin, AlgorithmTag, BaseAlgorithm, TrainConfig};
pub use local::{
    local_train, local_train_decoupled, local_train_fedavg, local_train_fedprox, local_train_pfedpt, ClientState,
    DecoupledVariant, LocalEnv, LocalUpdate,
};
pub use report::{best_weighted_accuracy, ClientRoundRecord, ExperimentSummary, RoundCsvWriter, RoundReport};
pub use run::{run_experiment, sample_clients, ExperimentRun, ExperimentSetup};
