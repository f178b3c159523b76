//! Desk-scale experiment driver: synthetic source and target tasks,
//! backbone pretraining and quantization, side-network fine-tuning with
//! scheduled re-quantization, and ablation sweeps.

mod ablation;
mod config;
mod run;
mod task;

pub use ablation::{ablation_sweep, thread_cap, AblationAxis, AblationRow, Component};
pub use config::{
    BackboneConfig, MemoryConfig, QuantizerConfig, RequantConfig, RouterConfig, RunConfig, SideSection,
    TaskConfig, TrainConfig,
};
pub use run::{
    backbone_network, config_memory_report, csv_text, quant_trajectory, run_experiment, run_memory, EpochRow, QuantDynamics, RunArtifacts, RunMemory, RunReport,
    RunSummary,
};
pub use task::{Split, SyntheticTask};
