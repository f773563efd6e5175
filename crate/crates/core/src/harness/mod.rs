//! Experiment runner: dataset generation and ingestion, end-to-end
//! attacker-vs-gateway episodes, the attack-economics calculator, and
//! report emission.

mod config;
mod data;
mod economics;
mod episode;
mod report;

pub use config::{config_get, parse_config, read_config};
pub use data::{generate_synthetic_dataset, load_cifar10};
pub use economics::{economics_query_bounded, economics_time_bounded};
pub use episode::{
    run_episode, AttackSpec, Artifacts, EpisodeConfig, EpisodeReport, ReRegisteringOracle,
};
pub use report::{emit_k_sweep, emit_report, parse_report, read_k_sweep};
