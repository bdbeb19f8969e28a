//! Command-line workbench for the attention modules: gradient checking,
//! toy re-identification training and evaluation, attention and relation
//! map exporters, parameter accounting, and a forward-pass benchmark.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod pgm;

pub use checkpoint::{
    apply_checkpoint, checkpoint_bytes, load_checkpoint, parse_checkpoint, read_checkpoint,
    save_checkpoint, Entry, MAGIC, VERSION,
};
pub use commands::{
    cmd_bench, cmd_eval, cmd_export_attn, cmd_export_relations, cmd_gradcheck, cmd_param_count,
    cmd_train, module_attention, BenchRow, GradcheckOptions, BENCH_MODULES,
};
pub use config::RunConfig;
pub use csvio::{csv_line, read_csv, read_grid, write_csv, write_grid};
pub use error::{CliError, Result};
pub use pgm::{parse_pgm, pgm_bytes, write_pgm};
