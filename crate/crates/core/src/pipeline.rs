//! File-producing orchestration shared by the command-line front end and the
//! reproducibility checks: training runs and evaluation runs that write
//! their logs, checkpoints and reports into a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::ckpt::Checkpoint;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval::{
    render_fig2_csv, render_fig3_csv, render_summary_csv, render_traces_csv, EvalOutput,
    EvalRequest,
};
use crate::ppo::{render_train_log, train, PpoConfig, TrainResult};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "eval_summary.csv";
pub const TRACES_FILE: &str = "traces.csv";
pub const FIG2_FILE: &str = "fig2.csv";
pub const FIG3_FILE: &str = "fig3.csv";

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Train and write `train_log.csv` plus `checkpoint.bin` under `out_dir`.
pub fn run_training_to_dir(
    manifest: &DatasetManifest,
    cfg: &PpoConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<(TrainResult, PathBuf)> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let result = train(manifest, cfg, seed)?;
    write(&out_dir.join(TRAIN_LOG_FILE), &render_train_log(&result.log))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    Checkpoint::capture(&result.nets, &result.init, cfg.env_config()).save(&ckpt_path)?;
    Ok((result, ckpt_path))
}

/// Evaluate and write `eval_summary.csv`, `traces.csv` and optionally the
/// figure-data files under `out_dir`.
pub fn run_eval_to_dir(
    req: &EvalRequest,
    out_dir: impl AsRef<Path>,
    export_fig2: bool,
    export_fig3: bool,
) -> Result<EvalOutput> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let output = crate::eval::run_eval(req)?;
    write(&out_dir.join(SUMMARY_FILE), &render_summary_csv(&output))?;
    write(&out_dir.join(TRACES_FILE), &render_traces_csv(&output))?;
    if export_fig2 {
        write(&out_dir.join(FIG2_FILE), &render_fig2_csv(&output))?;
    }
    if export_fig3 {
        write(&out_dir.join(FIG3_FILE), &render_fig3_csv(&output))?;
    }
    Ok(output)
}
