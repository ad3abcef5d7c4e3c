//! Checkpoint files: one header line naming the format and version, then a
//! JSON body. The header is checked before the body is parsed.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use synthdistill::distill::{TrainConfig, TrainerState};
use synthdistill::eval::EvalConfig;
use synthdistill::numcore::Rng;

use crate::config::config_hash;
use crate::error::CliError;

pub const MAGIC: &str = "synthdistill-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Completed epochs and iterations within the current epoch.
    pub epoch: usize,
    pub iteration: usize,
    pub state: TrainerState,
    /// Stream the next training iteration draws from.
    pub training_rng: Rng,
    pub eval_rng: Rng,
    pub net_seed: u64,
    pub data_seed: u64,
    pub eval_seed: u64,
}

impl Checkpoint {
    pub fn new(train: &TrainConfig, eval: &EvalConfig, state: TrainerState) -> Self {
        let g = state.global_step as usize;
        Self {
            config_hash: config_hash(train),
            epoch: g / train.n_iteration,
            iteration: g % train.n_iteration,
            training_rng: state.training_rng(train),
            eval_rng: eval.rng(),
            net_seed: train.net_seed,
            data_seed: train.data_seed,
            eval_seed: eval.eval_seed,
            state,
        }
    }

    pub fn to_text(&self) -> String {
        let body = serde_json::to_string(self).expect("checkpoint serializes");
        format!("{MAGIC} {VERSION}\n{body}\n")
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self, CliError> {
        let (header, body) = text.split_once('\n').unwrap_or((text, ""));
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| CliError::checkpoint(path, "not a synthdistill checkpoint (missing header)"))?;
        match version.trim().parse::<u32>() {
            Ok(VERSION) => {}
            Ok(v) => {
                return Err(CliError::checkpoint(
                    path,
                    format!("unsupported checkpoint format version {v} (expected {VERSION})"),
                ))
            }
            Err(_) => {
                return Err(CliError::checkpoint(
                    path,
                    format!("malformed checkpoint version {:?}", version.trim()),
                ))
            }
        }
        serde_json::from_str(body).map_err(|e| CliError::checkpoint(path, format!("corrupt checkpoint: {e}")))
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| CliError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = String::from_utf8_lossy(&bytes);
        Self::from_text(&text, path)
    }

    /// Checks that the checkpoint belongs to `train`. A hash mismatch is an
    /// error unless `force` is set; the architecture must match regardless.
    pub fn check_config(&self, train: &TrainConfig, force: bool, path: &Path) -> Result<(), CliError> {
        let expected = config_hash(train);
        if self.config_hash != expected {
            if !force {
                return Err(CliError::checkpoint(
                    path,
                    format!(
                        "config hash mismatch: checkpoint {} vs config {expected} (pass --force to override)",
                        self.config_hash
                    ),
                ));
            }
            log::warn!("{}: config hash mismatch ignored (--force)", path.display());
        }
        let spec = train.student_spec()?;
        if self.state.student.spec() != &spec {
            return Err(CliError::checkpoint(path, "student architecture differs from the config"));
        }
        Ok(())
    }
}
