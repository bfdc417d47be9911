//! Run configuration: strict JSON parsing with defaults, field-level
//! validation, and data loading for the CLI entry points.

use crate::schema::{load_dataset, DatasetSchema, Task};
use crate::search::{PipelineConfig, PipelineData, StepsEnabled};
use crate::synth::instance_to_sequence;
use crate::RecError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Which pipeline steps may run. `None` defers to the schema (a step
/// runs exactly when the schema supports it); `Some(true)` additionally
/// asserts the schema supports it; `Some(false)` skips it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepToggles {
    pub blocks: Option<bool>,
    pub interactions: Option<bool>,
    pub mlp: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: Option<PathBuf>,
    pub task: Task,
    /// CTR tasks: NDJSON instance files.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Retrieval tasks: one NDJSON file of full user histories; the
    /// leave-one-out protocol derives the splits.
    pub sequences: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub steps: StepToggles,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: None,
            task: Task::Ctr,
            train: None,
            val: None,
            test: None,
            sequences: None,
            out_dir: None,
            steps: StepToggles::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Parse a config file; an empty file means all defaults. Unknown keys
/// are rejected.
pub fn parse_config(path: &Path) -> Result<RunConfig, RecError> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    serde_json::from_str(&text)
        .map_err(|e| RecError::Config(format!("{}: {e}", path.display())))
}

fn positive(value: usize, field: &str) -> Result<(), RecError> {
    if value == 0 {
        return Err(RecError::Config(format!("{field} must be positive")));
    }
    Ok(())
}

fn path_exists<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path, RecError> {
    let p = p
        .as_deref()
        .ok_or_else(|| RecError::Config(format!("{field} path is required")))?;
    if !p.exists() {
        return Err(RecError::Config(format!(
            "{field} path {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

impl RunConfig {
    /// Parameter sanity, path presence, and toggle/schema consistency.
    pub fn validate(&self, schema: &DatasetSchema) -> Result<(), RecError> {
        let p = &self.pipeline;
        positive(p.stage1.l_b, "stage1.l_b")?;
        positive(p.stage1.embed_width, "stage1.embed_width")?;
        positive(p.stage1.epochs, "stage1.epochs")?;
        positive(p.stage1.steps_per_epoch, "stage1.steps_per_epoch")?;
        positive(p.stage1.batch_users, "stage1.batch_users")?;
        positive(p.stage1.paths_per_update, "stage1.paths_per_update")?;
        positive(p.stage1.num_samples, "stage1.num_samples")?;
        positive(p.stage1.top_n, "stage1.top_n")?;
        positive(p.explore.rounds, "explore.rounds")?;
        positive(p.explore.beam_k, "explore.beam_k")?;
        positive(p.explore.final_k, "explore.final_k")?;
        positive(p.explore.batch_size, "explore.batch_size")?;
        positive(p.explore.val_batches, "explore.val_batches")?;
        positive(p.stage3.depth, "stage3.depth")?;
        positive(p.stage3.batch_size, "stage3.batch_size")?;
        positive(p.stage3.num_samples, "stage3.num_samples")?;
        positive(p.stage3.top_n, "stage3.top_n")?;
        if self.steps.blocks == Some(true) && !schema.has_behavior() {
            return Err(RecError::Config(
                "steps.blocks requires behavior fields in the schema".into(),
            ));
        }
        if self.steps.interactions == Some(true) && schema.num_non_seq() < 2 {
            return Err(RecError::Config(
                "steps.interactions requires >= 2 non-sequential fields".into(),
            ));
        }
        if self.steps.mlp == Some(true) && self.task != Task::Ctr {
            return Err(RecError::Config(
                "steps.mlp applies to CTR tasks only".into(),
            ));
        }
        if self.task == Task::NextItem && self.steps.blocks == Some(false) {
            return Err(RecError::Config(
                "retrieval tasks require the behavior-block step".into(),
            ));
        }
        match self.task {
            Task::Ctr => {
                path_exists(&self.train, "train")?;
                path_exists(&self.val, "val")?;
                path_exists(&self.test, "test")?;
            }
            Task::NextItem => {
                path_exists(&self.sequences, "sequences")?;
            }
        }
        Ok(())
    }

    pub fn load_schema(&self) -> Result<DatasetSchema, RecError> {
        let p = path_exists(&self.schema, "schema")?;
        DatasetSchema::load(p)
    }

    /// Resolve toggles against the schema: unset toggles run whenever
    /// the schema supports the step.
    pub fn effective_steps(&self, schema: &DatasetSchema) -> StepsEnabled {
        StepsEnabled {
            blocks: self.steps.blocks.unwrap_or(true) && schema.has_behavior(),
            interactions: self.steps.interactions.unwrap_or(true) && schema.num_non_seq() >= 2,
            mlp: self.steps.mlp.unwrap_or(true) && self.task == Task::Ctr,
        }
    }

    pub fn load_data(&self, schema: &DatasetSchema) -> Result<PipelineData, RecError> {
        match self.task {
            Task::Ctr => Ok(PipelineData::Ctr {
                train: load_dataset(path_exists(&self.train, "train")?, schema, Task::Ctr)?,
                val: load_dataset(path_exists(&self.val, "val")?, schema, Task::Ctr)?,
                test: load_dataset(path_exists(&self.test, "test")?, schema, Task::Ctr)?,
            }),
            Task::NextItem => {
                let rows = load_dataset(
                    path_exists(&self.sequences, "sequences")?,
                    schema,
                    Task::NextItem,
                )?;
                Ok(PipelineData::Retrieval {
                    sequences: rows.iter().map(instance_to_sequence).collect(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn empty_file_parses_to_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::File::create(&p).unwrap().write_all(b"  \n").unwrap();
        let cfg = parse_config(&p).unwrap();
        assert_eq!(cfg.pipeline.stage1.num_samples, 2000);
        assert_eq!(cfg.pipeline.stage1.top_n, 5);
        assert_eq!(cfg.pipeline.explore.rounds, 4);
        assert_eq!(cfg.pipeline.explore.beam_k, 50);
        assert_eq!(cfg.pipeline.explore.final_k, 15);
        // validation still demands data paths
        let schema = crate::synth::planted_ctr_schema(3, 4);
        let err = cfg.validate(&schema).unwrap_err().to_string();
        assert!(err.contains("train"), "{err}");
    }

    #[test]
    fn unknown_keys_and_zero_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"not_a_key": 1}"#).unwrap();
        assert!(parse_config(&p).is_err());

        std::fs::write(&p, r#"{"pipeline": {"explore": {"final_k": 0}}}"#).unwrap();
        let cfg = parse_config(&p).unwrap();
        let schema = crate::synth::planted_ctr_schema(3, 4);
        let err = cfg.validate(&schema).unwrap_err().to_string();
        assert!(err.contains("final_k"), "{err}");
    }

    #[test]
    fn toggles_must_match_the_schema() {
        let schema = crate::synth::planted_ctr_schema(1, 4);
        let cfg = RunConfig {
            steps: StepToggles { interactions: Some(true), ..Default::default() },
            ..Default::default()
        };
        assert!(cfg.validate(&schema).is_err());
        assert_eq!(
            cfg.effective_steps(&schema),
            StepsEnabled { blocks: false, interactions: false, mlp: true }
        );
    }
}
