//! TOML run configuration.
//!
//! Relative paths are resolved against the directory of the config file, so a
//! config and its data can move together.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deltaknn::evaluator::SplitSpec;
use deltaknn::prompt::{ablation_grid, ComponentTexts};
use deltaknn::{BackendConfig, BackendKind, PromptTemplate, SelectionConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub runs: usize,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub backend: BackendConfig,
    pub embeddings: EmbeddingConfig,
    pub prompt: PromptConfig,
    pub selection: SelectionConfig,
    pub matrix: MatrixConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            runs: 3,
            output_dir: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            backend: BackendConfig::default(),
            embeddings: EmbeddingConfig::default(),
            prompt: PromptConfig::default(),
            selection: SelectionConfig::default(),
            matrix: MatrixConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training documents (and test documents too, if they carry `split`).
    pub path: Option<PathBuf>,
    /// Optional separate test file; every document in it is treated as test.
    pub test_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Embedding file read by selection and written by `embed`.
    pub path: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model_name: String,
    pub cache_dir: Option<PathBuf>,
    pub batch_size: usize,
    pub api_key_env: String,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            path: None,
            base_url: None,
            model_name: "text-embedding-3-small".into(),
            cache_dir: None,
            batch_size: 64,
            api_key_env: "LLM_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Row of the component ablation grid, 1 to 7.
    pub row: usize,
    /// Per-component switches overriding the row.
    pub role: Option<bool>,
    pub context: Option<bool>,
    pub linguistic: Option<bool>,
    pub cot: Option<bool>,
    pub guided_cot: Option<bool>,
    /// Grid row used while probing for the matrix; defaults to `row`.
    pub probe_row: Option<usize>,
    pub components: ComponentTexts,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            row: 7,
            role: None,
            context: None,
            linguistic: None,
            cot: None,
            guided_cot: None,
            probe_row: None,
            components: ComponentTexts::default(),
        }
    }
}

pub fn grid_row(row: usize) -> Result<PromptTemplate> {
    let grid = ablation_grid();
    if row == 0 || row > grid.len() {
        return Err(UsageError::error(format!(
            "prompt row must be 1..={}, got {row}",
            grid.len()
        )));
    }
    Ok(grid[row - 1].clone())
}

impl PromptConfig {
    pub fn template(&self) -> Result<PromptTemplate> {
        let mut t = grid_row(self.row)?;
        for (slot, over) in [
            (&mut t.role, self.role),
            (&mut t.context, self.context),
            (&mut t.linguistic, self.linguistic),
            (&mut t.cot, self.cot),
            (&mut t.guided_cot, self.guided_cot),
        ] {
            if let Some(v) = over {
                *slot = v;
            }
        }
        t.components = self.components.clone();
        t.validate().map_err(|e| UsageError::error(e.to_string()))?;
        Ok(t)
    }

    pub fn probe_template(&self) -> Result<PromptTemplate> {
        match self.probe_row {
            None => self.template(),
            Some(row) => {
                let mut t = grid_row(row)?;
                t.components = self.components.clone();
                Ok(t)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixConfig {
    /// Defaults to `<output_dir>/matrix.json`.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Holdout,
    CrossValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub n_folds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Holdout,
            n_folds: 5,
        }
    }
}

impl EvalConfig {
    pub fn split_spec(&self) -> SplitSpec {
        match self.mode {
            EvalMode::Holdout => SplitSpec::Holdout,
            EvalMode::CrossValidation => SplitSpec::CrossValidation {
                n_folds: self.n_folds,
            },
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        rebase(base, p);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            UsageError::error(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| UsageError::error(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.output_dir);
        rebase_opt(base, &mut self.corpus.path);
        rebase_opt(base, &mut self.corpus.test_path);
        rebase_opt(base, &mut self.backend.mock_rules);
        rebase_opt(base, &mut self.embeddings.path);
        rebase_opt(base, &mut self.embeddings.cache_dir);
        rebase_opt(base, &mut self.matrix.path);
    }

    pub fn matrix_path(&self) -> PathBuf {
        self.matrix
            .path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("matrix.json"))
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.embeddings
            .path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("embeddings.jsonl"))
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            bail!(UsageError::error("runs must be at least 1"));
        }
        if self.corpus.path.is_none() {
            bail!(UsageError::error("config needs `corpus.path`"));
        }
        if self.backend.kind == BackendKind::Http && self.backend.base_url.is_none() {
            bail!(UsageError::error("http backend needs `backend.base_url`"));
        }
        if self.backend.kind == BackendKind::Mock && self.backend.mock_rules.is_none() {
            bail!(UsageError::error("mock backend needs `backend.mock_rules`"));
        }
        self.prompt.template()?;
        self.prompt.probe_template()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_replication_setting() {
        let c = RunConfig::default();
        assert_eq!(c.runs, 3);
        assert_eq!(c.selection.n_shot, 4);
        assert_eq!(c.selection.k_neighbors, 13);
        assert!(c.selection.balance);
        assert_eq!(c.backend.temperature, 0.01);
        assert_eq!(c.prompt.template().unwrap(), PromptTemplate::full());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.corpus.path = Some("/data/train.jsonl".into());
        c.prompt.cot = Some(true);
        c.prompt.guided_cot = Some(false);
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(back.prompt.template().unwrap().cot);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[corpus]\npath = \"train.jsonl\"\n[backend]\nmock_rules = \"/abs/mock.json\"\n",
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.corpus.path.unwrap(), dir.path().join("train.jsonl"));
        assert_eq!(
            c.backend.mock_rules.unwrap(),
            PathBuf::from("/abs/mock.json")
        );
        assert_eq!(c.output_dir, dir.path().join("out"));
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut c = RunConfig::default();
        assert!(c
            .validate()
            .unwrap_err()
            .downcast_ref::<UsageError>()
            .is_some());
        c.corpus.path = Some("x".into());
        c.prompt.row = 9;
        assert!(c.validate().is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}
