//! On-disk layout of one run:
//! `<runs>/<run_id>/{config.json, results/<doc>.json, traces/<doc>/<stage>.json, fixtures/}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ExtractionResult, PipelineError, RunConfig};

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

fn io(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| io(p, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))
}

/// Document ids become file names; path separators are replaced.
fn file_stem(doc_id: &str) -> String {
    doc_id.replace(['/', '\\'], "_")
}

impl RunDir {
    pub fn create(runs_dir: &Path, run_id: &str) -> Result<Self, PipelineError> {
        let root = runs_dir.join(run_id);
        for sub in ["results", "traces", "fixtures"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
        }
        Ok(Self { root })
    }

    pub fn open(runs_dir: &Path, run_id: &str) -> Self {
        Self {
            root: runs_dir.join(run_id),
        }
    }

    pub fn fixtures_dir(&self) -> PathBuf {
        self.root.join("fixtures")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<(), PipelineError> {
        write_json(&self.root.join("config.json"), config)
    }

    /// Writes the result without traces, and one file per stage trace.
    pub fn write_result(&self, result: &ExtractionResult) -> Result<(), PipelineError> {
        let stem = file_stem(&result.doc_id);
        let mut slim = result.clone();
        let traces = std::mem::take(&mut slim.traces);
        write_json(&self.results_dir().join(format!("{stem}.json")), &slim)?;
        for t in &traces {
            write_json(&self.root.join("traces").join(&stem).join(format!("{}.json", t.stage)), t)?;
        }
        Ok(())
    }

    pub fn write_extra<T: Serialize>(&self, name: &str, value: &T) -> Result<(), PipelineError> {
        write_json(&self.root.join(name), value)
    }

    /// Results previously written to this run, ordered by file name.
    pub fn read_results(&self) -> Result<Vec<ExtractionResult>, PipelineError> {
        let dir = self.results_dir();
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| io(p, e))?;
                serde_json::from_str(&text).map_err(|e| io(p, e))
            })
            .collect()
    }
}
