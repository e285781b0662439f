use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// One run's output directory.
pub struct Output {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        // a rerun into the same directory must not leave a stale verdict behind
        for stale in ["summary.json", "error.json"] {
            let _ = std::fs::remove_file(dir.join(stale));
        }
        Ok(Self { dir: dir.to_path_buf(), artifacts: Vec::new() })
    }

    /// Writes a CSV artifact through `f` and records its name for the summary.
    pub fn csv(
        &mut self,
        name: &str,
        f: impl FnOnce(BufWriter<File>) -> sbcascade::Result<()>,
    ) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        f(BufWriter::new(file))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn summary(self, command: &str, config: &ExperimentConfig, result: Value) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Summary<'a> {
            command: &'a str,
            config: &'a ExperimentConfig,
            result: Value,
            artifacts: Vec<String>,
        }
        let s = Summary { command, config, result, artifacts: self.artifacts };
        write_json(&self.dir.join("summary.json"), &s)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    let mut f = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
