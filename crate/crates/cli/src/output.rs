use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// One run's output directory. Every file written through it is listed in
/// the manifest, which carries no timestamps so reruns compare byte for byte.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: BTreeSet<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|source| CliError::Io { path: root.to_path_buf(), source })?;
        Ok(RunDir { root: root.to_path_buf(), files: BTreeSet::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })?;
        self.files.insert(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialise");
        text.push('\n');
        self.write(name, &text)
    }

    /// Records a file produced by another writer (trace export).
    pub fn record(&mut self, name: &str) {
        self.files.insert(name.to_string());
    }

    pub fn finish(mut self, command: &str, scenario: &str, config_toml: &str) -> Result<PathBuf, CliError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            scenario: &'a str,
            files: Vec<&'a str>,
            config: &'a str,
        }
        self.files.insert("manifest.json".into());
        let manifest = Manifest {
            command,
            scenario,
            files: self.files.iter().map(String::as_str).collect(),
            config: config_toml,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        text.push('\n');
        let path = self.path("manifest.json");
        std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
        Ok(self.root)
    }
}

/// Appends one CSV line from already formatted fields.
pub fn csv_line(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}
