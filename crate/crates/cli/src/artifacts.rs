use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tabf::export::{pgm_p2, to_sorted_json};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Link from a seeded run to the run that provided its initial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedingLink {
    pub source_dir: String,
    pub source_config_hash: String,
    pub source_file: String,
    pub source_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    /// Effective config; running it reproduces the outputs.
    pub config_toml: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
    pub seeding: Option<SeedingLink>,
    pub restart_from: Option<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into one artifact directory and records their hashes.
pub struct ArtifactWriter {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = to_sorted_json(value)?;
        self.write(name, &text)
    }

    /// Writes `<stem>.pgm` and its `<stem>.pgm.json` range sidecar.
    pub fn write_pgm(
        &mut self,
        stem: &str,
        values: &[f64],
        rows: usize,
        cols: usize,
        mask: Option<&[bool]>,
    ) -> Result<(), CliError> {
        let (img, side) = pgm_p2(values, rows, cols, mask)?;
        self.write(&format!("{stem}.pgm"), &img)?;
        self.write_json(&format!("{stem}.pgm.json"), &side)
    }

    pub fn finish(self, mut manifest: Manifest) -> Result<Manifest, CliError> {
        manifest.files = self.files;
        let text = to_sorted_json(&manifest)?;
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
