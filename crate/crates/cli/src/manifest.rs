use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_hash(path)?,
        })
    }
}

/// Record of one command run: what went in, what came out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the resolved command configuration.
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub versions: BTreeMap<String, String>,
    /// Seconds; the only field that differs between identical runs.
    pub wall_time: f64,
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(config).expect("config serializes")))
}

/// `<path>.manifest.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, config: &T, seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("dmpc".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("dataset-format".to_string(), dmpc::demos::DATASET_VERSION.to_string());
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_hash: config_hash(config),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions,
            wall_time: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(FileRef::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.push(FileRef::of(path)?);
        Ok(())
    }

    /// Re-hash every referenced file and report the first mismatch.
    pub fn verify(&self) -> Result<(), String> {
        for f in self.inputs.iter().chain(&self.outputs) {
            let now = file_hash(&f.path).map_err(|e| format!("{}: {e}", f.path.display()))?;
            if now != f.sha256 {
                return Err(format!("{} changed since the run", f.path.display()));
            }
        }
        Ok(())
    }

    pub fn save(&self, primary: &Path) -> std::io::Result<PathBuf> {
        let path = manifest_path(primary);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}
