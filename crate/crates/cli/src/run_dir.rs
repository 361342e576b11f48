//! Run directories: a config echo plus a `run.json` manifest that records
//! seeds, input hashes and outputs. Nothing time- or host-dependent is
//! written, so repeating a run reproduces the directory byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub const MANIFEST: &str = "run.json";
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Partial,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRef {
    pub role: String,
    /// File or directory name, without the parent path.
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: Status,
    pub seed: u64,
    pub config_sha256: String,
    pub threads: usize,
    pub inputs: Vec<InputRef>,
    /// Relative paths, sorted.
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    io(path, fs::write(path, s))
}

/// Files under `dir`, relative and sorted, skipping the manifest itself.
pub fn list_files(dir: &Path) -> CliResult<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
        for entry in io(dir, fs::read_dir(dir))? {
            let entry = io(dir, entry)?;
            let p = entry.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.retain(|f| f != MANIFEST);
    out.sort();
    Ok(out)
}

/// SHA-256 of a file, or of the sorted `(name, hash)` list of a directory.
pub fn content_hash(path: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        for rel in list_files(path)? {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(content_hash(&path.join(&rel))?.as_bytes());
        }
    } else {
        h.update(io(path, fs::read(path))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub struct RunDir {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Creates (or reuses an unfinished) `dir`, echoes the config and marks
    /// the run partial.
    pub fn start(dir: &Path, command: &str, cfg: &RunConfig, threads: usize) -> CliResult<Self> {
        let mpath = dir.join(MANIFEST);
        if mpath.exists() {
            let text = io(&mpath, fs::read_to_string(&mpath))?;
            if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
                if m.status == Status::Complete {
                    return Err(CliError::Completed(dir.to_path_buf()));
                }
            }
        }
        io(dir, fs::create_dir_all(dir))?;
        write_json(&dir.join(CONFIG_ECHO), &cfg.to_flat())?;
        let manifest = RunManifest {
            command: command.to_string(),
            status: Status::Partial,
            seed: cfg.seed,
            config_sha256: nucleosynth::checkpoint::hash_json(&cfg.to_flat())?,
            threads,
            inputs: vec![],
            outputs: vec![],
            error: None,
        };
        let rd = RunDir {
            dir: dir.to_path_buf(),
            manifest,
        };
        rd.save()?;
        Ok(rd)
    }

    fn save(&self) -> CliResult<()> {
        write_json(&self.dir.join(MANIFEST), &self.manifest)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records an input by name and content hash.
    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string_lossy().into_owned());
        self.manifest.inputs.push(InputRef {
            role: role.to_string(),
            name,
            sha256: content_hash(path)?,
        });
        self.save()
    }

    pub fn finish(mut self) -> CliResult<RunManifest> {
        self.manifest.outputs = list_files(&self.dir)?;
        self.manifest.status = Status::Complete;
        self.save()?;
        Ok(self.manifest)
    }

    pub fn fail(mut self, err: &CliError) -> CliResult<()> {
        self.manifest.outputs = list_files(&self.dir)?;
        self.manifest.status = Status::Failed;
        self.manifest.error = Some(err.to_string());
        self.save()
    }
}

pub fn read_manifest(dir: &Path) -> CliResult<RunManifest> {
    let p = dir.join(MANIFEST);
    let text = io(&p, fs::read_to_string(&p))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle_and_refusal() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let cfg = RunConfig::default();
        let mut rd = RunDir::start(&dir, "gen-data", &cfg, 1).unwrap();
        assert_eq!(read_manifest(&dir).unwrap().status, Status::Partial);
        fs::write(rd.path("b.txt"), "b").unwrap();
        fs::create_dir(rd.path("sub")).unwrap();
        fs::write(rd.path("sub/a.txt"), "a").unwrap();
        let input = tmp.path().join("in.bin");
        fs::write(&input, [1u8, 2, 3]).unwrap();
        rd.input("data", &input).unwrap();
        let m = rd.finish().unwrap();
        assert_eq!(m.outputs, vec!["b.txt", "config.json", "sub/a.txt"]);
        assert_eq!(m.inputs[0].name, "in.bin");
        assert_eq!(read_manifest(&dir).unwrap(), m);
        assert!(matches!(RunDir::start(&dir, "gen-data", &cfg, 1), Err(CliError::Completed(_))));
    }

    #[test]
    fn directory_hash_tracks_content() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("x"), "1").unwrap();
        let a = content_hash(tmp.path()).unwrap();
        assert_eq!(a, content_hash(tmp.path()).unwrap());
        fs::write(tmp.path().join("x"), "2").unwrap();
        assert_ne!(a, content_hash(tmp.path()).unwrap());
    }
}
