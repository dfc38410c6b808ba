//! Per-invocation bookkeeping: declared inputs and outputs, buffered
//! results, and the manifest written at the end of every successful run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{input_err, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub args: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Hash of the report printed on standard output, if any.
    pub stdout_sha256: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Writes through a sibling temporary file and a rename, so a reader never
/// sees a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

pub struct Run {
    command: &'static str,
    pub config: RunConfig,
    seed: Option<u64>,
    args: BTreeMap<String, String>,
    inputs: Vec<(PathBuf, FileDigest)>,
    outputs: Vec<(PathBuf, Option<Vec<u8>>)>,
    stdout: Vec<u8>,
}

impl Run {
    pub fn new(command: &'static str, config: RunConfig) -> Self {
        Self {
            command,
            config,
            seed: None,
            args: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            stdout: Vec::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// Records a command-line argument that is not a config key.
    pub fn arg(&mut self, name: &str, value: impl ToString) {
        self.args.insert(name.to_string(), value.to_string());
    }

    /// Declares and hashes an input file; an unreadable path is an input
    /// error.
    pub fn input(&mut self, path: &Path) -> CliResult<PathBuf> {
        let bytes = std::fs::read(path).map_err(|e| input_err(path, e))?;
        let digest = FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        };
        let abs = absolute(path);
        if !self.inputs.iter().any(|(p, _)| *p == abs) {
            self.inputs.push((abs, digest));
        }
        Ok(path.to_path_buf())
    }

    /// Declares an output; returns its slot for [`Run::put`]. Overwriting
    /// an input is refused.
    pub fn output(&mut self, path: PathBuf) -> CliResult<usize> {
        let abs = absolute(&path);
        if self.inputs.iter().any(|(p, _)| *p == abs) {
            return Err(CliError::Validation(format!(
                "output {} would overwrite an input",
                path.display()
            )));
        }
        if self.outputs.iter().any(|(p, _)| absolute(p) == abs) {
            return Err(CliError::Validation(format!("output {} declared twice", path.display())));
        }
        self.outputs.push((path, None));
        Ok(self.outputs.len() - 1)
    }

    pub fn put(&mut self, slot: usize, bytes: Vec<u8>) {
        self.outputs[slot].1 = Some(bytes);
    }

    pub fn print(&mut self, text: &str) {
        self.stdout.extend_from_slice(text.as_bytes());
        if !text.ends_with('\n') {
            self.stdout.push(b'\n');
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.config.paths.report(&format!("{}.manifest.json", self.command))
    }

    /// Commits every buffered output, prints the report, and writes the
    /// manifest. Nothing touches the filesystem before this point.
    pub fn finish(self) -> CliResult<()> {
        let manifest_path = self.manifest_path();
        let mut outputs = Vec::new();
        for (path, bytes) in &self.outputs {
            let bytes = bytes
                .as_ref()
                .ok_or_else(|| CliError::Runtime(format!("output {} was never produced", path.display())))?;
            write_atomic(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            outputs.push(FileDigest {
                path: path.display().to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            args: self.args,
            inputs: self.inputs.into_iter().map(|(_, d)| d).collect(),
            outputs,
            stdout_sha256: (!self.stdout.is_empty()).then(|| sha256_hex(&self.stdout)),
        };
        let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        json.push(b'\n');
        write_atomic(&manifest_path, &json)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", manifest_path.display())))?;
        let mut out = std::io::stdout().lock();
        out.write_all(&self.stdout)
            .and_then(|_| out.flush())
            .map_err(|e| CliError::Runtime(format!("stdout: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_string() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn refuses_to_overwrite_inputs_and_commits_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "x").unwrap();
        let mut config = RunConfig::default();
        config.paths.reports = dir.path().join("reports");
        let mut run = Run::new("test", config);
        run.input(&input).unwrap();
        assert!(matches!(run.output(input.clone()), Err(CliError::Validation(_))));
        let slot = run.output(dir.path().join("out/o.bin")).unwrap();
        run.put(slot, vec![1, 2, 3]);
        let manifest = run.manifest_path();
        run.finish().unwrap();
        assert_eq!(std::fs::read(dir.path().join("out/o.bin")).unwrap(), [1, 2, 3]);
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(manifest).unwrap()).unwrap();
        assert_eq!(m["inputs"][0]["sha256"], sha256_hex(b"x"));
        assert_eq!(m["outputs"][0]["bytes"], 3);
        assert!(!dir.path().join("out/o.bin.partial").exists());
    }

    #[test]
    fn missing_input_is_an_input_error() {
        let mut run = Run::new("test", RunConfig::default());
        assert!(matches!(run.input(Path::new("/definitely/not/here")), Err(CliError::Input(_))));
    }
}
