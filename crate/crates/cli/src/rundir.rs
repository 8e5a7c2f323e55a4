use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const OUT_ROOT_ENV: &str = "SEQDG_OUT_ROOT";

/// Output directory of one invocation plus its log file.
pub struct RunDir {
    path: PathBuf,
    log: File,
    quiet: bool,
}

impl RunDir {
    /// `out` wins; otherwise a fresh `<root>/<command>-<n>` directory under
    /// the root from the environment (default `runs`).
    pub fn create(out: Option<&Path>, command: &str, quiet: bool) -> anyhow::Result<Self> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(OUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                (1..)
                    .map(|n| root.join(format!("{command}-{n:03}")))
                    .find(|p| !p.exists())
                    .expect("unbounded search")
            }
        };
        std::fs::create_dir_all(&path)
            .with_context(|| format!("creating run directory {}", path.display()))?;
        let log = File::create(path.join("log.txt")).context("creating log.txt")?;
        Ok(RunDir { path, log, quiet })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn log(&mut self, line: impl AsRef<str>) {
        let line = line.as_ref();
        if !self.quiet {
            eprintln!("{line}");
        }
        // A failing log write must not abort a run.
        let _ = writeln!(self.log, "{line}");
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let p = self.join(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Hashes of a manifest and every blob it references.
pub fn dataset_hashes(manifest: &Path) -> anyhow::Result<Vec<FileHash>> {
    let store_manifest: seqdg::data::Manifest =
        serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
    let dir = manifest.parent().unwrap_or(Path::new(""));
    let mut files = vec![manifest.to_path_buf(), dir.join(&store_manifest.blob)];
    files.extend(store_manifest.text_features.map(|t| dir.join(t)));
    files
        .into_iter()
        .map(|path| {
            Ok(FileHash {
                sha256: sha256_file(&path)?,
                path,
            })
        })
        .collect()
}
