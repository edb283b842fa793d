use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use kpgmrf::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config: Config,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Subcommand-specific summary values.
    #[serde(default)]
    pub summary: serde_json::Value,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn with_path(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn open_input(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| with_path(path, e))
}

pub fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| with_path(path, e))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| with_path(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects output files in a scratch directory next to the destination and
/// moves them in only once every file has been written.
pub struct Staging {
    dest: PathBuf,
    dir: tempfile::TempDir,
    files: Vec<String>,
}

impl Staging {
    pub fn new(dest: &Path) -> Result<Self> {
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| with_path(&parent, e))?;
        let dir = tempfile::Builder::new().prefix(".kpgmrf-staging").tempdir_in(&parent)?;
        Ok(Staging { dest: dest.to_path_buf(), dir, files: Vec::new() })
    }

    /// Writes `name` through `f`.
    pub fn write<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let mut w = BufWriter::new(File::create(self.dir.path().join(name))?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes the manifest last and moves everything into the destination.
    pub fn commit(mut self, mut manifest: RunManifest) -> Result<Vec<PathBuf>> {
        manifest.outputs = self.files.clone();
        manifest.outputs.push(MANIFEST_FILE.into());
        manifest.finished_unix = unix_now();
        self.write(MANIFEST_FILE, |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest).map_err(io::Error::from)?;
            writeln!(w)?;
            Ok(())
        })?;
        fs::create_dir_all(&self.dest).map_err(|e| with_path(&self.dest, e))?;
        let mut out = Vec::new();
        for name in &self.files {
            let target = self.dest.join(name);
            fs::rename(self.dir.path().join(name), &target).map_err(|e| with_path(&target, e))?;
            out.push(target);
        }
        Ok(out)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    serde_json::from_str(&read_input(&path)?)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest {
            subcommand: "test".into(),
            version: "0".into(),
            config: Config::default(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            threads: 1,
            started_unix: 0,
            finished_unix: 0,
            warnings: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    #[test]
    fn nothing_lands_until_commit() {
        let root = tempfile::tempdir().unwrap();
        let dest = root.path().join("run");
        let mut s = Staging::new(&dest).unwrap();
        s.write("a.txt", |w| Ok(w.write_all(b"x")?)).unwrap();
        assert!(!dest.exists());
        drop(s);
        assert!(!dest.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);

        let mut s = Staging::new(&dest).unwrap();
        s.write("a.txt", |w| Ok(w.write_all(b"x")?)).unwrap();
        s.commit(manifest()).unwrap();
        assert_eq!(fs::read_to_string(dest.join("a.txt")).unwrap(), "x");
        let m = read_manifest(&dest).unwrap();
        assert_eq!(m.outputs, vec!["a.txt".to_string(), MANIFEST_FILE.to_string()]);
    }

    #[test]
    fn digest_and_missing_input() {
        let root = tempfile::tempdir().unwrap();
        let p = root.path().join("f");
        fs::write(&p, "abc").unwrap();
        assert_eq!(digest_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let err = digest_file(&root.path().join("nope")).unwrap_err();
        assert_eq!(err.class(), "IoError");
        assert!(err.to_string().contains("nope"));
        assert!(matches!(read_manifest(root.path()), Err(Error::MissingArtifact(_))));
    }
}
