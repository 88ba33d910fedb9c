use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation. No timestamps or thread counts, so repeated
/// runs produce the same file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub formats: Vec<String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, seed: u64) -> Self {
        RunManifest {
            tool: "npe",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args,
            seed,
            formats: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn format(&mut self, f: impl ToString) {
        let f = f.to_string();
        if !self.formats.contains(&f) {
            self.formats.push(f);
        }
    }

    /// Digests a file, or every file under a directory in name order.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let mut files = Vec::new();
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.sort();
            files.extend(entries.into_iter().filter(|p| p.is_file()));
        } else {
            files.push(path.to_path_buf());
        }
        for f in files {
            let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
            let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            self.inputs.push(InputDigest { path: f.display().to_string(), sha256 });
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Written to `path`, else next to the first output, else to stderr.
    pub fn emit(&self, path: Option<&Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        let target = match path {
            Some(p) => Some(p.to_path_buf()),
            None => self.outputs.first().map(|o| {
                let o = Path::new(o);
                let name = o.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
                o.with_file_name(format!("{name}.manifest.json"))
            }),
        };
        match target {
            Some(t) => fs::write(&t, json + "\n").with_context(|| format!("writing {}", t.display()))?,
            None => eprintln!("{json}"),
        }
        Ok(())
    }
}
