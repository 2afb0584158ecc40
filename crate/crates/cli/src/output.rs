use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const OUTPUT_DIR_ENV: &str = "PLAB_OUTPUT_DIR";

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn new<T: Serialize>(config: &T, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: crate::config::hash(config)?,
            seed,
        })
    }

    fn comment_lines(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".into(), |s| s.to_string());
        format!(
            "# tool: {} {}\n# config_sha256: {}\n# seed: {seed}\n",
            self.tool, self.version, self.config_sha256
        )
    }
}

/// Flag or config value, then `$PLAB_OUTPUT_DIR`, then the working directory.
pub fn output_dir(configured: Option<&Path>) -> Result<PathBuf> {
    let dir = configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?))
}

/// CSV preceded by `#` provenance lines.
pub fn write_csv(
    path: &Path,
    provenance: &Provenance,
    body: impl FnOnce(&mut dyn Write) -> plab_core::Result<()>,
) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(provenance.comment_lines().as_bytes())?;
    body(&mut out).with_context(|| format!("writing {}", path.display()))?;
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
