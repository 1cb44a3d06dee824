//! Output-directory layout and atomic file promotion.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_FILE: &str = "dataset.stcd";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_DIR: &str = "logs";
pub const REPORT_DIR: &str = "reports";
pub const PLOT_DIR: &str = "plotdata";

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join(DATASET_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(CHECKPOINT_FILE)
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join(LOG_DIR).join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join(REPORT_DIR).join(name)
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join(PLOT_DIR).join(name)
    }
}

/// Writes through a temp file in the target directory, then renames over `path`.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("promoting {}", path.display()))?;
    log::debug!("wrote {}", path.display());
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, |w| Ok(w.write_all(bytes)?))
}
