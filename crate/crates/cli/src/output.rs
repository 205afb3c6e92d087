//! Output directory handling and the plain file formats the runner emits.

use std::path::{Component, Path, PathBuf};

use avae_core::Tensor;

use crate::CliError;

/// A directory every artifact of a run is written under.
pub struct OutDir {
    root: PathBuf,
    overwrite: bool,
}

impl OutDir {
    pub fn new(root: &Path, overwrite: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            overwrite,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolves a relative artifact name, refusing escapes and, unless
    /// overwriting is allowed, existing files.
    pub fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        let rel = Path::new(name);
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(CliError::Config(format!("artifact name `{name}` must be a plain relative path")));
        }
        let p = self.root.join(rel);
        if !self.overwrite && p.exists() {
            return Err(CliError::Config(format!(
                "{} already exists (pass --overwrite to replace it)",
                p.display()
            )));
        }
        Ok(p)
    }

    /// Checks every name up front so a run fails before doing any work.
    pub fn preflight(&self, names: &[&str]) -> Result<(), CliError> {
        for n in names {
            self.path(n)?;
        }
        Ok(())
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.path(name)?;
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn subdir(&self, name: &str) -> Result<OutDir, CliError> {
        let rel = Path::new(name);
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(CliError::Config(format!("directory name `{name}` must be a plain relative path")));
        }
        OutDir::new(&self.root.join(rel), self.overwrite)
    }
}

/// Binary greyscale image: one byte per cell, row-major, scaled so the
/// largest entry maps to 255.
pub fn pgm(m: &Tensor) -> Vec<u8> {
    let (h, w) = (m.rows(), m.cols());
    let max = m.data().iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if max > 0.0 {
            (255.0 * (v.max(0.0) / max)).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Matrix as CSV with a header of column indices and a leading row index.
pub fn matrix_csv(m: &Tensor) -> String {
    let mut s = String::from("row");
    for j in 0..m.cols() {
        s.push_str(&format!(",{j}"));
    }
    s.push('\n');
    for i in 0..m.rows() {
        s.push_str(&i.to_string());
        for v in m.row_slice(i) {
            s.push_str(&format!(",{v:e}"));
        }
        s.push('\n');
    }
    s
}
