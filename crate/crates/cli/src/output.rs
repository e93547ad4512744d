use std::io::Write;
use std::path::{Path, PathBuf};

use crate::{CliError, CliResult};

/// Writes next to the target and renames, so a failed command never leaves
/// a truncated file behind.
pub fn write_atomic(path: &Path, contents: &str) -> CliResult {
    let err = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(contents.as_bytes()).map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

/// `--out` file when given, stdout otherwise.
pub struct Sink(Option<PathBuf>);

impl Sink {
    pub fn new(out: Option<PathBuf>) -> Self {
        Self(out)
    }

    pub fn emit(&self, text: &str) -> CliResult {
        match &self.0 {
            Some(p) => write_atomic(p, text),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(text.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(|source| CliError::Write {
                        path: PathBuf::from("<stdout>"),
                        source,
                    })
            }
        }
    }
}
