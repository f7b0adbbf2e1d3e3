//! Text artifacts: 6-significant-digit numbers and an output-directory lock.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

/// `x` rounded to 6 significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Shortest decimal form of [`round6`]`(x)`.
pub fn fmt6(x: f64) -> String {
    let r = round6(x);
    if r == 0.0 {
        "0".to_owned()
    } else {
        r.to_string()
    }
}

pub fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io_error(path))
}

/// Held while a command writes into a directory; removed on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

pub const LOCK_NAME: &str = ".samba.lock";

impl OutputLock {
    /// Creates `dir` if needed and claims it.
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "output directory {} is in use by another command (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_error(&path)(e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
