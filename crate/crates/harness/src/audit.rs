//! Every file the harness opens goes through here, so a run can report
//! exactly what it touched.

use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Read,
    Write,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub path: PathBuf,
    pub mode: Mode,
}

static LOG: Mutex<Vec<Access>> = Mutex::new(Vec::new());

fn note(path: &Path, mode: Mode) {
    let path = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
    LOG.lock().unwrap_or_else(|e| e.into_inner()).push(Access { path, mode });
}

pub fn open(path: &Path) -> io::Result<File> {
    let f = File::open(path)?;
    note(path, Mode::Read);
    Ok(f)
}

pub fn read_to_string(path: &Path) -> io::Result<String> {
    let s = fs::read_to_string(path)?;
    note(path, Mode::Read);
    Ok(s)
}

pub fn read(path: &Path) -> io::Result<Vec<u8>> {
    let b = fs::read(path)?;
    note(path, Mode::Read);
    Ok(b)
}

/// Creates (truncating) a file, making parent directories as needed.
pub fn create(path: &Path) -> io::Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let f = OpenOptions::new().write(true).create(true).truncate(true).open(path)?;
    note(path, Mode::Write);
    Ok(f)
}

pub fn write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    use std::io::Write;
    create(path)?.write_all(bytes)
}

/// Accesses recorded so far in this process.
pub fn accesses() -> Vec<Access> {
    LOG.lock().unwrap_or_else(|e| e.into_inner()).clone()
}

pub fn clear() {
    LOG.lock().unwrap_or_else(|e| e.into_inner()).clear();
}
