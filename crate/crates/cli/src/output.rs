//! CSV and manifest writing. Floats are written with 17 significant digits
//! so every value round-trips exactly.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// `x` in scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Creates `dir` (and parents) or reports it as unwritable.
pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    let probe = dir.join(".write-probe");
    File::create(&probe).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    fs::remove_file(&probe).map_err(|source| CliError::Io { path: probe, source })
}

/// A CSV file with a fixed header.
pub struct Table {
    path: PathBuf,
    writer: csv::Writer<File>,
    width: usize,
}

impl Table {
    pub fn create<S: AsRef<str>>(path: PathBuf, header: &[S]) -> Result<Self, CliError> {
        let file = File::create(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(header.iter().map(AsRef::as_ref))
            .map_err(|source| CliError::Csv { path: path.clone(), source })?;
        Ok(Self { path, writer, width: header.len() })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        debug_assert_eq!(fields.len(), self.width, "row width for {}", self.path.display());
        self.writer
            .write_record(fields)
            .map_err(|source| CliError::Csv { path: self.path.clone(), source })
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.writer
            .flush()
            .map_err(|source| CliError::Io { path: self.path.clone(), source })?;
        Ok(self.path)
    }
}

pub fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).map_err(|source| CliError::Io { path: path.clone(), source })?;
    Ok(path)
}
