//! Delimited-text helpers and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Rows of a delimited file whose header has been checked.
pub struct Table {
    pub path: String,
    pub rows: Vec<(usize, csv::StringRecord)>,
}

impl Table {
    pub fn read(path: &Path, header: &[&str]) -> Result<Table> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        Self::parse(&path.display().to_string(), &bytes, header)
    }

    pub fn parse(name: &str, bytes: &[u8], header: &[&str]) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(bytes);
        let got = rdr
            .headers()
            .map_err(|e| Error::parse(name, 1, e.to_string()))?
            .clone();
        if got.len() != header.len() || got.iter().zip(header).any(|(a, b)| a != *b) {
            return Err(Error::parse(
                name,
                1,
                format!("expected header `{}`, found `{}`", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::parse(name, line, e.to_string()))?;
            if rec.len() != header.len() {
                return Err(Error::parse(name, line, format!("expected {} fields, found {}", header.len(), rec.len())));
            }
            rows.push((line, rec));
        }
        Ok(Table {
            path: name.to_string(),
            rows,
        })
    }

    pub fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(self.path.clone(), line, msg)
    }

    pub fn f64_at(&self, line: usize, rec: &csv::StringRecord, col: usize) -> Result<f64> {
        rec[col]
            .parse::<f64>()
            .map_err(|_| self.err(line, format!("not a number: `{}`", &rec[col])))
    }
}

/// Accumulates delimited rows in memory; the file is written in one go.
pub struct TableWriter {
    inner: csv::Writer<Vec<u8>>,
}

impl TableWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut inner = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        inner.write_record(header).expect("in-memory write");
        TableWriter { inner }
    }

    pub fn row<I, T>(&mut self, fields: I)
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.inner.write_record(fields).expect("in-memory write");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.inner.into_inner().expect("in-memory flush")
    }
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
