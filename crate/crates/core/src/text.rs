//! Small helpers shared by every text format the crate reads or writes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 17 significant digits: enough for any `f64` to survive a text round-trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Like [`fmt_f64`] but renders `None` as `NA`.
pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), fmt_f64)
}

pub(crate) fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .map_err(|e| Error::parse(path, line, format!("bad number `{tok}`: {e}")))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Line cursor over a versioned model file: `key value` header lines followed
/// by whitespace-separated numeric rows.
pub(crate) struct Lines<'a> {
    path: &'a Path,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    pub fn new(path: &'a Path, body: &'a str) -> Self {
        Self {
            path,
            iter: body.lines().enumerate(),
            line: 0,
        }
    }

    pub fn next_line(&mut self) -> Result<&'a str> {
        match self.iter.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(Error::parse(self.path, self.line + 1, "unexpected end of file")),
        }
    }

    pub fn expect_version(&mut self, expected: &str) -> Result<()> {
        let found = self.next_line()?.trim();
        if found != expected {
            return Err(Error::VersionMismatch {
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
        Ok(())
    }

    pub fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next_line()?;
        let mut parts = l.splitn(2, ' ');
        match (parts.next(), parts.next()) {
            (Some(k), Some(v)) if k == key => Ok(v.trim()),
            _ => Err(self.err(format!("expected `{key} <value>`, found `{l}`"))),
        }
    }

    pub fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.parse()
            .map_err(|_| self.err(format!("`{key}` must be a nonnegative integer, found `{v}`")))
    }

    pub fn keyed_u64(&mut self, key: &str) -> Result<u64> {
        let v = self.keyed(key)?;
        v.parse()
            .map_err(|_| self.err(format!("`{key}` must be a nonnegative integer, found `{v}`")))
    }

    pub fn keyed_f64(&mut self, key: &str) -> Result<f64> {
        let v = self.keyed(key)?;
        parse_f64(v, self.path, self.line)
    }

    pub fn row(&mut self, width: usize) -> Result<Vec<f64>> {
        let l = self.next_line()?;
        let vals = l
            .split_whitespace()
            .map(|t| parse_f64(t, self.path, self.line))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != width {
            return Err(self.err(format!("expected {width} values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{}:{}", self.path.display(), self.line)));
        }
        Ok(vals)
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line, msg)
    }
}

pub(crate) fn join_row(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(fmt_f64).collect::<Vec<_>>().join(" ")
}
