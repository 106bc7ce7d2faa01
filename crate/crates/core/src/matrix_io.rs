//! Plain-text real matrix format used for features and spectrogram dumps.
//!
//! ```text
//! # farfield-matrix v1
//! # optional comment lines
//! rows <R> cols <C>
//! <C whitespace-separated values>   (R lines)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &str = "# farfield-matrix v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TextMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    pub comments: Vec<String>,
}

impl TextMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} values for {rows}x{cols} matrix", values.len())));
        }
        Ok(Self { rows, cols, values, comments: Vec::new() })
    }

    pub fn with_comment(mut self, c: impl Into<String>) -> Self {
        self.comments.push(c.into());
        self
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MATRIX_MAGIC);
        s.push('\n');
        for c in &self.comments {
            let _ = writeln!(s, "# {c}");
        }
        let _ = writeln!(s, "rows {} cols {}", self.rows, self.cols);
        for r in 0..self.rows {
            let row = &self.values[r * self.cols..(r + 1) * self.cols];
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MATRIX_MAGIC) {
            return Err(Error::Parse("missing matrix header".into()));
        }
        let mut comments = Vec::new();
        let dims = loop {
            match lines.next() {
                Some(l) if l.starts_with('#') => comments.push(l.trim_start_matches('#').trim().to_string()),
                Some(l) => break l,
                None => return Err(Error::Parse("missing dimensions line".into())),
            }
        };
        let parts: Vec<&str> = dims.split_whitespace().collect();
        let (rows, cols) = match parts.as_slice() {
            ["rows", r, "cols", c] => (
                r.parse().map_err(|_| Error::Parse(format!("bad row count {r}")))?,
                c.parse().map_err(|_| Error::Parse(format!("bad column count {c}")))?,
            ),
            _ => return Err(Error::Parse(format!("bad dimensions line: {dims}"))),
        };
        let values = lines
            .flat_map(str::split_whitespace)
            .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad value {v}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut m = Self::new(rows, cols, values)?;
        m.comments = comments;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| Error::Io { path: path.into(), source })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::parse(&text)
    }
}
