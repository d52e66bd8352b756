//! Errors and small helpers shared by the dataset readers and writers.

use std::io::BufRead;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub(crate) fn parse_field<T: FromStr>(field: Option<&str>, line: usize, what: &str) -> Result<T, DataError> {
    let raw = field.ok_or_else(|| DataError::Parse {
        line,
        msg: format!("missing field `{what}`"),
    })?;
    raw.trim().parse().map_err(|_| DataError::Parse {
        line,
        msg: format!("cannot parse `{what}` from {raw:?}"),
    })
}

/// Non-empty lines with their 1-based line numbers.
pub(crate) fn content_lines<R: BufRead>(r: R) -> impl Iterator<Item = Result<(usize, String), DataError>> {
    r.lines().enumerate().filter_map(|(idx, l)| match l {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((idx + 1, l))),
        Err(e) => Some(Err(DataError::Io(e))),
    })
}

/// Read one integer per line.
pub fn read_labels<R: BufRead>(r: R) -> Result<Vec<usize>, DataError> {
    content_lines(r)
        .map(|l| {
            let (no, line) = l?;
            parse_field(Some(line.as_str()), no, "label")
        })
        .collect()
}

pub fn write_labels<W: std::io::Write>(mut w: W, labels: &[usize]) -> Result<(), DataError> {
    for l in labels {
        writeln!(w, "{l}")?;
    }
    Ok(())
}
