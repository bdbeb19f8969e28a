//! Minimal CSV writing and reading. Fields are plain numbers and short
//! names, never quoted; floats use the shortest representation that parses
//! back to the identical value, so emitted files are lossless.

use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};

/// Joins fields into one line, rejecting separators inside a field.
pub fn csv_line(fields: &[String]) -> Result<String> {
    for f in fields {
        if f.contains(',') || f.contains('\n') {
            return Err(CliError::Failed(format!("csv field '{f}' contains a separator")));
        }
    }
    Ok(fields.join(","))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(CliError::Failed(format!(
                "csv row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        text.push_str(&csv_line(row)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a CSV written by this crate: `(header, rows)`.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Failed(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

/// A grid of values as one CSV row per grid row, without a header.
pub fn write_grid(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    assert_eq!(values.len(), height * width);
    let mut text = String::new();
    for row in values.chunks(width) {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&csv_line(&fields)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a headerless grid back as row-major values with its dimensions.
pub fn read_grid(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut values = Vec::new();
    let mut height = 0;
    let mut width = None;
    for line in text.lines() {
        let row: Vec<f32> = line
            .split(',')
            .map(|f| {
                f.parse()
                    .map_err(|_| CliError::Failed(format!("{}: bad value '{f}'", path.display())))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(CliError::Failed(format!("{}: ragged rows", path.display())))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    Ok((values, height, width.unwrap_or(0)))
}
