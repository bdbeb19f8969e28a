//! 8-bit binary PGM (P5) output for attention maps: min-max normalized to
//! 0..=255, with a constant map rendered as mid-gray 128.

use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};

/// Renders a row-major `height x width` map to PGM bytes.
pub fn pgm_bytes(values: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    assert_eq!(values.len(), height * width);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Failed("attention map contains non-finite values".into()));
    }
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    if max > min {
        let scale = 255.0 / f64::from(max - min);
        out.extend(
            values
                .iter()
                .map(|&v| (f64::from(v - min) * scale).round() as u8),
        );
    } else {
        out.extend(std::iter::repeat(128u8).take(values.len()));
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    fs::write(path, pgm_bytes(values, height, width)?).map_err(|e| CliError::io(path, e))
}

/// Parses P5 bytes back into `(pixels, height, width)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let bad = || CliError::Failed("not a P5 image".into());
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(bad)?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad())?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(bad());
    }
    let dims = lines.next().ok_or_else(bad)?;
    let (w, h) = dims.split_once(' ').ok_or_else(bad)?;
    let width: usize = w.parse().map_err(|_| bad())?;
    let height: usize = h.parse().map_err(|_| bad())?;
    if lines.next() != Some("255") {
        return Err(bad());
    }
    let pixels = bytes[header_end + 1..].to_vec();
    if pixels.len() != width * height {
        return Err(CliError::Failed(format!(
            "pixel payload {} does not match {width}x{height}",
            pixels.len()
        )));
    }
    Ok((pixels, height, width))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_spans_the_full_byte_range() {
        let values = [0.25f32, 0.5, 0.75, 1.0];
        let bytes = pgm_bytes(&values, 2, 2).unwrap();
        let (pixels, h, w) = parse_pgm(&bytes).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(pixels, vec![0, 85, 170, 255]);
    }

    #[test]
    fn constant_maps_render_mid_gray() {
        let values = [0.4f32; 6];
        let (pixels, ..) = parse_pgm(&pgm_bytes(&values, 2, 3).unwrap()).unwrap();
        assert!(pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(pgm_bytes(&[0.0, f32::NAN], 1, 2).is_err());
    }
}
