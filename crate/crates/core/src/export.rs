//! Text serializations shared by the library and the command line:
//! 17-significant-digit CSV floats, sorted-key JSON and ASCII PGM heatmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Round-trippable float text with 17 significant digits.
#[inline]
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Pretty JSON with object keys in sorted order and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// CSV text with a header row and one row per entry of `rows`.
pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> Result<String> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch(format!(
                "row of {} values for {} columns",
                row.len(),
                header.len()
            )));
        }
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Value range of a PGM image, written next to it as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub max: f64,
    /// Number of masked cells, drawn as 0.
    pub masked: usize,
}

/// Row-major P2 image with values mapped linearly onto 0..=255. Masked cells
/// are excluded from the range and drawn black.
pub fn pgm_p2(values: &[f64], rows: usize, cols: usize, mask: Option<&[bool]>) -> Result<(String, PgmSidecar)> {
    if values.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!("{} values for {rows}x{cols}", values.len())));
    }
    if let Some(m) = mask {
        if m.len() != values.len() {
            return Err(Error::ShapeMismatch("mask length".into()));
        }
    }
    let visible = |k: usize| mask.map_or(true, |m| m[k]);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (k, &v) in values.iter().enumerate() {
        if visible(k) {
            if !v.is_finite() {
                return Err(Error::NonFinite(v));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        lo = 0.0;
        hi = 0.0;
    }
    let span = hi - lo;
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| {
                let k = r * cols + c;
                let level = if !visible(k) || span == 0.0 {
                    0
                } else {
                    ((values[k] - lo) / span * 255.0).round() as u32
                };
                level.to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    let masked = (0..values.len()).filter(|&k| !visible(k)).count();
    Ok((
        out,
        PgmSidecar {
            rows,
            cols,
            min: lo,
            max: hi,
            masked,
        },
    ))
}
