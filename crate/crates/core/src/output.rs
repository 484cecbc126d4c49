//! CSV helpers with fixed 17-significant-digit formatting.

use std::io::{self, Write};

/// Formats a float with 17 significant digits (round-trip exact, stable across runs).
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a header row and then numeric rows.
pub fn write_csv<W: Write>(mut w: W, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> io::Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt_num(v)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Writes a header row and then pre-formatted rows.
pub fn write_rows<W: Write>(mut w: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> io::Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
