//! CSV output with a one-line format marker.

use std::io::Write;

use crate::error::Result;

pub const CSV_MARKER: &str = "# qlandscape-csv v1";

/// A CSV writer whose first line is [`CSV_MARKER`].
pub fn csv_writer<W: Write>(mut w: W) -> Result<csv::Writer<W>> {
    writeln!(w, "{CSV_MARKER}")?;
    Ok(csv::Writer::from_writer(w))
}

/// Reads a marked CSV back as `(header, rows)`.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let body = text
        .strip_prefix(CSV_MARKER)
        .unwrap_or(text)
        .trim_start_matches('\n');
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}
