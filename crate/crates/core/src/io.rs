//! Frame files and JSON reports.
//!
//! Text formats store one image row per line, bottom row first, so the
//! first data line is row 0. PGM stores the top row first, as image
//! viewers expect.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Grid, ImageFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFormat {
    /// Header `rows cols pixel_size` then whitespace-separated rows.
    #[default]
    GridText,
    /// Comma-separated rows without a header.
    Csv,
    /// Binary PGM (`P5`), up to 16 bits per sample.
    Pgm16,
}

impl FrameFormat {
    pub fn needs_pixel_size(self) -> bool {
        !matches!(self, FrameFormat::GridText)
    }

    /// Guesses the format from a file extension: `.csv`, `.pgm`, anything
    /// else is grid text.
    pub fn from_path(path: &Path) -> FrameFormat {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "csv" => FrameFormat::Csv,
            Some(e) if e == "pgm" => FrameFormat::Pgm16,
            _ => FrameFormat::GridText,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::GridText => "txt",
            FrameFormat::Csv => "csv",
            FrameFormat::Pgm16 => "pgm",
        }
    }
}

impl FromStr for FrameFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid_text" => Ok(FrameFormat::GridText),
            "csv" => Ok(FrameFormat::Csv),
            "pgm16" => Ok(FrameFormat::Pgm16),
            other => Err(Error::Unknown {
                kind: "frame format",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for FrameFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameFormat::GridText => "grid_text",
            FrameFormat::Csv => "csv",
            FrameFormat::Pgm16 => "pgm16",
        })
    }
}

fn parse_error(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// Splits a line into `(column, token)` pairs, columns 1-based.
fn tokens(line: &str, sep: Option<char>) -> Vec<(usize, &str)> {
    match sep {
        None => line
            .char_indices()
            .filter(|&(i, c)| !c.is_whitespace() && (i == 0 || line[..i].ends_with(char::is_whitespace)))
            .map(|(i, _)| {
                let rest = &line[i..];
                let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
                (i + 1, &rest[..end])
            })
            .collect(),
        Some(sep) => {
            let mut out = Vec::new();
            let mut start = 0;
            for piece in line.split(sep) {
                let lead = piece.len() - piece.trim_start().len();
                out.push((start + lead + 1, piece.trim()));
                start += piece.len() + sep.len_utf8();
            }
            out
        }
    }
}

fn parse_value(line: usize, column: usize, token: &str) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| parse_error(line, column, format!("'{token}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(line, column, format!("'{token}' is not finite")));
    }
    Ok(v)
}

/// Parses data rows starting at `first_line` (1-based line number of
/// `lines[0]`). Blank lines are skipped.
fn parse_rows(lines: &[&str], first_line: usize, sep: Option<char>, expect: Option<(usize, usize)>) -> Result<(usize, usize, Vec<f64>)> {
    let mut counts = Vec::new();
    let mut cols = expect.map(|e| e.1);
    let mut rows = 0;
    let mut last_line = first_line;
    for (offset, line) in lines.iter().enumerate() {
        let lineno = first_line + offset;
        if line.trim().is_empty() {
            continue;
        }
        last_line = lineno;
        if let Some((r, _)) = expect {
            if rows == r {
                return Err(parse_error(lineno, 1, format!("more than the {r} rows declared in the header")));
            }
        }
        let toks = tokens(line, sep);
        let width = *cols.get_or_insert(toks.len());
        if toks.len() != width {
            return Err(parse_error(
                lineno,
                toks.get(width).map_or(line.len() + 1, |t| t.0),
                format!("row has {} values, expected {width}", toks.len()),
            ));
        }
        for (column, tok) in toks {
            counts.push(parse_value(lineno, column, tok)?);
        }
        rows += 1;
    }
    if let Some((r, _)) = expect {
        if rows != r {
            return Err(parse_error(last_line + 1, 1, format!("found {rows} rows, header declares {r}")));
        }
    }
    if rows == 0 {
        return Err(parse_error(first_line, 1, "no data rows"));
    }
    Ok((rows, cols.unwrap_or(0), counts))
}

fn parse_grid_text(text: &str) -> Result<ImageFrame> {
    let lines: Vec<&str> = text.lines().collect();
    let Some(header_at) = lines.iter().position(|l| !l.trim().is_empty()) else {
        return Err(parse_error(1, 1, "empty file"));
    };
    let header = tokens(lines[header_at], None);
    let line = header_at + 1;
    if header.len() != 3 {
        return Err(parse_error(line, 1, "header must be 'rows cols pixel_size'"));
    }
    let dim = |(column, tok): (usize, &str)| -> Result<usize> {
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| parse_error(line, column, format!("'{tok}' is not a positive integer")))
    };
    let rows = dim(header[0])?;
    let cols = dim(header[1])?;
    let a = parse_value(line, header[2].0, header[2].1)?;
    if !(a > 0.0) {
        return Err(parse_error(line, header[2].0, "pixel size must be positive"));
    }
    let (_, _, counts) = parse_rows(&lines[header_at + 1..], line + 1, None, Some((rows, cols)))?;
    ImageFrame::new(rows, cols, a, counts)
}

fn parse_csv(text: &str, pixel_size: f64) -> Result<ImageFrame> {
    let lines: Vec<&str> = text.lines().collect();
    let (rows, cols, counts) = parse_rows(&lines, 1, Some(','), None)?;
    ImageFrame::new(rows, cols, pixel_size, counts)
}

fn parse_pgm(bytes: &[u8], pixel_size: f64) -> Result<ImageFrame> {
    // Header: magic, width, height, maxval separated by whitespace and
    // '#' comments, then a single whitespace byte before the raster.
    let mut pos = 0;
    let mut line = 1;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            if bytes[pos] == b'\n' {
                line += 1;
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_error(line, 1, "truncated PGM header"));
        }
        fields.push((line, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(parse_error(fields[0].0, 1, format!("expected magic 'P5', found '{}'", fields[0].1)));
    }
    let num = |i: usize, what: &str, max: usize| -> Result<usize> {
        let (l, ref s) = fields[i];
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0 && v <= max)
            .ok_or_else(|| parse_error(l, 1, format!("bad PGM {what} '{s}'")))
    };
    let cols = num(1, "width", usize::MAX)?;
    let rows = num(2, "height", usize::MAX)?;
    let maxval = num(3, "maxval", 65535)?;
    pos += 1;
    let wide = maxval > 255;
    let bpp = if wide { 2 } else { 1 };
    let need = rows * cols * bpp;
    let raster = &bytes[pos.min(bytes.len())..];
    if raster.len() < need {
        return Err(parse_error(line, 1, format!("PGM raster has {} bytes, expected {need}", raster.len())));
    }
    let mut counts = vec![0.0; rows * cols];
    for file_row in 0..rows {
        let r = rows - 1 - file_row;
        for c in 0..cols {
            let k = file_row * cols + c;
            let v = if wide {
                u16::from_be_bytes([raster[2 * k], raster[2 * k + 1]]) as usize
            } else {
                raster[k] as usize
            };
            if v > maxval {
                return Err(parse_error(line, 1, format!("sample {v} exceeds maxval {maxval}")));
            }
            counts[r * cols + c] = v as f64;
        }
    }
    ImageFrame::new(rows, cols, pixel_size, counts)
}

/// Reads a frame. Headerless formats take the pixel size from
/// `pixel_size`; for grid text a given `pixel_size` overrides the header.
pub fn read_frame(path: &Path, format: FrameFormat, pixel_size: Option<f64>) -> Result<ImageFrame> {
    if let Some(a) = pixel_size {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Config(format!("pixel_size must be positive, got {a}")));
        }
    }
    let headerless = |a: Option<f64>| {
        a.ok_or_else(|| Error::Config(format!("format {format} has no header; a pixel size is required")))
    };
    match format {
        FrameFormat::GridText => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let frame = parse_grid_text(&text)?;
            match pixel_size {
                Some(a) => ImageFrame::new(frame.rows(), frame.cols(), a, frame.counts().to_vec()),
                None => Ok(frame),
            }
        }
        FrameFormat::Csv => {
            let a = headerless(pixel_size)?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text, a)
        }
        FrameFormat::Pgm16 => {
            let a = headerless(pixel_size)?;
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_pgm(&bytes, a)
        }
    }
}

/// Serializes a frame. Text formats use shortest round-trip decimal
/// representations; PGM requires integer counts in `0..=65535`.
pub fn frame_bytes(frame: &ImageFrame, format: FrameFormat) -> Result<Vec<u8>> {
    let grid: Grid = *frame.grid();
    let mut out = Vec::new();
    match format {
        FrameFormat::GridText | FrameFormat::Csv => {
            let sep = if format == FrameFormat::Csv { "," } else { " " };
            if format == FrameFormat::GridText {
                writeln!(out, "{} {} {}", grid.rows, grid.cols, grid.pixel_size).expect("vec write");
            }
            for r in 0..grid.rows {
                let row = &frame.counts()[r * grid.cols..(r + 1) * grid.cols];
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(sep)).expect("vec write");
            }
        }
        FrameFormat::Pgm16 => {
            write!(out, "P5\n{} {}\n65535\n", grid.cols, grid.rows).expect("vec write");
            for r in (0..grid.rows).rev() {
                for c in 0..grid.cols {
                    let v = frame.get(r, c);
                    if !((0.0..=65535.0).contains(&v) && v.fract() == 0.0) {
                        return Err(Error::InvalidFrame(format!(
                            "pgm16 needs integer counts in 0..=65535, found {v} at row {r}, column {c}"
                        )));
                    }
                    out.extend_from_slice(&(v as u16).to_be_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn write_frame(frame: &ImageFrame, path: &Path, format: FrameFormat) -> Result<()> {
    let bytes = frame_bytes(frame, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// JSON formatter that writes every float with 17 significant digits.
#[derive(Default)]
struct FullPrecision(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Compact single-line variant, for JSON-lines output.
#[derive(Default)]
struct FullPrecisionCompact;

impl serde_json::ser::Formatter for FullPrecisionCompact {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Canonical pretty JSON: fields in declaration order, floats with 17
/// significant digits.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision::default());
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Canonical JSON on a single line.
pub fn to_canonical_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecisionCompact);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = to_canonical_json(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// CSV text with a header line and one row per record.
pub fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn grid_text_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.txt", b"2 3 100\n1 2 3\n4 5 6.5\n");
        let f = read_frame(&p, FrameFormat::GridText, None).unwrap();
        assert_eq!((f.rows(), f.cols(), f.pixel_size()), (2, 3, 100.0));
        assert_eq!(f.get(0, 0), 1.0);
        assert_eq!(f.get(1, 2), 6.5);
        let g = read_frame(&p, FrameFormat::GridText, Some(117.0)).unwrap();
        assert_eq!(g.pixel_size(), 117.0);
    }

    #[test]
    fn ragged_row_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.txt", b"2 3 100\n1 2 3\n4 5\n");
        match read_frame(&p, FrameFormat::GridText, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_names_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.csv", b"1,2,3\n4, x,6\n");
        match read_frame(&p, FrameFormat::Csv, Some(100.0)) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 4)),
            other => panic!("{other:?}"),
        }
        let p = write(&dir, "g.txt", b"1 2 100\n7  zz\n");
        match read_frame(&p, FrameFormat::GridText, None) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 4)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_header_and_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.txt", b"2 3\n1 2 3\n");
        assert!(matches!(read_frame(&p, FrameFormat::GridText, None), Err(Error::Parse { line: 1, .. })));
        let p = write(&dir, "b.txt", b"2 3 100\n1 2 3\n");
        assert!(matches!(read_frame(&p, FrameFormat::GridText, None), Err(Error::Parse { .. })));
        let p = write(&dir, "c.txt", b"1 3 100\n1 2 3\n1 2 3\n");
        assert!(matches!(read_frame(&p, FrameFormat::GridText, None), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn headerless_formats_need_pixel_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.csv", b"1,2\n3,4\n");
        assert!(matches!(read_frame(&p, FrameFormat::Csv, None), Err(Error::Config(_))));
        let f = read_frame(&p, FrameFormat::Csv, Some(50.0)).unwrap();
        assert_eq!(f.get(1, 0), 3.0);
    }

    #[test]
    fn pgm_puts_first_raster_row_on_top() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P5\n# comment\n2 2\n65535\n".to_vec();
        for v in [1u16, 2, 300, 65535] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let p = write(&dir, "f.pgm", &bytes);
        let f = read_frame(&p, FrameFormat::Pgm16, Some(100.0)).unwrap();
        assert_eq!(f.get(1, 0), 1.0);
        assert_eq!(f.get(1, 1), 2.0);
        assert_eq!(f.get(0, 0), 300.0);
        assert_eq!(f.get(0, 1), 65535.0);
        let p8 = write(&dir, "g.pgm", b"P5 2 1 255\n\x07\x09");
        let g = read_frame(&p8, FrameFormat::Pgm16, Some(100.0)).unwrap();
        assert_eq!(g.counts(), &[7.0, 9.0]);
        let bad = write(&dir, "h.pgm", b"P2 2 1 255\n1 2");
        assert!(read_frame(&bad, FrameFormat::Pgm16, Some(100.0)).is_err());
    }

    #[test]
    fn pgm_rejects_fractional_counts() {
        let f = ImageFrame::new(1, 2, 100.0, vec![1.5, 2.0]).unwrap();
        assert!(frame_bytes(&f, FrameFormat::Pgm16).is_err());
    }

    #[test]
    fn canonical_json_uses_seventeen_digits() {
        let s = to_canonical_json_line(&vec![0.1f64, 7823.0, -1.0 / 3.0]).unwrap();
        assert_eq!(s, "[1.0000000000000001e-1,7.8230000000000000e3,-3.3333333333333331e-1]");
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![0.1, 7823.0, -1.0 / 3.0]);
    }

    #[test]
    fn format_names_and_extensions() {
        assert_eq!("pgm16".parse::<FrameFormat>().unwrap(), FrameFormat::Pgm16);
        assert!("tiff".parse::<FrameFormat>().is_err());
        assert_eq!(FrameFormat::from_path(Path::new("a/b.CSV")), FrameFormat::Csv);
        assert_eq!(FrameFormat::from_path(Path::new("a/b.dat")), FrameFormat::GridText);
    }
}
