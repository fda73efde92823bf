//! Observation matrices: validated triplet storage, text formats, splits.
//!
//! The triplet list *is* the observation mask: a stored value of `0.0` is a
//! present observation, and a cell without a triplet is missing.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl Triplet {
    pub fn new(row: usize, col: usize, value: f64) -> Self {
        Triplet { row, col, value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RowSpan {
    row: usize,
    start: usize,
    end: usize,
}

/// A partially observed `n_rows x n_cols` matrix.
///
/// Triplets are kept sorted by `(row, col)`; only non-empty rows are indexed,
/// so construction never allocates in proportion to `n_rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMatrix {
    n_rows: usize,
    n_cols: usize,
    triplets: Vec<Triplet>,
    spans: Vec<RowSpan>,
}

impl ObservedMatrix {
    /// Validate and canonicalize. Rejects out-of-range indices, duplicate
    /// cells and non-finite values.
    pub fn new(n_rows: usize, n_cols: usize, mut triplets: Vec<Triplet>) -> Result<Self> {
        for t in &triplets {
            if t.row >= n_rows || t.col >= n_cols {
                return Err(Error::IndexOutOfRange {
                    row: t.row,
                    col: t.col,
                    n_rows,
                    n_cols,
                });
            }
            if !t.value.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite value at ({}, {})",
                    t.row, t.col
                )));
            }
        }
        triplets.sort_unstable_by_key(|t| (t.row, t.col));
        if let Some(w) = triplets
            .windows(2)
            .find(|w| w[0].row == w[1].row && w[0].col == w[1].col)
        {
            return Err(Error::DuplicateEntry {
                row: w[0].row,
                col: w[0].col,
            });
        }
        let spans = build_spans(&triplets);
        Ok(ObservedMatrix {
            n_rows,
            n_cols,
            triplets,
            spans,
        })
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        ObservedMatrix {
            n_rows,
            n_cols,
            triplets: Vec::new(),
            spans: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of observed entries.
    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    /// Non-empty rows in ascending order, with their entries sorted by column.
    pub fn rows(&self) -> impl ExactSizeIterator<Item = (usize, &[Triplet])> + '_ {
        self.spans
            .iter()
            .map(move |s| (s.row, &self.triplets[s.start..s.end]))
    }

    pub fn n_nonempty_rows(&self) -> usize {
        self.spans.len()
    }

    /// Entries of row `i` (empty slice when unobserved).
    pub fn row(&self, i: usize) -> &[Triplet] {
        match self.spans.binary_search_by_key(&i, |s| s.row) {
            Ok(k) => &self.triplets[self.spans[k].start..self.spans[k].end],
            Err(_) => &[],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let r = self.row(row);
        r.binary_search_by_key(&col, |t| t.col)
            .ok()
            .map(|k| r[k].value)
    }

    pub fn column_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_cols];
        for t in &self.triplets {
            counts[t.col] += 1;
        }
        counts
    }

    /// Same mask, values transformed by `f(triplet_index, triplet)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, &Triplet) -> f64) -> Self {
        let triplets = self
            .triplets
            .iter()
            .enumerate()
            .map(|(k, t)| Triplet::new(t.row, t.col, f(k, t)))
            .collect();
        ObservedMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            triplets,
            spans: self.spans.clone(),
        }
    }

    /// Observed set as a `(row, col)` list, sorted.
    pub fn mask(&self) -> Vec<(usize, usize)> {
        self.triplets.iter().map(|t| (t.row, t.col)).collect()
    }
}

fn build_spans(triplets: &[Triplet]) -> Vec<RowSpan> {
    let mut spans: Vec<RowSpan> = Vec::new();
    for (k, t) in triplets.iter().enumerate() {
        match spans.last_mut() {
            Some(s) if s.row == t.row => s.end = k + 1,
            _ => spans.push(RowSpan {
                row: t.row,
                start: k,
                end: k + 1,
            }),
        }
    }
    spans
}

/// On-disk formats accepted by [`load_triplets`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    /// `row col value` per line, 0-based, `#` comments.
    CooText,
    /// `userId,movieId,rating,timestamp` with a header line.
    MovielensCsv,
    /// One row per site, space separated `0`, `1` or `.` (missing).
    GenotypeDense,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coo-text" | "coo" => Ok(Format::CooText),
            "movielens-csv" | "movielens" => Ok(Format::MovielensCsv),
            "genotype-dense" | "genotype" => Ok(Format::GenotypeDense),
            other => Err(Error::InvalidParameter(format!("unknown format '{other}'"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::CooText => "coo-text",
            Format::MovielensCsv => "movielens-csv",
            Format::GenotypeDense => "genotype-dense",
        })
    }
}

/// Dense internal index -> external id, for formats with sparse external ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdMap {
    pub rows: Vec<u64>,
    pub cols: Vec<u64>,
}

impl IdMap {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// Conventional sidecar location: `<path>.ids.json`.
    pub fn sidecar_path(data_path: &Path) -> PathBuf {
        let mut s = data_path.as_os_str().to_owned();
        s.push(".ids.json");
        PathBuf::from(s)
    }
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub matrix: ObservedMatrix,
    pub id_map: Option<IdMap>,
}

/// Read a file in the named format. MovieLens ids are compacted and the map
/// returned alongside.
pub fn load_triplets(path: &Path, format: Format) -> Result<Loaded> {
    let reader = BufReader::new(File::open(path)?);
    match format {
        Format::CooText => Ok(Loaded {
            matrix: parse_coo_text(reader, None)?,
            id_map: None,
        }),
        Format::MovielensCsv => {
            let (matrix, ids) = parse_movielens_csv(reader)?;
            Ok(Loaded {
                matrix,
                id_map: Some(ids),
            })
        }
        Format::GenotypeDense => Ok(Loaded {
            matrix: parse_genotype_dense(reader)?,
            id_map: None,
        }),
    }
}

fn parse_index(tok: &str, line: usize) -> Result<usize> {
    if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::malformed(line, format!("bad index '{tok}'")));
    }
    tok.parse::<u64>()
        .ok()
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| Error::IndexOverflow(format!("line {line}: '{tok}' exceeds 64 bits")))
}

fn parse_value(tok: &str, line: usize) -> Result<f64> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::malformed(line, format!("bad value '{tok}'"))),
    }
}

/// Parse `# key=value ...` header tokens; unknown keys are ignored.
fn header_fields(comment: &str) -> HashMap<&str, &str> {
    comment
        .split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .collect()
}

fn shape_from_header(comment: &str, line: usize) -> Result<Option<(usize, usize)>> {
    let fields = header_fields(comment);
    match (fields.get("n"), fields.get("d")) {
        (Some(n), Some(d)) => Ok(Some((parse_index(n, line)?, parse_index(d, line)?))),
        _ => Ok(None),
    }
}

/// Parse coo-text. Shape precedence: `shape` argument, then a
/// `# n=<rows> d=<cols>` header comment, then `max index + 1`.
pub fn parse_coo_text<R: BufRead>(reader: R, shape: Option<(usize, usize)>) -> Result<ObservedMatrix> {
    let mut header_shape = None;
    let mut triplets = Vec::new();
    let mut lines_of = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::malformed(lineno, e.to_string()))?;
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        if let Some(comment) = body.strip_prefix('#') {
            if header_shape.is_none() {
                header_shape = shape_from_header(comment, lineno)?;
            }
            continue;
        }
        let mut toks = body.split_whitespace();
        let (Some(r), Some(c), Some(v), None) = (toks.next(), toks.next(), toks.next(), toks.next())
        else {
            return Err(Error::malformed(lineno, "expected 'row col value'"));
        };
        triplets.push(Triplet::new(
            parse_index(r, lineno)?,
            parse_index(c, lineno)?,
            parse_value(v, lineno)?,
        ));
        lines_of.push(lineno);
    }
    let (n, d) = match shape.or(header_shape) {
        Some(s) => s,
        None => {
            let extent = |f: fn(&Triplet) -> usize| -> Result<usize> {
                triplets
                    .iter()
                    .map(f)
                    .max()
                    .map_or(Ok(0), |m| {
                        m.checked_add(1)
                            .ok_or_else(|| Error::IndexOverflow("index equals 2^64 - 1".into()))
                    })
            };
            (extent(|t| t.row)?, extent(|t| t.col)?)
        }
    };
    if (n as u128) * (d as u128) > u64::MAX as u128 {
        return Err(Error::IndexOverflow(format!("shape {n}x{d} exceeds 64-bit cell count")));
    }
    if let Some((k, t)) = triplets
        .iter()
        .enumerate()
        .find(|(_, t)| t.row >= n || t.col >= d)
    {
        return Err(Error::IndexOverflow(format!(
            "line {}: ({}, {}) outside declared shape {n}x{d}",
            lines_of[k], t.row, t.col
        )));
    }
    ObservedMatrix::new(n, d, triplets)
}

/// Parse MovieLens ratings (`userId,movieId,rating[,timestamp]`). External ids
/// are mapped to dense indices in ascending id order.
pub fn parse_movielens_csv<R: BufRead>(reader: R) -> Result<(ObservedMatrix, IdMap)> {
    let mut raw: Vec<(u64, u64, f64)> = Vec::new();
    let mut saw_header = false;
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::malformed(lineno, e.to_string()))?;
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        if !saw_header {
            let cols: Vec<&str> = body.split(',').map(str::trim).collect();
            if cols.len() < 3 || cols[..3] != ["userId", "movieId", "rating"] {
                return Err(Error::malformed(
                    lineno,
                    "expected header 'userId,movieId,rating,timestamp'",
                ));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = body.split(',').map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::malformed(lineno, "expected 3 or 4 comma-separated fields"));
        }
        let id = |tok: &str| -> Result<u64> {
            if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
                return Err(Error::malformed(lineno, format!("bad id '{tok}'")));
            }
            tok.parse::<u64>()
                .map_err(|_| Error::IndexOverflow(format!("line {lineno}: '{tok}' exceeds 64 bits")))
        };
        raw.push((id(fields[0])?, id(fields[1])?, parse_value(fields[2], lineno)?));
    }
    if !saw_header {
        return Err(Error::EmptyInput("no MovieLens header".into()));
    }
    let mut rows: Vec<u64> = raw.iter().map(|r| r.0).collect();
    let mut cols: Vec<u64> = raw.iter().map(|r| r.1).collect();
    rows.sort_unstable();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    let triplets = raw
        .iter()
        .map(|&(u, m, v)| {
            // both searches succeed: ids come from the same list
            let r = rows.binary_search(&u).unwrap_or_default();
            let c = cols.binary_search(&m).unwrap_or_default();
            Triplet::new(r, c, v)
        })
        .collect();
    let matrix = ObservedMatrix::new(rows.len(), cols.len(), triplets)?;
    Ok((matrix, IdMap { rows, cols }))
}

/// Parse a dense genotype table. Genotype `0` is stored as `1.0`, `1` as
/// `2.0`; `.` marks a missing cell.
pub fn parse_genotype_dense<R: BufRead>(reader: R) -> Result<ObservedMatrix> {
    let mut triplets = Vec::new();
    let mut width: Option<usize> = None;
    let mut n = 0usize;
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::malformed(lineno, e.to_string()))?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let mut w = 0usize;
        for (col, tok) in body.split_whitespace().enumerate() {
            let value = match tok {
                "0" => Some(1.0),
                "1" => Some(2.0),
                "." => None,
                other => return Err(Error::malformed(lineno, format!("bad genotype '{other}'"))),
            };
            if let Some(v) = value {
                triplets.push(Triplet::new(n, col, v));
            }
            w += 1;
        }
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::malformed(
                    lineno,
                    format!("row has {w} columns, expected {expected}"),
                ))
            }
            _ => {}
        }
        n += 1;
    }
    ObservedMatrix::new(n, width.unwrap_or(0), triplets)
}

/// Write triplets as coo-text with a `# n=<rows> d=<cols>` header. Values use
/// the shortest round-trip representation, so reading back is bit-exact.
pub fn write_coo_text<W: Write>(mut w: W, n_rows: usize, n_cols: usize, triplets: &[Triplet]) -> Result<()> {
    writeln!(w, "# n={n_rows} d={n_cols}")?;
    for t in triplets {
        writeln!(w, "{} {} {:?}", t.row, t.col, t.value)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_coo_text(m: &ObservedMatrix, path: &Path) -> Result<()> {
    write_coo_text(BufWriter::new(File::create(path)?), m.n_rows, m.n_cols, &m.triplets)
}

/// A train/holdout partition of an observation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub holdout: Vec<Triplet>,
}

/// Partition triplets uniformly at random: `round(fraction * m)` go to the
/// training matrix, the rest to the holdout list.
pub fn split(m: &ObservedMatrix, fraction: f64, seed: u64) -> Result<(ObservedMatrix, SplitSpec)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let total = m.nnz();
    let n_train = ((fraction * total as f64).round() as usize).min(total);
    let mut rng = rng::stream_rng(rng::derive_seed(seed, rng::tag::SPLIT), 0);
    let mut in_train = vec![false; total];
    for k in index::sample(&mut rng, total, n_train) {
        in_train[k] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut holdout = Vec::with_capacity(total - n_train);
    for (t, &keep) in m.triplets.iter().zip(&in_train) {
        if keep {
            train.push(*t);
        } else {
            holdout.push(*t);
        }
    }
    let train = ObservedMatrix {
        n_rows: m.n_rows,
        n_cols: m.n_cols,
        spans: build_spans(&train),
        triplets: train,
    };
    Ok((
        train,
        SplitSpec {
            train_fraction: fraction,
            seed,
            holdout,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coo(s: &str) -> Result<ObservedMatrix> {
        parse_coo_text(s.as_bytes(), None)
    }

    #[test]
    fn coo_text_basic_parse() {
        let m = parse_coo_text("0 0 3.5\n1 2 1.0".as_bytes(), Some((2, 3))).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!((m.n_rows(), m.n_cols()), (2, 3));
        assert_eq!(m.get(1, 2), Some(1.0));
        assert_eq!(m.get(1, 1), None);
    }

    #[test]
    fn coo_text_comments_header_and_inference() {
        let m = coo("# n=5 d=4\n# a comment\n\n3 1 -2.5\n").unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (5, 4));
        let m = coo("3 1 -2.5\n0 0 1\n").unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (4, 2));
    }

    #[test]
    fn coo_text_duplicate_is_error() {
        let err = coo("0 0 1\n1 1 2\n0 0 3\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateEntry { row: 0, col: 0 }));
    }

    #[test]
    fn coo_text_reports_line_numbers() {
        let err = coo("0 0 1\n# c\n1 x 2\n").unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 3, .. }), "{err}");
        let err = coo("0 0 1 9\n").unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 1, .. }));
        let err = coo("0 0 nan\n").unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 1, .. }));
    }

    #[test]
    fn coo_text_index_overflow() {
        assert!(matches!(
            coo("99999999999999999999999 0 1\n").unwrap_err(),
            Error::IndexOverflow(_)
        ));
        assert!(matches!(
            coo("18446744073709551615 0 1\n").unwrap_err(),
            Error::IndexOverflow(_)
        ));
        assert!(matches!(
            coo("# n=2 d=2\n2 0 1\n").unwrap_err(),
            Error::IndexOverflow(_)
        ));
    }

    #[test]
    fn zero_value_is_an_observation() {
        let m = coo("0 0 0.0\n0 1 -0.0\n").unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), Some(0.0));
        assert!(m.get(0, 1).unwrap().is_sign_negative());
    }

    #[test]
    fn coo_round_trip_is_bit_exact() {
        let vals = [0.1, -0.0, 1e-300, 123456789.123456789, f64::MAX, f64::MIN_POSITIVE / 4.0];
        let trips: Vec<Triplet> = vals
            .iter()
            .enumerate()
            .map(|(k, &v)| Triplet::new(k, k % 3, v))
            .collect();
        let m = ObservedMatrix::new(6, 3, trips).unwrap();
        let mut buf = Vec::new();
        write_coo_text(&mut buf, 6, 3, m.triplets()).unwrap();
        let back = coo(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.n_rows(), 6);
        for (a, b) in m.triplets().iter().zip(back.triplets()) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
            assert_eq!((a.row, a.col), (b.row, b.col));
        }
    }

    #[test]
    fn genotype_remap() {
        let m = parse_genotype_dense("0 1 .\n. . 1\n".as_bytes()).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (2, 3));
        assert_eq!(m.get(0, 0), Some(1.0));
        assert_eq!(m.get(0, 1), Some(2.0));
        assert_eq!(m.get(0, 2), None);
        assert_eq!(m.get(1, 2), Some(2.0));
        assert!(parse_genotype_dense("0 1\n0\n".as_bytes()).is_err());
        assert!(parse_genotype_dense("0 2\n".as_bytes()).is_err());
    }

    #[test]
    fn movielens_ids_are_compacted() {
        let csv = "userId,movieId,rating,timestamp\n10,500,4.0,111\n3,500,3.5,112\n10,7,1.0,113\n";
        let (m, ids) = parse_movielens_csv(csv.as_bytes()).unwrap();
        assert_eq!(ids.rows, vec![3, 10]);
        assert_eq!(ids.cols, vec![7, 500]);
        assert_eq!(m.get(1, 1), Some(4.0));
        assert_eq!(m.get(0, 1), Some(3.5));
        assert_eq!(m.get(1, 0), Some(1.0));
        assert!(parse_movielens_csv("user,movie\n1,2,3\n".as_bytes()).is_err());
        let dup = "userId,movieId,rating,timestamp\n1,1,4,0\n1,1,3,0\n";
        assert!(matches!(
            parse_movielens_csv(dup.as_bytes()).unwrap_err(),
            Error::DuplicateEntry { .. }
        ));
    }

    #[test]
    fn rows_iteration_and_lookup() {
        let m = coo("5 1 1\n0 2 2\n5 0 3\n").unwrap();
        let rows: Vec<usize> = m.rows().map(|(r, _)| r).collect();
        assert_eq!(rows, vec![0, 5]);
        assert_eq!(m.row(5).iter().map(|t| t.col).collect::<Vec<_>>(), vec![0, 1]);
        assert!(m.row(3).is_empty());
        assert_eq!(m.column_counts(), vec![1, 1, 1]);
    }

    #[test]
    fn split_fraction_one_is_identity() {
        let m = coo("0 0 1\n1 1 2\n2 0 3\n").unwrap();
        let (train, spec) = split(&m, 1.0, 9).unwrap();
        assert_eq!(train, m);
        assert!(spec.holdout.is_empty());
    }

    #[test]
    fn split_exact_counts_and_disjoint() {
        let trips: Vec<Triplet> = (0..100).map(|k| Triplet::new(k / 10, k % 10, k as f64)).collect();
        let m = ObservedMatrix::new(10, 10, trips).unwrap();
        let (train, spec) = split(&m, 0.8, 1).unwrap();
        assert_eq!(train.nnz(), 80);
        assert_eq!(spec.holdout.len(), 20);
        let mut all: Vec<(usize, usize)> = train.mask();
        all.extend(spec.holdout.iter().map(|t| (t.row, t.col)));
        all.sort_unstable();
        assert_eq!(all, m.mask());
        let (train2, spec2) = split(&m, 0.8, 1).unwrap();
        assert_eq!(train, train2);
        assert_eq!(spec, spec2);
        let (train3, _) = split(&m, 0.8, 2).unwrap();
        assert_ne!(train, train3);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let m = coo("0 0 1\n").unwrap();
        assert!(split(&m, 0.0, 1).is_err());
        assert!(split(&m, 1.5, 1).is_err());
        assert!(split(&m, f64::NAN, 1).is_err());
    }
}
