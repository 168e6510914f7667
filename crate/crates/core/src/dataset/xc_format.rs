//! The XC-repository text format:
//!
//! ```text
//! N D L
//! l1,l2,...,lk f1:v1 f2:v2 ...
//! ```
//!
//! A row with no labels starts with a space (or directly with a feature
//! token).

use std::fmt::Write as _;
use std::path::Path;

use super::{SparseDataset, SparseVector};
use crate::{Error, Result};

pub fn parse_xc_file(path: impl AsRef<Path>) -> Result<SparseDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xc(&text)
}

pub fn write_xc_file(ds: &SparseDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serialize_xc(ds)).map_err(|e| Error::io(path, e))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_header(line: &str) -> Result<(usize, usize, usize)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(parse_err(1, format!("header must be \"N D L\", got {line:?}")));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(1, format!("non-numeric header field {s:?}")))
    };
    Ok((num(fields[0])?, num(fields[1])?, num(fields[2])?))
}

fn parse_row(text: &str, line_no: usize, n_features: usize, n_labels: usize) -> Result<(SparseVector, Vec<u32>)> {
    let mut tokens = text.split_whitespace().peekable();
    let mut labels = Vec::new();
    let has_labels = !text.starts_with(|c: char| c.is_whitespace()) && tokens.peek().is_some_and(|t| !t.contains(':'));
    if has_labels {
        for tok in tokens.next().unwrap().split(',').filter(|s| !s.is_empty()) {
            let l: u32 = tok
                .parse()
                .map_err(|_| parse_err(line_no, format!("non-numeric label {tok:?}")))?;
            if l as usize >= n_labels {
                return Err(parse_err(line_no, format!("label id {l} >= L={n_labels}")));
            }
            labels.push(l);
        }
    }
    let mut pairs = Vec::new();
    for tok in tokens {
        let (f, v) = tok
            .split_once(':')
            .ok_or_else(|| parse_err(line_no, format!("expected feature:value, got {tok:?}")))?;
        let f: u32 = f
            .parse()
            .map_err(|_| parse_err(line_no, format!("non-numeric feature id {f:?}")))?;
        let v: f32 = v
            .parse()
            .map_err(|_| parse_err(line_no, format!("non-numeric value {v:?}")))?;
        if f as usize >= n_features {
            return Err(parse_err(line_no, format!("feature id {f} >= D={n_features}")));
        }
        if !v.is_finite() {
            return Err(parse_err(line_no, format!("non-finite value for feature {f}")));
        }
        pairs.push((f, v));
    }
    let row = SparseVector::from_pairs(pairs).map_err(|e| parse_err(line_no, e.to_string()))?;
    labels.sort_unstable();
    if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
        return Err(parse_err(line_no, format!("duplicate label id {}", w[0])));
    }
    Ok((row, labels))
}

pub fn parse_xc(text: &str) -> Result<SparseDataset> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let (n, d, l) = parse_header(header)?;
    let mut rows = Vec::with_capacity(n);
    let mut positives = Vec::with_capacity(n);
    for i in 0..n {
        let line_no = i + 2;
        let line = lines
            .next()
            .ok_or_else(|| parse_err(line_no, format!("expected {n} rows, found {i}")))?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let (row, labels) = parse_row(line, line_no, d, l)?;
        rows.push(row);
        positives.push(labels);
    }
    if let Some((extra, _)) = lines.enumerate().find(|(_, s)| !s.trim().is_empty()) {
        return Err(parse_err(n + 2 + extra, format!("more than {n} rows")));
    }
    SparseDataset::new(d, l, rows, positives, None)
}

pub fn serialize_xc(ds: &SparseDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {}", ds.n_points(), ds.n_features(), ds.n_labels());
    for i in 0..ds.n_points() {
        let labels: Vec<String> = ds.positives(i).iter().map(u32::to_string).collect();
        out.push_str(&labels.join(","));
        for (f, v) in ds.row(i).iter() {
            let _ = write!(out, " {f}:{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_basic_file() {
        let ds = parse_xc("2 3 2\n0 0:1.0 2:0.5\n0,1 1:2.0\n").unwrap();
        assert_eq!((ds.n_points(), ds.n_features(), ds.n_labels()), (2, 3, 2));
        assert_eq!(ds.all_positives(), &[vec![0], vec![0, 1]]);
        assert_eq!(ds.row(0).indices(), &[0, 2]);
        assert_eq!(ds.row(0).values(), &[1.0, 0.5]);
    }

    #[test]
    fn feature_out_of_range() {
        let err = parse_xc("1 3 2\n0 5:1.0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_label_list() {
        let ds = parse_xc("1 2 2\n 0:1.0\n").unwrap();
        assert!(ds.positives(0).is_empty());
        assert_eq!(ds.row(0).nnz(), 1);
        let ds = parse_xc("1 2 2\n0:1.0\n").unwrap();
        assert!(ds.positives(0).is_empty());
    }

    #[test]
    fn error_paths() {
        assert!(parse_xc("1 2\n0 0:1\n").is_err());
        assert!(parse_xc("1 x 2\n").is_err());
        assert!(parse_xc("1 2 2\n2 0:1\n").is_err());
        assert!(parse_xc("1 2 2\n0 0:abc\n").is_err());
        assert!(parse_xc("1 2 2\n0 1:1 1:2\n").is_err());
        assert!(parse_xc("2 2 2\n0 1:1\n").is_err());
        assert!(parse_xc("1 2 2\n0 1:1\n1 0:1\n").is_err());
        assert!(parse_xc("1 2 2\n0 1\n").is_err());
    }

    #[test]
    fn unsorted_features_are_sorted() {
        let ds = parse_xc("1 4 1\n0 3:1 1:2\n").unwrap();
        assert_eq!(ds.row(0).indices(), &[1, 3]);
        assert_eq!(ds.row(0).values(), &[2.0, 1.0]);
    }

    fn arb_dataset() -> impl Strategy<Value = SparseDataset> {
        (1usize..20, 1usize..10, 1usize..8).prop_flat_map(|(d, l, n)| {
            let row = (
                proptest::collection::btree_map(0..d as u32, -100.0f32..100.0, 0..d.min(5)),
                proptest::collection::btree_set(0..l as u32, 0..l.min(4)),
            );
            proptest::collection::vec(row, n).prop_map(move |rows| {
                let (feats, labels): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
                SparseDataset::new(
                    d,
                    l,
                    feats
                        .into_iter()
                        .map(|m| SparseVector::from_pairs(m.into_iter().collect()).unwrap())
                        .collect(),
                    labels.into_iter().map(|s| s.into_iter().collect()).collect(),
                    None,
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn text_round_trip(ds in arb_dataset()) {
            let back = parse_xc(&serialize_xc(&ds)).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
