//! CSV files of the external data layout and the flat `key=value` config
//! format.
//!
//! | file | header | content |
//! |------|--------|---------|
//! | `instances.csv` | `x1..xD` | one row per instance |
//! | `labels.csv` | `y` | 1-based class per instance |
//! | `annotations.csv` | `z1..zM` | 1-based class, `-1` when missing |
//! | `annotators.csv` | `a1..aO` | one row per annotator |
//!
//! Row numbers in parse errors are file lines (the header is line 1) and
//! columns are 1-based.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Annotations;
use crate::diffnet::Tensor;
use crate::error::{MadlError, Result};

pub const INSTANCES_FILE: &str = "instances.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
/// Annotations before ratio masking, kept for scoring potential annotations.
pub const FULL_ANNOTATIONS_FILE: &str = "annotations-full.csv";
pub const ANNOTATORS_FILE: &str = "annotators.csv";
pub const SPEC_FILE: &str = "annotator-set.json";

/// Missing-annotation marker in `annotations.csv`.
pub const MISSING: i64 = -1;

fn parse_err(path: &Path, row: usize, column: usize, message: impl Into<String>) -> MadlError {
    MadlError::Parse {
        file: path.display().to_string(),
        row,
        column,
        message: message.into(),
    }
}

/// Header plus rows of raw string cells, with file line numbers.
struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                record.len().min(header.len()) + 1,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    Ok(Table { header, rows })
}

fn check_header(path: &Path, header: &[String], prefix: &str) -> Result<()> {
    if header.is_empty() {
        return Err(parse_err(path, 1, 1, "empty header"));
    }
    for (j, h) in header.iter().enumerate() {
        let want = format!("{prefix}{}", j + 1);
        if *h != want {
            return Err(parse_err(path, 1, j + 1, format!("expected header '{want}', found '{h}'")));
        }
    }
    Ok(())
}

fn read_real_matrix(path: &Path, prefix: &str) -> Result<Tensor> {
    let t = read_table(path)?;
    check_header(path, &t.header, prefix)?;
    let cols = t.header.len();
    let mut values = Vec::with_capacity(t.rows.len() * cols);
    for (line, row) in &t.rows {
        for (j, cell) in row.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, *line, j + 1, format!("'{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, *line, j + 1, format!("'{cell}' is not finite")));
            }
            values.push(v);
        }
    }
    Ok(Tensor::from_shape_vec((t.rows.len(), cols), values).expect("rectangular"))
}

fn write_real_matrix(path: &Path, prefix: &str, m: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((1..=m.ncols()).map(|j| format!("{prefix}{j}")))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Tensor> {
    read_real_matrix(path, "x")
}

pub fn write_instances(path: &Path, x: &Tensor) -> Result<()> {
    write_real_matrix(path, "x", x)
}

pub fn read_annotators(path: &Path) -> Result<Tensor> {
    read_real_matrix(path, "a")
}

pub fn write_annotators(path: &Path, a: &Tensor) -> Result<()> {
    write_real_matrix(path, "a", a)
}

fn parse_class(path: &Path, line: usize, col: usize, cell: &str, allow_missing: bool) -> Result<Option<usize>> {
    let v: i64 = cell
        .parse()
        .map_err(|_| parse_err(path, line, col, format!("'{cell}' is not an integer class")))?;
    match v {
        MISSING if allow_missing => Ok(None),
        v if v >= 1 => Ok(Some(v as usize - 1)),
        _ => Err(parse_err(
            path,
            line,
            col,
            format!("class {v} is invalid; classes are 1-based{}", if allow_missing { ", -1 marks missing" } else { "" }),
        )),
    }
}

/// 0-based classes.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let t = read_table(path)?;
    if t.header != ["y"] {
        return Err(parse_err(path, 1, 1, format!("expected the single header 'y', found {:?}", t.header)));
    }
    t.rows
        .iter()
        .map(|(line, row)| Ok(parse_class(path, *line, 1, &row[0], false)?.expect("not missing")))
        .collect()
}

pub fn write_labels(path: &Path, y: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["y"])?;
    for &c in y {
        w.write_record([(c + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let t = read_table(path)?;
    check_header(path, &t.header, "z")?;
    let mut z = Annotations::missing(t.rows.len(), t.header.len());
    for (n, (line, row)) in t.rows.iter().enumerate() {
        for (m, cell) in row.iter().enumerate() {
            z.set(n, m, parse_class(path, *line, m + 1, cell, true)?);
        }
    }
    Ok(z)
}

pub fn write_annotations(path: &Path, z: &Annotations) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((1..=z.annotators()).map(|j| format!("z{j}")))?;
    for n in 0..z.instances() {
        w.write_record((0..z.annotators()).map(|m| match z.get(n, m) {
            Some(c) => (c + 1).to_string(),
            None => MISSING.to_string(),
        }))?;
    }
    w.flush()?;
    Ok(())
}

/// Flat `key = value` pairs, one per line; `#` starts a comment. Keys are
/// dotted names such as `train.epochs`.
pub fn parse_kv(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |col: usize, msg: String| MadlError::Parse {
            file: source.to_owned(),
            row: i + 1,
            column: col,
            message: msg,
        };
        let Some((k, v)) = line.split_once('=') else {
            return Err(err(1, format!("expected 'key = value', found '{line}'")));
        };
        let (k, v) = (k.trim(), v.trim());
        let valid_key = !k.is_empty()
            && k.split('.').all(|part| {
                !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            });
        if !valid_key {
            return Err(err(1, format!("invalid key '{k}'")));
        }
        if out.insert(k.to_owned(), v.to_owned()).is_some() {
            return Err(err(1, format!("duplicate key '{k}'")));
        }
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    parse_kv(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(content.as_bytes()).unwrap();
        p
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let x = array![[0.1, -2.5e-17], [1.0 / 3.0, 1e300]];
        let p = dir.path().join("i.csv");
        write_instances(&p, &x).unwrap();
        assert_eq!(read_instances(&p).unwrap(), x);

        let p = dir.path().join("y.csv");
        write_labels(&p, &[0, 2, 1]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "y\n1\n3\n2\n");
        assert_eq!(read_labels(&p).unwrap(), vec![0, 2, 1]);

        let mut z = Annotations::missing(2, 3);
        z.set(0, 1, Some(4));
        z.set(1, 0, Some(0));
        let p = dir.path().join("z.csv");
        write_annotations(&p, &z).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "z1,z2,z3\n-1,5,-1\n1,-1,-1\n");
        assert_eq!(read_annotations(&p).unwrap(), z);
    }

    #[test]
    fn errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i.csv", "x1,x2\n1,2\n3,abc\n");
        match read_instances(&p) {
            Err(MadlError::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "z.csv", "z1,z2\n1,-1\n0,2\n");
        match read_annotations(&p) {
            Err(MadlError::Parse { row, column, .. }) => assert_eq!((row, column), (3, 1)),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "y.csv", "y\n1\n-1\n");
        assert!(matches!(read_labels(&p), Err(MadlError::Parse { row: 3, column: 1, .. })));
        let p = write(dir.path(), "bad.csv", "x1,x3\n1,2\n");
        assert!(matches!(read_instances(&p), Err(MadlError::Parse { row: 1, column: 2, .. })));
        let p = write(dir.path(), "short.csv", "x1,x2\n1,2\n3\n");
        assert!(matches!(read_instances(&p), Err(MadlError::Parse { row: 3, .. })));
    }

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# comment\ntrain.epochs = 100\n\nmodel.eta=0.8 # prior\n", "cfg").unwrap();
        assert_eq!(kv["train.epochs"], "100");
        assert_eq!(kv["model.eta"], "0.8");
        assert!(matches!(parse_kv("a=1\nnonsense\n", "cfg"), Err(MadlError::Parse { row: 2, .. })));
        assert!(parse_kv("a=1\na=2\n", "cfg").is_err());
        assert!(parse_kv("a..b=1\n", "cfg").is_err());
    }
}
