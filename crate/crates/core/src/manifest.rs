use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const HEADER: [&str; 4] = ["path", "label", "length_m", "width_m"];

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Image path relative to the manifest root.
    pub path: String,
    pub label: String,
    /// Fuselage length and wingspan in meters, both present or both absent.
    pub size: Option<(f64, f64)>,
}

/// List of labeled image records. Paths resolve against `root`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let m = Manifest { root: root.into(), records };
        m.check_unique()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct labels; a label's class index is its position here.
    pub fn labels(&self) -> Vec<String> {
        self.records.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Class index of every record under `labels`; unknown labels are a data error.
    pub fn class_indices(&self, labels: &[String]) -> Result<Vec<usize>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                labels
                    .iter()
                    .position(|l| *l == r.label)
                    .ok_or_else(|| Error::Data(format!("row {}: unknown class {:?}", i + 1, r.label)))
            })
            .collect()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Data(format!("row {}: duplicate path {:?}", i + 1, r.path)));
            }
        }
        Ok(())
    }
}

fn fmt_size(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes the manifest CSV atomically.
pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(HEADER).map_err(csv_err)?;
    for r in &m.records {
        w.write_record([
            r.path.clone(),
            r.label.clone(),
            fmt_size(r.size.map(|s| s.0)),
            fmt_size(r.size.map(|s| s.1)),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Reads a manifest; its root is the file's directory. When `labels` is given, any
/// other class name is a data error.
pub fn read_manifest(path: &Path, labels: Option<&[String]>) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = rdr.headers().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Data(format!("{}: header must be {}", path.display(), HEADER.join(","))));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| Error::Data(format!("{} row {line}: {e}", path.display())))?;
        let bad = |msg: String| Error::Data(format!("{} row {line}: {msg}", path.display()));
        if row.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", row.len())));
        }
        if row[0].is_empty() || row[1].is_empty() {
            return Err(bad("empty path or label".into()));
        }
        if let Some(known) = labels {
            if !known.iter().any(|l| l == &row[1]) {
                return Err(bad(format!("unknown class {:?}", &row[1])));
            }
        }
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| bad(format!("invalid size {s:?}")))?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(format!("size must be positive, got {v}")));
            }
            Ok(v)
        };
        let size = match (row[2].is_empty(), row[3].is_empty()) {
            (true, true) => None,
            (false, false) => Some((parse(&row[2])?, parse(&row[3])?)),
            _ => return Err(bad("length_m and width_m must be both present or both absent".into())),
        };
        records.push(Record { path: row[0].to_string(), label: row[1].to_string(), size });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::new(root, records)
}
