//! Dataset manifests: CSV rows of `path,label,split`.
//!
//! Paths are stored as manifest-relative strings with `/` separators so the
//! file bytes do not depend on where the dataset lives. Rows without a split
//! assignment carry the token `none`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Pd,
    Msa,
    Normal,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Pd, ClassLabel::Msa, ClassLabel::Normal];

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::Pd => "PD",
            ClassLabel::Msa => "MSA",
            ClassLabel::Normal => "Normal",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PD" => Ok(ClassLabel::Pd),
            "MSA" => Ok(ClassLabel::Msa),
            "Normal" => Ok(ClassLabel::Normal),
            other => Err(Error::parse(format!("unknown class label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::parse(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    /// Manifest-relative path, `/`-separated.
    pub path: String,
    pub label: ClassLabel,
    /// `None` until `split_dataset` assigns one.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut m = DatasetManifest::default();
        for row in rows {
            m.push(row)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: ManifestRow) -> Result<()> {
        if row.path.is_empty() {
            return Err(Error::data("manifest: empty path"));
        }
        if row.path.contains(',') || row.path.contains('\n') {
            return Err(Error::data(format!(
                "manifest: path {:?} contains a CSV delimiter",
                row.path
            )));
        }
        if self.rows.iter().any(|r| r.path == row.path) {
            return Err(Error::data(format!("manifest: duplicate path {:?}", row.path)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == Some(split))
    }

    /// Errors if any row's file is missing relative to `base_dir`.
    pub fn validate_files(&self, base_dir: &Path) -> Result<()> {
        for row in &self.rows {
            let p = base_dir.join(&row.path);
            if !p.is_file() {
                return Err(Error::data(format!(
                    "manifest: {:?} does not resolve to a file under {}",
                    row.path,
                    base_dir.display()
                )));
            }
        }
        Ok(())
    }
}

const HEADER: &str = "path,label,split";

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(manifest.len() * 32 + 20);
    out.push_str(HEADER);
    out.push('\n');
    for row in manifest.rows() {
        let split = row.split.map_or("none", |s| s.as_str());
        out.push_str(&format!("{},{},{}\n", row.path, row.label, split));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        Some((_, h)) => {
            return Err(Error::parse(format!(
                "{}: expected header {HEADER:?}, found {h:?}",
                path.display()
            )))
        }
        None => return Err(Error::parse(format!("{}: empty manifest", path.display()))),
    }
    let mut manifest = DatasetManifest::default();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = i + 1;
        let mut fields = line.split(',');
        let (p, l, s) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(p), Some(l), Some(s), None) => (p, l, s),
            _ => {
                return Err(Error::parse(format!(
                    "{}: line {line_no}: expected 3 fields",
                    path.display()
                )))
            }
        };
        let label = l.parse::<ClassLabel>().map_err(|e| {
            Error::parse(format!("{}: line {line_no}: {e}", path.display()))
        })?;
        let split = match s {
            "none" => None,
            other => Some(other.parse::<Split>().map_err(|e| {
                Error::parse(format!("{}: line {line_no}: {e}", path.display()))
            })?),
        };
        manifest
            .push(ManifestRow { path: p.to_string(), label, split })
            .map_err(|e| Error::parse(format!("{}: line {line_no}: {e}", path.display())))?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("manifest-tests-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample() -> DatasetManifest {
        DatasetManifest::new(vec![
            ManifestRow { path: "a.pgm".into(), label: ClassLabel::Pd, split: Some(Split::Train) },
            ManifestRow { path: "b.pgm".into(), label: ClassLabel::Msa, split: Some(Split::Val) },
            ManifestRow { path: "sub/c.pgm".into(), label: ClassLabel::Normal, split: None },
        ])
        .unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let m = sample();
        let path = tmp("roundtrip.csv");
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn saved_bytes_are_stable() {
        let path = tmp("stable.csv");
        save_manifest(&sample(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "path,label,split\na.pgm,PD,train\nb.pgm,MSA,val\nsub/c.pgm,Normal,none\n"
        );
    }

    #[test]
    fn unknown_label_names_the_line() {
        let path = tmp("badlabel.csv");
        fs::write(&path, "path,label,split\na.pgm,PDD,train\n").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("PDD"), "{err}");
    }

    #[test]
    fn unknown_split_rejected() {
        let path = tmp("badsplit.csv");
        fs::write(&path, "path,label,split\na.pgm,PD,holdout\n").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("holdout"), "{err}");
    }

    #[test]
    fn duplicate_paths_rejected() {
        let path = tmp("dup.csv");
        fs::write(&path, "path,label,split\na.pgm,PD,train\na.pgm,MSA,val\n").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        let mut m = sample();
        assert!(m
            .push(ManifestRow { path: "a.pgm".into(), label: ClassLabel::Pd, split: None })
            .is_err());
    }

    #[test]
    fn missing_header_rejected() {
        let path = tmp("noheader.csv");
        fs::write(&path, "a.pgm,PD,train\n").unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn validate_files_reports_missing() {
        let dir = tmp("exists");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("a.pgm"), b"x").unwrap();
        let m = DatasetManifest::new(vec![
            ManifestRow { path: "a.pgm".into(), label: ClassLabel::Pd, split: None },
        ])
        .unwrap();
        assert!(m.validate_files(&dir).is_ok());
        let m2 = DatasetManifest::new(vec![
            ManifestRow { path: "ghost.pgm".into(), label: ClassLabel::Pd, split: None },
        ])
        .unwrap();
        assert!(m2.validate_files(&dir).is_err());
    }

    #[test]
    fn label_and_split_tokens_round_trip() {
        for l in ClassLabel::ALL {
            assert_eq!(l.as_str().parse::<ClassLabel>().unwrap(), l);
        }
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("pd".parse::<ClassLabel>().is_err());
    }
}
