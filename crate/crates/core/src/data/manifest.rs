use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["path", "class", "video_id", "probe", "luss"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Probe {
    Convex,
    Linear,
}

impl Probe {
    pub fn as_str(self) -> &'static str {
        match self {
            Probe::Convex => "convex",
            Probe::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleRecord {
    pub image_path: String,
    pub class_id: usize,
    pub video_id: String,
    pub probe: Probe,
    /// Lung ultrasound severity score, 0..=3.
    pub luss: Option<u8>,
}

/// Records plus the class names their ids index into.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn with_records(&self, records: Vec<SampleRecord>) -> Manifest {
        Manifest { classes: self.classes.clone(), records }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_manifest(file, None)
}

/// Parses manifest text. Class names map to ids in sorted order, unless
/// `known_classes` is given, in which case ids follow that list and any other
/// name is rejected.
pub fn parse_manifest<R: Read>(reader: R, known_classes: Option<&[String]>) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col = HashMap::new();
    for name in MANIFEST_HEADER {
        let idx = headers.iter().position(|h| h == name).ok_or(DataError::MissingColumn(name))?;
        col.insert(name, idx);
    }

    struct Raw {
        line: u64,
        path: String,
        class: String,
        video: String,
        probe: Probe,
        luss: Option<u8>,
    }

    let mut raws = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |name: &'static str| row.get(col[name]).unwrap_or("");
        let row_err = |field: &'static str, message: String| DataError::Row { line, field, message };

        let path = field("path");
        if path.is_empty() {
            return Err(row_err("path", "empty path".into()));
        }
        let class = field("class");
        if class.is_empty() {
            return Err(row_err("class", "empty class".into()));
        }
        let probe = match field("probe").to_ascii_lowercase().as_str() {
            "convex" => Probe::Convex,
            "linear" => Probe::Linear,
            other => return Err(row_err("probe", format!("expected convex or linear, got `{other}`"))),
        };
        let luss = match field("luss") {
            "" => None,
            s => {
                let v: u8 = s.parse().map_err(|_| row_err("luss", format!("`{s}` is not an integer")))?;
                if v > 3 {
                    return Err(row_err("luss", format!("{v} outside 0..=3")));
                }
                Some(v)
            }
        };
        raws.push(Raw {
            line,
            path: path.to_string(),
            class: class.to_string(),
            video: field("video_id").to_string(),
            probe,
            luss,
        });
    }

    let classes: Vec<String> = match known_classes {
        Some(k) => k.to_vec(),
        None => raws.iter().map(|r| r.class.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let records = raws
        .into_iter()
        .map(|r| {
            let class_id = classes.iter().position(|c| *c == r.class).ok_or_else(|| DataError::Row {
                line: r.line,
                field: "class",
                message: format!("unknown class `{}`", r.class),
            })?;
            Ok(SampleRecord { image_path: r.path, class_id, video_id: r.video, probe: r.probe, luss: r.luss })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest { classes, records })
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let mut out = File::create(path).map_err(io)?;
    out.write_all(&manifest_bytes(manifest)?).map_err(io)
}

fn manifest_bytes(manifest: &Manifest) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in &manifest.records {
        let class = manifest.classes.get(r.class_id).ok_or_else(|| {
            DataError::Invalid(format!("record class id {} has no name", r.class_id))
        })?;
        let luss = r.luss.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.image_path.as_str(), class, &r.video_id, r.probe.as_str(), &luss])?;
    }
    w.into_inner().map_err(|e| DataError::Invalid(e.to_string()))
}

/// Keeps convex-probe records only.
pub fn filter_convex(records: &[SampleRecord]) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.probe == Probe::Convex).cloned().collect()
}

/// Severity-score filter for the normal and COVID-19 classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LussFilter {
    pub normal_class: Option<usize>,
    pub covid_class: Option<usize>,
    pub normal_scores: BTreeSet<u8>,
    pub covid_scores: BTreeSet<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LussReport {
    pub removed_by_score: usize,
    pub missing_luss: usize,
}

/// Normal-class records survive iff their score is in `normal_scores`,
/// COVID-class records iff it is in `covid_scores`; other classes pass.
/// Filtered-class records without a score are dropped and counted.
pub fn filter_luss(records: &[SampleRecord], filter: &LussFilter) -> Result<(Vec<SampleRecord>, LussReport)> {
    if let Some(bad) = filter.normal_scores.iter().chain(&filter.covid_scores).find(|&&s| s > 3) {
        return Err(DataError::Invalid(format!("LUSS score {bad} outside 0..=3")));
    }
    let mut report = LussReport::default();
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        let allowed = if Some(r.class_id) == filter.normal_class {
            Some(&filter.normal_scores)
        } else if Some(r.class_id) == filter.covid_class {
            Some(&filter.covid_scores)
        } else {
            None
        };
        match (allowed, r.luss) {
            (None, _) => kept.push(r.clone()),
            (Some(_), None) => report.missing_luss += 1,
            (Some(set), Some(score)) if set.contains(&score) => kept.push(r.clone()),
            (Some(_), Some(_)) => report.removed_by_score += 1,
        }
    }
    Ok((kept, report))
}
