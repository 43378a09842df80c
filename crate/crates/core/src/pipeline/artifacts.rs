use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Provenance};
use crate::afp::EnsembleLabel;
use crate::corpus::ProsodyTargets;

/// Output directory layout.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

pub(crate) fn label_slug(label: &EnsembleLabel) -> String {
    label.to_string().to_ascii_lowercase().replace(':', "-")
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, member: &str) -> PathBuf {
        self.checkpoints_dir().join(format!("{member}.afp"))
    }

    pub fn loss_log(&self, member: &str) -> PathBuf {
        self.checkpoints_dir().join(format!("{member}.loss.jsonl"))
    }

    pub fn ensembles(&self) -> PathBuf {
        self.root.join("ensembles.json")
    }

    pub fn diversity(&self) -> PathBuf {
        self.root.join("diversity.json")
    }

    pub fn renditions_dir(&self, label: &EnsembleLabel) -> PathBuf {
        self.root.join("renditions").join(label_slug(label))
    }

    pub fn features(&self, label: &EnsembleLabel, utterance: &str, member_index: usize) -> PathBuf {
        self.renditions_dir(label)
            .join(format!("{utterance}.{}.features.jsonl", side(member_index)))
    }

    pub fn wav(&self, label: &EnsembleLabel, utterance: &str, member_index: usize) -> PathBuf {
        self.renditions_dir(label)
            .join(format!("{utterance}.{}.wav", side(member_index)))
    }

    pub fn scores(&self, label: &EnsembleLabel) -> PathBuf {
        self.root.join("scores").join(format!("{}.jsonl", label_slug(label)))
    }

    pub fn score_summary(&self) -> PathBuf {
        self.root.join("scores").join("summary.json")
    }

    pub fn records(&self, label: &EnsembleLabel, control: bool) -> PathBuf {
        let suffix = if control { ".random" } else { "" };
        self.root
            .join("records")
            .join(format!("{}{suffix}.jsonl", label_slug(label)))
    }

    pub fn results_json(&self) -> PathBuf {
        self.root.join("results.json")
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.json")
    }

    pub fn error(&self) -> PathBuf {
        self.root.join("error.json")
    }
}

pub(crate) fn side(member_index: usize) -> &'static str {
    if member_index == 0 {
        "A"
    } else {
        "B"
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(what: &str, path: &Path) -> Result<T, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::missing(what, path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// A header line followed by one JSON value per line.
pub(crate) fn write_jsonl<H: Serialize, T: Serialize>(path: &Path, header: &H, rows: &[T]) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let io = |e| PipelineError::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(out, "{}", serde_json::to_string(header).expect("header serializes")).map_err(io)?;
    for row in rows {
        writeln!(out, "{}", serde_json::to_string(row).expect("row serializes")).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub(crate) fn read_jsonl<H: DeserializeOwned, T: DeserializeOwned>(
    what: &str,
    path: &Path,
) -> Result<(H, Vec<T>), PipelineError> {
    if !path.exists() {
        return Err(PipelineError::missing(what, path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let bad = |line: usize, reason: String| PipelineError::Artifact {
        path: path.display().to_string(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| bad(1, "missing header".into()))?
        .map_err(|e| PipelineError::io(path, e))?;
    let header = serde_json::from_str(&header_line).map_err(|e| bad(1, e.to_string()))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        rows.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?);
    }
    Ok((header, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub utterance_id: String,
    pub member_index: usize,
    /// Checkpoint name, e.g. `rnn-a`; also keys the synthesis noise.
    pub member: String,
}

#[derive(Serialize, Deserialize)]
struct FeatureRow {
    phone: usize,
    voiced: bool,
    f0_z: f64,
    energy_z: f64,
    logdur_z: f64,
}

/// Per-phone predicted features of one rendition.
pub fn write_features(
    path: &Path,
    header: &FeatureHeader,
    phones: &[usize],
    targets: &ProsodyTargets,
) -> Result<(), PipelineError> {
    let rows: Vec<FeatureRow> = (0..targets.len())
        .map(|i| FeatureRow {
            phone: phones[i],
            voiced: targets.voiced_mask[i],
            f0_z: targets.f0_z[i],
            energy_z: targets.energy_z[i],
            logdur_z: targets.logdur_z[i],
        })
        .collect();
    write_jsonl(path, header, &rows)
}

pub fn read_features(path: &Path) -> Result<(FeatureHeader, ProsodyTargets), PipelineError> {
    let (header, rows): (FeatureHeader, Vec<FeatureRow>) = read_jsonl("feature file", path)?;
    let targets = ProsodyTargets {
        f0_z: rows.iter().map(|r| r.f0_z).collect(),
        energy_z: rows.iter().map(|r| r.energy_z).collect(),
        logdur_z: rows.iter().map(|r| r.logdur_z).collect(),
        voiced_mask: rows.iter().map(|r| r.voiced).collect(),
    };
    targets.validate().map_err(|reason| PipelineError::Artifact {
        path: path.display().to_string(),
        reason,
    })?;
    Ok((header, targets))
}
