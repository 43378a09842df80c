//! Synthetic expressive corpus: phone sequences with style-conditioned
//! prosody targets in speaker-normalised (z) space.
//!
//! Each style owns a slow sinusoidal trajectory per feature (F0, energy,
//! log-duration) over the normalized utterance position; each phone adds a
//! fixed offset; Gaussian noise with standard deviation `noise_sigma` is the
//! irreducible part that lets differently seeded predictors disagree.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::config_digest;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("{path}: line {line}: {reason} (last valid line: {last_valid_line})")]
    Malformed {
        path: String,
        line: usize,
        last_valid_line: usize,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSpec {
    pub symbol: String,
    pub voiced: bool,
}

/// Fixed phone inventory; a phone's id is its index here.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Inventory {
    phones: Vec<PhoneSpec>,
}

const DEFAULT_VOICED: [&str; 14] = [
    "a", "e", "i", "o", "u", "m", "n", "ny", "l", "r", "rr", "b", "d", "g",
];
const DEFAULT_UNVOICED: [&str; 18] = [
    "p", "t", "k", "f", "s", "x", "ch", "th", "h", "sh", "ts", "kh", "ph", "tr", "ks", "ps", "sp",
    "sil",
];

impl Inventory {
    pub fn new(phones: Vec<PhoneSpec>) -> Result<Self, CorpusError> {
        let inv = Self { phones };
        inv.validate()?;
        Ok(inv)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.phones.is_empty() {
            return Err(CorpusError::InvalidConfig("empty inventory".into()));
        }
        if !self.phones.iter().any(|p| p.voiced) {
            return Err(CorpusError::InvalidConfig(
                "inventory has no voiced phones".into(),
            ));
        }
        let mut symbols: Vec<&str> = self.phones.iter().map(|p| p.symbol.as_str()).collect();
        symbols.sort_unstable();
        if symbols.windows(2).any(|w| w[0] == w[1]) {
            return Err(CorpusError::InvalidConfig("duplicate phone symbol".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn phones(&self) -> &[PhoneSpec] {
        &self.phones
    }

    pub fn phone(&self, id: usize) -> Phone {
        Phone {
            id,
            voiced: self.phones[id].voiced,
        }
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.phones[id].symbol
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.phones.iter().position(|p| p.symbol == symbol)
    }

    pub fn voiced_count(&self) -> usize {
        self.phones.iter().filter(|p| p.voiced).count()
    }
}

impl Default for Inventory {
    /// 32 symbols, 14 of them voiced.
    fn default() -> Self {
        let phones = DEFAULT_VOICED
            .iter()
            .map(|s| (s, true))
            .chain(DEFAULT_UNVOICED.iter().map(|s| (s, false)))
            .map(|(s, voiced)| PhoneSpec {
                symbol: s.to_string(),
                voiced,
            })
            .collect();
        Self { phones }
    }
}

/// A phone occurrence. Voicing is a property of the symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phone {
    pub id: usize,
    pub voiced: bool,
}

/// Per-phone speaker-normalised prosody features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyTargets {
    pub f0_z: Vec<f64>,
    pub energy_z: Vec<f64>,
    pub logdur_z: Vec<f64>,
    pub voiced_mask: Vec<bool>,
}

impl ProsodyTargets {
    pub fn len(&self) -> usize {
        self.voiced_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voiced_mask.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.voiced_mask.len();
        if self.f0_z.len() != n || self.energy_z.len() != n || self.logdur_z.len() != n {
            return Err(format!(
                "feature lengths {}/{}/{} do not match {n} phones",
                self.f0_z.len(),
                self.energy_z.len(),
                self.logdur_z.len()
            ));
        }
        let finite = self
            .f0_z
            .iter()
            .chain(&self.energy_z)
            .chain(&self.logdur_z)
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite prosody value".into());
        }
        Ok(())
    }

    /// F0 values of voiced phones only.
    pub fn voiced_f0(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0_z
            .iter()
            .zip(&self.voiced_mask)
            .filter(|(_, v)| **v)
            .map(|(f, _)| *f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: u32,
    pub style_id: usize,
    pub phones: Vec<Phone>,
    pub targets: ProsodyTargets,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub inventory: Inventory,
    pub n_styles: usize,
    pub n_speakers: u32,
    pub min_phones: usize,
    pub max_phones: usize,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            inventory: Inventory::default(),
            n_styles: 8,
            n_speakers: 4,
            min_phones: 8,
            max_phones: 40,
            noise_sigma: 0.3,
            train_size: 500,
            val_size: 50,
            test_size: 30,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.inventory.validate()?;
        if self.n_styles == 0 || self.n_speakers == 0 {
            return Err(CorpusError::InvalidConfig(
                "need at least one style and one speaker".into(),
            ));
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return Err(CorpusError::InvalidConfig(format!(
                "phone count bounds [{}, {}] are invalid",
                self.min_phones, self.max_phones
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CorpusError::InvalidConfig(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// A per-style sinusoid over normalized position `r ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub amplitude: f64,
    pub cycles: f64,
    pub phase: f64,
}

impl Trajectory {
    pub fn at(&self, r: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.cycles * r + self.phase).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub f0: Trajectory,
    pub energy: Trajectory,
    pub logdur: Trajectory,
}

/// The noise-free part of the generative process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub styles: Vec<StyleParams>,
    pub f0_offset: Vec<f64>,
    pub energy_offset: Vec<f64>,
    pub logdur_offset: Vec<f64>,
}

fn centered_offsets(rng: &mut ChaCha8Rng, n: usize, half_width: f64, include: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut raw: Vec<f64> = (0..n)
        .map(|i| {
            let v = rng.gen_range(-half_width..half_width);
            if include(i) {
                v
            } else {
                0.0
            }
        })
        .collect();
    let members: Vec<usize> = (0..n).filter(|i| include(*i)).collect();
    let mean = members.iter().map(|i| raw[*i]).sum::<f64>() / members.len().max(1) as f64;
    for i in members {
        raw[i] -= mean;
    }
    raw
}

impl GenerativeModel {
    fn sample(config: &CorpusConfig, rng: &mut ChaCha8Rng) -> Self {
        // One contour shape per style; the features differ only in amplitude.
        let styles = (0..config.n_styles)
            .map(|_| {
                let cycles = rng.gen_range(1..=2) as f64;
                let phase = rng.gen_range(0.0..2.0 * PI);
                let mut traj = |lo: f64, hi: f64| Trajectory {
                    amplitude: rng.gen_range(lo..hi),
                    cycles,
                    phase,
                };
                StyleParams {
                    f0: traj(0.8, 1.4),
                    energy: traj(0.4, 0.9),
                    logdur: traj(0.3, 0.7),
                }
            })
            .collect();
        let inv = &config.inventory;
        let n = inv.len();
        let f0_offset = centered_offsets(rng, n, 0.15, |i| inv.phones()[i].voiced);
        let energy_offset = centered_offsets(rng, n, 0.5, |_| true);
        let logdur_offset = centered_offsets(rng, n, 0.6, |_| true);
        Self {
            styles,
            f0_offset,
            energy_offset,
            logdur_offset,
        }
    }

    /// Noise-free targets for a phone sequence in a given style.
    pub fn mean_targets(&self, style_id: usize, phones: &[Phone]) -> ProsodyTargets {
        let style = &self.styles[style_id];
        let n = phones.len();
        let mut t = ProsodyTargets {
            f0_z: Vec::with_capacity(n),
            energy_z: Vec::with_capacity(n),
            logdur_z: Vec::with_capacity(n),
            voiced_mask: Vec::with_capacity(n),
        };
        for (i, phone) in phones.iter().enumerate() {
            let r = normalized_position(i, n);
            t.f0_z.push(if phone.voiced {
                style.f0.at(r) + self.f0_offset[phone.id]
            } else {
                0.0
            });
            t.energy_z.push(style.energy.at(r) + self.energy_offset[phone.id]);
            t.logdur_z.push(style.logdur.at(r) + self.logdur_offset[phone.id]);
            t.voiced_mask.push(phone.voiced);
        }
        t
    }
}

/// `i / (n - 1)`, or 0 for a single-phone sequence.
pub fn normalized_position(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub f0_z: FeatureStats,
    pub energy_z: FeatureStats,
    pub logdur_z: FeatureStats,
}

fn feature_stats(values: impl Iterator<Item = f64>) -> FeatureStats {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return FeatureStats::default();
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    FeatureStats {
        mean,
        std: var.sqrt(),
    }
}

impl ZStats {
    pub fn of(utts: &[Utterance]) -> Self {
        Self {
            f0_z: feature_stats(utts.iter().flat_map(|u| u.targets.f0_z.iter().copied())),
            energy_z: feature_stats(utts.iter().flat_map(|u| u.targets.energy_z.iter().copied())),
            logdur_z: feature_stats(utts.iter().flat_map(|u| u.targets.logdur_z.iter().copied())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub model: GenerativeModel,
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn config_digest(&self) -> String {
        config_digest(&(&self.config, self.seed))
    }
}

/// Generates a corpus; identical `(config, seed)` give identical corpora.
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GenerativeModel::sample(config, &mut rng);
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| CorpusError::InvalidConfig(e.to_string()))?;
    let inv = &config.inventory;
    let mut make = |split: Split, count: usize| -> Vec<Utterance> {
        (0..count)
            .map(|k| {
                let style_id = rng.gen_range(0..config.n_styles);
                let speaker_id = rng.gen_range(0..config.n_speakers);
                let len = rng.gen_range(config.min_phones..=config.max_phones);
                let phones: Vec<Phone> = (0..len)
                    .map(|_| inv.phone(rng.gen_range(0..inv.len())))
                    .collect();
                let mut targets = model.mean_targets(style_id, &phones);
                if config.noise_sigma > 0.0 {
                    for i in 0..len {
                        if targets.voiced_mask[i] {
                            targets.f0_z[i] += noise.sample(&mut rng);
                        }
                        targets.energy_z[i] += noise.sample(&mut rng);
                        targets.logdur_z[i] += noise.sample(&mut rng);
                    }
                }
                Utterance {
                    id: format!("{}-{k:05}", split.name()),
                    speaker_id,
                    style_id,
                    phones,
                    targets,
                }
            })
            .collect()
    };
    let train = make(Split::Train, config.train_size);
    let val = make(Split::Val, config.val_size);
    let test = make(Split::Test, config.test_size);
    Ok(Corpus {
        config: config.clone(),
        seed,
        model,
        train,
        val,
        test,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitHeader {
    format_version: u32,
    split: Split,
    inventory: Inventory,
    z_stats: ZStats,
    config_digest: String,
    seed: u64,
    config: CorpusConfig,
    model: GenerativeModel,
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    speaker_id: u32,
    style_id: usize,
    phones: Vec<String>,
    f0_z: Vec<f64>,
    energy_z: Vec<f64>,
    logdur_z: Vec<f64>,
}

/// File name of a split inside a corpus directory.
pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for split in Split::ALL {
        let path = dir.join(split_file(split));
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut out = BufWriter::new(file);
        write_split(corpus, split, &mut out).map_err(io_err(&path))?;
        out.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

fn write_split(corpus: &Corpus, split: Split, out: &mut impl Write) -> std::io::Result<()> {
    let utts = corpus.split(split);
    let header = SplitHeader {
        format_version: CORPUS_FORMAT_VERSION,
        split,
        inventory: corpus.config.inventory.clone(),
        z_stats: ZStats::of(utts),
        config_digest: corpus.config_digest(),
        seed: corpus.seed,
        config: corpus.config.clone(),
        model: corpus.model.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    let inv = &corpus.config.inventory;
    for u in utts {
        let record = UtteranceRecord {
            id: u.id.clone(),
            speaker_id: u.speaker_id,
            style_id: u.style_id,
            phones: u.phones.iter().map(|p| inv.symbol(p.id).to_string()).collect(),
            f0_z: u.targets.f0_z.clone(),
            energy_z: u.targets.energy_z.clone(),
            logdur_z: u.targets.logdur_z.clone(),
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

struct LoadedSplit {
    header: SplitHeader,
    utterances: Vec<Utterance>,
}

fn load_split(path: &Path) -> Result<LoadedSplit, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let malformed = |line: usize, reason: String| CorpusError::Malformed {
        path: path.display().to_string(),
        line,
        last_valid_line: line.saturating_sub(1),
        reason,
    };
    let mut header: Option<SplitHeader> = None;
    let mut utterances = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(io_err(path))?;
        match &header {
            None => {
                let h: SplitHeader = serde_json::from_str(&line)
                    .map_err(|e| malformed(lineno, format!("bad header: {e}")))?;
                if h.format_version != CORPUS_FORMAT_VERSION {
                    return Err(malformed(
                        lineno,
                        format!(
                            "format version {} (expected {CORPUS_FORMAT_VERSION})",
                            h.format_version
                        ),
                    ));
                }
                h.inventory.validate()?;
                header = Some(h);
            }
            Some(h) => {
                let r: UtteranceRecord = serde_json::from_str(&line)
                    .map_err(|e| malformed(lineno, format!("bad utterance record: {e}")))?;
                let utt = record_to_utterance(r, &h.inventory).map_err(|e| malformed(lineno, e))?;
                utterances.push(utt);
            }
        }
    }
    let header = header.ok_or_else(|| malformed(1, "missing header record".into()))?;
    Ok(LoadedSplit { header, utterances })
}

fn record_to_utterance(r: UtteranceRecord, inv: &Inventory) -> Result<Utterance, String> {
    let phones = r
        .phones
        .iter()
        .map(|s| {
            inv.id_of(s)
                .map(|id| inv.phone(id))
                .ok_or_else(|| format!("unknown phone symbol {s:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let targets = ProsodyTargets {
        f0_z: r.f0_z,
        energy_z: r.energy_z,
        logdur_z: r.logdur_z,
        voiced_mask: phones.iter().map(|p| p.voiced).collect(),
    };
    targets.validate()?;
    Ok(Utterance {
        id: r.id,
        speaker_id: r.speaker_id,
        style_id: r.style_id,
        phones,
        targets,
    })
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let path = dir.join(split_file(split));
        let loaded = load_split(&path)?;
        if loaded.header.split != split {
            return Err(CorpusError::Malformed {
                path: path.display().to_string(),
                line: 1,
                last_valid_line: 0,
                reason: format!("header names split {:?}", loaded.header.split),
            });
        }
        splits.push(loaded);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    for other in [&val, &test] {
        if other.header.config_digest != train.header.config_digest {
            return Err(CorpusError::InvalidConfig(
                "splits come from different corpus configs".into(),
            ));
        }
    }
    Ok(Corpus {
        config: train.header.config,
        seed: train.header.seed,
        model: train.header.model,
        train: train.utterances,
        val: val.utterances,
        test: test.utterances,
    })
}
