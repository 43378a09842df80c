//! Variance-based selection between two renditions of an utterance.
//!
//! A [`Rendition`] computes each downstream stage (contours, waveform,
//! mel, MFCC, pitch) at most once and counts the expensive ones, so the
//! relative cost of the criteria can be asserted rather than timed. Its
//! memo cells are not thread-safe: a rendition stays with one worker.

use std::cell::{Cell, OnceCell};
use std::fmt;
use std::ops::AddAssign;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afp::{AfpError, AfpInput, AfpModel};
use crate::corpus::ProsodyTargets;
use crate::dsp::{mel_spectrogram, mfcc, render_contours, synthesize, ContourTracks, DenormConfig, FeatureMatrix, Waveform};
use crate::pitch::{f0_variance, track_pitch, PitchConfig, PitchTrack};

#[derive(Debug, Error)]
pub enum CriteriaError {
    #[error("renditions belong to different utterances: {0:?} vs {1:?}")]
    MismatchedUtterances(String, String),
    #[error("unknown criterion {0:?}; expected gv, wav-f0 or afp-f0")]
    UnknownCriterion(String),
    #[error("unknown polarity {0:?}; expected highest or lowest")]
    UnknownPolarity(String),
    #[error(transparent)]
    Afp(#[from] AfpError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CriterionKind {
    #[serde(rename = "gv")]
    Gv,
    #[serde(rename = "wav-f0")]
    WavF0,
    #[serde(rename = "afp-f0")]
    AfpF0,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 3] = [CriterionKind::Gv, CriterionKind::WavF0, CriterionKind::AfpF0];

    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::Gv => "gv",
            CriterionKind::WavF0 => "wav-f0",
            CriterionKind::AfpF0 => "afp-f0",
        }
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriterionKind {
    type Err = CriteriaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gv" => Ok(CriterionKind::Gv),
            "wav-f0" => Ok(CriterionKind::WavF0),
            "afp-f0" => Ok(CriterionKind::AfpF0),
            _ => Err(CriteriaError::UnknownCriterion(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    #[default]
    Highest,
    Lowest,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Highest => "highest",
            Polarity::Lowest => "lowest",
        })
    }
}

impl FromStr for Polarity {
    type Err = CriteriaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "highest" => Ok(Polarity::Highest),
            "lowest" => Ok(Polarity::Lowest),
            _ => Err(CriteriaError::UnknownPolarity(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CriterionSpec {
    pub kind: CriterionKind,
    #[serde(default)]
    pub polarity: Polarity,
}

impl CriterionSpec {
    pub fn new(kind: CriterionKind, polarity: Polarity) -> Self {
        Self { kind, polarity }
    }

    /// The three criteria as published: highest variance wins.
    pub fn defaults() -> Vec<CriterionSpec> {
        CriterionKind::ALL
            .iter()
            .map(|k| CriterionSpec::new(*k, Polarity::Highest))
            .collect()
    }

    /// Stable label such as `afp-f0/highest`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.kind, self.polarity)
    }
}

/// How per-coefficient MFCC variances are combined into one GV value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GvNormalization {
    #[default]
    SumOfVariances,
    MeanOfVariances,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    pub afp_forwards: usize,
    pub synth_calls: usize,
    pub mel_calls: usize,
    pub pitch_calls: usize,
}

impl AddAssign for StageCounters {
    fn add_assign(&mut self, o: Self) {
        self.afp_forwards += o.afp_forwards;
        self.synth_calls += o.synth_calls;
        self.mel_calls += o.mel_calls;
        self.pitch_calls += o.pitch_calls;
    }
}

/// Settings shared by every rendition of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub denorm: DenormConfig,
    pub pitch: PitchConfig,
    pub gv_normalization: GvNormalization,
}

/// One ensemble member's version of one utterance.
#[derive(Debug)]
pub struct Rendition {
    pub utterance_id: String,
    pub member_index: usize,
    predicted: Option<ProsodyTargets>,
    noise_seed: u64,
    settings: RenderSettings,
    tracks: OnceCell<ContourTracks>,
    waveform: OnceCell<Waveform>,
    mel: OnceCell<FeatureMatrix>,
    mfcc: OnceCell<FeatureMatrix>,
    pitch: OnceCell<Option<PitchTrack>>,
    afp_forwards: Cell<usize>,
    synth_calls: Cell<usize>,
    mel_calls: Cell<usize>,
    pitch_calls: Cell<usize>,
}

impl Rendition {
    fn empty(utterance_id: &str, member_index: usize, noise_seed: u64, settings: RenderSettings) -> Self {
        Self {
            utterance_id: utterance_id.to_string(),
            member_index,
            predicted: None,
            noise_seed,
            settings,
            tracks: OnceCell::new(),
            waveform: OnceCell::new(),
            mel: OnceCell::new(),
            mfcc: OnceCell::new(),
            pitch: OnceCell::new(),
            afp_forwards: Cell::new(0),
            synth_calls: Cell::new(0),
            mel_calls: Cell::new(0),
            pitch_calls: Cell::new(0),
        }
    }

    /// Runs the predictor once on `input`.
    pub fn predict(
        utterance_id: &str,
        member_index: usize,
        model: &AfpModel,
        input: &AfpInput,
        noise_seed: u64,
        settings: RenderSettings,
    ) -> Result<Self, CriteriaError> {
        let mut r = Self::empty(utterance_id, member_index, noise_seed, settings);
        r.predicted = Some(model.predict(input)?);
        r.afp_forwards.set(1);
        Ok(r)
    }

    /// From features predicted elsewhere (standalone scoring).
    pub fn from_features(
        utterance_id: &str,
        member_index: usize,
        predicted: ProsodyTargets,
        noise_seed: u64,
        settings: RenderSettings,
    ) -> Self {
        let mut r = Self::empty(utterance_id, member_index, noise_seed, settings);
        r.predicted = Some(predicted);
        r
    }

    /// From audio alone; AFP-F0 is unscorable for such a rendition.
    pub fn from_waveform(utterance_id: &str, member_index: usize, wave: Waveform, settings: RenderSettings) -> Self {
        let r = Self::empty(utterance_id, member_index, 0, settings);
        r.waveform.set(wave).expect("fresh cell");
        r
    }

    pub fn predicted(&self) -> Option<&ProsodyTargets> {
        self.predicted.as_ref()
    }

    pub fn counters(&self) -> StageCounters {
        StageCounters {
            afp_forwards: self.afp_forwards.get(),
            synth_calls: self.synth_calls.get(),
            mel_calls: self.mel_calls.get(),
            pitch_calls: self.pitch_calls.get(),
        }
    }

    /// Frame-level contours; `None` for audio-only renditions.
    pub fn tracks(&self) -> Option<&ContourTracks> {
        let p = self.predicted.as_ref()?;
        Some(self.tracks.get_or_init(|| render_contours(p, &self.settings.denorm)))
    }

    pub fn waveform(&self) -> Option<&Waveform> {
        if let Some(w) = self.waveform.get() {
            return Some(w);
        }
        let tracks = self.tracks()?;
        Some(self.waveform.get_or_init(|| {
            self.synth_calls.set(self.synth_calls.get() + 1);
            synthesize(tracks, self.noise_seed)
        }))
    }

    pub fn mfcc(&self) -> Option<&FeatureMatrix> {
        if let Some(m) = self.mfcc.get() {
            return Some(m);
        }
        let wave = self.waveform()?;
        let mel = self.mel.get_or_init(|| {
            self.mel_calls.set(self.mel_calls.get() + 1);
            mel_spectrogram(wave)
        });
        Some(self.mfcc.get_or_init(|| mfcc(mel)))
    }

    pub fn pitch_track(&self) -> Option<&PitchTrack> {
        let wave = self.waveform()?;
        self.pitch
            .get_or_init(|| {
                self.pitch_calls.set(self.pitch_calls.get() + 1);
                match track_pitch(wave, &self.settings.pitch) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        log::warn!("{}[{}]: pitch tracking failed: {e}", self.utterance_id, self.member_index);
                        None
                    }
                }
            })
            .as_ref()
    }
}

/// Why a rendition has no score.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unscorable(pub String);

pub type Score = Result<f64, Unscorable>;

fn population_variance(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    (n > 0).then(|| m2 / n as f64)
}

/// Per-coefficient population variance across frames, combined per `norm`.
pub fn gv_of(m: &FeatureMatrix, norm: GvNormalization) -> Score {
    if m.n_frames() < 2 {
        return Err(Unscorable(format!("{} frame(s); GV needs at least 2", m.n_frames())));
    }
    let cols = m.frames[0].len();
    let total: f64 = (0..cols)
        .map(|c| population_variance(m.frames.iter().map(|row| row[c])).expect("non-empty"))
        .sum();
    Ok(match norm {
        GvNormalization::SumOfVariances => total,
        GvNormalization::MeanOfVariances => total / cols as f64,
    })
}

/// Population variance of predicted `f0_z` over voiced phones.
pub fn afp_f0_of(targets: &ProsodyTargets) -> Score {
    population_variance(targets.voiced_f0()).ok_or_else(|| Unscorable("no voiced phones".into()))
}

pub fn gv_score(r: &Rendition) -> Score {
    let m = r.mfcc().ok_or_else(|| Unscorable("no audio or features to render".into()))?;
    gv_of(m, r.settings.gv_normalization)
}

pub fn wav_f0_score(r: &Rendition) -> Score {
    if r.waveform().is_none() {
        return Err(Unscorable("no audio or features to render".into()));
    }
    let track = r
        .pitch_track()
        .ok_or_else(|| Unscorable("waveform too short to track".into()))?;
    f0_variance(track).map_err(|_| Unscorable("no voiced frames".into()))
}

pub fn afp_f0_score(r: &Rendition) -> Score {
    let p = r
        .predicted()
        .ok_or_else(|| Unscorable("no predicted features".into()))?;
    afp_f0_of(p)
}

pub fn score(r: &Rendition, kind: CriterionKind) -> Score {
    match kind {
        CriterionKind::Gv => gv_score(r),
        CriterionKind::WavF0 => wav_f0_score(r),
        CriterionKind::AfpF0 => afp_f0_score(r),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub utterance_id: String,
    pub criterion: CriterionSpec,
    pub chosen_index: usize,
    /// `None` where a rendition was unscorable.
    pub scores: [Option<f64>; 2],
    pub tie: bool,
    pub unscorable: bool,
}

/// Picks between two scores. Exact ties and double failures go to index 0;
/// a single unscorable rendition loses.
pub fn choose(scores: [Option<f64>; 2], polarity: Polarity) -> (usize, bool, bool) {
    match scores {
        [Some(a), Some(b)] => {
            if a == b {
                (0, true, false)
            } else {
                let b_wins = match polarity {
                    Polarity::Highest => b > a,
                    Polarity::Lowest => b < a,
                };
                (usize::from(b_wins), false, false)
            }
        }
        [Some(_), None] => (0, false, true),
        [None, Some(_)] => (1, false, true),
        [None, None] => (0, false, true),
    }
}

pub fn select(pair: [&Rendition; 2], criterion: CriterionSpec) -> Result<SelectionResult, CriteriaError> {
    let [a, b] = pair;
    if a.utterance_id != b.utterance_id {
        return Err(CriteriaError::MismatchedUtterances(
            a.utterance_id.clone(),
            b.utterance_id.clone(),
        ));
    }
    let scores = pair.map(|r| match score(r, criterion.kind) {
        Ok(v) if v.is_finite() => Some(v),
        Ok(v) => {
            log::warn!("{}[{}]: non-finite {} score {v}", r.utterance_id, r.member_index, criterion.kind);
            None
        }
        Err(Unscorable(why)) => {
            log::info!("{}[{}]: {} unscorable: {why}", r.utterance_id, r.member_index, criterion.kind);
            None
        }
    });
    let (chosen_index, tie, unscorable) = choose(scores, criterion.polarity);
    Ok(SelectionResult {
        utterance_id: a.utterance_id.clone(),
        criterion,
        chosen_index,
        scores,
        tie,
        unscorable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::MatrixKind;

    fn targets(f0: &[f64], voiced: &[bool]) -> ProsodyTargets {
        ProsodyTargets {
            f0_z: f0.to_vec(),
            energy_z: vec![0.0; f0.len()],
            logdur_z: vec![0.0; f0.len()],
            voiced_mask: voiced.to_vec(),
        }
    }

    fn rendition(id: &str, idx: usize, f0: &[f64]) -> Rendition {
        Rendition::from_features(id, idx, targets(f0, &vec![true; f0.len()]), 7, RenderSettings::default())
    }

    #[test]
    fn gv_examples() {
        let m = FeatureMatrix {
            kind: MatrixKind::Mfcc,
            frames: vec![vec![0.0, 1.0], vec![2.0, 3.0]],
        };
        assert_eq!(gv_of(&m, GvNormalization::SumOfVariances).unwrap(), 2.0);
        assert_eq!(gv_of(&m, GvNormalization::MeanOfVariances).unwrap(), 1.0);
        let flat = FeatureMatrix {
            kind: MatrixKind::Mfcc,
            frames: vec![vec![4.0; 25]; 6],
        };
        assert_eq!(gv_of(&flat, GvNormalization::SumOfVariances).unwrap(), 0.0);
        let one = FeatureMatrix {
            kind: MatrixKind::Mfcc,
            frames: vec![vec![4.0; 25]],
        };
        assert!(gv_of(&one, GvNormalization::SumOfVariances).is_err());
    }

    #[test]
    fn afp_f0_examples() {
        assert!((afp_f0_of(&targets(&[1.0, 2.0, 3.0], &[true; 3])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(afp_f0_of(&targets(&[1.5], &[true])).unwrap(), 0.0);
        assert!(afp_f0_of(&targets(&[0.0, 0.0], &[false; 2])).is_err());
        // Unvoiced phones do not count.
        assert_eq!(afp_f0_of(&targets(&[1.0, 9.0, 1.0], &[true, false, true])).unwrap(), 0.0);
    }

    #[test]
    fn choose_rules() {
        assert_eq!(choose([Some(0.5), Some(0.7)], Polarity::Highest), (1, false, false));
        assert_eq!(choose([Some(0.5), Some(0.7)], Polarity::Lowest), (0, false, false));
        assert_eq!(choose([Some(0.4), Some(0.4)], Polarity::Highest), (0, true, false));
        assert_eq!(choose([None, Some(0.1)], Polarity::Lowest), (1, false, true));
        assert_eq!(choose([Some(0.1), None], Polarity::Highest), (0, false, true));
        assert_eq!(choose([None, None], Polarity::Highest), (0, false, true));
    }

    #[test]
    fn afp_f0_touches_no_stage() {
        let a = rendition("u1", 0, &[0.0, 1.0, -1.0]);
        let b = rendition("u1", 1, &[0.0, 0.1, -0.1]);
        let r = select([&a, &b], CriterionSpec::new(CriterionKind::AfpF0, Polarity::Highest)).unwrap();
        assert_eq!(r.chosen_index, 0);
        assert_eq!(a.counters(), StageCounters::default());
        assert_eq!(b.counters(), StageCounters::default());
    }

    #[test]
    fn stages_are_memoized() {
        let a = rendition("u1", 0, &[0.0, 1.0, -1.0, 0.5]);
        gv_score(&a).unwrap();
        gv_score(&a).unwrap();
        wav_f0_score(&a).unwrap();
        wav_f0_score(&a).unwrap();
        let c = a.counters();
        assert_eq!((c.synth_calls, c.mel_calls, c.pitch_calls), (1, 1, 1));
    }

    #[test]
    fn mismatched_ids_rejected() {
        let a = rendition("u1", 0, &[0.0, 1.0]);
        let b = rendition("u2", 1, &[0.0, 1.0]);
        assert!(matches!(
            select([&a, &b], CriterionSpec::new(CriterionKind::Gv, Polarity::Highest)),
            Err(CriteriaError::MismatchedUtterances(..))
        ));
    }

    #[test]
    fn parse_labels() {
        assert_eq!("wav-f0".parse::<CriterionKind>().unwrap(), CriterionKind::WavF0);
        assert_eq!("AFP_F0".parse::<CriterionKind>().unwrap(), CriterionKind::AfpF0);
        assert!("mcd".parse::<CriterionKind>().is_err());
        assert_eq!("Lowest".parse::<Polarity>().unwrap(), Polarity::Lowest);
        assert_eq!(
            CriterionSpec::new(CriterionKind::Gv, Polarity::Lowest).label(),
            "gv/lowest"
        );
    }
}
