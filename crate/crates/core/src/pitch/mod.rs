//! NCCF-based F0 tracking with dynamic-programming smoothing.
//!
//! Candidates come from a coarse normalized cross-correlation search on a
//! 2 kHz copy of the signal, refined at the full rate with parabolic
//! interpolation. A Viterbi pass over voiced candidates plus one unvoiced
//! hypothesis per frame picks the track.

mod dp;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{frame_count, Waveform, HOP};

pub use dp::{path_cost, viterbi, Hypothesis, TransitionCosts};

const DECIMATION: usize = 8;
/// Correlation window: 20 ms.
const CORR_WINDOW: usize = 320;
const FILTER_TAPS: usize = 63;
const FILTER_CUTOFF_HZ: f64 = 900.0;
const MAX_CANDIDATES: usize = 4;
/// Relative height a coarse peak needs, versus the frame's best peak.
const PEAK_RATIO: f64 = 0.6;

#[derive(Debug, Error)]
pub enum PitchError {
    #[error("waveform has {len} samples; at least {min} are needed")]
    TooShort { len: usize, min: usize },
    #[error("sample rate {0} Hz unsupported; expected 16000")]
    SampleRate(u32),
    #[error("no voiced frames")]
    Unscorable,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PitchConfig {
    pub f0_min: f64,
    pub f0_max: f64,
    /// Minimum refined NCCF for a voiced candidate.
    pub nccf_threshold: f64,
    /// Weight of the lag penalty that breaks octave ties toward shorter lags.
    pub lag_weight: f64,
    /// Added to the frame's best NCCF to form the unvoiced cost.
    pub unvoiced_bias: f64,
    pub octave_weight: f64,
    pub voicing_switch: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            f0_min: 50.0,
            f0_max: 500.0,
            nccf_threshold: 0.3,
            lag_weight: 0.3,
            unvoiced_bias: 0.0,
            octave_weight: 0.4,
            voicing_switch: 0.2,
        }
    }
}

impl PitchConfig {
    fn transitions(&self) -> TransitionCosts {
        TransitionCosts {
            octave_weight: self.octave_weight,
            voicing_switch: self.voicing_switch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchFrame {
    /// 0 when unvoiced.
    pub f0_hz: f64,
    pub voiced: bool,
    pub nccf: f64,
}

/// One decision per 10 ms frame, on the same grid as the mel analysis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    pub frames: Vec<PitchFrame>,
}

impl PitchTrack {
    pub fn voiced_f0(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().filter(|f| f.voiced).map(|f| f.f0_hz)
    }

    pub fn voiced_count(&self) -> usize {
        self.frames.iter().filter(|f| f.voiced).count()
    }
}

/// Shortest waveform the tracker accepts: one correlation window plus the
/// longest lag, 40 ms at the default 50 Hz floor.
pub fn min_samples(config: &PitchConfig) -> usize {
    CORR_WINDOW + max_lag(config)
}

fn max_lag(config: &PitchConfig) -> usize {
    (16_000.0 / config.f0_min).ceil() as usize
}

fn min_lag(config: &PitchConfig) -> usize {
    (16_000.0 / config.f0_max).floor() as usize
}

/// Windowed-sinc low-pass then keep every 8th sample.
fn decimate(x: &[f64]) -> Vec<f64> {
    let fc = FILTER_CUTOFF_HZ / 16_000.0;
    let mid = (FILTER_TAPS / 2) as isize;
    let taps: Vec<f64> = (0..FILTER_TAPS as isize)
        .map(|n| {
            let m = (n - mid) as f64;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * m).sin() / (std::f64::consts::PI * m)
            };
            let hamming = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (FILTER_TAPS - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    (0..x.len().div_ceil(DECIMATION))
        .map(|j| {
            let centre = (j * DECIMATION) as isize;
            taps.iter()
                .enumerate()
                .map(|(n, h)| {
                    let idx = centre + n as isize - mid;
                    if idx >= 0 && (idx as usize) < x.len() {
                        h * x[idx as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Normalized cross-correlation of `x[start..start+w]` with the window
/// `lag` samples later; samples outside the signal read as zero.
fn nccf(x: &[f64], start: isize, w: usize, lag: usize) -> f64 {
    let at = |i: isize| {
        if i >= 0 && (i as usize) < x.len() {
            x[i as usize]
        } else {
            0.0
        }
    };
    let (mut cross, mut e0, mut e1) = (0.0, 0.0, 0.0);
    for n in 0..w as isize {
        let a = at(start + n);
        let b = at(start + n + lag as isize);
        cross += a * b;
        e0 += a * a;
        e1 += b * b;
    }
    let denom = (e0 * e1).sqrt();
    if denom > f64::MIN_POSITIVE * 1e10 {
        cross / denom
    } else {
        0.0
    }
}

/// Voiced hypotheses for one frame: coarse peaks, refined at full rate.
fn frame_candidates(full: &[f64], coarse: &[f64], frame: usize, config: &PitchConfig) -> Vec<(f64, f64)> {
    let (lo, hi) = (min_lag(config), max_lag(config));
    let start = (frame * HOP + HOP / 2) as isize - (CORR_WINDOW / 2) as isize;
    let c_lo = (lo / DECIMATION).max(1);
    let c_hi = hi.div_ceil(DECIMATION);
    let c_start = start.div_euclid(DECIMATION as isize);
    let r: Vec<f64> = (c_lo..=c_hi)
        .map(|lag| nccf(coarse, c_start, CORR_WINDOW / DECIMATION, lag))
        .collect();
    let best = r.iter().copied().fold(0.0f64, f64::max);
    if best <= 0.0 {
        return Vec::new();
    }
    let mut peaks: Vec<(usize, f64)> = (0..r.len())
        .filter(|&i| {
            let left = if i > 0 { r[i - 1] } else { f64::NEG_INFINITY };
            let right = r.get(i + 1).copied().unwrap_or(f64::NEG_INFINITY);
            r[i] >= left && r[i] > right && r[i] >= PEAK_RATIO * best
        })
        .map(|i| (c_lo + i, r[i]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    peaks.truncate(MAX_CANDIDATES);

    let mut out: Vec<(f64, f64)> = Vec::new();
    for (coarse_lag, _) in peaks {
        let centre = coarse_lag * DECIMATION;
        let from = centre.saturating_sub(DECIMATION).max(lo);
        let to = (centre + DECIMATION).min(hi);
        let scores: Vec<(usize, f64)> = (from..=to).map(|l| (l, nccf(full, start, CORR_WINDOW, l))).collect();
        let Some(&(lag, peak)) = scores.iter().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0))) else {
            continue;
        };
        if peak < config.nccf_threshold {
            continue;
        }
        let mut refined = lag as f64;
        if lag > from && lag < to {
            let l = nccf(full, start, CORR_WINDOW, lag - 1);
            let r = nccf(full, start, CORR_WINDOW, lag + 1);
            let curvature = l - 2.0 * peak + r;
            if curvature < 0.0 {
                refined += 0.5 * (l - r) / curvature;
            }
        }
        let f0 = (16_000.0 / refined).clamp(config.f0_min, config.f0_max);
        if out.iter().all(|(f, _)| (f / f0).log2().abs() > 0.01) {
            out.push((f0, peak));
        }
    }
    out
}

pub fn track_pitch(wave: &Waveform, config: &PitchConfig) -> Result<PitchTrack, PitchError> {
    if wave.sample_rate != 16_000 {
        return Err(PitchError::SampleRate(wave.sample_rate));
    }
    let min = min_samples(config);
    if wave.len() < min {
        return Err(PitchError::TooShort { len: wave.len(), min });
    }
    let x = &wave.samples;
    let coarse = decimate(x);
    let hi = max_lag(config) as f64;
    let frames: Vec<Vec<Hypothesis>> = (0..frame_count(x.len()))
        .map(|i| {
            let cands = frame_candidates(x, &coarse, i, config);
            let best = cands.iter().map(|c| c.1).fold(0.0f64, f64::max);
            let mut hyps = vec![Hypothesis {
                f0_hz: None,
                nccf: best,
                local_cost: config.unvoiced_bias + best,
            }];
            hyps.extend(cands.into_iter().map(|(f0, r)| {
                let lag = 16_000.0 / f0;
                Hypothesis {
                    f0_hz: Some(f0),
                    nccf: r,
                    local_cost: 1.0 - r * (1.0 - config.lag_weight * lag / hi),
                }
            }));
            hyps
        })
        .collect();
    let (path, _) = viterbi(&frames, &config.transitions());
    Ok(PitchTrack {
        frames: path
            .iter()
            .zip(&frames)
            .map(|(&i, hyps)| {
                let h = hyps[i];
                PitchFrame {
                    f0_hz: h.f0_hz.unwrap_or(0.0),
                    voiced: h.f0_hz.is_some(),
                    nccf: h.nccf,
                }
            })
            .collect(),
    })
}

/// Population variance (Hz²) of F0 over voiced frames.
pub fn f0_variance(track: &PitchTrack) -> Result<f64, PitchError> {
    let mut n = 0usize;
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for f in track.voiced_f0() {
        n += 1;
        let d = f - mean;
        mean += d / n as f64;
        m2 += d * (f - mean);
    }
    if n == 0 {
        return Err(PitchError::Unscorable);
    }
    Ok(m2 / n as f64)
}

/// Debug dump: one `{frame, f0_hz, voiced, nccf}` object per line.
pub fn write_track_jsonl(track: &PitchTrack, path: &Path) -> Result<(), PitchError> {
    #[derive(Serialize)]
    struct Row {
        frame: usize,
        f0_hz: f64,
        voiced: bool,
        nccf: f64,
    }
    let io = |source| PitchError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for (frame, f) in track.frames.iter().enumerate() {
        let row = Row {
            frame,
            f0_hz: f.f0_hz,
            voiced: f.voiced,
            nccf: f.nccf,
        };
        writeln!(out, "{}", serde_json::to_string(&row).expect("row serializes")).map_err(io)?;
    }
    out.flush().map_err(io)
}
