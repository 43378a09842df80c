use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::ContourTracks;
use super::{HOP, SAMPLE_RATE};

pub const HARMONIC_CEILING_HZ: f64 = 5000.0;
/// 5 ms linear cross-fade at voicing changes.
pub const CROSSFADE: usize = 80;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    /// Samples that had to be clipped into [-1, 1].
    pub clipped: usize,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
            clipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Per-sample voicing weight: 1 inside voiced frames, 0 inside unvoiced
/// ones, with a linear ramp of `CROSSFADE` samples centred on each change.
fn voicing_weights(voiced: &[bool]) -> Vec<f64> {
    let len = voiced.len() * HOP;
    let mut w: Vec<f64> = voiced
        .iter()
        .flat_map(|v| std::iter::repeat(if *v { 1.0 } else { 0.0 }).take(HOP))
        .collect();
    let half = CROSSFADE / 2;
    for j in 1..voiced.len() {
        if voiced[j] == voiced[j - 1] {
            continue;
        }
        let boundary = j * HOP;
        let (from, to) = if voiced[j] { (0.0, 1.0) } else { (1.0, 0.0) };
        for n in boundary.saturating_sub(half)..(boundary + half).min(len) {
            let t = (n + half - boundary) as f64 / CROSSFADE as f64;
            w[n] = from + (to - from) * (t + 0.5 / CROSSFADE as f64);
        }
    }
    w
}

/// Additive harmonic synthesis with a continuous-phase oscillator.
///
/// Unvoiced frames get uniform white noise; the noise stream depends only
/// on `noise_seed`, so output is a pure function of its arguments.
pub fn synthesize(tracks: &ContourTracks, noise_seed: u64) -> Waveform {
    let frames = tracks.len();
    let weights = voicing_weights(&tracks.voiced);
    // Unvoiced frames borrow the nearest voiced F0 so the ramps have a
    // pitch to fade from.
    let mut held = vec![0.0; frames];
    let mut last = tracks.voiced_f0().next().unwrap_or(0.0);
    for j in 0..frames {
        if tracks.voiced[j] {
            last = tracks.f0_hz[j];
        }
        held[j] = last;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut samples = Vec::with_capacity(frames * HOP);
    let mut phase = 0.0f64;
    let mut clipped = 0;
    let sr = SAMPLE_RATE as f64;
    for j in 0..frames {
        let amp = tracks.amplitude[j];
        let f0 = held[j];
        let harmonics = if f0 > 0.0 {
            (HARMONIC_CEILING_HZ / f0).floor() as usize
        } else {
            0
        };
        for s in 0..HOP {
            let n = j * HOP + s;
            let noise: f64 = rng.gen_range(-1.0..1.0);
            let w = weights[n];
            let mut x = (1.0 - w) * amp * noise;
            if w > 0.0 {
                let mut voiced = 0.0;
                for k in 1..=harmonics {
                    voiced += (k as f64 * phase).sin() / k as f64;
                }
                x += w * amp * voiced;
            }
            phase = (phase + TAU * f0 / sr) % TAU;
            if !x.is_finite() {
                x = 0.0;
                clipped += 1;
            } else if x.abs() > 1.0 {
                x = x.clamp(-1.0, 1.0);
                clipped += 1;
            }
            samples.push(x);
        }
    }
    if clipped > 0 {
        log::warn!("synthesis clipped {clipped} samples");
    }
    Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
        clipped,
    }
}
