use serde::{Deserialize, Serialize};

use crate::corpus::ProsodyTargets;

pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 500.0;

/// Maps z-space targets to physical units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenormConfig {
    pub f0_mean_hz: f64,
    pub f0_log_std: f64,
    /// Natural log of the mean phone duration in frames.
    pub dur_log_mean: f64,
    pub dur_log_std: f64,
    pub energy_log_mean: f64,
    pub energy_log_std: f64,
}

impl Default for DenormConfig {
    fn default() -> Self {
        Self {
            f0_mean_hz: 160.0,
            f0_log_std: 0.25,
            dur_log_mean: 8f64.ln(),
            dur_log_std: 0.4,
            energy_log_mean: 0.3f64.ln(),
            energy_log_std: 0.3,
        }
    }
}

impl DenormConfig {
    pub fn duration_frames(&self, logdur_z: f64) -> usize {
        let d = (logdur_z * self.dur_log_std + self.dur_log_mean).exp().round();
        if d.is_finite() && d >= 1.0 {
            d as usize
        } else {
            1
        }
    }

    pub fn f0_hz(&self, f0_z: f64) -> f64 {
        (f0_z * self.f0_log_std + self.f0_mean_hz.ln())
            .exp()
            .clamp(F0_MIN_HZ, F0_MAX_HZ)
    }

    pub fn amplitude(&self, energy_z: f64) -> f64 {
        (energy_z * self.energy_log_std + self.energy_log_mean).exp()
    }
}

/// Frame-level control tracks on the 10 ms grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContourTracks {
    /// Meaningful on voiced frames only; 0 elsewhere.
    pub f0_hz: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub voiced: Vec<bool>,
    /// Frames allotted to each phone.
    pub phone_frames: Vec<usize>,
}

impl ContourTracks {
    pub fn len(&self) -> usize {
        self.voiced.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voiced.is_empty()
    }

    /// F0 of the voiced frames, in frame order.
    pub fn voiced_f0(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0_hz
            .iter()
            .zip(&self.voiced)
            .filter(|(_, v)| **v)
            .map(|(f, _)| *f)
    }
}

/// Expands per-phone targets into frame tracks.
///
/// Each voiced phone pins its F0 at its centre frame; frames between the
/// centres of neighbouring voiced phones are interpolated linearly, and
/// the run's outer frames hold the nearest centre value.
pub fn render_contours(targets: &ProsodyTargets, config: &DenormConfig) -> ContourTracks {
    let n = targets.len();
    let phone_frames: Vec<usize> = targets.logdur_z.iter().map(|z| config.duration_frames(*z)).collect();
    let total: usize = phone_frames.iter().sum();
    let mut tracks = ContourTracks {
        f0_hz: vec![0.0; total],
        amplitude: Vec::with_capacity(total),
        voiced: Vec::with_capacity(total),
        phone_frames,
    };
    let mut starts = Vec::with_capacity(n);
    let mut start = 0;
    for p in 0..n {
        starts.push(start);
        let d = tracks.phone_frames[p];
        let amp = config.amplitude(targets.energy_z[p]);
        tracks.amplitude.extend(std::iter::repeat(amp).take(d));
        tracks.voiced.extend(std::iter::repeat(targets.voiced_mask[p]).take(d));
        start += d;
    }

    let mut p = 0;
    while p < n {
        if !targets.voiced_mask[p] {
            p += 1;
            continue;
        }
        let run_start = p;
        while p < n && targets.voiced_mask[p] {
            p += 1;
        }
        let run = run_start..p;
        let first = starts[run.start];
        let last = starts[run.end - 1] + tracks.phone_frames[run.end - 1];
        // (centre frame, f0) anchors in frame order.
        let anchors: Vec<(f64, f64)> = run
            .map(|q| {
                let centre = starts[q] as f64 + (tracks.phone_frames[q] as f64 - 1.0) / 2.0;
                (centre, config.f0_hz(targets.f0_z[q]))
            })
            .collect();
        let mut seg = 0;
        for frame in first..last {
            let x = frame as f64;
            while seg + 1 < anchors.len() && x > anchors[seg + 1].0 {
                seg += 1;
            }
            let (x0, y0) = anchors[seg];
            tracks.f0_hz[frame] = match anchors.get(seg + 1) {
                Some(&(x1, y1)) if x > x0 => y0 + (y1 - y0) * (x - x0) / (x1 - x0),
                _ => y0,
            };
        }
    }
    tracks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets(f0: &[f64], voiced: &[bool]) -> ProsodyTargets {
        ProsodyTargets {
            f0_z: f0.to_vec(),
            energy_z: vec![0.0; f0.len()],
            logdur_z: vec![0.0; f0.len()],
            voiced_mask: voiced.to_vec(),
        }
    }

    #[test]
    fn neutral_targets() {
        let t = targets(&[0.0; 4], &[true, false, true, true]);
        let tracks = render_contours(&t, &DenormConfig::default());
        assert_eq!(tracks.phone_frames, vec![8; 4]);
        assert_eq!(tracks.len(), 32);
        for (i, v) in tracks.voiced.iter().enumerate() {
            assert_eq!(*v, i / 8 != 1);
            if *v {
                assert!((tracks.f0_hz[i] - 160.0).abs() < 1e-9);
            }
        }
        assert!((tracks.amplitude[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn clamps_extremes() {
        let cfg = DenormConfig::default();
        // exp(4 * 0.25) * 160 is about 435 Hz, still inside the range.
        assert!((cfg.f0_hz(4.0) - 160.0 * 1f64.exp()).abs() < 1e-9);
        assert_eq!(cfg.f0_hz(5.0), F0_MAX_HZ);
        assert_eq!(cfg.f0_hz(-20.0), F0_MIN_HZ);
        assert_eq!(cfg.duration_frames(-50.0), 1);
    }

    #[test]
    fn interpolates_between_centres() {
        let cfg = DenormConfig::default();
        let t = targets(&[0.0, 1.0], &[true, true]);
        let tracks = render_contours(&t, &cfg);
        let (lo, hi) = (cfg.f0_hz(0.0), cfg.f0_hz(1.0));
        // Centres at frames 3.5 and 11.5.
        assert_eq!(tracks.f0_hz[0], lo);
        assert_eq!(tracks.f0_hz[3], lo);
        assert!((tracks.f0_hz[4] - (lo + (hi - lo) * 0.5 / 8.0)).abs() < 1e-9);
        assert_eq!(tracks.f0_hz[15], hi);
        assert!(tracks.f0_hz.windows(2).all(|w| w[1] >= w[0]));
    }
}
