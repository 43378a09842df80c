use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::synth::Waveform;
use super::{frame_count, DspError, HOP, SAMPLE_RATE};

pub const WINDOW: usize = 400;
pub const FFT_SIZE: usize = 512;
pub const N_MELS: usize = 80;
pub const N_MFCC: usize = 25;
pub const LOG_FLOOR: f64 = 1e-10;
const MEL_FMAX: f64 = 8000.0;
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Mel,
    Mfcc,
}

/// Frames × coefficients, one row per 10 ms frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub kind: MatrixKind,
    pub frames: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_coeffs(&self) -> usize {
        match self.kind {
            MatrixKind::Mel => N_MELS,
            MatrixKind::Mfcc => N_MFCC,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// The `N_MELS + 2` band edges in Hz; band `b` rises from edge `b`,
/// peaks at `b + 1` and falls to `b + 2`.
pub fn mel_band_edges() -> Vec<f64> {
    let top = hz_to_mel(MEL_FMAX);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

struct Analyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Per band: first bin and weights.
    filters: Vec<(usize, Vec<f64>)>,
    dct: Vec<Vec<f64>>,
}

fn analyzer() -> &'static Analyzer {
    static ANALYZER: OnceLock<Analyzer> = OnceLock::new();
    ANALYZER.get_or_init(|| {
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW as f64).cos())
            .collect();
        let edges = mel_band_edges();
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let filters = (0..N_MELS)
            .map(|b| {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let first = (lo / bin_hz).ceil() as usize;
                let weights = (first..=FFT_SIZE / 2)
                    .map(|k| k as f64 * bin_hz)
                    .take_while(|f| *f < hi)
                    .map(|f| if f <= mid { (f - lo) / (mid - lo) } else { (hi - f) / (hi - mid) })
                    .collect();
                (first, weights)
            })
            .collect();
        Analyzer {
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
            window,
            filters,
            dct: dct_basis(N_MELS),
        }
    })
}

/// Orthonormal DCT-II basis; row `k` is coefficient `k`.
pub fn dct_basis(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// Log-mel spectrogram on the shared 10 ms grid; windows extending past
/// either end of the signal are zero-padded.
pub fn mel_spectrogram(wave: &Waveform) -> FeatureMatrix {
    let a = analyzer();
    let x = &wave.samples;
    let n_frames = frame_count(x.len());
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut scratch = vec![Complex::new(0.0, 0.0); a.fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; FFT_SIZE / 2 + 1];
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = (i * HOP + HOP / 2) as isize - (WINDOW / 2) as isize;
        for (n, slot) in buf.iter_mut().enumerate() {
            let idx = start + n as isize;
            let v = if n < WINDOW && idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize] * a.window[n]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        a.fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = a
            .filters
            .iter()
            .map(|(first, w)| {
                let e: f64 = w.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        frames.push(row);
    }
    FeatureMatrix {
        kind: MatrixKind::Mel,
        frames,
    }
}

/// First `N_MFCC` coefficients (c0 included) of the orthonormal DCT-II of
/// each log-mel frame.
pub fn mfcc(mel: &FeatureMatrix) -> FeatureMatrix {
    let basis = &analyzer().dct[..N_MFCC];
    let frames = mel
        .frames
        .iter()
        .map(|row| {
            basis
                .iter()
                .map(|b| b.iter().zip(row).map(|(b, x)| b * x).sum())
                .collect()
        })
        .collect();
    FeatureMatrix {
        kind: MatrixKind::Mfcc,
        frames,
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    format_version: u32,
    kind: MatrixKind,
    n_frames: usize,
    n_coeffs: usize,
    config_digest: String,
}

/// Header line, then one JSON array per frame.
pub fn write_matrix_jsonl(m: &FeatureMatrix, config_digest: &str, path: &Path) -> Result<(), DspError> {
    let io = |e| DspError::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let header = MatrixHeader {
        format_version: FORMAT_VERSION,
        kind: m.kind,
        n_frames: m.n_frames(),
        n_coeffs: m.n_coeffs(),
        config_digest: config_digest.to_string(),
    };
    let line = serde_json::to_string(&header).expect("header serializes");
    writeln!(out, "{line}").map_err(io)?;
    for row in &m.frames {
        writeln!(out, "{}", serde_json::to_string(row).expect("finite rows serialize")).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_matrix_jsonl(path: &Path) -> Result<FeatureMatrix, DspError> {
    let file = File::open(path).map_err(|e| DspError::io(path, e))?;
    let bad = |line: usize, reason: String| DspError::Malformed {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| bad(1, "missing header".into()))?
        .map_err(|e| DspError::io(path, e))?;
    let header: MatrixHeader = serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(1, format!("format version {}", header.format_version)));
    }
    let mut frames = Vec::with_capacity(header.n_frames);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| DspError::io(path, e))?;
        let row: Vec<f64> = serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?;
        if row.len() != header.n_coeffs {
            return Err(bad(i + 2, format!("expected {} values, got {}", header.n_coeffs, row.len())));
        }
        frames.push(row);
    }
    if frames.len() != header.n_frames {
        return Err(bad(
            frames.len() + 1,
            format!("expected {} frames, got {}", header.n_frames, frames.len()),
        ));
    }
    Ok(FeatureMatrix {
        kind: header.kind,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_hits_floor() {
        let mel = mel_spectrogram(&Waveform::new(vec![0.0; 1600]));
        assert_eq!(mel.n_frames(), 10);
        assert!(mel.frames.iter().flatten().all(|v| *v == LOG_FLOOR.ln()));
    }

    #[test]
    fn mfcc_of_constant_and_zero() {
        let m = FeatureMatrix {
            kind: MatrixKind::Mel,
            frames: vec![vec![2.0; N_MELS], vec![0.0; N_MELS]],
        };
        let c = mfcc(&m);
        assert!((c.frames[0][0] - 2.0 * (N_MELS as f64).sqrt()).abs() < 1e-9);
        assert!(c.frames[0][1..].iter().all(|v| v.abs() < 1e-9));
        assert!(c.frames[1].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 440.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        let edges = mel_band_edges();
        assert_eq!(edges.len(), N_MELS + 2);
        assert!((edges[N_MELS + 1] - 8000.0).abs() < 1e-6);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = FeatureMatrix {
            kind: MatrixKind::Mfcc,
            frames: vec![vec![0.1; N_MFCC], vec![-3.25; N_MFCC]],
        };
        write_matrix_jsonl(&m, "d", &path).unwrap();
        assert_eq!(read_matrix_jsonl(&path).unwrap(), m);
    }
}
