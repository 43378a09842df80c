//! Parametric rendering of predicted prosody: contour denormalization,
//! additive synthesis, log-mel analysis and MFCCs, WAV I/O.

mod render;
mod spectral;
mod synth;
mod wav;

use std::path::Path;

use thiserror::Error;

pub use render::{render_contours, ContourTracks, DenormConfig, F0_MAX_HZ, F0_MIN_HZ};
pub use spectral::{
    dct_basis, hz_to_mel, mel_band_edges, mel_spectrogram, mel_to_hz, mfcc, read_matrix_jsonl, write_matrix_jsonl,
    FeatureMatrix, MatrixKind, FFT_SIZE, LOG_FLOOR, N_MELS, N_MFCC, WINDOW,
};
pub use synth::{synthesize, Waveform, CROSSFADE, HARMONIC_CEILING_HZ};
pub use wav::{read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;
/// 10 ms at 16 kHz.
pub const HOP: usize = 160;

/// Number of analysis frames covering `len` samples on the shared 10 ms grid.
/// Frame `i` is centred on sample `i * HOP + HOP / 2`.
pub fn frame_count(len: usize) -> usize {
    len.div_ceil(HOP)
}

#[derive(Debug, Error)]
pub enum DspError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("wav {path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("unsupported wav {path}: {reason}")]
    UnsupportedWav { path: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

impl DspError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DspError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
