use std::path::Path;

use super::synth::Waveform;
use super::DspError;

const FULL_SCALE: f64 = 32767.0;

/// 16-bit PCM mono.
pub fn write_wav(wave: &Waveform, path: &Path) -> Result<(), DspError> {
    let err = |source| DspError::Wav {
        path: path.display().to_string(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(err)?;
    for s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * FULL_SCALE).round() as i16;
        writer.write_sample(q).map_err(err)?;
    }
    writer.finalize().map_err(err)
}

pub fn read_wav(path: &Path) -> Result<Waveform, DspError> {
    let err = |source| DspError::Wav {
        path: path.display().to_string(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(DspError::UnsupportedWav {
            path: path.display().to_string(),
            reason: format!(
                "{} channel(s), {}-bit {:?}; expected mono 16-bit PCM",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
        clipped: 0,
    })
}
