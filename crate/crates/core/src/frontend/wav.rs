use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::AudioBuffer;
use crate::real::Real;

/// Reads a mono 16-bit linear PCM RIFF/WAVE file. Samples are scaled by
/// `1/32768`, so `-32768` maps to exactly `-1.0`.
pub fn read_wav<T: Real>(path: &Path) -> Result<AudioBuffer<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    // Once the file is open, every read failure means a broken header or body.
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| match e {
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported WAVE variant".into()),
        other => Error::MalformedWav(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::ChannelCount(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{:?} with {} bits per sample (need 16-bit integer PCM)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let scale = T::of(1.0 / 32_768.0);
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| T::of(f64::from(v)) * scale)
                .map_err(|e| Error::MalformedWav(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<T>>>()?;
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM; samples are clipped to `[-1, 1]` and rounded.
pub fn write_wav<T: Real>(path: &Path, audio: &AudioBuffer<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::MalformedWav(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in audio.samples() {
        let v = (s.f64().clamp(-1.0, 1.0) * 32_768.0).round().clamp(-32_768.0, 32_767.0) as i16;
        w.write_sample(v).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}
