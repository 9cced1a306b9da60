use std::io::Cursor;

use super::Waveform;
use crate::error::{bail, Error, Result};

/// Decodes a RIFF/WAVE PCM16 mono byte stream, scaling samples by 1/32768.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let reader = hound::WavReader::new(Cursor::new(bytes))
        .map_err(|e| Error::Format(format!("not a readable RIFF/WAVE stream: {e}")))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int
        || spec.bits_per_sample != 16
        || spec.channels != 1
    {
        bail!(
            Format,
            "unsupported fmt chunk: format={:?}, bits_per_sample={}, channels={}, sample_rate={} \
             (expected PCM int, 16 bits, mono)",
            spec.sample_format,
            spec.bits_per_sample,
            spec.channels,
            spec.sample_rate
        );
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("data chunk: {e}")))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Encodes a waveform as PCM16 mono, clipping to the representable range.
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    let mut writer = hound::WavWriter::new(&mut buf, spec)
        .map_err(|e| Error::Format(format!("wav writer: {e}")))?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Format(format!("wav writer: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Format(format!("wav writer: {e}")))?;
    Ok(buf.into_inner())
}
