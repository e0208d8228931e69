//! RIFF/WAVE ingestion restricted to 16 kHz mono 16-bit signed PCM.

use std::io::{Cursor, Read};
use std::path::Path;

use super::{AudioBuffer, SAMPLE_RATE};
use crate::error::{KwsError, Result};
use crate::io::write_atomic;

fn unsupported(field: &'static str, detail: impl Into<String>) -> KwsError {
    KwsError::UnsupportedWav {
        field,
        detail: detail.into(),
    }
}

fn check_spec(spec: &hound::WavSpec) -> Result<()> {
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(unsupported("sample_format", "expected integer PCM, got float"));
    }
    if spec.bits_per_sample != 16 {
        return Err(unsupported(
            "bits_per_sample",
            format!("expected 16, got {}", spec.bits_per_sample),
        ));
    }
    if spec.channels != 1 {
        return Err(unsupported(
            "channels",
            format!("expected mono (1), got {}", spec.channels),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(unsupported(
            "sample_rate",
            format!("expected {SAMPLE_RATE} Hz, got {}", spec.sample_rate),
        ));
    }
    Ok(())
}

pub fn read_wav_from<R: Read>(reader: R) -> Result<AudioBuffer> {
    let mut wav = hound::WavReader::new(reader).map_err(|e| match e {
        hound::Error::IoError(io) => KwsError::Io(io),
        hound::Error::Unsupported => unsupported("audio_format", "only PCM is supported"),
        other => unsupported("header", other.to_string()),
    })?;
    check_spec(&wav.spec())?;
    let samples = wav
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| unsupported("data", e.to_string()))?;
    Ok(AudioBuffer::new(samples))
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let file = std::fs::File::open(path).map_err(|e| KwsError::file(path, e))?;
    read_wav_from(std::io::BufReader::new(file)).map_err(|e| match e {
        KwsError::UnsupportedWav { field, detail } => KwsError::UnsupportedWav {
            field,
            detail: format!("{detail} ({})", path.display()),
        },
        other => other,
    })
}

pub fn encode_wav(audio: &AudioBuffer) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec)
            .map_err(|e| unsupported("header", e.to_string()))?;
        for &s in &audio.samples {
            w.write_sample(s).map_err(|e| unsupported("data", e.to_string()))?;
        }
        w.finalize().map_err(|e| unsupported("data", e.to_string()))?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    write_atomic(path, &encode_wav(audio)?)
}
