//! Mono 16-bit PCM WAV read/write for the canonical trial layout.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::DatasetError;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("wav io: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav format: {0}")]
    Format(String),
}

impl WavError {
    pub(crate) fn into_dataset(self, path: PathBuf) -> DatasetError {
        match self {
            WavError::Io(source) => DatasetError::Io { path, source },
            WavError::Format(detail) => DatasetError::CorruptAudio { detail, path },
        }
    }
}

pub fn write_mono_16(path: &Path, sample_rate: u32, samples: &[i16]) -> Result<(), WavError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    {
        let mut w16 = writer.get_i16_writer(samples.len() as u32);
        for &s in samples {
            w16.write_sample(s);
        }
        w16.flush().map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Returns (sample_rate, samples); rejects anything that is not mono 16-bit
/// integer PCM.
pub fn read_mono_16(path: &Path) -> Result<(u32, Vec<i16>), WavError> {
    let mut reader = hound::WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(WavError::Format(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(WavError::Format(format!(
            "{}-bit {:?}, expected 16-bit int PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples: Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    Ok((spec.sample_rate, samples.map_err(wrap)?))
}

fn wrap(e: hound::Error) -> WavError {
    match e {
        hound::Error::IoError(io) => WavError::Io(io),
        other => WavError::Format(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<i16> = (0..5000).map(|i| ((i * 7919) % 65536) as i16).collect();
        write_mono_16(&path, 48_000, &samples).unwrap();
        let (rate, back) = read_mono_16(&path).unwrap();
        assert_eq!(rate, 48_000);
        assert_eq!(back, samples);
    }
}
