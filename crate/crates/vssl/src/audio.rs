//! WAV input and output.

use std::path::Path;

use vssl_core::signal::{Waveform, SAMPLE_RATE};

use crate::error::{Error, Result};

/// Read a PCM or float WAV file, average its channels and resample to the
/// canonical rate.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = r.spec();
    let bad = |e: hound::Error| Error::format(path, e.to_string());
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<Vec<f64>, _>>().map_err(bad)?,
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<Vec<f64>, _>>().map_err(bad)?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let mono: Vec<f64> = interleaved.chunks_exact(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    let w = Waveform::new(mono, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))?;
    if spec.sample_rate == SAMPLE_RATE {
        Ok(w)
    } else {
        Ok(w.resample(SAMPLE_RATE)?)
    }
}

/// Write a mono 16-bit PCM WAV file, saturating out-of-range samples.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: w.sample_rate(), bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut wr = hound::WavWriter::new(&mut buf, spec).map_err(|e| Error::format(path, e.to_string()))?;
        for &s in w.samples() {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            wr.write_sample(v).map_err(|e| Error::format(path, e.to_string()))?;
        }
        wr.finalize().map_err(|e| Error::format(path, e.to_string()))?;
    }
    crate::fsio::write_atomic(path, &buf.into_inner())
}
