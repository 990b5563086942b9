//! PCM16 WAV and binary PGM (P5) files.

use std::fs;
use std::path::Path;

use super::{DspError, Result, Waveform};

fn io_err(path: &Path, source: std::io::Error) -> DspError {
    DspError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DspError {
    DspError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes mono PCM16; samples are scaled by 32768 and rounded.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| format_err(path, e.to_string()))?;
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| format_err(path, e.to_string()))
}

/// Reads mono PCM16, scaling samples by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => io_err(path, io),
        other => format_err(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(format_err(path, "expected mono 16-bit PCM"));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, e.to_string()))?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| format_err(path, e.to_string()))
}

/// Writes one frame of `height × width` values in [0, 1] as 8-bit P5.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(DspError::Geometry(format!(
            "{} values for a {height}×{width} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads an 8-bit P5 image, returning (height, width, values scaled by 1/255).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(format_err(path, "not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval}, expected 255")));
    }
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() == width * height)
        .ok_or_else(|| format_err(path, "raster size does not match header"))?;
    Ok((height, width, raster.iter().map(|&b| b as f64 / 255.0).collect()))
}
