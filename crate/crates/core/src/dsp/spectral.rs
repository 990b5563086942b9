use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{DspError, Result, Spectrogram, Waveform};

/// Window, hop and FFT sizes in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftParams {
    pub win: usize,
    pub hop: usize,
    pub nfft: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            win: 400,
            hop: 160,
            nfft: 512,
        }
    }
}

impl StftParams {
    fn validate(&self) -> Result<()> {
        if self.win == 0 || self.hop == 0 || self.win > self.nfft {
            return Err(DspError::Invalid(format!(
                "stft window {} hop {} nfft {}",
                self.win, self.hop, self.nfft
            )));
        }
        Ok(())
    }

    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.win {
            return Err(DspError::TooShort { len, win: self.win });
        }
        Ok((len - self.win) / self.hop + 1)
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Linear-magnitude STFT with a periodic Hann window, no centering.
///
/// Output is `(nfft/2 + 1) × frames`.
pub fn stft_magnitude(w: &Waveform, p: StftParams) -> Result<Spectrogram> {
    p.validate()?;
    let frames = p.frames(w.len())?;
    let bins = p.nfft / 2 + 1;
    let window = hann(p.win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); p.nfft];
    let mut values = vec![0.0; bins * frames];
    for f in 0..frames {
        let start = f * p.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let re = if i < p.win {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
            *c = Complex::new(re, 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            values[b * frames + f] = buf[b].norm();
        }
    }
    Spectrogram::new(bins, frames, values)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters spanning 0..sr/2, shape `n_mels × (nfft/2+1)`.
///
/// Also returns the center frequency of every band in Hz.
pub fn mel_filterbank(n_mels: usize, nfft: usize, sample_rate: u32) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if n_mels < 2 {
        return Err(DspError::Invalid(format!("need at least 2 mel bands, got {n_mels}")));
    }
    let bins = nfft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins)
        .map(|b| b as f64 * sample_rate as f64 / nfft as f64)
        .collect();
    let filters = (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect();
    Ok((filters, edges[1..=n_mels].to_vec()))
}

/// `ln(max(mel power, floor))`, shape `n_mels × frames`.
pub fn mel_spectrogram(w: &Waveform, n_mels: usize, p: StftParams, floor: f64) -> Result<Spectrogram> {
    if floor <= 0.0 {
        return Err(DspError::Invalid("log floor must be positive".into()));
    }
    let (filters, _) = mel_filterbank(n_mels, p.nfft, w.sample_rate)?;
    let mag = stft_magnitude(w, p)?;
    let frames = mag.frames;
    let mut values = vec![0.0; n_mels * frames];
    for (m, filt) in filters.iter().enumerate() {
        for f in 0..frames {
            let energy: f64 = filt
                .iter()
                .enumerate()
                .filter(|(_, &wt)| wt > 0.0)
                .map(|(b, &wt)| {
                    let a = mag.values[b * frames + f];
                    wt * a * a
                })
                .sum();
            values[m * frames + f] = energy.max(floor).ln();
        }
    }
    Spectrogram::new(n_mels, frames, values)
}

/// Log filterbank energies padded (last frame repeated) or truncated at
/// the end to exactly `target_frames`.
pub fn log_filterbank(
    w: &Waveform,
    n_filters: usize,
    p: StftParams,
    floor: f64,
    target_frames: usize,
) -> Result<Spectrogram> {
    if target_frames < 1 {
        return Err(DspError::Invalid("target frame count must be positive".into()));
    }
    let s = mel_spectrogram(w, n_filters, p, floor)?;
    Ok(fit_frames(&s, target_frames))
}

pub(crate) fn fit_frames(s: &Spectrogram, target: usize) -> Spectrogram {
    let mut values = Vec::with_capacity(s.bins * target);
    for b in 0..s.bins {
        for f in 0..target {
            values.push(s.get(b, f.min(s.frames - 1)));
        }
    }
    Spectrogram {
        bins: s.bins,
        frames: target,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{LOG_FLOOR, SAMPLE_RATE};

    fn tone(hz: f64, len: usize) -> Waveform {
        let samples = (0..len)
            .map(|i| 0.5 * (2.0 * PI * hz * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let p = StftParams::default();
        let s = stft_magnitude(&tone(440.0, 4000), p).unwrap();
        let expected = (440.0f64 * 512.0 / 16000.0).round() as usize;
        assert_eq!(expected, 14);
        for f in 0..s.frames {
            let col: Vec<f64> = (0..s.bins).map(|b| s.get(b, f)).collect();
            assert_eq!(argmax(&col), expected);
        }
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let p = StftParams::default();
        for bin in [5usize, 40, 100, 200] {
            let hz = bin as f64 * 16000.0 / 512.0;
            let s = stft_magnitude(&tone(hz, 2000), p).unwrap();
            for f in 0..s.frames {
                let col: Vec<f64> = (0..s.bins).map(|b| s.get(b, f)).collect();
                assert_eq!(argmax(&col), bin);
            }
        }
    }

    #[test]
    fn frame_count_and_silence() {
        let p = StftParams::default();
        let w = Waveform::new(vec![0.0; 10240], SAMPLE_RATE).unwrap();
        let s = stft_magnitude(&w, p).unwrap();
        assert_eq!((s.bins, s.frames), (257, 62));
        assert!(s.values.iter().all(|&v| v == 0.0));
        let short = Waveform::new(vec![0.0; 399], SAMPLE_RATE).unwrap();
        assert!(matches!(stft_magnitude(&short, p), Err(DspError::TooShort { .. })));
    }

    #[test]
    fn mel_silence_and_shape() {
        let w = Waveform::new(vec![0.0; 10240], SAMPLE_RATE).unwrap();
        let s = mel_spectrogram(&w, 64, StftParams::default(), LOG_FLOOR).unwrap();
        assert_eq!((s.bins, s.frames), (64, 62));
        assert!(s.values.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn one_khz_lands_in_nearest_band() {
        let (_, centers) = mel_filterbank(64, 512, SAMPLE_RATE).unwrap();
        let nearest = argmax(&centers.iter().map(|c| -(c - 1000.0).abs()).collect::<Vec<_>>());
        let s = mel_spectrogram(&tone(1000.0, 10240), 64, StftParams::default(), LOG_FLOOR).unwrap();
        assert_eq!(argmax(&s.bin_means()), nearest);
    }

    #[test]
    fn filterbank_padding_replicates_last_frame() {
        let w = tone(700.0, 10240);
        let p = StftParams::default();
        let natural = mel_spectrogram(&w, 26, p, LOG_FLOOR).unwrap();
        let padded = log_filterbank(&w, 26, p, LOG_FLOOR, 64).unwrap();
        assert_eq!((padded.bins, padded.frames), (26, 64));
        for b in 0..26 {
            for f in 0..62 {
                assert_eq!(padded.get(b, f), natural.get(b, f));
            }
            assert_eq!(padded.get(b, 62), natural.get(b, 61));
            assert_eq!(padded.get(b, 63), natural.get(b, 61));
        }
        let same = log_filterbank(&w, 26, p, LOG_FLOOR, 62).unwrap();
        assert_eq!(same, natural);
        assert!(log_filterbank(&w, 26, p, LOG_FLOOR, 0).is_err());
    }

    #[test]
    fn filterbank_of_silence_is_constant() {
        let w = Waveform::new(vec![0.0; 10240], SAMPLE_RATE).unwrap();
        let s = log_filterbank(&w, 26, StftParams::default(), LOG_FLOOR, 64).unwrap();
        assert_eq!((s.bins, s.frames), (26, 64));
        assert!(s.values.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn mel_needs_two_bands() {
        assert!(mel_filterbank(1, 512, SAMPLE_RATE).is_err());
    }
}
