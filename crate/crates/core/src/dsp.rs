//! Welch power-spectral-density estimation of aligned audio windows, PSD
//! bandwidth truncation, and the noise-injection helper for robustness
//! evaluation.
//!
//! Normative Welch parameterization (chosen so a 2048-sample window yields
//! exactly 512 bins): segment length 1024, periodic Hann window, 50% overlap
//! (3 segments), per-segment mean removal, one-sided density scaling, DC bin
//! discarded, Nyquist bin retained as the last bin. Bin width is
//! 48000/1024 = 46.875 Hz and bin `i` (0-based) is centered at
//! `(i + 1) * 46.875` Hz. PSDs are kept linear; dynamic range is handled by
//! the per-sequence normalization in the model.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::aligner::WINDOW_LEN;

/// Welch segment length.
pub const SEGMENT_LEN: usize = 1024;
/// Hop between segments (50% overlap).
pub const SEGMENT_HOP: usize = 512;
/// Bins after dropping DC: SEGMENT_LEN/2.
pub const N_BINS: usize = 512;
/// Bin width in Hz at 48 kHz.
pub const BIN_WIDTH_HZ: f64 = 48_000.0 / SEGMENT_LEN as f64;
/// Full one-sided bandwidth in Hz.
pub const FULL_BANDWIDTH_HZ: f64 = 24_000.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DspError {
    #[error("bad window length {got}, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
}

/// One-sided Welch power spectral density of one audio window.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFeature {
    /// Power per Hz, bin `i` centered at `(i + 1) * bin_width_hz`.
    pub bins: Vec<f64>,
    pub bin_width_hz: f64,
    /// Configured cutoff; `bins.len() == floor(max_freq_hz / bin_width_hz)`.
    pub max_freq_hz: f64,
}

impl PsdFeature {
    /// Number of bins kept at a given cutoff.
    pub fn bins_for_cutoff(max_freq_hz: f64) -> usize {
        (max_freq_hz / BIN_WIDTH_HZ).floor() as usize
    }

    /// Index of the strongest bin.
    pub fn dominant_bin(&self) -> usize {
        self.bins
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Total power in `[lo_hz, hi_hz]` (inclusive bin centers) times bin width.
    pub fn band_power(&self, lo_hz: f64, hi_hz: f64) -> f64 {
        self.bins
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let f = (*i as f64 + 1.0) * self.bin_width_hz;
                f >= lo_hz && f <= hi_hz
            })
            .map(|(_, &p)| p)
            .sum::<f64>()
            * self.bin_width_hz
    }
}

thread_local! {
    static FFT_1024: RefCell<Option<Arc<dyn Fft<f64>>>> = const { RefCell::new(None) };
}

fn with_fft_1024<R>(f: impl FnOnce(&Arc<dyn Fft<f64>>) -> R) -> R {
    FFT_1024.with(|cell| {
        let mut slot = cell.borrow_mut();
        let fft = slot
            .get_or_insert_with(|| FftPlanner::new().plan_fft_forward(SEGMENT_LEN))
            .clone();
        drop(slot);
        f(&fft)
    })
}

/// Welch PSD of a 2048-sample window at `rate` Hz. Returns all 512 bins; use
/// [`truncate_bandwidth`] to apply a cutoff.
pub fn welch_psd(window: &[f64], rate: u32) -> Result<PsdFeature, DspError> {
    if window.len() != WINDOW_LEN {
        return Err(DspError::BadLength { got: window.len(), expected: WINDOW_LEN });
    }
    let hann = hann_periodic(SEGMENT_LEN);
    let win_sumsq: f64 = hann.iter().map(|w| w * w).sum();
    let scale = 1.0 / (rate as f64 * win_sumsq);

    let n_segments = (WINDOW_LEN - SEGMENT_LEN) / SEGMENT_HOP + 1;
    let mut acc = vec![0.0f64; SEGMENT_LEN / 2 + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); SEGMENT_LEN];
    with_fft_1024(|fft| {
        for s in 0..n_segments {
            let seg = &window[s * SEGMENT_HOP..s * SEGMENT_HOP + SEGMENT_LEN];
            let mean = seg.iter().sum::<f64>() / SEGMENT_LEN as f64;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new((seg[i] - mean) * hann[i], 0.0);
            }
            fft.process(&mut buf);
            for (k, a) in acc.iter_mut().enumerate() {
                *a += buf[k].norm_sqr();
            }
        }
    });

    // Average the periodograms, apply density scaling, fold to one side.
    let mut bins = Vec::with_capacity(N_BINS);
    for k in 1..=SEGMENT_LEN / 2 {
        let mut p = acc[k] * scale / n_segments as f64;
        if k != SEGMENT_LEN / 2 {
            p *= 2.0;
        }
        bins.push(p);
    }
    Ok(PsdFeature {
        bins,
        bin_width_hz: rate as f64 / SEGMENT_LEN as f64,
        max_freq_hz: rate as f64 / 2.0,
    })
}

/// Welch PSD straight from PCM samples.
pub fn welch_psd_i16(window: &[i16], rate: u32) -> Result<PsdFeature, DspError> {
    let f: Vec<f64> = window.iter().map(|&s| s as f64).collect();
    welch_psd(&f, rate)
}

/// Keep the bins whose center frequency is at most `max_freq_hz`.
pub fn truncate_bandwidth(psd: &PsdFeature, max_freq_hz: f64) -> PsdFeature {
    let keep = ((max_freq_hz / psd.bin_width_hz).floor() as usize).min(psd.bins.len());
    PsdFeature {
        bins: psd.bins[..keep].to_vec(),
        bin_width_hz: psd.bin_width_hz,
        max_freq_hz,
    }
}

/// Elementwise `window + gain * noise` with saturation to the 16-bit range.
pub fn mix_noise(window: &[i16], noise: &[i16], gain: f64) -> Result<Vec<i16>, DspError> {
    if window.len() != noise.len() {
        return Err(DspError::LengthMismatch { a: window.len(), b: noise.len() });
    }
    Ok(window
        .iter()
        .zip(noise)
        .map(|(&w, &n)| {
            let v = w as f64 + gain * n as f64;
            v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect())
}

/// Band used to calibrate injected-noise level against the clean ambient
/// floor.
pub const CALIBRATION_BAND_HZ: (f64, f64) = (100.0, 2000.0);

/// Gain such that the noise-only level in the calibration band sits
/// `db_above_ambient` dB above the mean clean-window level, emulating a jump
/// from quiet-lab to loud-cafe conditions.
pub fn calibrate_noise_gain(
    clean_windows: &[&[i16]],
    noise_windows: &[&[i16]],
    db_above_ambient: f64,
    rate: u32,
) -> Result<f64, DspError> {
    let band = CALIBRATION_BAND_HZ;
    let mean_band = |windows: &[&[i16]]| -> Result<f64, DspError> {
        let mut acc = 0.0;
        for w in windows {
            acc += welch_psd_i16(w, rate)?.band_power(band.0, band.1);
        }
        Ok(acc / windows.len().max(1) as f64)
    };
    let ambient = mean_band(clean_windows)?.max(1e-12);
    let noise = mean_band(noise_windows)?.max(1e-12);
    Ok((ambient * 10f64.powf(db_above_ambient / 10.0) / noise).sqrt())
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, phase: f64) -> Vec<f64> {
        (0..WINDOW_LEN)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 48_000.0 + phase).sin())
            .collect()
    }

    #[test]
    fn zero_window_gives_zero_bins() {
        let psd = welch_psd(&vec![0.0; WINDOW_LEN], 48_000).unwrap();
        assert_eq!(psd.bins.len(), N_BINS);
        assert!(psd.bins.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn bad_length_rejected() {
        assert_eq!(
            welch_psd(&vec![0.0; 2047], 48_000),
            Err(DspError::BadLength { got: 2047, expected: 2048 })
        );
    }

    #[test]
    fn sine_1500hz_dominates_bin_31() {
        // 1500 / 46.875 = 32 exactly -> FFT bin 32 -> index 31 after DC drop.
        let psd = welch_psd(&sine(1500.0, 1.0, 0.3), 48_000).unwrap();
        assert_eq!(psd.dominant_bin(), 31);
        // Hann leakage is confined to the two adjacent bins for an on-bin
        // tone; everything at distance >= 2 is far more than 40 dB down.
        let peak = psd.bins[31];
        for (i, &b) in psd.bins.iter().enumerate() {
            if (i as i64 - 31).abs() >= 2 {
                assert!(b < peak * 1e-4, "bin {i} only {:.1} dB down", 10.0 * (peak / b).log10());
            }
        }
    }

    #[test]
    fn phase_shift_leaves_power_unchanged() {
        let a = welch_psd(&sine(1500.0, 1.0, 0.0), 48_000).unwrap();
        let b = welch_psd(&sine(1500.0, 1.0, 1.234), 48_000).unwrap();
        assert_eq!(a.dominant_bin(), b.dominant_bin());
        let pa = a.bins[a.dominant_bin()];
        let pb = b.bins[b.dominant_bin()];
        assert!((pa - pb).abs() / pa < 0.01, "peak power moved: {pa} vs {pb}");
    }

    #[test]
    fn doubling_amplitude_quadruples_every_bin() {
        let x = sine(3100.0, 0.7, 0.9);
        let x2: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        let a = welch_psd(&x, 48_000).unwrap();
        let b = welch_psd(&x2, 48_000).unwrap();
        for (pa, pb) in a.bins.iter().zip(&b.bins) {
            if *pa > 0.0 {
                assert!((pb / pa - 4.0).abs() < 1e-9, "ratio {}", pb / pa);
            } else {
                assert_eq!(*pb, 0.0);
            }
        }
    }

    #[test]
    fn truncation_bin_counts() {
        let psd = welch_psd(&sine(440.0, 1.0, 0.0), 48_000).unwrap();
        for (cutoff, expect) in [(2500.0, 53), (10_000.0, 213), (15_000.0, 320), (24_000.0, 512)] {
            let t = truncate_bandwidth(&psd, cutoff);
            assert_eq!(t.bins.len(), expect, "cutoff {cutoff}");
            assert_eq!(PsdFeature::bins_for_cutoff(cutoff), expect);
        }
    }

    #[test]
    fn truncate_twice_equals_smaller_cutoff() {
        let psd = welch_psd(&sine(700.0, 2.0, 0.1), 48_000).unwrap();
        let once = truncate_bandwidth(&psd, 2500.0);
        let twice = truncate_bandwidth(&truncate_bandwidth(&psd, 15_000.0), 2500.0);
        assert_eq!(once, twice);
    }

    #[test]
    fn mix_noise_gain_zero_is_identity() {
        let w: Vec<i16> = (0..2048).map(|i| (i as i16).wrapping_mul(3)).collect();
        let n: Vec<i16> = (0..2048).map(|i| (i as i16).wrapping_mul(7)).collect();
        assert_eq!(mix_noise(&w, &n, 0.0).unwrap(), w);
    }

    #[test]
    fn mix_noise_cancellation() {
        let w: Vec<i16> = (0..2048).map(|i| ((i * 13) % 1000) as i16 - 500).collect();
        let neg: Vec<i16> = w.iter().map(|&v| -v).collect();
        assert!(mix_noise(&w, &neg, 1.0).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn mix_noise_length_mismatch() {
        assert!(matches!(
            mix_noise(&[0; 10], &[0; 11], 1.0),
            Err(DspError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn mix_noise_saturates() {
        let w = vec![30_000i16; 2048];
        let n = vec![30_000i16; 2048];
        let out = mix_noise(&w, &n, 1.0).unwrap();
        assert!(out.iter().all(|&v| v == i16::MAX));
    }

    #[test]
    fn calibrated_gain_makes_noise_dominate_band() {
        // Quiet ambient tone vs a broadband-ish noise built from sinusoids.
        let clean: Vec<i16> = sine(500.0, 30.0, 0.0).iter().map(|&v| v as i16).collect();
        let noise: Vec<i16> = sine(700.0, 25.0, 0.4)
            .iter()
            .zip(&sine(1500.0, 25.0, 1.1))
            .map(|(a, b)| (a + b) as i16)
            .collect();
        let gain =
            calibrate_noise_gain(&[&clean], &[&noise], 20.0, 48_000).unwrap();
        let mixed = mix_noise(&clean, &noise, gain).unwrap();
        let band = CALIBRATION_BAND_HZ;
        let p_clean = welch_psd_i16(&clean, 48_000).unwrap().band_power(band.0, band.1);
        let p_mixed = welch_psd_i16(&mixed, 48_000).unwrap().band_power(band.0, band.1);
        assert!(
            p_mixed > p_clean * 10.0,
            "mixed band power {p_mixed} does not dominate clean {p_clean}"
        );
    }
}
