//! Image/audio stream alignment: for each image timestamp, hand back the most
//! recent fixed-length audio window recorded strictly before the capture time.

use thiserror::Error;

/// Samples per aligned audio window (42.67 ms at 48 kHz).
pub const WINDOW_LEN: usize = 2048;
/// Audio sample rate in Hz.
pub const SAMPLE_RATE: u32 = 48_000;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    /// Fewer than `WINDOW_LEN` samples were recorded before the query time.
    #[error("underflow: only {available} samples recorded before t={t_seconds}s")]
    Underflow { available: u64, t_seconds: f64 },
    /// The requested window has already been overwritten by newer samples.
    #[error("window starting at sample {start} evicted (oldest retained: {oldest})")]
    Evicted { start: u64, oldest: u64 },
}

/// Circular PCM buffer with absolute sample indexing. Single producer appends,
/// single consumer queries windows; a returned window never crosses the write
/// head.
#[derive(Debug, Clone)]
pub struct AudioRing {
    buf: Vec<i16>,
    capacity: usize,
    sample_rate: u32,
    /// Total samples ever written; the ring holds samples
    /// `[total_written - min(total_written, capacity), total_written)`.
    total_written: u64,
}

impl AudioRing {
    /// `capacity` must hold at least one window.
    pub fn new(capacity: usize, sample_rate: u32) -> Self {
        assert!(capacity >= WINDOW_LEN, "ring capacity must be >= {WINDOW_LEN}");
        AudioRing {
            buf: vec![0; capacity],
            capacity,
            sample_rate,
            total_written: 0,
        }
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Absolute index of the next sample to be written.
    pub fn write_head(&self) -> u64 {
        self.total_written
    }

    pub fn push(&mut self, samples: &[i16]) {
        for &s in samples {
            let slot = (self.total_written % self.capacity as u64) as usize;
            self.buf[slot] = s;
            self.total_written += 1;
        }
    }

    /// Convert a timestamp to the exclusive end-sample index of the window of
    /// audio recorded strictly before `t`. Floor conversion: a sample captured
    /// exactly at `t` is excluded.
    pub fn end_sample_for(&self, t_seconds: f64) -> u64 {
        end_sample_at_rate(t_seconds, self.sample_rate)
    }

    /// The most recent `WINDOW_LEN` samples recorded before `t_seconds`.
    pub fn window_before(&self, t_seconds: f64) -> Result<[i16; WINDOW_LEN], AlignError> {
        let end = self.end_sample_for(t_seconds).min(self.total_written);
        if end < WINDOW_LEN as u64 {
            return Err(AlignError::Underflow { available: end, t_seconds });
        }
        self.window_ending_at(end)
    }

    /// Window with an explicit exclusive end-sample offset, as recorded in an
    /// alignment index. Bypasses timestamp math so replays are bit-exact.
    pub fn window_ending_at(&self, end: u64) -> Result<[i16; WINDOW_LEN], AlignError> {
        if end < WINDOW_LEN as u64 || end > self.total_written {
            return Err(AlignError::Underflow {
                available: end.min(self.total_written),
                t_seconds: end as f64 / self.sample_rate as f64,
            });
        }
        let start = end - WINDOW_LEN as u64;
        let oldest = self.total_written.saturating_sub(self.capacity as u64);
        if start < oldest {
            return Err(AlignError::Evicted { start, oldest });
        }
        let mut out = [0i16; WINDOW_LEN];
        for (i, slot) in out.iter_mut().enumerate() {
            let abs = start + i as u64;
            *slot = self.buf[(abs % self.capacity as u64) as usize];
        }
        Ok(out)
    }
}

/// Floor timestamp-to-sample conversion shared by the online ring and the
/// offline index writer. Ties resolve to the earlier sample, so the window
/// covers only audio strictly before the image.
pub fn end_sample_at_rate(t_seconds: f64, rate: u32) -> u64 {
    if t_seconds <= 0.0 {
        return 0;
    }
    (t_seconds * rate as f64).floor() as u64
}

/// Extract a window ending at `end` (exclusive) from a fully buffered stream.
pub fn window_from_slice(samples: &[i16], end: u64) -> Result<[i16; WINDOW_LEN], AlignError> {
    if end < WINDOW_LEN as u64 || end as usize > samples.len() {
        return Err(AlignError::Underflow {
            available: end.min(samples.len() as u64),
            t_seconds: f64::NAN,
        });
    }
    let start = (end - WINDOW_LEN as u64) as usize;
    let mut out = [0i16; WINDOW_LEN];
    out.copy_from_slice(&samples[start..start + WINDOW_LEN]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counting_ring(n: usize) -> AudioRing {
        let mut ring = AudioRing::new(n.max(WINDOW_LEN * 2), SAMPLE_RATE);
        let data: Vec<i16> = (0..n).map(|i| (i % 30000) as i16).collect();
        ring.push(&data);
        ring
    }

    #[test]
    fn window_at_50ms_covers_352_to_2400() {
        let ring = counting_ring(4000);
        let w = ring.window_before(0.050).unwrap();
        // end = floor(0.050 * 48000) = 2400, start = 2400 - 2048 = 352
        assert_eq!(w[0], 352);
        assert_eq!(w[WINDOW_LEN - 1], 2399);
    }

    #[test]
    fn underflow_before_first_window() {
        let ring = counting_ring(4000);
        let t = (WINDOW_LEN as f64 - 1.0) / SAMPLE_RATE as f64;
        assert!(matches!(ring.window_before(t), Err(AlignError::Underflow { .. })));
    }

    #[test]
    fn consecutive_20ms_windows_overlap_by_1088() {
        let ring = counting_ring(8000);
        // 20 ms apart: ends 960 samples apart, so overlap = 2048 - 960 = 1088.
        let e1 = ring.end_sample_for(0.060);
        let e2 = ring.end_sample_for(0.080);
        assert_eq!(e2 - e1, 960);
        let w1 = ring.window_before(0.060).unwrap();
        let w2 = ring.window_before(0.080).unwrap();
        let overlap = WINDOW_LEN - 960;
        assert_eq!(overlap, 1088);
        assert_eq!(&w1[960..], &w2[..overlap]);
    }

    #[test]
    fn identical_end_offsets_for_two_streams() {
        let a = counting_ring(5000);
        let mut b = AudioRing::new(WINDOW_LEN * 4, SAMPLE_RATE);
        b.push(&vec![7i16; 5000]);
        for t in [0.044, 0.0601, 0.1] {
            assert_eq!(a.end_sample_for(t), b.end_sample_for(t));
        }
    }

    #[test]
    fn eviction_detected() {
        let mut ring = AudioRing::new(WINDOW_LEN, SAMPLE_RATE);
        ring.push(&vec![1i16; WINDOW_LEN * 3]);
        // Only the most recent WINDOW_LEN samples remain.
        assert!(ring.window_ending_at(WINDOW_LEN as u64 * 3).is_ok());
        assert!(matches!(
            ring.window_ending_at(WINDOW_LEN as u64 * 2),
            Err(AlignError::Evicted { .. })
        ));
    }

    // Spacing below the window duration means consecutive windows overlap, so
    // their union covers all audio between the first window start and the
    // last window end.
    #[test]
    fn dense_timestamps_cover_all_audio() {
        let ring = counting_ring(48_000);
        let mut t = 0.050;
        let mut covered_to = {
            let e = ring.end_sample_for(t);
            e - WINDOW_LEN as u64
        };
        while t < 0.9 {
            let end = ring.end_sample_for(t);
            let start = end - WINDOW_LEN as u64;
            assert!(start <= covered_to, "gap before sample {start}");
            covered_to = covered_to.max(end);
            // Strictly increasing spacing under 42.67 ms.
            t += 0.015 + 0.01 * ((t * 13.0).sin().abs() as f64);
        }
    }
}
