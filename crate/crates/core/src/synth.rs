//! Synthetic multimodal trial generator: every pipeline stage and the full
//! training loop are testable against known ground truth without hardware.
//!
//! Each synthetic "fabric" is described by a spectral signature (harmonic
//! comb plus band-limited noise), a flow pattern (textured frames advected by
//! a rub-modulated drag), and a proprioception profile (rub-cycle kinematics
//! with friction-scaled currents). Generation is a pure function of the spec
//! and the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::aligner::{window_from_slice, SAMPLE_RATE};
use crate::dataset::{FabricClass, PropertyLabels, TimeSample, Trial, PROPRIO_DIM};
use crate::frame::{Frame8, ImageVariant, NATIVE_H, NATIVE_W, SMALL_H, SMALL_W};

/// Samples of audio preceding the first frame (one full window plus margin).
const PREROLL_SAMPLES: u64 = 2400;
/// Audio samples per 20 ms frame interval.
const SAMPLES_PER_FRAME: u64 = 960;

/// A band-limited noise component of the spectral signature.
#[derive(Debug, Clone)]
pub struct NoiseBand {
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub amp: f64,
}

/// Full generative description of one synthetic fabric class.
#[derive(Debug, Clone)]
pub struct SynthFabricSpec {
    pub class_id: u16,
    pub name: String,
    pub properties: PropertyLabels,
    /// Harmonic comb fundamental in Hz.
    pub comb_f0_hz: f64,
    pub comb_harmonics: usize,
    /// PCM amplitude of the fundamental; harmonic k decays as 1/k.
    pub comb_amp: f64,
    pub noise_bands: Vec<NoiseBand>,
    /// Drag direction (unit vector) of the texture between frames.
    pub drag_dir: (f64, f64),
    /// Drag speed in pixels per frame.
    pub drag_speed: f64,
    /// Texture grain size in pixels.
    pub texture_period: f64,
    /// Texture orientation in radians.
    pub texture_angle: f64,
    /// Relative amplitude of the cross-grain texture component.
    pub texture_mix: f64,
    /// Rub cycle frequency in Hz; the drag direction flips each half cycle
    /// and the audio is amplitude-modulated at this rate.
    pub rub_hz: f64,
    /// Friction coefficient: attenuates joint velocity, scales currents.
    pub friction: f64,
}

impl SynthFabricSpec {
    pub fn fabric_class(&self) -> FabricClass {
        FabricClass { id: self.class_id, name: self.name.clone(), properties: self.properties }
    }

    /// Sign of the drag during frame interval `i` (+1 forward, -1 backward).
    pub fn rub_sign(&self, i: usize) -> f64 {
        let t = frame_timestamp(i);
        let phase = (t * self.rub_hz).fract();
        if phase < 0.5 {
            1.0
        } else {
            -1.0
        }
    }

    /// Texture displacement applied between frames `i - 1` and `i`.
    pub fn frame_shift(&self, i: usize) -> (f64, f64) {
        let s = self.rub_sign(i);
        (self.drag_dir.0 * self.drag_speed * s, self.drag_dir.1 * self.drag_speed * s)
    }
}

pub fn frame_timestamp(i: usize) -> f64 {
    (PREROLL_SAMPLES + SAMPLES_PER_FRAME * i as u64) as f64 / SAMPLE_RATE as f64
}

/// Generate a full trial of `n_samples` aligned time steps. Generation is
/// deterministic in (`spec`, `seed`, `variant`, `n_samples`).
pub fn generate_trial(
    spec: &SynthFabricSpec,
    n_samples: usize,
    session_tag: &str,
    seed: u64,
    variant: ImageVariant,
) -> Trial {
    assert!(n_samples >= 1, "a trial needs at least one sample");
    let audio_len = (PREROLL_SAMPLES + SAMPLES_PER_FRAME * (n_samples as u64 - 1)) as usize + 1;

    let audio_internal = synth_audio(spec, audio_len, seed ^ 0x0a11d10, 1.0, 25.0);
    // The external microphone hears the rubbing quieter and the room louder.
    let audio_external = synth_audio(spec, audio_len, seed ^ 0x0e41e44, 0.35, 120.0);

    let mut rng_frames = ChaCha12Rng::seed_from_u64(seed ^ 0xf4a3e5);
    let phase1: f64 = rng_frames.random_range(0.0..std::f64::consts::TAU);
    let phase2: f64 = rng_frames.random_range(0.0..std::f64::consts::TAU);

    let mut rng_proprio = ChaCha12Rng::seed_from_u64(seed ^ 0x9d0b1a);

    let (h, w) = match variant {
        ImageVariant::Native => (NATIVE_H, NATIVE_W),
        ImageVariant::Small => (SMALL_H, SMALL_W),
    };

    let mut samples = Vec::with_capacity(n_samples);
    let mut offsets = Vec::with_capacity(n_samples);
    let mut drift = (0.0f64, 0.0f64);
    for i in 0..n_samples {
        if i > 0 {
            let (dx, dy) = spec.frame_shift(i);
            drift.0 += dx;
            drift.1 += dy;
        }
        let image = render_texture(spec, h, w, drift, phase1, phase2);
        let end = PREROLL_SAMPLES + SAMPLES_PER_FRAME * i as u64;
        let t = frame_timestamp(i);

        let mut proprio = [0.0f64; PROPRIO_DIM];
        let attenuation = 1.0 / (1.0 + spec.friction);
        for j in 0..6 {
            let phase = std::f64::consts::TAU * spec.rub_hz * t + j as f64 * 0.7;
            let amp = 0.5 + 0.08 * j as f64;
            let angle = 0.3 * j as f64 + amp * phase.sin() * attenuation;
            let velocity =
                amp * std::f64::consts::TAU * spec.rub_hz * phase.cos() * attenuation;
            let current = 0.05
                + spec.friction * velocity.abs() * 0.2
                + rng_proprio.random_range(-0.002..0.002);
            proprio[3 * j] = angle;
            proprio[3 * j + 1] = velocity;
            proprio[3 * j + 2] = current;
        }

        samples.push(TimeSample {
            image,
            audio_internal: window_from_slice(&audio_internal, end).expect("preroll covers window"),
            audio_external: window_from_slice(&audio_external, end).expect("preroll covers window"),
            proprio,
            timestamp: t,
        });
        offsets.push(end);
    }

    Trial {
        samples,
        fabric: spec.fabric_class(),
        session_tag: session_tag.to_string(),
        image_variant: variant,
        audio_internal,
        audio_external,
        align_offsets: offsets,
    }
}

/// Rub-sound synthesis: rotating-phasor sinusoid bank (comb harmonics plus
/// band noise) amplitude-modulated by the rub cycle, over a white noise floor.
fn synth_audio(spec: &SynthFabricSpec, len: usize, seed: u64, gain: f64, floor_amp: f64) -> Vec<i16> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    struct Phasor {
        re: f64,
        im: f64,
        step_re: f64,
        step_im: f64,
        amp: f64,
    }
    let mut phasors = Vec::new();
    let mut add = |freq: f64, amp: f64, phase: f64| {
        let omega = std::f64::consts::TAU * freq / SAMPLE_RATE as f64;
        phasors.push(Phasor {
            re: phase.cos(),
            im: phase.sin(),
            step_re: omega.cos(),
            step_im: omega.sin(),
            amp,
        });
    };
    for k in 1..=spec.comb_harmonics {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        add(spec.comb_f0_hz * k as f64, spec.comb_amp / k as f64, phase);
    }
    const SINES_PER_BAND: usize = 24;
    for band in &spec.noise_bands {
        for _ in 0..SINES_PER_BAND {
            let freq = rng.random_range(band.lo_hz..band.hi_hz);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            add(freq, band.amp / (SINES_PER_BAND as f64).sqrt(), phase);
        }
    }

    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / SAMPLE_RATE as f64;
        // Rub envelope: pulses at the rub frequency, never fully silent.
        let env = 0.35 + 0.65 * (std::f64::consts::PI * spec.rub_hz * t).sin().abs();
        let mut v = 0.0f64;
        for p in phasors.iter_mut() {
            v += p.amp * p.im;
            let re = p.re * p.step_re - p.im * p.step_im;
            let im = p.re * p.step_im + p.im * p.step_re;
            p.re = re;
            p.im = im;
        }
        if n % 4096 == 0 {
            for p in phasors.iter_mut() {
                let norm = (p.re * p.re + p.im * p.im).sqrt();
                p.re /= norm;
                p.im /= norm;
            }
        }
        let noise: f64 = rng.random_range(-1.0..1.0) * floor_amp;
        let sample = gain * env * v + noise;
        out.push(sample.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
    }
    out
}

/// Two-component oriented sinusoid texture sampled on a continuous domain,
/// so drifting it between frames produces an exact rigid translation.
fn render_texture(
    spec: &SynthFabricSpec,
    h: usize,
    w: usize,
    drift: (f64, f64),
    phase1: f64,
    phase2: f64,
) -> Frame8 {
    let (sin_a, cos_a) = spec.texture_angle.sin_cos();
    let k1 = std::f64::consts::TAU / spec.texture_period;
    let k2 = std::f64::consts::TAU / (spec.texture_period * 0.37);
    let mix = spec.texture_mix;
    let span = 1.0 + mix;
    let mut frame = Frame8::new(h, w);
    for y in 0..h {
        let fy = y as f64 - drift.1;
        for x in 0..w {
            let fx = x as f64 - drift.0;
            let along = cos_a * fx + sin_a * fy;
            let across = -sin_a * fx + cos_a * fy;
            let v = (k1 * along + phase1).sin() + mix * (k2 * across + phase2).sin();
            frame.data[y * w + x] =
                ((v + span) / (2.0 * span) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    frame
}

/// Ambient broadband noise stream for the noisy-evaluation protocol
/// (crowd-like: low-passed white noise with band-limited chatter).
pub fn generate_noise_stream(len: usize, seed: u64) -> Vec<i16> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut state = 0.0f64;
    let mut out = Vec::with_capacity(len);
    let chatter = [(300.0, 0.9), (800.0, 0.6), (1400.0, 0.4)];
    for n in 0..len {
        let t = n as f64 / SAMPLE_RATE as f64;
        let white: f64 = rng.random_range(-1.0..1.0);
        state = 0.92 * state + 0.08 * white; // one-pole low-pass
        let mut v = state * 2200.0;
        for (f, a) in chatter {
            let wobble = 1.0 + 0.3 * (std::f64::consts::TAU * 0.7 * t).sin();
            v += a * 500.0 * (std::f64::consts::TAU * f * t * wobble).sin();
        }
        out.push(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
    }
    out
}

fn base_spec(class_id: u16, name: &str) -> SynthFabricSpec {
    SynthFabricSpec {
        class_id,
        name: name.to_string(),
        properties: PropertyLabels { stretchiness: 0, roughness: 0, thickness: 0 },
        comb_f0_hz: 400.0,
        comb_harmonics: 5,
        comb_amp: 2600.0,
        noise_bands: vec![NoiseBand { lo_hz: 3000.0, hi_hz: 3600.0, amp: 700.0 }],
        drag_dir: (1.0, 0.0),
        drag_speed: 2.0,
        texture_period: 12.0,
        texture_angle: 0.0,
        texture_mix: 0.6,
        rub_hz: 1.5,
        friction: 0.4,
    }
}

/// `n` classes separated in every modality; `margin` scales the inter-class
/// parameter spacing (1.0 = comfortable, smaller = harder).
pub fn well_separated_classes(n: usize, margin: f64) -> Vec<SynthFabricSpec> {
    assert!(n >= 1 && n <= 12, "supported class counts: 1..=12");
    (0..n)
        .map(|i| {
            let id = i as u16;
            let mut s = base_spec(id, &format!("synth-{i}"));
            let f = i as f64 * margin;
            s.comb_f0_hz = 300.0 + 220.0 * f;
            s.noise_bands = vec![NoiseBand {
                lo_hz: 3200.0 + 900.0 * f,
                hi_hz: 3700.0 + 900.0 * f,
                amp: 400.0 + 220.0 * f,
            }];
            let angle = std::f64::consts::TAU * i as f64 / n as f64;
            s.drag_dir = (angle.cos(), angle.sin());
            // Drift speed rises while grain size shrinks, so the texture
            // flicker frequency separates classes over a wide range.
            s.drag_speed = 0.8 + 0.5 * f;
            s.texture_period = (24.0 - 2.0 * f).max(6.0);
            s.texture_angle = std::f64::consts::PI * i as f64 / n as f64;
            s.texture_mix = 0.25 + 0.09 * f;
            s.rub_hz = 1.0 + 0.22 * f;
            s.friction = 0.2 + 0.12 * f;
            s
        })
        .collect()
}

/// Classes whose audio signatures are far apart while flow and proprioception
/// are barely distinguishable; used to probe modality-ablation ordering.
pub fn audio_dominant_classes(n: usize) -> Vec<SynthFabricSpec> {
    assert!(n >= 1 && n <= 12);
    (0..n)
        .map(|i| {
            let id = i as u16;
            let mut s = base_spec(id, &format!("audio-{i}"));
            let f = i as f64;
            s.comb_f0_hz = 320.0 + 360.0 * f;
            s.noise_bands = vec![NoiseBand {
                lo_hz: 4000.0 + 1400.0 * f,
                hi_hz: 4700.0 + 1400.0 * f,
                amp: 350.0 + 320.0 * f,
            }];
            // Sub-resolution jitter only: flow and proprioception carry
            // almost no class information.
            s.drag_dir = (1.0, 0.0);
            s.drag_speed = 2.0 + 0.01 * f;
            s.texture_period = 11.0 + 0.05 * f;
            s.texture_angle = 0.3;
            s.rub_hz = 1.5 + 0.002 * f;
            s.friction = 0.4 + 0.004 * f;
            s
        })
        .collect()
}

/// Classes on a property lattice: each property level maps to a disjoint
/// range of one signature parameter, so property labels are inferable for
/// classes never seen during training.
///
/// stretchiness <- rub rate, roughness <- noise-band center (and power),
/// thickness <- comb fundamental. Levels are coded by frequency position,
/// which survives the per-sequence normalization downstream.
pub fn property_lattice_classes(n: usize, seed: u64) -> Vec<SynthFabricSpec> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id = i as u16;
            let stretchiness = (i % 2) as u8;
            let roughness = ((i / 2) % 5) as u8;
            let thickness = ((i / 10) % 3) as u8;
            let mut s = base_spec(id, &format!("prop-{i}"));
            s.properties = PropertyLabels { stretchiness, roughness, thickness };
            // Disjoint parameter bands per level, with a little in-band spread
            // so levels are populated regions rather than single points.
            s.rub_hz = 0.8 + 1.6 * stretchiness as f64 + rng.random_range(-0.1..0.1);
            let band_center = 3200.0 + 1500.0 * roughness as f64 + rng.random_range(-150.0..150.0);
            s.noise_bands = vec![NoiseBand {
                lo_hz: band_center - 300.0,
                hi_hz: band_center + 300.0,
                amp: 1800.0 + 250.0 * roughness as f64,
            }];
            s.comb_f0_hz = 350.0 + 550.0 * thickness as f64 + rng.random_range(-60.0..60.0);
            s.comb_amp = 2400.0;
            s.drag_speed = 1.6 + rng.random_range(-0.2..0.2);
            s.texture_period = 9.0 + rng.random_range(0.0..4.0);
            s.texture_angle = rng.random_range(0.0..std::f64::consts::PI);
            s.friction = 0.3 + 0.25 * roughness as f64 / 4.0;
            s
        })
        .collect()
}
