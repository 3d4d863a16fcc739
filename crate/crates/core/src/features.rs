//! Per-trial feature extraction (PSDs, pooled optical flow, downsampled
//! frames), the sequence-level model-input assembly, and the on-disk feature
//! cache (flat binary float32 tensors with JSON sidecars, keyed by a content
//! hash of the inputs and extraction parameters).
//!
//! PSDs are extracted once at the full 512 bins and truncated to the model's
//! cutoff at input-assembly time, so bandwidth sweeps reuse one extraction
//! pass. Features enter the model linearly in raw units; the per-sequence
//! min-max normalization downstream removes scale.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aligner::SAMPLE_RATE;
use crate::dataset::{PropertyLabels, SequenceBatch, Trial, PROPRIO_DIM};
use crate::dsp::{welch_psd_i16, DspError, N_BINS};
use crate::frame::{downsample_to_small, ImageVariant, SMALL_H, SMALL_W};
use crate::neural::{ModelConfig, SeqTensors, TensorData};
use crate::optflow::{
    farneback_flow, patch_pool, percentile_filter, DenseFlow, FarnebackParams, FlowError, FLOW_C,
    FLOW_H, FLOW_W,
};

pub const IMAGE_SMALL_ELEMS: usize = SMALL_H * SMALL_W;
pub const FLOW_ELEMS: usize = FLOW_C * FLOW_H * FLOW_W;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("flow features require native-resolution frames")]
    FlowNeedsNativeFrames,
    #[error("non-finite flow feature at sample {sample}")]
    NonFiniteFlow { sample: usize },
    #[error("cache: {0}")]
    Cache(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> FeatureError {
    let path = path.into();
    move |source| FeatureError::Io { path, source }
}

/// Extraction parameters that participate in the cache key.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub flow: FarnebackParams,
    pub keep_fraction: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            flow: FarnebackParams::default(),
            keep_fraction: crate::optflow::DEFAULT_KEEP_FRACTION,
        }
    }
}

/// Which modality features to compute.
#[derive(Debug, Clone, Copy)]
pub struct ExtractSelection {
    pub images: bool,
    pub flow: bool,
}

impl ExtractSelection {
    pub fn all() -> Self {
        ExtractSelection { images: true, flow: true }
    }

    pub fn audio_proprio_only() -> Self {
        ExtractSelection { images: false, flow: false }
    }

    /// Everything a model config needs.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        use crate::neural::ImageInputKind::*;
        ExtractSelection {
            images: cfg.image_input == Raw60x80,
            flow: cfg.image_input == Flow,
        }
    }
}

/// All extracted features of one trial, sample-major.
#[derive(Debug)]
pub struct TrialFeatures {
    pub trial_id: String,
    pub fabric_id: u16,
    pub properties: PropertyLabels,
    pub session_tag: String,
    pub n: usize,
    /// (n, 512) linear one-sided PSD per sample, internal microphone.
    pub psd_internal: Vec<f32>,
    /// (n, 512) external microphone.
    pub psd_external: Vec<f32>,
    /// (n, 18)
    pub proprio: Vec<f32>,
    /// (n, 60*80) when extracted.
    pub image_small: Option<Vec<f32>>,
    /// (n, 2*102*137) when extracted.
    pub flow: Option<Vec<f32>>,
}

/// Extract features for every sample of a trial. Flow requires native-
/// resolution frames; the flow of a trial's first sample is zero (it has no
/// predecessor frame).
pub fn extract_trial(
    trial: &Trial,
    trial_id: &str,
    params: &FeatureParams,
    select: ExtractSelection,
) -> Result<TrialFeatures, FeatureError> {
    let n = trial.samples.len();
    let mut psd_internal = vec![0.0f32; n * N_BINS];
    let mut psd_external = vec![0.0f32; n * N_BINS];
    let mut proprio = vec![0.0f32; n * PROPRIO_DIM];
    for (i, s) in trial.samples.iter().enumerate() {
        let pi = welch_psd_i16(&s.audio_internal, SAMPLE_RATE)?;
        let pe = welch_psd_i16(&s.audio_external, SAMPLE_RATE)?;
        for (j, &b) in pi.bins.iter().enumerate() {
            psd_internal[i * N_BINS + j] = b as f32;
        }
        for (j, &b) in pe.bins.iter().enumerate() {
            psd_external[i * N_BINS + j] = b as f32;
        }
        for (j, &v) in s.proprio.iter().enumerate() {
            proprio[i * PROPRIO_DIM + j] = v as f32;
        }
    }

    let image_small = if select.images {
        let mut data = vec![0.0f32; n * IMAGE_SMALL_ELEMS];
        for (i, s) in trial.samples.iter().enumerate() {
            let small = match trial.image_variant {
                ImageVariant::Small => s.image.clone(),
                ImageVariant::Native => downsample_to_small(&s.image),
            };
            for (j, &p) in small.data.iter().enumerate() {
                // Pixels enter centered at zero in fractions of full scale,
                // so first-layer channels fire regardless of kernel sign.
                data[i * IMAGE_SMALL_ELEMS + j] = p as f32 / 255.0 - 0.5;
            }
        }
        Some(data)
    } else {
        None
    };

    let flow = if select.flow {
        if trial.image_variant != ImageVariant::Native {
            return Err(FeatureError::FlowNeedsNativeFrames);
        }
        // Frame pairs are independent; compute them in parallel and keep the
        // output order fixed.
        let pooled: Result<Vec<_>, FeatureError> = (1..n)
            .into_par_iter()
            .map(|i| {
                let dense =
                    farneback_flow(&trial.samples[i - 1].image, &trial.samples[i].image, &params.flow)?;
                let filtered = percentile_filter(&dense, params.keep_fraction);
                let pooled = patch_pool(&filtered)?;
                if !pooled.is_finite() {
                    return Err(FeatureError::NonFiniteFlow { sample: i });
                }
                Ok(pooled)
            })
            .collect();
        let pooled = pooled?;
        let mut data = vec![0.0f32; n * FLOW_ELEMS];
        for (i, feat) in pooled.into_iter().enumerate() {
            data[(i + 1) * FLOW_ELEMS..(i + 2) * FLOW_ELEMS].copy_from_slice(&feat.data);
        }
        Some(data)
    } else {
        None
    };

    Ok(TrialFeatures {
        trial_id: trial_id.to_string(),
        fabric_id: trial.fabric.id,
        properties: trial.fabric.properties,
        session_tag: trial.session_tag.clone(),
        n,
        psd_internal,
        psd_external,
        proprio,
        image_small,
        flow,
    })
}

/// Re-extract both PSD streams after mixing a noise stream into the test
/// audio windows at the given gain (the noisy-evaluation protocol).
pub fn extract_trial_with_noise(
    trial: &Trial,
    trial_id: &str,
    params: &FeatureParams,
    select: ExtractSelection,
    noise: &[i16],
    gain: f64,
) -> Result<TrialFeatures, FeatureError> {
    let mut features = extract_trial(trial, trial_id, params, select)?;
    for (i, s) in trial.samples.iter().enumerate() {
        // A window-length slice of the noise stream, advancing per sample.
        let start = (i * 960) % noise.len().saturating_sub(s.audio_internal.len()).max(1);
        let noise_win = &noise[start..start + s.audio_internal.len()];
        let mixed_i = crate::dsp::mix_noise(&s.audio_internal, noise_win, gain)?;
        let mixed_e = crate::dsp::mix_noise(&s.audio_external, noise_win, gain)?;
        let pi = welch_psd_i16(&mixed_i, SAMPLE_RATE)?;
        let pe = welch_psd_i16(&mixed_e, SAMPLE_RATE)?;
        for (j, &b) in pi.bins.iter().enumerate() {
            features.psd_internal[i * N_BINS + j] = b as f32;
        }
        for (j, &b) in pe.bins.iter().enumerate() {
            features.psd_external[i * N_BINS + j] = b as f32;
        }
    }
    Ok(features)
}

/// One model sequence: a window into a trial's features.
#[derive(Debug, Clone)]
pub struct SeqRef {
    pub features: Arc<TrialFeatures>,
    pub start: usize,
    pub len: usize,
}

impl SeqRef {
    pub fn fabric_id(&self) -> u16 {
        self.features.fabric_id
    }

    pub fn properties(&self) -> PropertyLabels {
        self.features.properties
    }

    pub fn trial_id(&self) -> &str {
        &self.features.trial_id
    }

    /// Assemble the model inputs for a config, truncating PSDs to the
    /// configured cutoff.
    pub fn build_inputs(&self, cfg: &ModelConfig) -> SeqTensors<f32> {
        use crate::neural::ImageInputKind::*;
        let n = self.len;
        let mut inputs = SeqTensors::empty();
        let bins = cfg.psd_bins().min(N_BINS);

        let slice_psd = |src: &[f32]| {
            let mut out = vec![0.0f32; n * bins];
            for i in 0..n {
                let row = (self.start + i) * N_BINS;
                out[i * bins..(i + 1) * bins].copy_from_slice(&src[row..row + bins]);
            }
            TensorData::from_vec(&[n, bins], out)
        };
        if cfg.use_internal_audio {
            inputs.psd_internal = Some(slice_psd(&self.features.psd_internal));
        }
        if cfg.use_external_audio {
            inputs.psd_external = Some(slice_psd(&self.features.psd_external));
        }
        if cfg.use_proprio {
            let mut out = vec![0.0f32; n * PROPRIO_DIM];
            let from = self.start * PROPRIO_DIM;
            out.copy_from_slice(&self.features.proprio[from..from + n * PROPRIO_DIM]);
            inputs.proprio = Some(TensorData::from_vec(&[n, PROPRIO_DIM], out));
        }
        match cfg.image_input {
            Raw60x80 => {
                let src = self.features.image_small.as_ref().expect("image features missing");
                let from = self.start * IMAGE_SMALL_ELEMS;
                let out = src[from..from + n * IMAGE_SMALL_ELEMS].to_vec();
                inputs.image = Some(TensorData::from_vec(&[n, 1, SMALL_H, SMALL_W], out));
            }
            Flow => {
                let src = self.features.flow.as_ref().expect("flow features missing");
                let from = self.start * FLOW_ELEMS;
                let out = src[from..from + n * FLOW_ELEMS].to_vec();
                inputs.image = Some(TensorData::from_vec(&[n, FLOW_C, FLOW_H, FLOW_W], out));
            }
            None => {}
        }
        inputs
    }
}

/// Cut trial features into non-overlapping sequence windows, mirroring the
/// trial partitioning rule (trailing remainder dropped).
pub fn sequences_from(features: Arc<TrialFeatures>, seq_len: usize) -> Vec<SeqRef> {
    let count = features.n / seq_len;
    (0..count)
        .map(|i| SeqRef { features: Arc::clone(&features), start: i * seq_len, len: seq_len })
        .collect()
}

/// Extraction over in-memory sequence batches that share a trial.
pub fn extract_batches(
    batches: &[SequenceBatch],
    params: &FeatureParams,
    select: ExtractSelection,
) -> Result<Vec<SeqRef>, FeatureError> {
    let mut out = Vec::new();
    let mut current: Option<(*const Trial, Arc<TrialFeatures>)> = Option::None;
    for b in batches {
        let key = Arc::as_ptr(&b.trial);
        let features = match &current {
            Some((k, f)) if *k == key => Arc::clone(f),
            _ => {
                let f = Arc::new(extract_trial(
                    &b.trial,
                    &format!("{}-{}", b.trial.session_tag, b.trial.fabric.id),
                    params,
                    select,
                )?);
                current = Some((key, Arc::clone(&f)));
                f
            }
        };
        out.push(SeqRef { features, start: b.start, len: b.len });
    }
    Ok(out)
}

// --- binary tensor cache ---

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
    /// PSD bin width when the tensor is a PSD stack.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_width_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_freq_hz: Option<f64>,
}

/// Write `<base>.f32` (little-endian) plus `<base>.json`.
pub fn write_tensor(base: &Path, shape: &[usize], data: &[f32], sidecar: TensorSidecar) -> Result<(), FeatureError> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let bin_path = base.with_extension("f32");
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, bytes).map_err(io_err(&bin_path))?;
    let json_path = base.with_extension("json");
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| FeatureError::Cache(e.to_string()))?;
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    Ok(())
}

pub fn read_tensor(base: &Path) -> Result<(Vec<usize>, Vec<f32>), FeatureError> {
    let json_path = base.with_extension("json");
    let sidecar: TensorSidecar = serde_json::from_slice(
        &fs::read(&json_path).map_err(io_err(&json_path))?,
    )
    .map_err(|e| FeatureError::Cache(e.to_string()))?;
    let bin_path = base.with_extension("f32");
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let expect = sidecar.shape.iter().product::<usize>() * 4;
    if bytes.len() != expect {
        return Err(FeatureError::Cache(format!(
            "{} is {} bytes, sidecar says {}",
            bin_path.display(),
            bytes.len(),
            expect
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((sidecar.shape, data))
}

/// Content hash of a trial directory: every file's name, length, and bytes.
pub fn trial_content_hash(dir: &Path) -> Result<String, FeatureError> {
    let mut hasher = Sha256::new();
    let mut paths = Vec::new();
    collect_files(dir, &mut paths)?;
    paths.sort();
    for p in paths {
        let rel = p.strip_prefix(dir).unwrap_or(&p);
        hasher.update(rel.to_string_lossy().as_bytes());
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex_digest(hasher))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), FeatureError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Cache key: trial content hash combined with the extraction parameters.
pub fn cache_key(trial_hash: &str, params: &FeatureParams, select: ExtractSelection) -> String {
    let mut hasher = Sha256::new();
    hasher.update(trial_hash.as_bytes());
    hasher.update(serde_json::to_vec(params).expect("params serialize"));
    hasher.update([select.images as u8, select.flow as u8]);
    hex_digest(hasher)[..16].to_string()
}

fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Persist extracted features under `cache_root/<trial_id>-<key>/`.
pub fn write_feature_cache(
    cache_root: &Path,
    key: &str,
    features: &TrialFeatures,
) -> Result<PathBuf, FeatureError> {
    let dir = cache_root.join(format!("{}-{}", features.trial_id, key));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let psd_sidecar = || TensorSidecar {
        shape: vec![features.n, N_BINS],
        dtype: "f32".into(),
        order: "row_major".into(),
        bin_width_hz: Some(crate::dsp::BIN_WIDTH_HZ),
        max_freq_hz: Some(crate::dsp::FULL_BANDWIDTH_HZ),
    };
    write_tensor(&dir.join("psd_internal"), &[features.n, N_BINS], &features.psd_internal, psd_sidecar())?;
    write_tensor(&dir.join("psd_external"), &[features.n, N_BINS], &features.psd_external, psd_sidecar())?;
    write_tensor(
        &dir.join("proprio"),
        &[features.n, PROPRIO_DIM],
        &features.proprio,
        TensorSidecar {
            shape: vec![features.n, PROPRIO_DIM],
            dtype: "f32".into(),
            order: "row_major".into(),
            bin_width_hz: Option::None,
            max_freq_hz: Option::None,
        },
    )?;
    if let Some(img) = &features.image_small {
        write_tensor(
            &dir.join("image_small"),
            &[features.n, SMALL_H, SMALL_W],
            img,
            TensorSidecar {
                shape: vec![features.n, SMALL_H, SMALL_W],
                dtype: "f32".into(),
                order: "row_major".into(),
                bin_width_hz: Option::None,
                max_freq_hz: Option::None,
            },
        )?;
    }
    if let Some(flow) = &features.flow {
        write_tensor(
            &dir.join("flow"),
            &[features.n, FLOW_C, FLOW_H, FLOW_W],
            flow,
            TensorSidecar {
                shape: vec![features.n, FLOW_C, FLOW_H, FLOW_W],
                dtype: "f32".into(),
                order: "row_major".into(),
                bin_width_hz: Option::None,
                max_freq_hz: Option::None,
            },
        )?;
    }
    Ok(dir)
}

/// Helper: compute the dense flow feature of a single frame pair (exposed for
/// tooling; the batch path lives in [`extract_trial`]).
pub fn flow_feature_for_pair(
    prev: &crate::frame::Frame8,
    next: &crate::frame::Frame8,
    params: &FeatureParams,
) -> Result<crate::optflow::FlowFeature, FeatureError> {
    let dense: DenseFlow = farneback_flow(prev, next, &params.flow)?;
    let filtered = percentile_filter(&dense, params.keep_fraction);
    Ok(patch_pool(&filtered)?)
}
