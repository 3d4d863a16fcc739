//! Training loop: per-sequence image augmentation, equal-weight multi-task
//! cross-entropy, Adam updates, seed-controlled runs, and the ablation-grid
//! harness.
//!
//! Normalization statistics are always computed per sequence inside the
//! model, never from the training corpus, so nothing leaks between splits.
//! The optimizer only ever sees the training set: `fit` does not take the
//! test set at all, and every access to a [`SequenceSet`] is counted so tests
//! can assert the isolation.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::SeqRef;
use crate::frame::rotate_about_center;
use crate::neural::{
    argmax, forward, multitask_loss, BoundParams, Graph, HeadId, ModelConfig, ModelState,
    NeuralError, ParamSet, SeqTensors, Targets, TensorData,
};
use crate::stats::mean_sd;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step} (seed {seed})")]
    Divergence { step: u64, seed: u64 },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("label {0} missing from the label map")]
    UnknownLabel(u16),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub augment: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 30,
            seeds: vec![0, 1, 2, 3, 4],
            augment: true,
        }
    }
}

/// A split of sequences with an access counter, so leakage tests can verify
/// that the optimizer never touched held-out data.
#[derive(Debug)]
pub struct SequenceSet {
    seqs: Vec<SeqRef>,
    accesses: AtomicUsize,
}

impl SequenceSet {
    pub fn new(seqs: Vec<SeqRef>) -> Self {
        SequenceSet { seqs, accesses: AtomicUsize::new(0) }
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn get(&self, i: usize) -> &SeqRef {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        &self.seqs[i]
    }

    /// Number of sequence fetches so far.
    pub fn access_count(&self) -> usize {
        self.accesses.load(Ordering::Relaxed)
    }

    pub fn iter_meta(&self) -> impl Iterator<Item = &SeqRef> {
        // Metadata-only iteration (labels, trial ids); not counted as a fetch.
        self.seqs.iter()
    }
}

/// Train/test features plus the fabric-id -> class-index mapping.
#[derive(Debug)]
pub struct TrainData {
    pub train: SequenceSet,
    pub test: SequenceSet,
    pub label_map: BTreeMap<u16, usize>,
}

impl TrainData {
    /// Build the label map from the union of fabric ids present.
    pub fn from_sequences(train: Vec<SeqRef>, test: Vec<SeqRef>) -> Self {
        let mut ids: Vec<u16> = train.iter().chain(&test).map(|s| s.fabric_id()).collect();
        ids.sort_unstable();
        ids.dedup();
        let label_map = ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        TrainData { train: SequenceSet::new(train), test: SequenceSet::new(test), label_map }
    }

    pub fn n_classes(&self) -> usize {
        self.label_map.len()
    }
}

/// Draw the per-sequence rotation angle in degrees, Uniform(-90, 90).
pub fn draw_rotation_degrees<R: Rng>(rng: &mut R) -> f32 {
    rng.random_range(-90.0..90.0)
}

/// Rotate every frame of a stacked (n, 1, h, w) image tensor by the same
/// angle about the image center.
pub fn rotate_image_sequence(data: &mut [f32], n: usize, h: usize, w: usize, theta_deg: f32) {
    if theta_deg == 0.0 {
        return;
    }
    for i in 0..n {
        let frame = &mut data[i * h * w..(i + 1) * h * w];
        let rotated = rotate_about_center(frame, h, w, theta_deg);
        frame.copy_from_slice(&rotated);
    }
}

/// One rotation per sequence, shared by all its frames. Returns the angle.
pub fn augment_sequence<R: Rng>(
    data: &mut [f32],
    n: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> f32 {
    let theta = draw_rotation_degrees(rng);
    rotate_image_sequence(data, n, h, w, theta);
    theta
}

/// Result of one seeded training run.
#[derive(Debug)]
pub struct FitResult {
    pub state: ModelState,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Adam with bias correction; one slot pair per parameter tensor.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    fn step(&mut self, params: &mut ParamSet<f32>, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = params.get_mut(name).expect("grad for unknown parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

fn targets_for(seq: &SeqRef, cfg: &ModelConfig, label_map: &BTreeMap<u16, usize>) -> Result<Targets, TrainError> {
    let mut t = Targets::default();
    if cfg.heads.fabric_classes.is_some() {
        let label =
            *label_map.get(&seq.fabric_id()).ok_or(TrainError::UnknownLabel(seq.fabric_id()))?;
        t.fabric = Some(label);
    }
    if cfg.heads.property_heads {
        let p = seq.properties();
        t.properties = Some((p.stretchiness as usize, p.roughness as usize, p.thickness as usize));
    }
    Ok(t)
}

/// Train one model on the training split only. Deterministic in `seed`.
pub fn fit(
    cfg: &ModelConfig,
    train: &SequenceSet,
    label_map: &BTreeMap<u16, usize>,
    params: &TrainParams,
    seed: u64,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let mut state = ModelState::init(cfg.clone(), seed)?;
    let mut adam = Adam::new(params.learning_rate);
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5afe_0001);
    let mut augment_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5afe_0002);

    let augment_images =
        params.augment && cfg.image_input == crate::neural::ImageInputKind::Raw60x80;

    let mut epoch_losses = Vec::with_capacity(params.epochs);
    for _epoch in 0..params.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(params.batch_size) {
            let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let seq = train.get(i);
                let mut inputs = seq.build_inputs(cfg);
                if augment_images {
                    if let Some(img) = inputs.image.as_mut() {
                        let (n, h, w) = (img.shape[0], img.shape[2], img.shape[3]);
                        // One angle per sequence; distinct sequences draw
                        // independently.
                        augment_sequence(&mut img.data, n, h, w, &mut augment_rng);
                    }
                }
                let targets = targets_for(seq, cfg, label_map)?;
                let (loss, grads) = forward_backward(&state.params, cfg, &inputs, &targets)?;
                batch_loss += loss;
                for (name, g) in grads {
                    let acc = grad_acc.entry(name).or_insert_with(|| vec![0.0; g.data.len()]);
                    for (a, &gv) in acc.iter_mut().zip(&g.data) {
                        *a += gv as f64;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_acc.values_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence { step: state.step, seed });
            }
            adam.step(&mut state.params, &grad_acc);
            state.step += 1;
            epoch_loss += batch_loss * batch.len() as f64;
        }
        epoch_losses.push(epoch_loss / train.len() as f64);
        // Exploding gradients can drive parameters non-finite while the
        // normalized forward pass still reports a finite loss; catch that
        // here rather than on the next (possibly never-run) batch.
        let broken = state.params.iter().any(|(_, t)| t.data.iter().any(|v| !v.is_finite()));
        if broken {
            return Err(TrainError::Divergence { step: state.step, seed });
        }
    }
    Ok(FitResult { state, epoch_losses })
}

fn forward_backward(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    inputs: &SeqTensors<f32>,
    targets: &Targets,
) -> Result<(f64, BTreeMap<String, TensorData<f32>>), TrainError> {
    let mut g: Graph<f32> = Graph::new();
    let bound = BoundParams::bind(&mut g, params, true);
    let out = forward(&mut g, &bound, cfg, inputs, false)?;
    let loss = multitask_loss(&mut g, &out, targets)?;
    let loss_value = g.value(loss).data[0] as f64;
    let mut grads = g.backward(loss);
    let mut by_name = BTreeMap::new();
    for (name, &var) in bound.iter() {
        if let Some(grad) = grads.take(var) {
            by_name.insert(name.clone(), grad);
        }
    }
    Ok((loss_value, by_name))
}

/// Evaluation over a sequence set.
#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Fabric-head accuracy (or the mean property accuracy if no fabric head).
    pub accuracy: f64,
    pub per_head_accuracy: BTreeMap<HeadId, f64>,
    /// (true label, predicted label) per sequence for the fabric head.
    pub fabric_pairs: Vec<(usize, usize)>,
}

pub fn evaluate(
    state: &ModelState,
    set: &SequenceSet,
    label_map: &BTreeMap<u16, usize>,
) -> Result<EvalResult, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySplit("eval"));
    }
    let mut correct: BTreeMap<HeadId, usize> = BTreeMap::new();
    let mut counted: BTreeMap<HeadId, usize> = BTreeMap::new();
    let mut fabric_pairs = Vec::new();
    for i in 0..set.len() {
        let seq = set.get(i);
        let inputs = seq.build_inputs(&state.config);
        let probs = state.predict_probs(&inputs)?;
        let targets = targets_for(seq, &state.config, label_map)?;
        for (head, p) in &probs {
            if let Some(want) = targets.class_for(*head) {
                let got = argmax(p);
                *counted.entry(*head).or_default() += 1;
                if got == want {
                    *correct.entry(*head).or_default() += 1;
                }
                if *head == HeadId::Fabric {
                    fabric_pairs.push((want, got));
                }
            }
        }
    }
    let mut per_head = BTreeMap::new();
    for (head, &n) in &counted {
        per_head.insert(*head, correct.get(head).copied().unwrap_or(0) as f64 / n as f64);
    }
    let accuracy = per_head.get(&HeadId::Fabric).copied().unwrap_or_else(|| {
        let vals: Vec<f64> = per_head.values().copied().collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    });
    Ok(EvalResult { accuracy, per_head_accuracy: per_head, fabric_pairs })
}

/// Result of one seed: fit on train, evaluate on test.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub state: ModelState,
    pub epoch_losses: Vec<f64>,
    pub test: EvalResult,
}

/// Mean and SD over seeds (unbiased SD, n - 1).
#[derive(Debug)]
pub struct TrainSummary {
    pub runs: Vec<SeedRun>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
}

/// The full protocol: per-seed fit on the training split, then a single
/// evaluation pass over the test split.
pub fn train(cfg: &ModelConfig, data: &TrainData, params: &TrainParams) -> Result<TrainSummary, TrainError> {
    if params.seeds.is_empty() {
        return Err(TrainError::EmptySplit("seeds"));
    }
    let mut runs = Vec::with_capacity(params.seeds.len());
    for &seed in &params.seeds {
        let fitres = fit(cfg, &data.train, &data.label_map, params, seed)?;
        let test = evaluate(&fitres.state, &data.test, &data.label_map)?;
        runs.push(SeedRun { seed, state: fitres.state, epoch_losses: fitres.epoch_losses, test });
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
    let (mean_accuracy, sd_accuracy) = mean_sd(&accs);
    Ok(TrainSummary { runs, mean_accuracy, sd_accuracy })
}

/// One row of an ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub modalities: String,
    pub backbone: String,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub per_seed: Vec<f64>,
    /// Validation accuracy, when a validation split was supplied.
    pub validation: Option<(f64, f64)>,
}

#[derive(Debug, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Render in the layout of the reported modality/bandwidth tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let has_val = self.rows.iter().any(|r| r.validation.is_some());
        out.push_str(&format!(
            "{:<24} {:<28} {:<11} {}{}\n",
            "Config",
            "Modalities",
            "Backbone",
            if has_val { "Validation [%]      " } else { "" },
            "Test Accuracy [%]"
        ));
        for r in &self.rows {
            let val = match (has_val, &r.validation) {
                (true, Some((m, s))) => format!("{:6.2} +/- {:<5.2} ", m * 100.0, s * 100.0),
                (true, None) => format!("{:<20}", "-"),
                _ => String::new(),
            };
            out.push_str(&format!(
                "{:<24} {:<28} {:<11} {}{:6.2} +/- {:.2}\n",
                r.label,
                r.modalities,
                r.backbone,
                val,
                r.mean_accuracy * 100.0,
                r.sd_accuracy * 100.0
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,modalities,backbone,mean_accuracy,sd_accuracy,validation_mean,validation_sd,per_seed\n",
        );
        for r in &self.rows {
            let (vm, vs) = r
                .validation
                .map(|(m, s)| (format!("{m}"), format!("{s}")))
                .unwrap_or_default();
            let per_seed =
                r.per_seed.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.label, r.modalities, r.backbone, r.mean_accuracy, r.sd_accuracy, vm, vs, per_seed
            ));
        }
        out
    }
}

pub fn describe_modalities(cfg: &ModelConfig) -> String {
    let mut parts = Vec::new();
    match cfg.image_input {
        crate::neural::ImageInputKind::Raw60x80 => parts.push("image"),
        crate::neural::ImageInputKind::Flow => parts.push("flow"),
        crate::neural::ImageInputKind::None => {}
    }
    if cfg.use_internal_audio {
        parts.push("audio-int");
    }
    if cfg.use_external_audio {
        parts.push("audio-ext");
    }
    if cfg.use_proprio {
        parts.push("proprio");
    }
    parts.join("+")
}

/// Run every config of a grid on shared splits and seeds; one table row per
/// config, in grid order.
pub fn run_ablation(
    grid: &[(String, ModelConfig)],
    data: &TrainData,
    params: &TrainParams,
    validation: Option<&TrainData>,
) -> Result<AblationTable, TrainError> {
    let mut table = AblationTable::default();
    for (label, cfg) in grid {
        let summary = train(cfg, data, params)?;
        let validation_acc = match validation {
            Some(vdata) => {
                let mut accs = Vec::new();
                for &seed in &params.seeds {
                    let fitres = fit(cfg, &vdata.train, &vdata.label_map, params, seed)?;
                    accs.push(evaluate(&fitres.state, &vdata.test, &vdata.label_map)?.accuracy);
                }
                Some(mean_sd(&accs))
            }
            None => None,
        };
        table.rows.push(AblationRow {
            label: label.clone(),
            modalities: describe_modalities(cfg),
            backbone: match cfg.backbone {
                crate::neural::BackboneKind::Attention => "attention".into(),
                crate::neural::BackboneKind::Tcn => "tcn".into(),
            },
            mean_accuracy: summary.mean_accuracy,
            sd_accuracy: summary.sd_accuracy,
            per_seed: summary.runs.iter().map(|r| r.test.accuracy).collect(),
            validation: validation_acc,
        });
    }
    Ok(table)
}

/// The audio-bandwidth grid: truncation cutoffs in kHz, one config each.
pub fn bandwidth_grid(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    [2500.0, 10_000.0, 15_000.0, 24_000.0]
        .into_iter()
        .map(|cutoff| {
            let cfg = ModelConfig { psd_cutoff_hz: cutoff, ..base.clone() };
            (format!("{:.1}kHz", cutoff / 1000.0), cfg)
        })
        .collect()
}

/// The modality grid: single-modality rows, combinations, and the TCN row.
pub fn modality_grid(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    use crate::neural::{BackboneKind, ImageInputKind};
    let with = |image: ImageInputKind, ai: bool, ae: bool, pr: bool, backbone: BackboneKind| ModelConfig {
        image_input: image,
        use_internal_audio: ai,
        use_external_audio: ae,
        use_proprio: pr,
        backbone,
        ..base.clone()
    };
    let a = BackboneKind::Attention;
    vec![
        ("image-only".into(), with(ImageInputKind::Raw60x80, false, false, false, a)),
        ("flow-only".into(), with(ImageInputKind::Flow, false, false, false, a)),
        ("audio-int-only".into(), with(ImageInputKind::None, true, false, false, a)),
        ("audio-ext-only".into(), with(ImageInputKind::None, false, true, false, a)),
        ("proprio-only".into(), with(ImageInputKind::None, false, false, true, a)),
        ("image+audio-int".into(), with(ImageInputKind::Raw60x80, true, false, false, a)),
        ("image+audio+proprio".into(), with(ImageInputKind::Raw60x80, true, true, true, a)),
        ("flow+audio-int".into(), with(ImageInputKind::Flow, true, false, false, a)),
        ("flow+audio+proprio".into(), with(ImageInputKind::Flow, true, true, true, a)),
        ("audio-int+proprio".into(), with(ImageInputKind::None, true, false, true, a)),
        ("audio+proprio+ext".into(), with(ImageInputKind::None, true, true, true, a)),
        ("audio-int+ext".into(), with(ImageInputKind::None, true, true, false, a)),
        ("tcn-audio+proprio+ext".into(), with(ImageInputKind::None, true, true, true, BackboneKind::Tcn)),
    ]
}

/// Hold out the last `per_class` trials (by trial id) of each class from the
/// training sequences as a validation split.
pub fn split_validation(seqs: &[SeqRef], per_class: usize) -> (Vec<SeqRef>, Vec<SeqRef>) {
    let mut by_class: BTreeMap<u16, Vec<String>> = BTreeMap::new();
    for s in seqs {
        let ids = by_class.entry(s.fabric_id()).or_default();
        if !ids.contains(&s.trial_id().to_string()) {
            ids.push(s.trial_id().to_string());
        }
    }
    let mut holdout: Vec<(u16, String)> = Vec::new();
    for (class, mut ids) in by_class {
        ids.sort();
        for id in ids.into_iter().rev().take(per_class) {
            holdout.push((class, id));
        }
    }
    let is_holdout = |s: &SeqRef| {
        holdout.iter().any(|(c, id)| *c == s.fabric_id() && id == s.trial_id())
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in seqs {
        if is_holdout(s) {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, val)
}
