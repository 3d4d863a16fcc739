//! Subcommand implementations. Every command reads trials from the data
//! root, works deterministically from the configured seeds, and leaves its
//! artifacts plus a manifest in the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};

use tactile_fusion::dataset::{
    list_trial_dirs, load_trial, split_by_trial, write_trial, SplitPolicy, Trial,
};
use tactile_fusion::features::{
    cache_key, extract_trial, extract_trial_with_noise, sequences_from, trial_content_hash,
    write_feature_cache, ExtractSelection, SeqRef,
};
use tactile_fusion::frame::ImageVariant;
use tactile_fusion::neural::{HeadSpec, ImageInputKind, ModelConfig, ModelState};
use tactile_fusion::stats::{
    confusion_matrix, evaluate_properties, export_latents, latents_to_csv, mean_sd,
    wilcoxon_signed_rank, PropertyRow,
};
use tactile_fusion::synth::{
    audio_dominant_classes, generate_noise_stream, generate_trial, property_lattice_classes,
    well_separated_classes, SynthFabricSpec,
};
use tactile_fusion::trainer::{
    bandwidth_grid, describe_modalities, evaluate, fit, modality_grid, run_ablation,
    split_validation, train, TrainData,
};

use crate::config::{AppConfig, SynthProfile};
use crate::runs::RunDir;

pub struct Ctx {
    pub cfg: AppConfig,
    pub data_root: PathBuf,
    pub out: PathBuf,
}

impl Ctx {
    fn run_dir(&self, command: &str) -> Result<RunDir> {
        RunDir::create(&self.out, command, &self.cfg.content_hash())
    }
}

// --- synth ---

fn class_specs(cfg: &AppConfig) -> Vec<SynthFabricSpec> {
    match cfg.synth.profile {
        SynthProfile::Separated => well_separated_classes(cfg.synth.classes, cfg.synth.margin),
        SynthProfile::AudioDominant => audio_dominant_classes(cfg.synth.classes),
        SynthProfile::PropertyLattice => {
            property_lattice_classes(cfg.synth.classes, cfg.synth.base_seed)
        }
    }
}

pub fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let specs = class_specs(&ctx.cfg);
    let s = &ctx.cfg.synth;
    std::fs::create_dir_all(&ctx.data_root)?;
    let mut written = 0usize;
    for spec in &specs {
        for t in 0..s.train_trials + s.test_trials {
            let tag = if t >= s.train_trials {
                "day3"
            } else if t < s.train_trials / 2 {
                "day1"
            } else {
                "day2"
            };
            let seed = s.base_seed ^ (spec.class_id as u64 * 1009 + t as u64);
            let trial = generate_trial(
                spec,
                s.samples_per_trial,
                tag,
                seed,
                s.image_variant.clone(),
            );
            let dir = ctx.data_root.join(format!("class{:02}_trial{:02}", spec.class_id, t));
            write_trial(&trial, &dir)
                .with_context(|| format!("writing trial {}", dir.display()))?;
            written += 1;
        }
    }
    println!(
        "synth: wrote {written} trials ({} classes x {} trials) under {}",
        specs.len(),
        s.train_trials + s.test_trials,
        ctx.data_root.display()
    );
    Ok(())
}

// --- ingest ---

pub fn cmd_ingest(ctx: &Ctx, src: &Path) -> Result<()> {
    let dirs = list_trial_dirs(src).with_context(|| format!("listing {}", src.display()))?;
    if dirs.is_empty() {
        bail!("no trial directories (containing meta.json) found under {}", src.display());
    }
    std::fs::create_dir_all(&ctx.data_root)?;
    for dir in &dirs {
        let trial = load_trial(dir).with_context(|| format!("validating {}", dir.display()))?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let dest = ctx.data_root.join(&name);
        write_trial(&trial, &dest)?;
        println!(
            "ingested {name}: {} samples, fabric {} ({})",
            trial.len(),
            trial.fabric.id,
            trial.fabric.name
        );
    }
    println!("ingest: {} trials canonicalized into {}", dirs.len(), ctx.data_root.display());
    Ok(())
}

// --- shared loading ---

struct LoadedDataset {
    train: Vec<(String, Arc<Trial>)>,
    test: Vec<(String, Arc<Trial>)>,
}

fn load_dataset(ctx: &Ctx) -> Result<LoadedDataset> {
    let dirs = list_trial_dirs(&ctx.data_root)
        .with_context(|| format!("listing {}", ctx.data_root.display()))?;
    if dirs.is_empty() {
        bail!(
            "no trials under {} (run `synth` or `ingest` first, or set --data-root)",
            ctx.data_root.display()
        );
    }
    let mut named = Vec::new();
    let mut trials = Vec::new();
    for dir in &dirs {
        let trial =
            Arc::new(load_trial(dir).with_context(|| format!("loading {}", dir.display()))?);
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        named.push((name, Arc::clone(&trial)));
        trials.push(trial);
    }
    let policy = SplitPolicy {
        train_tags: ctx.cfg.data.train_tags.clone(),
        test_tags: ctx.cfg.data.test_tags.clone(),
    };
    let split = split_by_trial(trials, &policy, ctx.cfg.data.seq_len)?;
    println!(
        "dataset: {} train trials ({} sequences), {} test trials ({} sequences)",
        split.train.len(),
        split.train_sequences,
        split.test.len(),
        split.test_sequences
    );
    let by_ptr = |t: &Arc<Trial>| {
        named
            .iter()
            .find(|(_, x)| Arc::ptr_eq(x, t))
            .map(|(n, _)| n.clone())
            .unwrap_or_default()
    };
    Ok(LoadedDataset {
        train: split.train.iter().map(|t| (by_ptr(t), Arc::clone(t))).collect(),
        test: split.test.iter().map(|t| (by_ptr(t), Arc::clone(t))).collect(),
    })
}

fn extract_split(
    ctx: &Ctx,
    trials: &[(String, Arc<Trial>)],
    select: ExtractSelection,
) -> Result<Vec<SeqRef>> {
    let mut out = Vec::new();
    for (name, trial) in trials {
        let features = Arc::new(extract_trial(trial, name, &ctx.cfg.features, select)?);
        out.extend(sequences_from(features, ctx.cfg.data.seq_len));
    }
    Ok(out)
}

/// Model config adjusted to the dataset: sequence length from the data
/// section and fabric-head width from the observed class count.
fn effective_model(ctx: &Ctx, n_classes: usize) -> ModelConfig {
    let mut m = ctx.cfg.model.clone();
    m.seq_len = ctx.cfg.data.seq_len;
    if m.heads.fabric_classes.is_some() {
        m.heads.fabric_classes = Some(n_classes);
    }
    m
}

fn build_train_data(ctx: &Ctx, select: ExtractSelection) -> Result<(TrainData, LoadedDataset)> {
    let loaded = load_dataset(ctx)?;
    let train = extract_split(ctx, &loaded.train, select)?;
    let test = extract_split(ctx, &loaded.test, select)?;
    Ok((TrainData::from_sequences(train, test), loaded))
}

// --- extract-features ---

pub fn cmd_extract_features(ctx: &Ctx) -> Result<()> {
    let dirs = list_trial_dirs(&ctx.data_root)?;
    if dirs.is_empty() {
        bail!("no trials under {}", ctx.data_root.display());
    }
    let cache_root = ctx.out.join("features");
    std::fs::create_dir_all(&cache_root)?;
    let mut fresh = 0usize;
    let mut reused = 0usize;
    for dir in &dirs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let trial = load_trial(dir)?;
        let select = ExtractSelection {
            images: true,
            flow: trial.image_variant == ImageVariant::Native,
        };
        let hash = trial_content_hash(dir)?;
        let key = cache_key(&hash, &ctx.cfg.features, select);
        let target = cache_root.join(format!("{name}-{key}"));
        if target.exists() {
            reused += 1;
            continue;
        }
        let features = extract_trial(&trial, &name, &ctx.cfg.features, select)?;
        write_feature_cache(&cache_root, &key, &features)?;
        fresh += 1;
        println!("extracted {name} ({} samples) -> {}", features.n, target.display());
    }
    println!("extract-features: {fresh} extracted, {reused} reused from cache");
    Ok(())
}

// --- train ---

pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    let mut run = ctx.run_dir("train")?;
    let model_probe = effective_model(ctx, 2);
    let select = ExtractSelection::for_config(&model_probe);
    let (data, _loaded) = build_train_data(ctx, select)?;
    let model = effective_model(ctx, data.n_classes());

    let summary = train(&model, &data, &ctx.cfg.train)?;
    let mut metrics = String::from("seed,test_accuracy,final_train_loss\n");
    for r in &summary.runs {
        let ckpt = run.file(&format!("checkpoint_seed{}.ckpt", r.seed));
        r.state.save(&ckpt)?;
        run.record(ckpt);
        metrics.push_str(&format!(
            "{},{},{}\n",
            r.seed,
            r.test.accuracy,
            r.epoch_losses.last().copied().unwrap_or(f64::NAN)
        ));
        println!("seed {}: test accuracy {:.2}%", r.seed, r.test.accuracy * 100.0);
    }
    run.write("metrics.csv", metrics.as_bytes())?;
    let report = format!(
        "modalities: {}\nseeds: {}\ntest accuracy: {:.2} +/- {:.2} %\n",
        describe_modalities(&model),
        summary.runs.len(),
        summary.mean_accuracy * 100.0,
        summary.sd_accuracy * 100.0
    );
    run.write("report.txt", report.as_bytes())?;
    print!("{report}");

    // Confusion matrix of the first seed, for quick inspection.
    if let Some(first) = summary.runs.first() {
        let preds: Vec<usize> = first.test.fabric_pairs.iter().map(|p| p.1).collect();
        let labels: Vec<usize> = first.test.fabric_pairs.iter().map(|p| p.0).collect();
        if !preds.is_empty() {
            let m = confusion_matrix(&preds, &labels, data.n_classes())?;
            run.write("confusion_seed0.csv", m.to_csv().as_bytes())?;
        }
    }
    run.finish()
}

// --- evaluate ---

pub fn cmd_evaluate(ctx: &Ctx, checkpoint: &Path) -> Result<()> {
    let mut run = ctx.run_dir("evaluate")?;
    let state = ModelState::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let select = ExtractSelection::for_config(&state.config);

    let loaded = load_dataset(ctx)?;
    let test = extract_split(ctx, &loaded.test, select)?;
    if test.is_empty() {
        bail!("test split is empty");
    }
    let train_seqs = extract_split(ctx, &loaded.train, select)?;
    let data = TrainData::from_sequences(train_seqs, test);

    let result = evaluate(&state, &data.test, &data.label_map)?;
    let preds: Vec<usize> = result.fabric_pairs.iter().map(|p| p.1).collect();
    let labels: Vec<usize> = result.fabric_pairs.iter().map(|p| p.0).collect();
    let mut report = format!("test accuracy: {:.2}%\n", result.accuracy * 100.0);
    for (head, acc) in &result.per_head_accuracy {
        report.push_str(&format!("{}: {:.2}%\n", head.name(), acc * 100.0));
    }
    if !preds.is_empty() {
        let m = confusion_matrix(&preds, &labels, data.n_classes())?;
        run.write("confusion.csv", m.to_csv().as_bytes())?;
    }
    run.write("report.txt", report.as_bytes())?;
    print!("{report}");
    run.finish()
}

// --- ablate ---

pub fn cmd_ablate(ctx: &Ctx, grid_name: &str) -> Result<()> {
    let mut run = ctx.run_dir(&format!("ablate-{grid_name}"))?;
    let model_probe = effective_model(ctx, 2);

    let grid_for = |base: &ModelConfig| -> Result<Vec<(String, ModelConfig)>> {
        match grid_name {
            "bandwidth" => Ok(bandwidth_grid(base)),
            "modality" => Ok(modality_grid(base)),
            other => bail!("unknown grid {other:?} (expected \"bandwidth\" or \"modality\")"),
        }
    };
    // Extraction must cover every modality any grid row needs.
    let select = match grid_name {
        "modality" => ExtractSelection::all(),
        _ => ExtractSelection::for_config(&model_probe),
    };
    let (data, _loaded) = build_train_data(ctx, select)?;
    let model = effective_model(ctx, data.n_classes());
    let grid = grid_for(&model)?;

    // The bandwidth protocol also reports validation accuracy: hold two
    // trials per class out of the training split.
    let validation = if grid_name == "bandwidth" {
        let all: Vec<SeqRef> =
            (0..data.train.len()).map(|i| data.train.get(i).clone()).collect();
        let (tr, val) = split_validation(&all, 2);
        if val.is_empty() || tr.is_empty() {
            None
        } else {
            Some(TrainData::from_sequences(tr, val))
        }
    } else {
        None
    };

    let table = run_ablation(&grid, &data, &ctx.cfg.train, validation.as_ref())?;
    run.write("table.txt", table.to_text().as_bytes())?;
    run.write("table.csv", table.to_csv().as_bytes())?;
    print!("{}", table.to_text());
    run.finish()
}

// --- noise-eval ---

pub fn cmd_noise_eval(ctx: &Ctx) -> Result<()> {
    let mut run = ctx.run_dir("noise-eval")?;
    let loaded = load_dataset(ctx)?;
    let select = ExtractSelection::audio_proprio_only();

    let train_seqs = extract_split(ctx, &loaded.train, select)?;

    // Noise-injected test features: mix a synthetic ambient stream into every
    // test window at a gain calibrated against the clean external-microphone
    // level.
    let noise = generate_noise_stream(48_000 * 4, ctx.cfg.noise.noise_seed);
    let clean_windows: Vec<&[i16]> = loaded
        .test
        .iter()
        .filter_map(|(_, t)| t.samples.first().map(|s| s.audio_external.as_slice()))
        .collect();
    let noise_windows: Vec<&[i16]> = noise.chunks_exact(2048).take(16).collect();
    let gain = tactile_fusion::dsp::calibrate_noise_gain(
        &clean_windows,
        &noise_windows,
        ctx.cfg.noise.db_above_ambient,
        tactile_fusion::SAMPLE_RATE,
    )?;
    println!(
        "noise-eval: injected gain {gain:.3} targets {} dB above ambient",
        ctx.cfg.noise.db_above_ambient
    );

    let mut noisy_test: Vec<SeqRef> = Vec::new();
    for (name, trial) in &loaded.test {
        let features = Arc::new(extract_trial_with_noise(
            trial,
            name,
            &ctx.cfg.features,
            select,
            &noise,
            gain,
        )?);
        noisy_test.extend(sequences_from(features, ctx.cfg.data.seq_len));
    }

    let data = TrainData::from_sequences(train_seqs, noisy_test);
    let base = effective_model(ctx, data.n_classes());
    let rows_cfg = [
        ("audio-int", false, false),
        ("audio-int+proprio", true, false),
        ("audio-int+proprio+ext", true, true),
    ];

    let mut table = String::from(
        "Minsound Audio  Proprioception  External Audio  Test Accuracy [%]   p-value\n",
    );
    let mut csv =
        String::from("config,use_proprio,use_external,mean_accuracy,sd_accuracy,p_vs_previous\n");
    let mut prev_accs: Option<Vec<f64>> = None;
    for (label, proprio, ext) in rows_cfg {
        let cfg = ModelConfig {
            image_input: ImageInputKind::None,
            use_internal_audio: true,
            use_external_audio: ext,
            use_proprio: proprio,
            ..base.clone()
        };
        let summary = train(&cfg, &data, &ctx.cfg.train)?;
        let accs: Vec<f64> = summary.runs.iter().map(|r| r.test.accuracy).collect();
        let (mean, sd) = mean_sd(&accs);
        let p = match &prev_accs {
            Some(prev) => match wilcoxon_signed_rank(&accs, prev) {
                Ok(r) => format!("{:.4}", r.p_value),
                Err(_) => "-".into(),
            },
            None => "-".into(),
        };
        table.push_str(&format!(
            "{:<15} {:<15} {:<15} {:6.2} +/- {:<8.2} {}\n",
            "yes",
            if proprio { "yes" } else { "-" },
            if ext { "yes" } else { "-" },
            mean * 100.0,
            sd * 100.0,
            p
        ));
        csv.push_str(&format!("{label},{proprio},{ext},{mean},{sd},{p}\n"));
        prev_accs = Some(accs);
    }
    run.write("noise_table.txt", table.as_bytes())?;
    run.write("noise_table.csv", csv.as_bytes())?;
    print!("{table}");
    run.finish()
}

// --- properties ---

pub fn cmd_properties(ctx: &Ctx) -> Result<()> {
    let mut run = ctx.run_dir("properties")?;
    let loaded = load_dataset(ctx)?;
    let holdout_ids = &ctx.cfg.properties.holdout_fabrics;

    let keep = |t: &Arc<Trial>| !holdout_ids.contains(&t.fabric.id);
    let train_trials: Vec<_> =
        loaded.train.iter().filter(|(_, t)| keep(t)).cloned().collect();
    let test_trials: Vec<_> = loaded.test.iter().filter(|(_, t)| keep(t)).cloned().collect();
    let holdout_trials: Vec<_> = loaded
        .train
        .iter()
        .chain(&loaded.test)
        .filter(|(_, t)| !keep(t))
        .cloned()
        .collect();
    if train_trials.is_empty() {
        bail!("property training set is empty after removing holdout fabrics {holdout_ids:?}");
    }
    if holdout_trials.is_empty() {
        bail!("no holdout trials present (fabric ids {holdout_ids:?})");
    }

    let mut model = effective_model(ctx, 2);
    model.heads = HeadSpec { fabric_classes: None, property_heads: true };
    let select = ExtractSelection::for_config(&model);

    let train_seqs = extract_split(ctx, &train_trials, select)?;
    let test_seqs = extract_split(ctx, &test_trials, select)?;
    let holdout_seqs = extract_split(ctx, &holdout_trials, select)?;
    let data = TrainData::from_sequences(train_seqs, test_seqs.clone());

    // Average the per-property accuracies across seeds.
    let mut acc: BTreeMap<tactile_fusion::HeadId, (f64, f64, f64)> = BTreeMap::new();
    let n_seeds = ctx.cfg.train.seeds.len() as f64;
    for &seed in &ctx.cfg.train.seeds {
        let fitres = fit(&model, &data.train, &data.label_map, &ctx.cfg.train, seed)?;
        let report = evaluate_properties(&fitres.state, &test_seqs, &holdout_seqs)?;
        for row in &report.rows {
            let slot = acc.entry(row.head).or_insert((row.chance, 0.0, 0.0));
            slot.1 += row.train_fabrics_accuracy / n_seeds;
            slot.2 += row.holdout_accuracy / n_seeds;
        }
        let ckpt = run.file(&format!("checkpoint_seed{seed}.ckpt"));
        fitres.state.save(&ckpt)?;
        run.record(ckpt);
    }

    let report = tactile_fusion::stats::PropertyReport {
        rows: acc
            .iter()
            .map(|(head, (chance, tr, ho))| PropertyRow {
                head: *head,
                chance: *chance,
                train_fabrics_accuracy: *tr,
                holdout_accuracy: *ho,
            })
            .collect(),
    };
    run.write("properties.txt", report.to_text().as_bytes())?;
    run.write("properties.csv", report.to_csv().as_bytes())?;
    print!("{}", report.to_text());
    run.finish()
}

// --- latents ---

pub fn cmd_latents(ctx: &Ctx, checkpoint: &Path) -> Result<()> {
    let mut run = ctx.run_dir("latents")?;
    let state = ModelState::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let select = ExtractSelection::for_config(&state.config);
    let loaded = load_dataset(ctx)?;
    let all: Vec<(String, Arc<Trial>)> =
        loaded.train.iter().chain(&loaded.test).cloned().collect();
    let seqs = extract_split(ctx, &all, select)?;
    let rows = export_latents(&state, &seqs)?;
    let csv = latents_to_csv(&rows);
    run.write("latents.csv", csv.as_bytes())?;
    println!(
        "latents: {} trials, latent dimension {}",
        rows.len(),
        rows.first().map(|r| r.latent.len()).unwrap_or(0)
    );
    run.finish()
}
