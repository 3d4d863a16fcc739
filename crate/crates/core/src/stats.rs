//! Evaluation statistics: confusion matrices, the paired Wilcoxon
//! signed-rank test (exact for small n), holdout property evaluation, and
//! latent-feature export.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::PROPERTY_LEVELS;
use crate::features::SeqRef;
use crate::neural::{argmax, HeadId, ModelState, NeuralError};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("prediction/label length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("too few non-zero pairs: {0} (need >= 5)")]
    TooFewPairs(usize),
    #[error("model has no property heads")]
    MissingHead,
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// k x k counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn at(&self, true_class: usize, predicted: usize) -> usize {
        self.counts[true_class * self.k + predicted]
    }

    pub fn row_sum(&self, true_class: usize) -> usize {
        self.counts[true_class * self.k..(true_class + 1) * self.k].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return f64::NAN;
        }
        let trace: usize = (0..self.k).map(|i| self.at(i, i)).sum();
        trace as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for j in 0..self.k {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for i in 0..self.k {
            out.push_str(&format!("{i}"));
            for j in 0..self.k {
                out.push_str(&format!(",{}", self.at(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    k: usize,
) -> Result<ConfusionMatrix, StatsError> {
    if preds.len() != labels.len() {
        return Err(StatsError::LengthMismatch { a: preds.len(), b: labels.len() });
    }
    let mut counts = vec![0usize; k * k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k {
            return Err(StatsError::LabelOutOfRange { label: p, k });
        }
        if l >= k {
            return Err(StatsError::LabelOutOfRange { label: l, k });
        }
        counts[l * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

/// Mean and unbiased (n - 1) standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Outcome of the paired Wilcoxon signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Pairs remaining after dropping zero differences.
    pub n_used: usize,
    /// Whether the p-value is exact (enumeration) or a normal approximation.
    pub exact: bool,
}

/// Threshold below which the exact null distribution is enumerated.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Two-sided paired Wilcoxon signed-rank test. Zero differences are dropped,
/// tied absolute differences receive averaged ranks. Exact p by enumerating
/// the conditional null distribution for n <= 25, otherwise a normal
/// approximation with tie correction (no continuity correction).
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n < 5 {
        return Err(StatsError::TooFewPairs(n));
    }

    // Rank |d| with average ranks for ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }

    let w_plus: f64 =
        diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= WILCOXON_EXACT_MAX_N {
        let p = exact_two_sided_p(&ranks, w_plus);
        Ok(WilcoxonResult { statistic: w_plus, p_value: p, n_used: n, exact: true })
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Tie correction over groups of equal |d|.
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        let p = (2.0 * (1.0 - normal_cdf(z.abs()))).min(1.0);
        Ok(WilcoxonResult { statistic: w_plus, p_value: p, n_used: n, exact: false })
    }
}

/// Exact conditional null distribution of W+ given the observed rank
/// multiset: dynamic program over achievable doubled-rank sums (average
/// ranks are multiples of 1/2, so doubling makes them integers).
fn exact_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let n_patterns = 2f64.powi(ranks.len() as i32);
    let w2 = (w_plus * 2.0).round() as usize;
    let p_le: f64 = counts[..=w2.min(total)].iter().sum::<f64>() / n_patterns;
    let p_ge: f64 = counts[w2.min(total)..].iter().sum::<f64>() / n_patterns;
    (2.0 * p_le.min(p_ge)).min(1.0)
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error < 1.5e-7, ample for the large-n approximation path).
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Per-property accuracies against chance levels, on test trials of training
/// fabrics and on holdout fabrics.
#[derive(Debug, Clone)]
pub struct PropertyReport {
    pub rows: Vec<PropertyRow>,
}

#[derive(Debug, Clone)]
pub struct PropertyRow {
    pub head: HeadId,
    pub chance: f64,
    pub train_fabrics_accuracy: f64,
    pub holdout_accuracy: f64,
}

impl PropertyReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>18} {:>18}\n",
            "Property", "Chance", "Training Fabrics", "Holdout Fabrics"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>7.2}% {:>17.2}% {:>17.2}%\n",
                r.head.name(),
                r.chance * 100.0,
                r.train_fabrics_accuracy * 100.0,
                r.holdout_accuracy * 100.0
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("property,chance,train_fabrics_accuracy,holdout_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.head.name(),
                r.chance,
                r.train_fabrics_accuracy,
                r.holdout_accuracy
            ));
        }
        out
    }
}

fn property_accuracy(
    state: &ModelState,
    seqs: &[SeqRef],
) -> Result<BTreeMap<HeadId, f64>, StatsError> {
    let mut correct: BTreeMap<HeadId, usize> = BTreeMap::new();
    let mut counted: BTreeMap<HeadId, usize> = BTreeMap::new();
    for seq in seqs {
        let inputs = seq.build_inputs(&state.config);
        let probs = state.predict_probs(&inputs)?;
        let p = seq.properties();
        for (head, want) in [
            (HeadId::Stretchiness, p.stretchiness as usize),
            (HeadId::Roughness, p.roughness as usize),
            (HeadId::Thickness, p.thickness as usize),
        ] {
            if let Some(probvec) = probs.get(&head) {
                *counted.entry(head).or_default() += 1;
                if argmax(probvec) == want {
                    *correct.entry(head).or_default() += 1;
                }
            }
        }
    }
    Ok(counted
        .into_iter()
        .map(|(h, n)| (h, correct.get(&h).copied().unwrap_or(0) as f64 / n.max(1) as f64))
        .collect())
}

/// Property-head accuracy on (a) test sequences of fabrics seen in training
/// and (b) sequences of fabrics held out entirely, with chance levels
/// 1/2, 1/5, 1/3.
pub fn evaluate_properties(
    state: &ModelState,
    train_fabric_test: &[SeqRef],
    holdout: &[SeqRef],
) -> Result<PropertyReport, StatsError> {
    if !state.config.heads.property_heads {
        return Err(StatsError::MissingHead);
    }
    let on_train = property_accuracy(state, train_fabric_test)?;
    let on_holdout = property_accuracy(state, holdout)?;
    let chances = [
        (HeadId::Stretchiness, 1.0 / PROPERTY_LEVELS.0 as f64),
        (HeadId::Roughness, 1.0 / PROPERTY_LEVELS.1 as f64),
        (HeadId::Thickness, 1.0 / PROPERTY_LEVELS.2 as f64),
    ];
    let rows = chances
        .into_iter()
        .map(|(head, chance)| PropertyRow {
            head,
            chance,
            train_fabrics_accuracy: on_train.get(&head).copied().unwrap_or(f64::NAN),
            holdout_accuracy: on_holdout.get(&head).copied().unwrap_or(f64::NAN),
        })
        .collect();
    Ok(PropertyReport { rows })
}

/// One exported latent row: the mean fused feature vector over a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub trial_id: String,
    pub fabric_id: u16,
    pub stretchiness: u8,
    pub roughness: u8,
    pub thickness: u8,
    pub latent: Vec<f32>,
}

/// Compute one latent row per trial: sequences of a trial are averaged (they
/// have equal length, so this is the mean over all its samples).
pub fn export_latents(state: &ModelState, seqs: &[SeqRef]) -> Result<Vec<LatentRow>, StatsError> {
    let mut by_trial: BTreeMap<String, (Vec<f64>, usize, &SeqRef)> = BTreeMap::new();
    for seq in seqs {
        let inputs = seq.build_inputs(&state.config);
        let mean = state.fused_mean(&inputs)?;
        let entry = by_trial
            .entry(seq.trial_id().to_string())
            .or_insert_with(|| (vec![0.0; mean.len()], 0, seq));
        for (acc, v) in entry.0.iter_mut().zip(&mean) {
            *acc += *v as f64;
        }
        entry.1 += 1;
    }
    Ok(by_trial
        .into_iter()
        .map(|(trial_id, (sum, count, seq))| {
            let p = seq.properties();
            LatentRow {
                trial_id,
                fabric_id: seq.fabric_id(),
                stretchiness: p.stretchiness,
                roughness: p.roughness,
                thickness: p.thickness,
                latent: sum.iter().map(|v| (*v / count as f64) as f32).collect(),
            }
        })
        .collect())
}

/// CSV with documented header: trial id, fabric id, property labels, then
/// one column per latent dimension.
pub fn latents_to_csv(rows: &[LatentRow]) -> String {
    let dim = rows.first().map(|r| r.latent.len()).unwrap_or(0);
    let mut out = String::from("trial_id,fabric_id,stretchiness,roughness,thickness");
    for d in 0..dim {
        out.push_str(&format!(",z{d}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.trial_id, r.fabric_id, r.stretchiness, r.roughness, r.thickness
        ));
        for v in &r.latent {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
