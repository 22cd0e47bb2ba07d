//! Biometric evaluation: confusion rates, EER, ROC/AUC, per-group breakdowns,
//! the command-level decision rule, and a deterministic 2-D feature
//! projection for cluster inspection.
//!
//! Acceptance is strict: a sample is accepted iff its score is strictly above
//! the threshold, so ties at the threshold reject.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::trace::Label;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation error: {0}")]
    Invalid(String),
}

/// A classifier score with the metadata needed for breakdowns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSample {
    /// Probability of "human" in [0, 1].
    pub score: f64,
    pub label: Label,
    pub user_id: String,
    pub device_id: String,
    pub content_id: String,
    pub command_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    pub bac: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tar: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    /// None when the group lacks one of the classes.
    pub rates: Option<ConfusionRates>,
    pub eer: Option<f64>,
    pub degenerate: bool,
    pub samples: usize,
}

/// Unweighted mean over the non-degenerate groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub bac: f64,
    pub eer: f64,
    pub groups: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupTable {
    pub rows: Vec<GroupRow>,
    pub macro_average: Option<MacroAverage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub at_threshold: ConfusionRates,
    pub eer: f64,
    pub eer_threshold: f64,
    pub bac_at_eer: f64,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
    pub per_user: GroupTable,
    pub per_device: GroupTable,
    pub per_content: GroupTable,
    pub command_verdicts: Vec<CommandVerdict>,
    pub command_far: Option<f64>,
    pub command_frr: Option<f64>,
    pub word_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandVerdict {
    pub command_id: String,
    pub label: Label,
    pub word_scores: Vec<f64>,
    /// Human iff every word score clears the threshold.
    pub accepted: bool,
}

fn split_classes(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let humans: Vec<f64> = samples
        .iter()
        .filter(|s| s.label == Label::Human)
        .map(|s| s.score)
        .collect();
    let attacks: Vec<f64> = samples
        .iter()
        .filter(|s| s.label == Label::Loudspeaker)
        .map(|s| s.score)
        .collect();
    if humans.is_empty() || attacks.is_empty() {
        return Err(EvalError::Invalid(format!(
            "both classes required: {} human / {} loudspeaker samples",
            humans.len(),
            attacks.len()
        )));
    }
    for s in samples {
        if !s.score.is_finite() || !(0.0..=1.0).contains(&s.score) {
            return Err(EvalError::Invalid(format!("score {} out of [0,1]", s.score)));
        }
    }
    Ok((humans, attacks))
}

fn rates_at(humans: &[f64], attacks: &[f64], threshold: f64) -> ConfusionRates {
    let far = attacks.iter().filter(|&&s| s > threshold).count() as f64 / attacks.len() as f64;
    let frr = humans.iter().filter(|&&s| s <= threshold).count() as f64 / humans.len() as f64;
    ConfusionRates {
        bac: ((1.0 - far) + (1.0 - frr)) / 2.0,
        far,
        frr,
    }
}

/// FAR = accepted attacks / attacks, FRR = rejected humans / humans,
/// BAC = mean of the two correct rates. Acceptance means score > threshold.
pub fn confusion_rates(
    samples: &[ScoredSample],
    threshold: f64,
) -> Result<ConfusionRates, EvalError> {
    let (humans, attacks) = split_classes(samples)?;
    Ok(rates_at(&humans, &attacks, threshold))
}

/// Threshold sweep for the EER estimate: one point below every score plus
/// each distinct score, so FAR spans [1, 0] and FRR spans [0, 1].
fn sweep_thresholds(humans: &[f64], attacks: &[f64]) -> Vec<f64> {
    let mut scores: Vec<f64> = humans.iter().chain(attacks).copied().collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut thresholds = Vec::with_capacity(scores.len() + 1);
    thresholds.push(scores[0] - 1.0);
    thresholds.extend(scores);
    thresholds
}

/// Equal error rate: sweep thresholds at the distinct scores and linearly
/// interpolate the FAR and FRR polylines to their crossing.
pub fn eer(samples: &[ScoredSample]) -> Result<(f64, f64), EvalError> {
    let (humans, attacks) = split_classes(samples)?;
    let thresholds = sweep_thresholds(&humans, &attacks);
    let mut prev: Option<(f64, f64, f64)> = None; // (threshold, far, frr)
    for &t in &thresholds {
        let r = rates_at(&humans, &attacks, t);
        let diff = r.far - r.frr;
        if diff == 0.0 {
            return Ok((r.far, t));
        }
        if let Some((pt, pfar, pfrr)) = prev {
            let pdiff = pfar - pfrr;
            if pdiff > 0.0 && diff < 0.0 {
                // Crossing between prev and t: interpolate both curves.
                let alpha = pdiff / (pdiff - diff);
                let eer = pfar + alpha * (r.far - pfar);
                let threshold = pt + alpha * (t - pt);
                return Ok((eer, threshold));
            }
        }
        prev = Some((t, r.far, r.frr));
    }
    Err(EvalError::Invalid("no FAR/FRR crossing found".into()))
}

/// FAR and FRR read off the interpolated sweep polylines at an arbitrary
/// threshold; pairs with the interpolated EER estimator.
pub fn interpolated_rates(samples: &[ScoredSample], threshold: f64) -> Result<(f64, f64), EvalError> {
    let (humans, attacks) = split_classes(samples)?;
    let thresholds = sweep_thresholds(&humans, &attacks);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &thresholds {
        let r = rates_at(&humans, &attacks, t);
        if t >= threshold {
            return Ok(match prev {
                Some((pt, pfar, pfrr)) if t > pt => {
                    let alpha = ((threshold - pt) / (t - pt)).clamp(0.0, 1.0);
                    (pfar + alpha * (r.far - pfar), pfrr + alpha * (r.frr - pfrr))
                }
                _ => (r.far, r.frr),
            });
        }
        prev = Some((t, r.far, r.frr));
    }
    let last = prev.expect("nonempty sweep");
    Ok((last.1, last.2))
}

/// ROC at every distinct score plus AUC via the rank (tie-aware) formulation:
/// the probability a random human score exceeds a random attack score, ties
/// counted one half.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<(Vec<RocPoint>, f64), EvalError> {
    let (humans, attacks) = split_classes(samples)?;
    let thresholds = sweep_thresholds(&humans, &attacks);
    let roc = thresholds
        .iter()
        .map(|&t| {
            let r = rates_at(&humans, &attacks, t);
            RocPoint {
                threshold: t,
                tar: 1.0 - r.frr,
                far: r.far,
            }
        })
        .collect();

    // Midrank formulation: AUC = (R_h - n_h (n_h + 1) / 2) / (n_h n_a).
    let mut all: Vec<(f64, bool)> = humans
        .iter()
        .map(|&s| (s, true))
        .chain(attacks.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_humans = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1..=j
        for item in &all[i..j] {
            if item.1 {
                rank_sum_humans += midrank;
            }
        }
        i = j;
    }
    let (nh, na) = (humans.len() as f64, attacks.len() as f64);
    let auc = (rank_sum_humans - nh * (nh + 1.0) / 2.0) / (nh * na);
    Ok((roc, auc))
}

/// A command is accepted as human iff every word score clears the threshold.
pub fn command_verdict(word_scores: &[f64], threshold: f64) -> Result<bool, EvalError> {
    if word_scores.is_empty() {
        return Err(EvalError::Invalid("command with no word scores".into()));
    }
    Ok(word_scores.iter().all(|&s| s > threshold))
}

/// Groups word scores by command id and applies the all-words rule.
pub fn command_verdicts(
    samples: &[ScoredSample],
    threshold: f64,
) -> Result<Vec<CommandVerdict>, EvalError> {
    let mut grouped: BTreeMap<String, (Label, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let entry = grouped
            .entry(s.command_id.clone())
            .or_insert((s.label, Vec::new()));
        if entry.0 != s.label {
            return Err(EvalError::Invalid(format!(
                "command {} mixes labels",
                s.command_id
            )));
        }
        entry.1.push(s.score);
    }
    grouped
        .into_iter()
        .map(|(command_id, (label, word_scores))| {
            let accepted = command_verdict(&word_scores, threshold)?;
            Ok(CommandVerdict {
                command_id,
                label,
                word_scores,
                accepted,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    User,
    Device,
    Content,
}

/// Per-group confusion rates and EER plus their macro average; groups
/// missing a class are flagged degenerate instead of reported with rates.
pub fn group_breakdown(samples: &[ScoredSample], key: GroupKey, threshold: f64) -> GroupTable {
    let mut grouped: BTreeMap<String, Vec<&ScoredSample>> = BTreeMap::new();
    for s in samples {
        let k = match key {
            GroupKey::User => &s.user_id,
            GroupKey::Device => &s.device_id,
            GroupKey::Content => &s.content_id,
        };
        grouped.entry(k.clone()).or_default().push(s);
    }
    let rows: Vec<GroupRow> = grouped
        .into_iter()
        .map(|(group, members)| {
            let owned: Vec<ScoredSample> = members.iter().map(|&s| s.clone()).collect();
            match (confusion_rates(&owned, threshold), eer(&owned)) {
                (Ok(rates), Ok((eer_value, _))) => GroupRow {
                    group,
                    rates: Some(rates),
                    eer: Some(eer_value),
                    degenerate: false,
                    samples: owned.len(),
                },
                _ => GroupRow {
                    group,
                    rates: None,
                    eer: None,
                    degenerate: true,
                    samples: owned.len(),
                },
            }
        })
        .collect();
    let valid: Vec<&GroupRow> = rows.iter().filter(|r| !r.degenerate).collect();
    let macro_average = (!valid.is_empty()).then(|| MacroAverage {
        bac: valid.iter().map(|r| r.rates.unwrap().bac).sum::<f64>() / valid.len() as f64,
        eer: valid.iter().map(|r| r.eer.unwrap()).sum::<f64>() / valid.len() as f64,
        groups: valid.len(),
    });
    GroupTable { rows, macro_average }
}

/// Full per-word + command-level report at the operating threshold.
pub fn evaluate(samples: &[ScoredSample], threshold: f64) -> Result<EvalReport, EvalError> {
    let at_threshold = confusion_rates(samples, threshold)?;
    let (eer_value, eer_threshold) = eer(samples)?;
    let (far_i, frr_i) = interpolated_rates(samples, eer_threshold)?;
    let bac_at_eer = ((1.0 - far_i) + (1.0 - frr_i)) / 2.0;
    let (roc, auc) = roc_auc(samples)?;
    let verdicts = command_verdicts(samples, threshold)?;

    let spoof_cmds: Vec<&CommandVerdict> =
        verdicts.iter().filter(|v| v.label == Label::Loudspeaker).collect();
    let human_cmds: Vec<&CommandVerdict> =
        verdicts.iter().filter(|v| v.label == Label::Human).collect();
    let command_far = (!spoof_cmds.is_empty())
        .then(|| spoof_cmds.iter().filter(|v| v.accepted).count() as f64 / spoof_cmds.len() as f64);
    let command_frr = (!human_cmds.is_empty())
        .then(|| human_cmds.iter().filter(|v| !v.accepted).count() as f64 / human_cmds.len() as f64);

    Ok(EvalReport {
        threshold,
        at_threshold,
        eer: eer_value,
        eer_threshold,
        bac_at_eer,
        auc,
        roc,
        per_user: group_breakdown(samples, GroupKey::User, threshold),
        per_device: group_breakdown(samples, GroupKey::Device, threshold),
        per_content: group_breakdown(samples, GroupKey::Content, threshold),
        command_verdicts: verdicts,
        command_far,
        command_frr,
        word_count: samples.len(),
    })
}

// ---------------------------------------------------------------------------
// 2-D PCA export
// ---------------------------------------------------------------------------

/// Mean-centered projection onto the top-2 principal directions via power
/// iteration with deflation. Rank-0 input (all vectors identical) maps every
/// point to the origin with the degenerate flag set.
pub fn pca_project(features: &[Vec<f64>], seed: u64) -> Result<(Vec<[f64; 2]>, bool), EvalError> {
    if features.len() < 3 {
        return Err(EvalError::Invalid(format!(
            "PCA needs at least 3 vectors, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(EvalError::Invalid("feature dimensions differ".into()));
    }
    let n = features.len();
    let mean: Vec<f64> = (0..d)
        .map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();

    // Covariance (d x d); d is small (128) so dense is fine.
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            if row[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
        for j in i..d {
            cov[i][j] /= n as f64;
            if j > i {
                cov[j][i] = cov[i][j];
            }
        }
    }

    let total_var: f64 = (0..d).map(|i| cov[i][i]).sum();
    if total_var < 1e-24 {
        return Ok((vec![[0.0, 0.0]; n], true));
    }

    let mut rng_state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let mut next = move || {
        rng_state ^= rng_state << 13;
        rng_state ^= rng_state >> 7;
        rng_state ^= rng_state << 17;
        (rng_state as f64 / u64::MAX as f64) - 0.5
    };

    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut work = cov;
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| next()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let mut w = vec![0.0; d];
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += work[i][j] * v[j];
                }
                w[i] = acc;
            }
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if wn < 1e-30 {
                lambda = 0.0;
                break;
            }
            for x in w.iter_mut() {
                *x /= wn;
            }
            // Convergence up to sign: norm of the aligned difference.
            let dot: f64 = w.iter().zip(&v).map(|(&a, &b)| a * b).sum();
            let sign = if dot >= 0.0 { 1.0 } else { -1.0 };
            let delta = w
                .iter()
                .zip(&v)
                .map(|(&a, &b)| (a - sign * b) * (a - sign * b))
                .sum::<f64>()
                .sqrt();
            v = w;
            lambda = wn;
            if delta < 1e-9 {
                break;
            }
        }
        if lambda <= 1e-12 * total_var {
            // No remaining variance: the data is rank 1; second coordinate 0.
            components.push(vec![0.0; d]);
            continue;
        }
        // Deflate.
        for i in 0..d {
            for j in 0..d {
                work[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
    }

    let points = centered
        .iter()
        .map(|row| {
            let x: f64 = row.iter().zip(&components[0]).map(|(&a, &b)| a * b).sum();
            let y: f64 = row.iter().zip(&components[1]).map(|(&a, &b)| a * b).sum();
            [x, y]
        })
        .collect();
    Ok((points, false))
}
