//! Temperature scaling, expected calibration error, and confidence
//! thresholds under a per-cache accuracy-drop budget.

use serde::{Deserialize, Serialize};

use crate::cache::{scaled_prediction, CacheModel, Prediction, Threshold};
use crate::error::{Error, Result};
use crate::medial::{MedialDataset, Split};
use crate::tensor::{argmax, Tensor};

pub const TEMPERATURE_RANGE: (f32, f32) = (0.05, 20.0);
pub const ECE_BINS: usize = 15;
const GOLDEN_ITERATIONS: usize = 80;

/// Mean negative log-likelihood of `labels` under `softmax(logits / tau)`.
pub fn nll(logits: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.rows().zip(labels) {
        let scaled: Vec<f64> = row.iter().map(|&v| v as f64 / tau).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - scaled[label];
    }
    total / labels.len() as f64
}

/// Golden-section search over `ln tau`; the result is never worse than the
/// bounds or `tau = 1`.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> f32 {
    let f = |x: f64| nll(logits, labels, x.exp());
    let (mut a, mut b) = (
        (TEMPERATURE_RANGE.0 as f64).ln(),
        (TEMPERATURE_RANGE.1 as f64).ln(),
    );
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERATIONS {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let candidates = [
        (0.5 * (a + b)).exp() as f32,
        1.0,
        TEMPERATURE_RANGE.0,
        TEMPERATURE_RANGE.1,
    ];
    let mut best = candidates[0];
    let mut best_nll = nll(logits, labels, best as f64);
    for &tau in &candidates[1..] {
        let v = nll(logits, labels, tau as f64);
        if v < best_nll {
            best = tau;
            best_nll = v;
        }
    }
    best
}

/// Binned |confidence - accuracy| gap, weighted by bin occupancy. A
/// confidence of exactly 1 falls in the last bin.
pub fn expected_calibration_error(scored: &[(f32, bool)], bins: usize) -> f64 {
    assert!(bins >= 1, "at least one bin");
    if scored.is_empty() {
        return 0.0;
    }
    let mut conf = vec![0.0f64; bins];
    let mut correct = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for &(c, ok) in scored {
        let b = ((c as f64 * bins as f64) as usize).min(bins - 1);
        conf[b] += c as f64;
        correct[b] += ok as usize;
        count[b] += 1;
    }
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (conf[b] - correct[b] as f64).abs())
        .sum::<f64>()
        / scored.len() as f64
}

fn validation_logits(cache: &CacheModel, md: &MedialDataset) -> Result<(Tensor, Vec<usize>)> {
    let idx = md.split_indices(Split::Val)?;
    let logits = cache.logits(&md.activations.select_rows(&idx))?;
    let teacher = md.teacher_classes();
    Ok((logits, idx.iter().map(|&i| teacher[i]).collect()))
}

fn score_predictions(preds: &[Prediction], labels: &[usize]) -> Vec<(f32, bool)> {
    preds
        .iter()
        .zip(labels)
        .map(|(p, &l)| (p.confidence, p.class == l))
        .collect()
}

/// Temperature minimizing NLL of the backbone's predicted classes on the
/// validation split.
pub fn calibrate_temperature(cache: &CacheModel, md: &MedialDataset) -> Result<f32> {
    let (logits, labels) = validation_logits(cache, md)?;
    Ok(fit_temperature(&logits, &labels))
}

/// ECE of `cache` at its current temperature against backbone predictions.
pub fn ece(cache: &CacheModel, md: &MedialDataset, bins: usize) -> Result<f64> {
    let (logits, labels) = validation_logits(cache, md)?;
    let preds: Vec<Prediction> = logits
        .rows()
        .map(|r| scaled_prediction(r, cache.temperature))
        .collect();
    Ok(expected_calibration_error(
        &score_predictions(&preds, &labels),
        bins,
    ))
}

/// Candidate thresholds 0.00, 0.01, ..., 1.00.
pub fn threshold_grid() -> Vec<f32> {
    (0..=100).map(|i| i as f32 / 100.0).collect()
}

pub fn budget(tolerance: f64, ordinal: usize) -> f64 {
    tolerance / 2f64.powi(ordinal as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub theta: f32,
    pub hits: usize,
    pub correct_hits: usize,
    pub hit_rate: f64,
    /// `None` when nothing hits.
    pub cache_accuracy: Option<f64>,
    /// `hit_rate * (1 - cache_accuracy)`, i.e. wrong hits over all samples.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub layer: String,
    pub ordinal: usize,
    pub tolerance: f64,
    pub budget: f64,
    pub samples: usize,
    pub temperature: f32,
    pub ece_before: f64,
    pub ece_after: f64,
    pub threshold: Threshold,
    pub rows: Vec<ThresholdRow>,
}

impl ThresholdReport {
    pub fn row_for(&self, threshold: Threshold) -> Option<&ThresholdRow> {
        match threshold {
            Threshold::Disabled => None,
            Threshold::At(t) => self.rows.iter().find(|r| r.theta == t),
        }
    }

    /// Plain-text rendering, one grid row per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "cache {} ({}) tolerance {:.4} budget {:.6} temperature {:.4} ece {:.4} -> {:.4} threshold {}\n",
            self.ordinal,
            self.layer,
            self.tolerance,
            self.budget,
            self.temperature,
            self.ece_before,
            self.ece_after,
            match self.threshold {
                Threshold::Disabled => "disabled".to_string(),
                Threshold::At(t) => format!("{t:.2}"),
            }
        );
        s.push_str("theta\thit_rate\tcache_accuracy\tbound\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.2}\t{:.4}\t{}\t{:.6}\n",
                r.theta,
                r.hit_rate,
                r.cache_accuracy.map_or("-".to_string(), |a| format!("{a:.4}")),
                r.bound
            ));
        }
        s
    }
}

/// Grid rows for predictions scored against the backbone's classes.
pub fn threshold_rows(preds: &[Prediction], backbone: &[usize]) -> Vec<ThresholdRow> {
    let n = preds.len();
    threshold_grid()
        .into_iter()
        .map(|theta| {
            let (mut hits, mut correct) = (0, 0);
            for (p, &b) in preds.iter().zip(backbone) {
                if p.confidence >= theta {
                    hits += 1;
                    correct += (p.class == b) as usize;
                }
            }
            ThresholdRow {
                theta,
                hits,
                correct_hits: correct,
                hit_rate: hits as f64 / n as f64,
                cache_accuracy: (hits > 0).then(|| correct as f64 / hits as f64),
                bound: (hits - correct) as f64 / n as f64,
            }
        })
        .collect()
}

/// Smallest grid threshold whose bound fits the budget.
pub fn pick_threshold(rows: &[ThresholdRow], budget: f64) -> Threshold {
    rows.iter()
        .find(|r| r.bound <= budget)
        .map_or(Threshold::Disabled, |r| Threshold::At(r.theta))
}

/// Fits the temperature, then assigns the threshold for the cache's
/// ordinal. Updates `cache` in place.
pub fn calibrate(
    cache: &mut CacheModel,
    md: &MedialDataset,
    tolerance: f64,
) -> Result<ThresholdReport> {
    if !(0.0..1.0).contains(&tolerance) {
        return Err(Error::Config(format!(
            "tolerance must lie in [0, 1), got {tolerance}"
        )));
    }
    let (logits, labels) = validation_logits(cache, md)?;
    let predict = |tau: f32| -> Vec<Prediction> {
        logits.rows().map(|r| scaled_prediction(r, tau)).collect()
    };
    let ece_before = expected_calibration_error(&score_predictions(&predict(1.0), &labels), ECE_BINS);
    let temperature = fit_temperature(&logits, &labels);
    let preds = predict(temperature);
    let ece_after = expected_calibration_error(&score_predictions(&preds, &labels), ECE_BINS);
    let budget = budget(tolerance, cache.ordinal);
    let rows = threshold_rows(&preds, &labels);
    let threshold = pick_threshold(&rows, budget);
    cache.temperature = temperature;
    cache.threshold = threshold;
    Ok(ThresholdReport {
        layer: cache.layer.clone(),
        ordinal: cache.ordinal,
        tolerance,
        budget,
        samples: labels.len(),
        temperature,
        ece_before,
        ece_after,
        threshold,
        rows,
    })
}

/// Outcome categories over cache hits, by correctness against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCategories {
    /// Backbone and cache both correct.
    pub both_correct: usize,
    /// Both wrong with the same class.
    pub both_wrong_agree: usize,
    /// Backbone correct, cache wrong.
    pub cache_broke: usize,
    /// Backbone wrong, cache correct.
    pub cache_fixed: usize,
    /// Both wrong with different classes.
    pub both_wrong_disagree: usize,
}

impl HitCategories {
    pub fn hits(&self) -> usize {
        self.both_correct
            + self.both_wrong_agree
            + self.cache_broke
            + self.cache_fixed
            + self.both_wrong_disagree
    }

    pub fn add(&mut self, cache: usize, backbone: usize, label: usize) {
        match (backbone == label, cache == label) {
            (true, true) => self.both_correct += 1,
            (true, false) => self.cache_broke += 1,
            (false, true) => self.cache_fixed += 1,
            (false, false) if cache == backbone => self.both_wrong_agree += 1,
            (false, false) => self.both_wrong_disagree += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEffect {
    pub samples: usize,
    pub categories: HitCategories,
    /// Signed change in ground-truth accuracy caused by the cache's hits.
    pub effect: f64,
}

impl AccuracyEffect {
    pub fn from_categories(categories: HitCategories, samples: usize) -> Self {
        let effect = if samples == 0 {
            0.0
        } else {
            (categories.cache_fixed as f64 - categories.cache_broke as f64) / samples as f64
        };
        Self {
            samples,
            categories,
            effect,
        }
    }
}

/// Ground-truth effect of a cache at `threshold` as if it were the only
/// cache, from its predictions, the backbone's classes, and true labels.
pub fn accuracy_effect(
    preds: &[Prediction],
    backbone: &[usize],
    labels: &[usize],
    threshold: Threshold,
) -> Result<AccuracyEffect> {
    if labels.len() != preds.len() || backbone.len() != preds.len() {
        return Err(Error::LabelMismatch {
            labels: labels.len(),
            samples: preds.len(),
        });
    }
    let mut cat = HitCategories::default();
    for ((p, &b), &l) in preds.iter().zip(backbone).zip(labels) {
        if threshold.admits(p.confidence) {
            cat.add(p.class, b, l);
        }
    }
    Ok(AccuracyEffect::from_categories(cat, preds.len()))
}

/// [`accuracy_effect`] for a cache over tapped activations and the
/// backbone's output distributions.
pub fn actual_accuracy_effect(
    cache: &CacheModel,
    activations: &Tensor,
    backbone_pd: &Tensor,
    labels: &[usize],
    threshold: Threshold,
) -> Result<AccuracyEffect> {
    let preds = cache.predict(activations)?;
    let backbone: Vec<usize> = backbone_pd.rows().map(argmax).collect();
    accuracy_effect(&preds, &backbone, labels, threshold)
}
