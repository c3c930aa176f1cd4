//! Browser bindings for three demo operations: browsing a synthetic cohort,
//! pretraining and fine-tuning a small model in the page, and checking the
//! rank-based AUC against the pairwise definition.
//!
//! Every binding wraps a plain function returning `Result<_, String>` so the
//! logic is testable natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sslchrono::cohort::{generate_cohort, split_cohort, CohortParams, Feature, ParticipantSeries, SplitConfig};
use sslchrono::evaluation::{
    auc, finetune_backbone, pretrain_backbone, random_backbone, score_test_set, Backbone, ScoredSet, StudyData,
    SweepConfig,
};
use sslchrono::training::TrainConfig;
use sslchrono::transformer::ModelConfig;
use wasm_bindgen::prelude::*;

fn feature(name: &str) -> Result<Feature, String> {
    Feature::parse(name).ok_or_else(|| format!("unknown feature {name:?}; use rhr, tib or cal"))
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// A generated cohort in raw units.
#[wasm_bindgen]
pub struct CohortView {
    series: Vec<ParticipantSeries>,
}

pub fn build_cohort(
    n_participants: usize,
    horizon_days: usize,
    prevalence: f64,
    rhr_delta: f64,
    seed: u32,
) -> Result<CohortView, String> {
    let params = CohortParams {
        n_participants,
        horizon_days,
        prevalence,
        rhr_delta,
        seed: seed as u64,
        ..CohortParams::default()
    };
    let series = generate_cohort(&params).map_err(|e| e.to_string())?;
    Ok(CohortView { series })
}

impl CohortView {
    fn get(&self, index: usize) -> Result<&ParticipantSeries, String> {
        self.series
            .get(index)
            .ok_or_else(|| format!("participant index {index} out of range"))
    }

    pub fn values(&self, index: usize, name: &str) -> Result<Vec<f64>, String> {
        let f = feature(name)?;
        Ok(self.get(index)?.days.iter().map(|d| d.value(f)).collect())
    }

    pub fn missing_flags(&self, index: usize, name: &str) -> Result<Vec<u8>, String> {
        let f = feature(name)?;
        Ok(self.get(index)?.days.iter().map(|d| d.is_missing(f) as u8).collect())
    }
}

#[wasm_bindgen]
impl CohortView {
    #[wasm_bindgen(constructor)]
    pub fn new(
        n_participants: usize,
        horizon_days: usize,
        prevalence: f64,
        rhr_delta: f64,
        seed: u32,
    ) -> Result<CohortView, JsError> {
        js(build_cohort(n_participants, horizon_days, prevalence, rhr_delta, seed))
    }

    pub fn size(&self) -> usize {
        self.series.len()
    }

    /// Indices of participants with an illness episode.
    pub fn cases(&self) -> Vec<u32> {
        (0..self.series.len() as u32)
            .filter(|&i| self.series[i as usize].is_case())
            .collect()
    }

    pub fn trace(&self, index: usize, feature: &str) -> Result<Vec<f64>, JsError> {
        js(self.values(index, feature))
    }

    /// 1 where the day's value was imputed.
    pub fn missing(&self, index: usize, feature: &str) -> Result<Vec<u8>, JsError> {
        js(self.missing_flags(index, feature))
    }

    /// `onset, duration, confirmation_day` per episode, flattened.
    pub fn episodes(&self, index: usize) -> Result<Vec<u32>, JsError> {
        let s = js(self.get(index))?;
        Ok(s.episodes
            .iter()
            .flat_map(|e| [e.onset_day as u32, e.duration as u32, e.confirmation_day as u32])
            .collect())
    }
}

/// ROC points from the highest threshold down, starting at (0, 0); tied
/// scores move both rates in one step.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&l| l == 1).count().max(1) as f64;
    let negatives = labels.iter().filter(|&&l| l == 0).count().max(1) as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / negatives, tp / positives));
    }
    points
}

/// Outcome of one in-page study: a pretrained and a random backbone, each
/// given a new head on the same adaptation set and scored on the same test
/// participants.
#[wasm_bindgen]
pub struct DemoRun {
    pretrain_loss: Vec<f64>,
    mean_predictor_mse: f64,
    pretrained: ScoredSet,
    random: ScoredSet,
}

pub fn run_study(objective: &str, seed: u32, pretrain_epochs: usize, n_adapt: usize) -> Result<DemoRun, String> {
    let objective = feature(objective)?;
    let cohort = build_cohort(260, 60, 0.5, 5.0, seed)?.series;
    let seed = seed as u64;
    let split = SplitConfig {
        adaptation_sizes: vec![25, 50, 100],
        test_size: 40,
        min_ssl: 60,
    };
    if !split.adaptation_sizes.contains(&n_adapt) {
        return Err(format!("adaptation size must be one of {:?}", split.adaptation_sizes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = split_cohort(&cohort, &split, &mut rng).map_err(|e| e.to_string())?;
    let data = StudyData::new(&cohort, splits).map_err(|e| e.to_string())?;
    let config = SweepConfig {
        model: ModelConfig {
            n_blocks: 2,
            d_model: 16,
            n_heads: 2,
            ..ModelConfig::default()
        },
        pretrain: TrainConfig {
            epochs: pretrain_epochs,
            ..TrainConfig::pretrain(objective, seed)
        },
        finetune: TrainConfig::finetune(seed),
        objectives: vec![objective],
        sizes: split.adaptation_sizes.clone(),
        negatives_per_positive: 5,
        baseline: true,
        seed,
    };
    let test = data.test_windows();
    let (backbone, summary) = pretrain_backbone(&data, &config, objective).map_err(|e| e.to_string())?;
    let score = |model, tag| -> Result<ScoredSet, String> {
        let (tuned, _) = finetune_backbone(&data, model, &config, tag, n_adapt).map_err(|e| e.to_string())?;
        score_test_set(&tuned, &test).map_err(|e| e.to_string())
    };
    let pretrained = score(&backbone, Backbone::Pretrained(objective))?;
    let random = score(&random_backbone(&config).map_err(|e| e.to_string())?, Backbone::Random)?;
    Ok(DemoRun {
        pretrain_loss: summary.report.epoch_loss,
        mean_predictor_mse: summary.mean_predictor_mse,
        pretrained,
        random,
    })
}

fn flatten(points: Vec<(f64, f64)>) -> Vec<f64> {
    points.into_iter().flat_map(|(x, y)| [x, y]).collect()
}

#[wasm_bindgen]
impl DemoRun {
    pub fn pretrain_loss(&self) -> Vec<f64> {
        self.pretrain_loss.clone()
    }

    pub fn mean_predictor_mse(&self) -> f64 {
        self.mean_predictor_mse
    }

    /// Test AUC, NaN when the test set has a single class.
    pub fn auc(&self) -> f64 {
        self.pretrained.auc().unwrap_or(f64::NAN)
    }

    pub fn random_auc(&self) -> f64 {
        self.random.auc().unwrap_or(f64::NAN)
    }

    /// ROC curve as `fpr, tpr` pairs, flattened.
    pub fn roc(&self) -> Vec<f64> {
        flatten(roc_points(&self.pretrained.scores, &self.pretrained.labels))
    }

    pub fn random_roc(&self) -> Vec<f64> {
        flatten(roc_points(&self.random.scores, &self.random.labels))
    }

    pub fn test_windows(&self) -> usize {
        self.pretrained.labels.len()
    }

    pub fn test_positives(&self) -> usize {
        self.pretrained.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Pretrains on next-day `objective` for `pretrain_epochs`, then fine-tunes
/// heads on `n_adapt` participants (25, 50 or 100).
#[wasm_bindgen]
pub fn train_demo(objective: &str, seed: u32, pretrain_epochs: usize, n_adapt: usize) -> Result<DemoRun, JsError> {
    js(run_study(objective, seed, pretrain_epochs, n_adapt))
}

fn parse_numbers<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad {what} entry {t:?}")))
        .collect()
}

/// Share of positive-negative pairs ranked correctly, ties counted half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// `[rank AUC, pairwise AUC]` for comma- or space-separated inputs.
pub fn auc_pair(scores: &str, labels: &str) -> Result<Vec<f64>, String> {
    let scores: Vec<f64> = parse_numbers("score", scores)?;
    let labels: Vec<u8> = parse_numbers("label", labels)?;
    if labels.iter().any(|&l| l > 1) {
        return Err("labels must be 0 or 1".into());
    }
    let fast = auc(&scores, &labels).map_err(|e| e.to_string())?;
    Ok(vec![fast, pairwise_auc(&scores, &labels)])
}

#[wasm_bindgen]
pub fn compare_auc(scores: &str, labels: &str) -> Result<Vec<f64>, JsError> {
    js(auc_pair(scores, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohort_view_reads_traces() {
        let view = build_cohort(30, 40, 0.5, 5.0, 3).unwrap();
        assert_eq!(view.series.len(), 30);
        assert_eq!(view.values(0, "rhr").unwrap().len(), 40);
        assert_eq!(view.missing_flags(2, "cal").unwrap().len(), 40);
        assert!(view.values(0, "steps").is_err());
        assert!(view.values(30, "rhr").is_err());
        assert!(!view.cases().is_empty());
        assert!(build_cohort(10, 5, 0.5, 5.0, 0).is_err());
    }

    #[test]
    fn roc_area_equals_auc() {
        let scores = [0.9, 0.8, 0.8, 0.4, 0.3, 0.3, 0.1];
        let labels = [1, 0, 1, 1, 0, 1, 0];
        let pts = roc_points(&scores, &labels);
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        assert!((area - auc(&scores, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_pair_agrees() {
        let r = auc_pair("0.2, 0.7 0.7,0.1", "0 1 0 1").unwrap();
        assert_eq!(r, vec![0.375, 0.375]);
        assert!(auc_pair("0.2 x", "0 1").is_err());
        assert!(auc_pair("0.2 0.3", "0 2").is_err());
        assert!(auc_pair("0.2 0.3", "1 1").is_err());
    }

    #[test]
    fn study_runs_end_to_end() {
        let run = run_study("rhr", 1, 2, 50).unwrap();
        assert_eq!(run.pretrain_loss.len(), 2);
        assert!(run.test_positives() > 0);
        assert!(run.auc().is_finite() && run.random_auc().is_finite());
        assert_eq!(run.roc().len() % 2, 0);
        assert!(run_study("rhr", 1, 2, 60).is_err());
    }
}
