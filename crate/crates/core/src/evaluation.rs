//! ROC-AUC scoring and the adaptation-size sweep over next-day objectives.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::{
    make_ili_windows, make_ssl_windows, select, standardize, CohortError, Feature, FeatureStats, ParticipantSeries,
    Splits, WindowSample,
};
use crate::derive_seed;
use crate::ndgrad::Tensor;
use crate::training::{finetune, pretrain, window_labels, TrainConfig, TrainError, TrainReport};
use crate::transformer::{expect_head, positive_probabilities, predict, HeadKind, ModelConfig, ModelError, ModelParams};

/// Published AUCs by objective (`rhr`, `tib`, `cal`) and adaptation size.
pub const REFERENCE_AUC: [(Feature, [(usize, f64); 5]); 3] = [
    (Feature::Rhr, [(25, 0.55), (50, 0.67), (100, 0.74), (200, 0.77), (400, 0.78)]),
    (Feature::Tib, [(25, 0.49), (50, 0.60), (100, 0.74), (200, 0.79), (400, 0.79)]),
    (Feature::Cal, [(25, 0.49), (50, 0.55), (100, 0.55), (200, 0.62), (400, 0.65)]),
];

pub fn reference_auc(objective: Feature, n: usize) -> Option<f64> {
    REFERENCE_AUC
        .iter()
        .find(|(f, _)| *f == objective)
        .and_then(|(_, row)| row.iter().find(|(m, _)| *m == n).map(|(_, auc)| *auc))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("AUC is undefined: {positives} positives and {negatives} negatives")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("participant {0} appears in more than one split")]
    Leakage(u32),
    #[error("adaptation size {0} is not part of the split")]
    UnknownSize(usize),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mann-Whitney AUC with ties counted one half, from one sort.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::UndefinedAuc {
            positives: positives as usize,
            negatives: negatives as usize,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the number of (positive, negative) pairs the positive wins,
    // so ties add exactly 1.
    let mut doubled: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| labels[k] != 0).count() as u64;
        let neg = group.len() as u64 - pos;
        doubled += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    /// Positive-class probability per window.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub participant_ids: Vec<u32>,
    pub window_end_days: Vec<usize>,
}

impl ScoredSet {
    pub fn auc(&self) -> Result<f64, EvalError> {
        auc(&self.scores, &self.labels)
    }
}

const SCORE_CHUNK: usize = 512;

/// Eval-mode positive-class probabilities for every window.
pub fn score_test_set(model: &ModelParams, windows: &[WindowSample]) -> Result<ScoredSet, EvalError> {
    expect_head(model, HeadKind::Classification)?;
    let labels = window_labels(windows)?;
    let cfg = model.config();
    let size = cfg.seq_len * cfg.n_channels;
    let mut scores = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(SCORE_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * size);
        for (index, w) in chunk.iter().enumerate() {
            if w.inputs.len() != size {
                return Err(TrainError::BadWindow { index }.into());
            }
            data.extend_from_slice(&w.inputs);
        }
        let input = Tensor::new(&[chunk.len(), cfg.seq_len, cfg.n_channels], data).map_err(ModelError::from)?;
        scores.extend(positive_probabilities(&predict(model, &input)?));
    }
    Ok(ScoredSet {
        scores,
        labels,
        participant_ids: windows.iter().map(|w| w.participant_id).collect(),
        window_end_days: windows.iter().map(|w| w.window_end_day).collect(),
    })
}

/// A cohort standardized with statistics of its SSL population, with its
/// split.
#[derive(Clone, Debug)]
pub struct StudyData {
    pub splits: Splits,
    pub stats: FeatureStats,
    standardized: Vec<ParticipantSeries>,
}

/// Fails on the first participant listed in two populations.
pub fn check_disjoint(splits: &Splits) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for &id in splits.ssl_train.iter().chain(&splits.adaptation_pool).chain(&splits.test) {
        if !seen.insert(id) {
            return Err(EvalError::Leakage(id));
        }
    }
    Ok(())
}

impl StudyData {
    pub fn new(cohort: &[ParticipantSeries], splits: Splits) -> Result<Self, EvalError> {
        check_disjoint(&splits)?;
        let stats = FeatureStats::fit(select(cohort, &splits.ssl_train))?;
        Ok(Self {
            standardized: standardize(cohort, &stats),
            stats,
            splits,
        })
    }

    fn series(&self, ids: &[u32]) -> Vec<ParticipantSeries> {
        select(&self.standardized, ids).into_iter().cloned().collect()
    }

    pub fn ssl_windows(&self, objective: Feature) -> Vec<WindowSample> {
        make_ssl_windows(&self.series(&self.splits.ssl_train), objective)
    }

    /// Windows of the first `n` adaptation participants with negatives
    /// subsampled to `negatives_per_positive`.
    pub fn adaptation_windows(
        &self,
        n: usize,
        negatives_per_positive: usize,
        seed: u64,
    ) -> Result<Vec<WindowSample>, EvalError> {
        let ids = self.splits.adaptation(n).ok_or(EvalError::UnknownSize(n))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(make_ili_windows(&self.series(ids), Some(negatives_per_positive), &mut rng))
    }

    /// Every window of the test participants.
    pub fn test_windows(&self) -> Vec<WindowSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        make_ili_windows(&self.series(&self.splits.test), None, &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub model: ModelConfig,
    /// Template for every pretraining run; seed and objective are set per run.
    pub pretrain: TrainConfig,
    /// Template for every fine-tuning run; the seed is set per cell.
    pub finetune: TrainConfig,
    pub objectives: Vec<Feature>,
    pub sizes: Vec<usize>,
    pub negatives_per_positive: usize,
    /// Also fine-tune on a never-pretrained backbone.
    pub baseline: bool,
    pub seed: u64,
}

/// Run-name labels mixed into per-run seeds.
mod stream {
    pub const INIT: u64 = 10;
    pub const PRETRAIN: u64 = 11;
    pub const FINETUNE: u64 = 12;
    pub const ADAPTATION: u64 = 13;
    pub const BASELINE: u64 = 14;
}

/// Which backbone a sweep cell used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    Pretrained(Feature),
    Random,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Pretrained(f) => f.as_str(),
            Backbone::Random => "random_backbone",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random_backbone" => Some(Backbone::Random),
            _ => Feature::parse(s).map(Backbone::Pretrained),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub backbone: Backbone,
    pub n_adaptation: usize,
    /// Seed of the fine-tuning run.
    pub seed: u64,
    /// Test AUC, or why the cell failed.
    pub auc: Result<f64, String>,
    pub reference_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub objective: Feature,
    pub seed: u64,
    pub report: TrainReport,
    /// MSE of predicting every target with the target mean.
    pub mean_predictor_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// Pretrained cells, objective-major then by size.
    pub cells: Vec<SweepCell>,
    /// Random-backbone cells, by size; empty unless requested.
    pub baseline: Vec<SweepCell>,
    pub pretraining: Vec<PretrainSummary>,
}

impl SweepResult {
    pub fn cell(&self, backbone: Backbone, n: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .chain(&self.baseline)
            .find(|c| c.backbone == backbone && c.n_adaptation == n)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().chain(&self.baseline).filter(|c| c.auc.is_err())
    }
}

/// Variance of next-day targets around their mean.
pub fn mean_predictor_mse(windows: &[WindowSample]) -> f64 {
    let values: Vec<f64> = windows
        .iter()
        .filter_map(|w| match w.target {
            crate::cohort::Target::Value(v) => Some(v as f64),
            _ => None,
        })
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

/// Progress messages from a running sweep.
pub trait SweepObserver {
    fn pretrained(&mut self, _summary: &PretrainSummary) {}
    fn cell_done(&mut self, _cell: &SweepCell) {}
}

impl SweepObserver for () {}

/// Seeds of the runs belonging to one sweep.
pub fn init_seed(seed: u64, backbone: Backbone) -> u64 {
    match backbone {
        Backbone::Pretrained(f) => derive_seed(seed, &[stream::INIT, f.index() as u64]),
        Backbone::Random => derive_seed(seed, &[stream::BASELINE]),
    }
}

pub fn pretrain_seed(seed: u64, objective: Feature) -> u64 {
    derive_seed(seed, &[stream::PRETRAIN, objective.index() as u64])
}

pub fn finetune_seed(seed: u64, backbone: Backbone, n: usize) -> u64 {
    let tag = match backbone {
        Backbone::Pretrained(f) => f.index() as u64,
        Backbone::Random => 99,
    };
    derive_seed(seed, &[stream::FINETUNE, tag, n as u64])
}

pub fn adaptation_seed(seed: u64, n: usize) -> u64 {
    derive_seed(seed, &[stream::ADAPTATION, n as u64])
}

/// Pretrains a freshly initialized regression model on the SSL population,
/// with the seeds the sweep uses for `objective`.
pub fn pretrain_backbone(
    data: &StudyData,
    config: &SweepConfig,
    objective: Feature,
) -> Result<(ModelParams, PretrainSummary), EvalError> {
    let model = ModelConfig {
        head_kind: HeadKind::Regression,
        ..config.model.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed(config.seed, Backbone::Pretrained(objective)));
    let init = ModelParams::init(model, &mut rng)?;
    let windows = data.ssl_windows(objective);
    let seed = pretrain_seed(config.seed, objective);
    let cfg = TrainConfig {
        seed,
        objective: crate::training::Objective::NextDay(objective),
        ..config.pretrain.clone()
    };
    let (trained, report) = pretrain(&init, &windows, &cfg)?;
    let summary = PretrainSummary {
        objective,
        seed,
        report,
        mean_predictor_mse: mean_predictor_mse(&windows),
    };
    Ok((trained, summary))
}

/// The never-pretrained backbone of the baseline column.
pub fn random_backbone(config: &SweepConfig) -> Result<ModelParams, EvalError> {
    let model = ModelConfig {
        head_kind: HeadKind::Regression,
        ..config.model.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed(config.seed, Backbone::Random));
    Ok(ModelParams::init(model, &mut rng)?)
}

/// Fine-tunes a new classification head on adaptation set `n`, with the
/// seeds the sweep uses for this cell.
pub fn finetune_backbone(
    data: &StudyData,
    model: &ModelParams,
    config: &SweepConfig,
    backbone: Backbone,
    n: usize,
) -> Result<(ModelParams, TrainReport), EvalError> {
    let windows = data.adaptation_windows(n, config.negatives_per_positive, adaptation_seed(config.seed, n))?;
    let cfg = TrainConfig {
        seed: finetune_seed(config.seed, backbone, n),
        ..config.finetune.clone()
    };
    Ok(finetune(model, &windows, &cfg)?)
}

/// Fine-tunes `backbone` on adaptation set `n` and returns the test AUC.
pub fn adapt_and_score(
    data: &StudyData,
    model: &ModelParams,
    test: &[WindowSample],
    config: &SweepConfig,
    backbone: Backbone,
    n: usize,
) -> SweepCell {
    let outcome = finetune_backbone(data, model, config, backbone, n)
        .and_then(|(tuned, _)| score_test_set(&tuned, test)?.auc());
    SweepCell {
        backbone,
        n_adaptation: n,
        seed: finetune_seed(config.seed, backbone, n),
        auc: outcome.map_err(|e| e.to_string()),
        reference_auc: match backbone {
            Backbone::Pretrained(f) => reference_auc(f, n),
            Backbone::Random => None,
        },
    }
}

/// Pretrains once per objective, then fine-tunes and scores every adaptation
/// size against the same pretrained backbone.
pub fn run_sweep(
    data: &StudyData,
    config: &SweepConfig,
    observer: &mut dyn SweepObserver,
) -> Result<SweepResult, EvalError> {
    check_disjoint(&data.splits)?;
    for &n in &config.sizes {
        data.splits.adaptation(n).ok_or(EvalError::UnknownSize(n))?;
    }
    let test = data.test_windows();
    let mut result = SweepResult {
        cells: Vec::new(),
        baseline: Vec::new(),
        pretraining: Vec::new(),
    };
    for &objective in &config.objectives {
        let backbone = Backbone::Pretrained(objective);
        let pretrained = pretrain_backbone(data, config, objective).map(|(model, summary)| {
            observer.pretrained(&summary);
            result.pretraining.push(summary);
            model
        });
        for &n in &config.sizes {
            let cell = match &pretrained {
                Ok(model) => adapt_and_score(data, model, &test, config, backbone, n),
                Err(e) => SweepCell {
                    backbone,
                    n_adaptation: n,
                    seed: finetune_seed(config.seed, backbone, n),
                    auc: Err(format!("pretraining failed: {e}")),
                    reference_auc: reference_auc(objective, n),
                },
            };
            observer.cell_done(&cell);
            result.cells.push(cell);
        }
    }
    if config.baseline {
        let random = random_backbone(config)?;
        for &n in &config.sizes {
            let cell = adapt_and_score(data, &random, &test, config, Backbone::Random, n);
            observer.cell_done(&cell);
            result.baseline.push(cell);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::cohort::{generate_cohort, split_cohort, CohortParams, SplitConfig, Target};

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
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

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(EvalError::UndefinedAuc {
                positives: 2,
                negatives: 0
            })
        );
        assert_eq!(auc(&[0.1], &[1, 0]), Err(EvalError::LengthMismatch(1, 2)));
    }

    #[test]
    fn auc_matches_pairwise_on_random_tied_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut checked = 0;
        while checked < 1000 {
            let n = rng.random_range(2..=50);
            let levels = rng.random_range(1..=10);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            if let Ok(fast) = auc(&scores, &labels) {
                assert_eq!(fast, pairwise(&scores, &labels));
                checked += 1;
            }
        }
    }

    proptest! {
        #[test]
        fn auc_is_rank_based(
            raw in proptest::collection::vec((0u8..20, 0u8..2), 2..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 20.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let base = auc(&scores, &labels).unwrap();
            let stretched: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&stretched, &labels).unwrap(), base);
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - base)).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_values() {
        assert_eq!(reference_auc(Feature::Rhr, 25), Some(0.55));
        assert_eq!(reference_auc(Feature::Tib, 200), Some(0.79));
        assert_eq!(reference_auc(Feature::Cal, 400), Some(0.65));
        assert_eq!(reference_auc(Feature::Rhr, 50), Some(0.67));
        assert_eq!(reference_auc(Feature::Tib, 100), Some(0.74));
        assert_eq!(reference_auc(Feature::Cal, 200), Some(0.62));
        assert_eq!(reference_auc(Feature::Cal, 30), None);
        let all: Vec<f64> = REFERENCE_AUC.iter().flat_map(|(_, r)| r.iter().map(|(_, a)| *a)).collect();
        assert!(all.iter().all(|a| (0.49..=0.79).contains(a)));
    }

    fn toy_windows(n: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| WindowSample {
                inputs: (0..60).map(|_| rng.random_range(-1.0..1.0)).collect(),
                target: Target::Label((i % 2) as u8),
                participant_id: i as u32,
                window_end_day: 9,
            })
            .collect()
    }

    fn toy_classifier(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            n_blocks: 1,
            d_model: 16,
            head_kind: HeadKind::Classification,
            ..ModelConfig::default()
        };
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn scoring_is_deterministic_and_bounded() {
        let model = toy_classifier(1);
        let windows = toy_windows(40, 2);
        let a = score_test_set(&model, &windows).unwrap();
        assert_eq!(a, score_test_set(&model, &windows).unwrap());
        assert!(a.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert_eq!(a.labels.len(), 40);
        let regression = ModelParams::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            score_test_set(&regression, &windows),
            Err(EvalError::Model(ModelError::HeadMismatch { .. }))
        ));
    }

    #[test]
    fn untrained_heads_score_near_chance() {
        let windows = toy_windows(200, 3);
        let aucs: Vec<f64> = (0..20).map(|s| score_test_set(&toy_classifier(s), &windows).unwrap().auc().unwrap()).collect();
        let mean = aucs.iter().sum::<f64>() / 20.0;
        assert!((0.35..=0.65).contains(&mean), "{aucs:?}");
    }

    #[test]
    fn study_data_rejects_overlap() {
        let cohort = generate_cohort(&CohortParams {
            n_participants: 40,
            horizon_days: 20,
            ..CohortParams::default()
        })
        .unwrap();
        let split = SplitConfig {
            adaptation_sizes: vec![5, 10],
            test_size: 8,
            min_ssl: 10,
        };
        let mut splits = split_cohort(&cohort, &split, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(StudyData::new(&cohort, splits.clone()).is_ok());
        splits.test[0] = splits.adaptation_pool[3];
        assert_eq!(StudyData::new(&cohort, splits.clone()).unwrap_err(), EvalError::Leakage(splits.test[0]));
    }

    fn tiny_sweep(seed: u64, baseline: bool) -> SweepResult {
        let cohort = generate_cohort(&CohortParams {
            n_participants: 150,
            horizon_days: 30,
            prevalence: 0.5,
            seed,
            ..CohortParams::default()
        })
        .unwrap();
        let split = SplitConfig {
            adaptation_sizes: vec![20, 40],
            test_size: 30,
            min_ssl: 50,
        };
        let splits = split_cohort(&cohort, &split, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let data = StudyData::new(&cohort, splits).unwrap();
        let config = SweepConfig {
            model: ModelConfig {
                n_blocks: 1,
                d_model: 8,
                ..ModelConfig::default()
            },
            pretrain: TrainConfig {
                epochs: 1,
                ..TrainConfig::pretrain(Feature::Rhr, 0)
            },
            finetune: TrainConfig {
                epochs: 2,
                ..TrainConfig::finetune(0)
            },
            objectives: Feature::ALL.to_vec(),
            sizes: vec![20, 40],
            negatives_per_positive: 5,
            baseline,
            seed,
        };
        run_sweep(&data, &config, &mut ()).unwrap()
    }

    #[test]
    fn sweep_fills_the_grid_deterministically() {
        let a = tiny_sweep(5, true);
        assert_eq!(a.cells.len(), 6);
        assert_eq!(a.baseline.len(), 2);
        assert_eq!(a.pretraining.len(), 3);
        assert_eq!(a.failures().count(), 0, "{:?}", a.failures().collect::<Vec<_>>());
        assert_eq!(a, tiny_sweep(5, true));
        assert_eq!(a.cell(Backbone::Pretrained(Feature::Tib), 40).unwrap().reference_auc, None);
        let seeds: HashSet<u64> = a.cells.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 6);
    }

    #[test]
    fn backbone_names_round_trip() {
        for b in [
            Backbone::Random,
            Backbone::Pretrained(Feature::Rhr),
            Backbone::Pretrained(Feature::Cal),
        ] {
            assert_eq!(Backbone::parse(b.as_str()), Some(b));
        }
    }
}
