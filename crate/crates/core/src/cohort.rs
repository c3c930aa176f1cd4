//! Synthetic wearable cohort: generation, standardization, window
//! construction and participant-level splits.
//!
//! Each participant has a resting heart rate (`rhr`, bpm), time in bed (`tib`,
//! minutes) and activity calories (`cal`, kcal) per day. Values are a personal
//! baseline plus a weekly cycle and daily noise. An illness episode bends all
//! three over a triangular 7-day profile centred on the onset day and raises
//! the chance of missing data. A lab confirmation follows onset by 1 to 3 days
//! and is the only day marked `ili_positive`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Days per input window.
pub const WINDOW_DAYS: usize = 10;
/// Channels per window day: three features then three missingness flags.
pub const CHANNELS: usize = 6;
/// Adaptation-set sizes, each a prefix of the next.
pub const ADAPTATION_SIZES: [usize; 5] = [25, 50, 100, 200, 400];
pub const TEST_SIZE: usize = 64;
/// Profile weights for days `onset - 3 ..= onset + 3`.
pub const ILLNESS_PROFILE: [f64; 7] = [0.25, 0.5, 0.75, 1.0, 0.75, 0.5, 0.25];
/// Earliest onset day, so every confirmation has a full window before it.
pub const EARLIEST_ONSET: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    Rhr,
    Tib,
    Cal,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::Rhr, Feature::Tib, Feature::Cal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Feature::Rhr => "rhr",
            Feature::Tib => "tib",
            Feature::Cal => "cal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CohortError {
    #[error("invalid cohort parameter: {0}")]
    InvalidParams(String),
    #[error("horizon of {0} days is shorter than the 12-day minimum")]
    HorizonTooShort(usize),
    #[error("feature {0} has zero standard deviation")]
    ZeroStd(&'static str),
    #[error("need {needed} participants for the split, cohort has {available}")]
    InsufficientParticipants { needed: usize, available: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DayRecord {
    /// `rhr`, `tib`, `cal` in [`Feature`] order. Imputed where missing.
    pub values: [f64; 3],
    pub missing: [bool; 3],
    pub ili_positive: bool,
}

impl DayRecord {
    pub fn value(&self, f: Feature) -> f64 {
        self.values[f.index()]
    }

    pub fn is_missing(&self, f: Feature) -> bool {
        self.missing[f.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IllnessEpisode {
    /// Day of peak illness effect.
    pub onset_day: usize,
    pub duration: usize,
    pub confirmation_day: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantSeries {
    pub participant_id: u32,
    /// Consecutive days starting at day 0.
    pub days: Vec<DayRecord>,
    pub episodes: Vec<IllnessEpisode>,
}

impl ParticipantSeries {
    pub fn is_case(&self) -> bool {
        self.days.iter().any(|d| d.ili_positive)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortParams {
    pub n_participants: usize,
    pub horizon_days: usize,
    /// Cohort mean of personal baselines, per feature.
    pub baseline_mean: [f64; 3],
    /// Spread of personal baselines across participants.
    pub baseline_sd: [f64; 3],
    /// Day-to-day noise around the personal baseline.
    pub daily_sd: [f64; 3],
    /// Amplitude of the weekly sinusoid.
    pub weekly_amplitude: [f64; 3],
    /// Peak illness shift in resting heart rate, bpm.
    pub rhr_delta: f64,
    /// Peak illness shift in time in bed, minutes.
    pub tib_delta: f64,
    /// Activity calories are multiplied by this at the illness peak.
    pub cal_multiplier: f64,
    /// Probability that a participant has one illness episode.
    pub prevalence: f64,
    pub base_missingness: f64,
    /// Added to the missingness rate on days inside the illness profile.
    pub illness_missingness_boost: f64,
    pub seed: u64,
}

impl Default for CohortParams {
    fn default() -> Self {
        Self {
            n_participants: 500,
            horizon_days: 90,
            baseline_mean: [62.0, 450.0, 450.0],
            baseline_sd: [7.0, 45.0, 150.0],
            daily_sd: [2.0, 35.0, 70.0],
            weekly_amplitude: [1.0, 20.0, 60.0],
            rhr_delta: 5.0,
            tib_delta: 60.0,
            cal_multiplier: 0.7,
            prevalence: 0.15,
            base_missingness: 0.05,
            illness_missingness_boost: 0.25,
            seed: 0,
        }
    }
}

impl CohortParams {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.horizon_days < WINDOW_DAYS + 2 {
            return Err(CohortError::HorizonTooShort(self.horizon_days));
        }
        let bad = |msg: String| Err(CohortError::InvalidParams(msg));
        for (name, p) in [
            ("prevalence", self.prevalence),
            ("base_missingness", self.base_missingness),
            ("illness_missingness_boost", self.illness_missingness_boost),
            ("base_missingness + illness_missingness_boost", self.base_missingness + self.illness_missingness_boost),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.baseline_sd.iter().chain(&self.daily_sd).any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("standard deviations must be finite and non-negative".into());
        }
        if !(self.cal_multiplier >= 0.0) {
            return bad(format!("cal_multiplier = {} must be non-negative", self.cal_multiplier));
        }
        Ok(())
    }
}

fn clamp_feature(f: Feature, v: f64) -> f64 {
    match f {
        Feature::Rhr => v.clamp(30.0, 220.0),
        Feature::Tib => v.clamp(0.0, 1440.0),
        Feature::Cal => v.max(0.0),
    }
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("validated standard deviation")
}

fn generate_participant(params: &CohortParams, index: usize) -> ParticipantSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    let h = params.horizon_days;

    let baseline: Vec<f64> = Feature::ALL
        .iter()
        .map(|&f| clamp_feature(f, normal(params.baseline_mean[f.index()], params.baseline_sd[f.index()]).sample(&mut rng)))
        .collect();
    let phase = rng.random_range(0..7) as f64;

    let mut episodes = Vec::new();
    if rng.random::<f64>() < params.prevalence {
        let latest = h - 4;
        let onset = rng.random_range(EARLIEST_ONSET.min(latest)..=latest);
        let lag = rng.random_range(1..=3);
        episodes.push(IllnessEpisode {
            onset_day: onset,
            duration: ILLNESS_PROFILE.len(),
            confirmation_day: onset + lag,
        });
    }

    let mut illness = vec![0.0; h];
    let mut confirmed = vec![false; h];
    for ep in &episodes {
        for (k, w) in ILLNESS_PROFILE.iter().enumerate() {
            if let Some(d) = (ep.onset_day + k).checked_sub(3).filter(|&d| d < h) {
                illness[d] = f64::max(illness[d], *w);
            }
        }
        if ep.confirmation_day < h {
            confirmed[ep.confirmation_day] = true;
        }
    }

    let noise: Vec<Normal<f64>> = (0..3).map(|i| normal(0.0, params.daily_sd[i])).collect();
    let mut days: Vec<DayRecord> = (0..h)
        .map(|d| {
            let cycle = (2.0 * std::f64::consts::PI * (d as f64 + phase) / 7.0).sin();
            let w = illness[d];
            let mut values = [0.0; 3];
            for f in Feature::ALL {
                let i = f.index();
                let raw = baseline[i] + params.weekly_amplitude[i] * cycle + noise[i].sample(&mut rng);
                let ill = match f {
                    Feature::Rhr => raw + w * params.rhr_delta,
                    Feature::Tib => raw + w * params.tib_delta,
                    Feature::Cal => raw * (1.0 - w * (1.0 - params.cal_multiplier)),
                };
                values[i] = clamp_feature(f, ill);
            }
            let rate = params.base_missingness + if w > 0.0 { params.illness_missingness_boost } else { 0.0 };
            let missing = [0, 1, 2].map(|_| rng.random::<f64>() < rate);
            DayRecord {
                values,
                missing,
                ili_positive: confirmed[d],
            }
        })
        .collect();

    for f in Feature::ALL {
        let i = f.index();
        let observed: Vec<f64> = days.iter().filter(|d| !d.missing[i]).map(|d| d.values[i]).collect();
        let fill = if observed.is_empty() {
            params.baseline_mean[i]
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for d in days.iter_mut().filter(|d| d.missing[i]) {
            d.values[i] = fill;
        }
    }

    ParticipantSeries {
        participant_id: index as u32,
        days,
        episodes,
    }
}

/// Draws the cohort. Participant `i` uses its own generator stream, so the
/// result does not depend on generation order.
pub fn generate_cohort(params: &CohortParams) -> Result<Vec<ParticipantSeries>, CohortError> {
    params.validate()?;
    Ok((0..params.n_participants).map(|i| generate_participant(params, i)).collect())
}

/// Per-feature mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: [f64; 3],
    pub sd: [f64; 3],
}

impl FeatureStats {
    /// Statistics over every day, imputed or not, of `series`.
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a ParticipantSeries>) -> Result<Self, CohortError> {
        let mut n = 0usize;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for s in series {
            for d in &s.days {
                n += 1;
                for i in 0..3 {
                    sum[i] += d.values[i];
                    sq[i] += d.values[i] * d.values[i];
                }
            }
        }
        let mut mean = [0.0; 3];
        let mut sd = [0.0; 3];
        for f in Feature::ALL {
            let i = f.index();
            if n == 0 {
                return Err(CohortError::ZeroStd(f.as_str()));
            }
            mean[i] = sum[i] / n as f64;
            let var = (sq[i] / n as f64 - mean[i] * mean[i]).max(0.0);
            sd[i] = var.sqrt();
            if !(sd[i] > 1e-12 * mean[i].abs().max(1.0)) {
                return Err(CohortError::ZeroStd(f.as_str()));
            }
        }
        Ok(Self { mean, sd })
    }
}

/// Rescales every feature to z-units with `stats`. Flags and labels are kept.
pub fn standardize(series: &[ParticipantSeries], stats: &FeatureStats) -> Vec<ParticipantSeries> {
    series
        .iter()
        .map(|s| ParticipantSeries {
            days: s
                .days
                .iter()
                .map(|d| DayRecord {
                    values: [0, 1, 2].map(|i| (d.values[i] - stats.mean[i]) / stats.sd[i]),
                    ..d.clone()
                })
                .collect(),
            ..s.clone()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    /// Next-day standardized value of the objective feature.
    Value(f32),
    Label(u8),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `WINDOW_DAYS x CHANNELS`, row-major.
    pub inputs: Vec<f32>,
    pub target: Target,
    pub participant_id: u32,
    /// Last day inside the window.
    pub window_end_day: usize,
}

fn window_inputs(days: &[DayRecord]) -> Vec<f32> {
    days.iter()
        .flat_map(|d| {
            let v = d.values.map(|x| x as f32);
            let m = d.missing.map(|x| x as u8 as f32);
            v.into_iter().chain(m)
        })
        .collect()
}

/// Every 10-day window whose next day has an observed `target` value.
pub fn make_ssl_windows(series: &[ParticipantSeries], target: Feature) -> Vec<WindowSample> {
    let mut out = Vec::new();
    for s in series {
        for start in 0..s.days.len().saturating_sub(WINDOW_DAYS) {
            let next = &s.days[start + WINDOW_DAYS];
            if next.is_missing(target) {
                continue;
            }
            out.push(WindowSample {
                inputs: window_inputs(&s.days[start..start + WINDOW_DAYS]),
                target: Target::Value(next.value(target) as f32),
                participant_id: s.participant_id,
                window_end_day: start + WINDOW_DAYS - 1,
            });
        }
    }
    out
}

/// Every 10-day window labelled 1 when the next day is a confirmation day.
///
/// With `negatives_per_positive = Some(r)` negatives are subsampled, across
/// the whole set, to at most `r` per positive. A set without positives keeps
/// all negatives.
pub fn make_ili_windows<R: Rng + ?Sized>(
    series: &[ParticipantSeries],
    negatives_per_positive: Option<usize>,
    rng: &mut R,
) -> Vec<WindowSample> {
    let mut all = Vec::new();
    for s in series {
        for start in 0..s.days.len().saturating_sub(WINDOW_DAYS) {
            all.push(WindowSample {
                inputs: window_inputs(&s.days[start..start + WINDOW_DAYS]),
                target: Target::Label(s.days[start + WINDOW_DAYS].ili_positive as u8),
                participant_id: s.participant_id,
                window_end_day: start + WINDOW_DAYS - 1,
            });
        }
    }
    let positives = all.iter().filter(|w| w.target == Target::Label(1)).count();
    let negatives = all.len() - positives;
    let keep = match negatives_per_positive {
        Some(r) if positives > 0 => (positives * r).min(negatives),
        _ => return all,
    };
    let mut chosen = vec![false; negatives];
    for i in rand::seq::index::sample(rng, negatives, keep) {
        chosen[i] = true;
    }
    let mut neg = 0;
    all.retain(|w| {
        if w.target == Target::Label(1) {
            return true;
        }
        neg += 1;
        chosen[neg - 1]
    });
    all
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub adaptation_sizes: Vec<usize>,
    pub test_size: usize,
    pub min_ssl: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            adaptation_sizes: ADAPTATION_SIZES.to_vec(),
            test_size: TEST_SIZE,
            min_ssl: 100,
        }
    }
}

/// Participant ids of each population.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub ssl_train: Vec<u32>,
    /// Ordered pool; the adaptation set of size `n` is its first `n` ids.
    pub adaptation_pool: Vec<u32>,
    pub adaptation_sizes: Vec<usize>,
    pub test: Vec<u32>,
}

impl Splits {
    pub fn adaptation(&self, n: usize) -> Option<&[u32]> {
        self.adaptation_sizes.contains(&n).then(|| &self.adaptation_pool[..n])
    }
}

/// Takes `n` ids from `cases`/`controls` so that every prefix holds a share of
/// cases as close as possible to `fraction`.
fn draw_stratified(cases: &mut Vec<u32>, controls: &mut Vec<u32>, n: usize, fraction: f64) -> Vec<u32> {
    let mut out = Vec::with_capacity(n);
    let mut taken = 0usize;
    for i in 1..=n {
        let want = (i as f64 * fraction).round() as usize;
        let take_case = !cases.is_empty() && (taken < want || controls.is_empty());
        if take_case {
            out.push(cases.pop().unwrap());
            taken += 1;
        } else {
            out.push(controls.pop().unwrap());
        }
    }
    out
}

/// Participant-level split into test, a nested adaptation pool and the SSL
/// training population, stratified by case status.
pub fn split_cohort<R: Rng + ?Sized>(
    series: &[ParticipantSeries],
    config: &SplitConfig,
    rng: &mut R,
) -> Result<Splits, CohortError> {
    let mut sizes = config.adaptation_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let largest = sizes.last().copied().unwrap_or(0);
    let needed = largest + config.test_size + config.min_ssl;
    if series.len() < needed {
        return Err(CohortError::InsufficientParticipants {
            needed,
            available: series.len(),
        });
    }
    let (mut cases, mut controls): (Vec<u32>, Vec<u32>) = {
        let (c, n): (Vec<_>, Vec<_>) = series.iter().partition(|s| s.is_case());
        (c.iter().map(|s| s.participant_id).collect(), n.iter().map(|s| s.participant_id).collect())
    };
    cases.shuffle(rng);
    controls.shuffle(rng);
    let fraction = cases.len() as f64 / series.len() as f64;
    let test = draw_stratified(&mut cases, &mut controls, config.test_size, fraction);
    let adaptation_pool = draw_stratified(&mut cases, &mut controls, largest, fraction);
    let mut ssl_train: Vec<u32> = cases.into_iter().chain(controls).collect();
    ssl_train.sort_unstable();
    Ok(Splits {
        ssl_train,
        adaptation_pool,
        adaptation_sizes: sizes,
        test,
    })
}

/// Series whose ids are in `ids`, in the order of `ids`.
pub fn select<'a>(series: &'a [ParticipantSeries], ids: &[u32]) -> Vec<&'a ParticipantSeries> {
    let by_id: std::collections::HashMap<u32, &ParticipantSeries> = series.iter().map(|s| (s.participant_id, s)).collect();
    ids.iter().filter_map(|id| by_id.get(id).copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, h: usize) -> CohortParams {
        CohortParams {
            n_participants: n,
            horizon_days: h,
            seed: 7,
            ..CohortParams::default()
        }
    }

    fn no_missing(mut p: CohortParams) -> CohortParams {
        p.base_missingness = 0.0;
        p.illness_missingness_boost = 0.0;
        p
    }

    #[test]
    fn zero_prevalence_has_no_positive_days() {
        let p = CohortParams {
            prevalence: 0.0,
            ..small(200, 60)
        };
        let cohort = generate_cohort(&p).unwrap();
        assert!(cohort.iter().all(|s| s.days.iter().all(|d| !d.ili_positive) && s.episodes.is_empty()));
    }

    #[test]
    fn generation_is_deterministic_and_order_free() {
        let p = small(50, 30);
        let a = generate_cohort(&p).unwrap();
        assert_eq!(a, generate_cohort(&p).unwrap());
        assert_eq!(generate_participant(&p, 31), a[31]);
        let other = generate_cohort(&CohortParams { seed: 8, ..p }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn illness_peak_raises_heart_rate() {
        let cohort = generate_cohort(&CohortParams::default()).unwrap();
        let baseline = CohortParams::default().baseline_mean[0];
        let peaks: Vec<f64> = cohort
            .iter()
            .flat_map(|s| s.episodes.iter().map(move |e| &s.days[e.onset_day]))
            .filter(|d| !d.is_missing(Feature::Rhr))
            .map(|d| d.value(Feature::Rhr))
            .collect();
        assert!(peaks.len() > 30);
        let mean = peaks.iter().sum::<f64>() / peaks.len() as f64;
        assert!(mean - baseline >= 3.0, "peak mean {mean}");
    }

    #[test]
    fn series_invariants() {
        let cohort = generate_cohort(&small(300, 40)).unwrap();
        for s in &cohort {
            assert_eq!(s.days.len(), 40);
            for e in &s.episodes {
                assert!((e.onset_day + 1..=e.onset_day + 3).contains(&e.confirmation_day));
                assert!(s.days[e.confirmation_day].ili_positive);
            }
            let positives = s.days.iter().filter(|d| d.ili_positive).count();
            assert_eq!(positives, s.episodes.len());
            for d in &s.days {
                assert!(d.values.iter().all(|v| v.is_finite()));
                if !d.is_missing(Feature::Rhr) {
                    assert!((30.0..=220.0).contains(&d.value(Feature::Rhr)));
                }
            }
        }
    }

    #[test]
    fn missing_values_hold_the_observed_mean() {
        let cohort = generate_cohort(&small(20, 60)).unwrap();
        for s in &cohort {
            for i in 0..3 {
                let observed: Vec<f64> = s.days.iter().filter(|d| !d.missing[i]).map(|d| d.values[i]).collect();
                let mean = observed.iter().sum::<f64>() / observed.len() as f64;
                for d in s.days.iter().filter(|d| d.missing[i]) {
                    assert!((d.values[i] - mean).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert_eq!(generate_cohort(&small(5, 11)), Err(CohortError::HorizonTooShort(11)));
        let p = CohortParams {
            prevalence: 1.5,
            ..small(5, 30)
        };
        assert!(matches!(generate_cohort(&p), Err(CohortError::InvalidParams(_))));
    }

    #[test]
    fn standardization_uses_training_stats() {
        let cohort = generate_cohort(&small(120, 40)).unwrap();
        let (train, test) = cohort.split_at(100);
        let stats = FeatureStats::fit(train).unwrap();
        let z = standardize(train, &stats);
        let n = (100 * 40) as f64;
        for i in 0..3 {
            let mean = z.iter().flat_map(|s| &s.days).map(|d| d.values[i]).sum::<f64>() / n;
            let var = z.iter().flat_map(|s| &s.days).map(|d| (d.values[i] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-3);
        }
        for (a, b) in z.iter().zip(train) {
            for (x, y) in a.days.iter().zip(&b.days) {
                assert_eq!(x.missing, y.missing);
                assert_eq!(x.ili_positive, y.ili_positive);
            }
        }
        let zt = standardize(test, &stats);
        let test_mean = zt.iter().flat_map(|s| &s.days).map(|d| d.values[0]).sum::<f64>() / (20.0 * 40.0);
        let refit = FeatureStats::fit(&zt).unwrap();
        assert_ne!(test_mean, 0.0);
        assert!((refit.mean[0] - test_mean).abs() < 1e-9);
        assert_ne!(standardize(&zt, &refit), zt);
    }

    #[test]
    fn restandardizing_with_same_stats_reproduces_output() {
        let cohort = generate_cohort(&small(30, 20)).unwrap();
        let stats = FeatureStats::fit(&cohort).unwrap();
        assert_eq!(standardize(&cohort, &stats), standardize(&cohort, &stats));
    }

    #[test]
    fn zero_spread_is_rejected() {
        let mut cohort = generate_cohort(&small(3, 20)).unwrap();
        for s in &mut cohort {
            for d in &mut s.days {
                d.values[1] = 480.0;
            }
        }
        assert_eq!(FeatureStats::fit(&cohort), Err(CohortError::ZeroStd("tib")));
    }

    fn truncated(mut cohort: Vec<ParticipantSeries>, days: usize) -> Vec<ParticipantSeries> {
        for s in &mut cohort {
            s.days.truncate(days);
        }
        cohort
    }

    #[test]
    fn ssl_window_counts() {
        let cohort = truncated(generate_cohort(&no_missing(small(4, 12))).unwrap(), 11);
        assert_eq!(make_ssl_windows(&cohort, Feature::Rhr).len(), 4);
        let cohort = generate_cohort(&no_missing(small(4, 20))).unwrap();
        let w = make_ssl_windows(&cohort, Feature::Tib);
        assert_eq!(w.len(), 40);
        assert!(w.iter().all(|s| s.inputs.len() == WINDOW_DAYS * CHANNELS));
    }

    #[test]
    fn ssl_windows_skip_missing_targets() {
        let mut cohort = truncated(generate_cohort(&no_missing(small(1, 12))).unwrap(), 11);
        cohort[0].days[10].missing[2] = true;
        assert!(make_ssl_windows(&cohort, Feature::Cal).is_empty());
        assert_eq!(make_ssl_windows(&cohort, Feature::Rhr).len(), 1);

        let cohort = generate_cohort(&small(100, 40)).unwrap();
        for f in Feature::ALL {
            for w in make_ssl_windows(&cohort, f) {
                let day = &cohort[w.participant_id as usize].days[w.window_end_day + 1];
                assert!(!day.is_missing(f));
                assert_eq!(w.target, Target::Value(day.value(f) as f32));
            }
        }
    }

    #[test]
    fn ili_labels_sit_on_the_day_after_the_window() {
        let cohort = generate_cohort(&small(200, 60)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let windows = make_ili_windows(&cohort, None, &mut rng);
        for w in &windows {
            let s = &cohort[w.participant_id as usize];
            let expected = s.episodes.iter().any(|e| e.confirmation_day == w.window_end_day + 1);
            assert_eq!(w.target, Target::Label(expected as u8));
            if s.episodes.is_empty() {
                assert_eq!(w.target, Target::Label(0));
            }
        }
        let positives = windows.iter().filter(|w| w.target == Target::Label(1)).count();
        let episodes: usize = cohort.iter().map(|s| s.episodes.len()).sum();
        assert_eq!(positives, episodes);
    }

    #[test]
    fn ili_negatives_are_subsampled() {
        let cohort = generate_cohort(&CohortParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let windows = make_ili_windows(&cohort, Some(5), &mut rng);
        let positives = windows.iter().filter(|w| w.target == Target::Label(1)).count();
        let rate = positives as f64 / windows.len() as f64;
        let nominal = 1.0 / 6.0;
        assert!(rate >= 0.5 * nominal && rate <= 2.0 * nominal, "rate {rate}");

        let controls: Vec<ParticipantSeries> = cohort.iter().filter(|s| !s.is_case()).take(3).cloned().collect();
        let windows = make_ili_windows(&controls, Some(5), &mut rng);
        assert_eq!(windows.len(), 3 * (90 - WINDOW_DAYS));
    }

    #[test]
    fn splits_are_nested_and_disjoint() {
        let cohort = generate_cohort(&small(964, 20)).unwrap();
        let splits = split_cohort(&cohort, &SplitConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(splits.test.len(), 64);
        assert_eq!(splits.ssl_train.len(), 500);
        let mut previous: &[u32] = &[];
        for n in ADAPTATION_SIZES {
            let set = splits.adaptation(n).unwrap();
            assert_eq!(set.len(), n);
            assert!(set.starts_with(previous));
            previous = set;
            let cases = select(&cohort, set).iter().filter(|s| s.is_case()).count();
            assert!(cases >= 1, "adaptation({n}) has no cases");
        }
        assert!(splits.adaptation(30).is_none());
        let mut all: Vec<u32> = splits
            .ssl_train
            .iter()
            .chain(&splits.adaptation_pool)
            .chain(&splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..964).collect::<Vec<u32>>());
    }

    #[test]
    fn split_needs_enough_participants() {
        let cohort = generate_cohort(&small(500, 12)).unwrap();
        let err = split_cohort(&cohort, &SplitConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(
            err,
            CohortError::InsufficientParticipants {
                needed: 564,
                available: 500
            }
        );
    }
}
