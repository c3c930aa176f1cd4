//! CSV layouts written and read by the commands. All files use `.` decimals,
//! `,` separators and `\n` line endings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::cohort::{DayRecord, Feature, FeatureStats, IllnessEpisode, ParticipantSeries, Splits};
use crate::evaluation::{Backbone, ScoredSet, SweepCell, SweepResult};
use crate::training::TrainReport;

pub const DATASET_HEADER: &str = "participant_id,day,rhr,tib,cal,rhr_missing,tib_missing,cal_missing,ili_positive";
pub const EPISODES_HEADER: &str = "participant_id,onset_day,duration,confirmation_day";
pub const SPLITS_HEADER: &str = "participant_id,split,adaptation_rank";
pub const STATS_HEADER: &str = "feature,mean,sd";
pub const REPORT_HEADER: &str = "epoch,loss,lr,grad_norm";
pub const STEPS_HEADER: &str = "step,lr,grad_norm,clipped_norm";
pub const SCORES_HEADER: &str = "participant_id,window_end_day,label,score";
pub const SWEEP_HEADER: &str = "objective,n_adaptation,auc,seed,paper_reference_auc";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{file} line {line}: {reason}")]
pub struct ParseError {
    pub file: String,
    pub line: usize,
    pub reason: String,
}

struct Rows<'a> {
    file: &'a str,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Rows<'a> {
    fn new(file: &'a str, text: &'a str, header: &str) -> Result<Self, ParseError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == header => Ok(Self { file, lines }),
            Some((_, h)) => Err(ParseError {
                file: file.into(),
                line: 1,
                reason: format!("expected header {header:?}, found {h:?}"),
            }),
            None => Err(ParseError {
                file: file.into(),
                line: 1,
                reason: "empty file".into(),
            }),
        }
    }

    fn error(&self, line: usize, reason: impl Into<String>) -> ParseError {
        ParseError {
            file: self.file.into(),
            line,
            reason: reason.into(),
        }
    }

    /// Next row split into exactly `n` fields, with its 1-based line number.
    fn next_row(&mut self, n: usize) -> Option<Result<(usize, Vec<&'a str>), ParseError>> {
        let (i, line) = self.lines.next()?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n {
            return Some(Err(self.error(i + 1, format!("expected {n} fields, found {}", fields.len()))));
        }
        Some(Ok((i + 1, fields)))
    }

    fn field<T: std::str::FromStr>(&self, line: usize, name: &str, value: &str) -> Result<T, ParseError> {
        value.parse().map_err(|_| self.error(line, format!("bad {name} {value:?}")))
    }

    fn flag(&self, line: usize, name: &str, value: &str) -> Result<bool, ParseError> {
        match value {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(self.error(line, format!("{name} must be 0 or 1, found {value:?}"))),
        }
    }
}

pub fn dataset_csv(series: &[ParticipantSeries]) -> String {
    let mut out = String::with_capacity(series.len() * series.first().map_or(0, |s| s.days.len()) * 48);
    out.push_str(DATASET_HEADER);
    out.push('\n');
    for s in series {
        for (day, d) in s.days.iter().enumerate() {
            let [r, t, c] = d.values;
            let [mr, mt, mc] = d.missing.map(|m| m as u8);
            let _ = writeln!(out, "{},{day},{r},{t},{c},{mr},{mt},{mc},{}", s.participant_id, d.ili_positive as u8);
        }
    }
    out
}

pub fn episodes_csv(series: &[ParticipantSeries]) -> String {
    let mut out = format!("{EPISODES_HEADER}\n");
    for s in series {
        for e in &s.episodes {
            let _ = writeln!(out, "{},{},{},{}", s.participant_id, e.onset_day, e.duration, e.confirmation_day);
        }
    }
    out
}

/// Participants in first-seen order with consecutive days from 0. Episodes
/// are attached when an episodes file is given.
pub fn parse_dataset(text: &str, episodes: Option<&str>) -> Result<Vec<ParticipantSeries>, ParseError> {
    let mut rows = Rows::new("dataset.csv", text, DATASET_HEADER)?;
    let mut out: Vec<ParticipantSeries> = Vec::new();
    while let Some(row) = rows.next_row(9) {
        let (line, f) = row?;
        let id: u32 = rows.field(line, "participant_id", f[0])?;
        let day: usize = rows.field(line, "day", f[1])?;
        let mut values = [0.0f64; 3];
        for i in 0..3 {
            values[i] = rows.field(line, Feature::ALL[i].as_str(), f[2 + i])?;
            if !values[i].is_finite() {
                return Err(rows.error(line, "non-finite value"));
            }
        }
        let missing = [
            rows.flag(line, "rhr_missing", f[5])?,
            rows.flag(line, "tib_missing", f[6])?,
            rows.flag(line, "cal_missing", f[7])?,
        ];
        let record = DayRecord {
            values,
            missing,
            ili_positive: rows.flag(line, "ili_positive", f[8])?,
        };
        match out.last_mut() {
            Some(s) if s.participant_id == id => {
                if day != s.days.len() {
                    return Err(rows.error(line, format!("participant {id} day {day} out of order")));
                }
                s.days.push(record);
            }
            _ => {
                if out.iter().any(|s| s.participant_id == id) {
                    return Err(rows.error(line, format!("participant {id} rows are not contiguous")));
                }
                if day != 0 {
                    return Err(rows.error(line, format!("participant {id} starts at day {day}")));
                }
                out.push(ParticipantSeries {
                    participant_id: id,
                    days: vec![record],
                    episodes: Vec::new(),
                });
            }
        }
    }
    if let Some(text) = episodes {
        let mut rows = Rows::new("episodes.csv", text, EPISODES_HEADER)?;
        while let Some(row) = rows.next_row(4) {
            let (line, f) = row?;
            let id: u32 = rows.field(line, "participant_id", f[0])?;
            let episode = IllnessEpisode {
                onset_day: rows.field(line, "onset_day", f[1])?,
                duration: rows.field(line, "duration", f[2])?,
                confirmation_day: rows.field(line, "confirmation_day", f[3])?,
            };
            let s = out
                .iter_mut()
                .find(|s| s.participant_id == id)
                .ok_or_else(|| rows.error(line, format!("unknown participant {id}")))?;
            s.episodes.push(episode);
        }
    }
    Ok(out)
}

pub fn splits_csv(splits: &Splits) -> String {
    let mut rows: Vec<(u32, &str, String)> = Vec::new();
    rows.extend(splits.ssl_train.iter().map(|&id| (id, "ssl_train", String::new())));
    rows.extend(
        splits
            .adaptation_pool
            .iter()
            .enumerate()
            .map(|(rank, &id)| (id, "adaptation", rank.to_string())),
    );
    rows.extend(splits.test.iter().map(|&id| (id, "test", String::new())));
    rows.sort_by_key(|r| r.0);
    let mut out = format!("{SPLITS_HEADER}\n");
    for (id, split, rank) in rows {
        let _ = writeln!(out, "{id},{split},{rank}");
    }
    out
}

pub fn parse_splits(text: &str, adaptation_sizes: &[usize]) -> Result<Splits, ParseError> {
    let mut rows = Rows::new("splits.csv", text, SPLITS_HEADER)?;
    let mut ssl_train = Vec::new();
    let mut test = Vec::new();
    let mut ranked = BTreeMap::new();
    while let Some(row) = rows.next_row(3) {
        let (line, f) = row?;
        let id: u32 = rows.field(line, "participant_id", f[0])?;
        match f[1] {
            "ssl_train" => ssl_train.push(id),
            "test" => test.push(id),
            "adaptation" => {
                let rank: usize = rows.field(line, "adaptation_rank", f[2])?;
                if ranked.insert(rank, id).is_some() {
                    return Err(rows.error(line, format!("duplicate adaptation rank {rank}")));
                }
            }
            other => return Err(rows.error(line, format!("unknown split {other:?}"))),
        }
    }
    let adaptation_pool: Vec<u32> = ranked.into_values().collect();
    if let Some(&n) = adaptation_sizes.iter().find(|&&n| n > adaptation_pool.len()) {
        return Err(ParseError {
            file: "splits.csv".into(),
            line: 0,
            reason: format!("adaptation size {n} exceeds the pool of {}", adaptation_pool.len()),
        });
    }
    Ok(Splits {
        ssl_train,
        adaptation_pool,
        adaptation_sizes: adaptation_sizes.to_vec(),
        test,
    })
}

pub fn stats_csv(stats: &FeatureStats) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for f in Feature::ALL {
        let _ = writeln!(out, "{},{},{}", f.as_str(), stats.mean[f.index()], stats.sd[f.index()]);
    }
    out
}

/// One row per epoch: mean loss, learning rate at the epoch's first step and
/// mean pre-clip gradient norm.
pub fn report_csv(report: &TrainReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for (e, loss) in report.epoch_loss.iter().enumerate() {
        let _ = writeln!(out, "{},{loss},{},{}", e + 1, report.epoch_lr(e), report.epoch_grad_norm(e));
    }
    out
}

pub fn steps_csv(report: &TrainReport) -> String {
    let mut out = format!("{STEPS_HEADER}\n");
    for i in 0..report.lr.len() {
        let _ = writeln!(out, "{i},{},{},{}", report.lr[i], report.grad_norm[i], report.clipped_norm[i]);
    }
    out
}

pub fn scores_csv(set: &ScoredSet) -> String {
    let mut out = format!("{SCORES_HEADER}\n");
    for i in 0..set.scores.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            set.participant_ids[i], set.window_end_days[i], set.labels[i], set.scores[i]
        );
    }
    out
}

pub fn parse_scores(text: &str) -> Result<ScoredSet, ParseError> {
    let mut rows = Rows::new("scores.csv", text, SCORES_HEADER)?;
    let mut set = ScoredSet {
        scores: Vec::new(),
        labels: Vec::new(),
        participant_ids: Vec::new(),
        window_end_days: Vec::new(),
    };
    while let Some(row) = rows.next_row(4) {
        let (line, f) = row?;
        set.participant_ids.push(rows.field(line, "participant_id", f[0])?);
        set.window_end_days.push(rows.field(line, "window_end_day", f[1])?);
        set.labels.push(rows.flag(line, "label", f[2])? as u8);
        set.scores.push(rows.field(line, "score", f[3])?);
    }
    Ok(set)
}

/// One sweep CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub backbone: Backbone,
    pub n_adaptation: usize,
    /// `None` for a failed cell.
    pub auc: Option<f64>,
    pub seed: u64,
    pub reference_auc: Option<f64>,
}

impl From<&SweepCell> for SweepRow {
    fn from(c: &SweepCell) -> Self {
        Self {
            backbone: c.backbone,
            n_adaptation: c.n_adaptation,
            auc: c.auc.as_ref().ok().copied(),
            seed: c.seed,
            reference_auc: c.reference_auc,
        }
    }
}

fn optional(x: Option<f64>, missing: &str) -> String {
    x.map_or_else(|| missing.to_string(), |v| v.to_string())
}

/// Pretrained cells in grid order, then any random-backbone cells. Failed
/// cells carry `NA` as their AUC.
pub fn sweep_csv(result: &SweepResult) -> String {
    let rows: Vec<SweepRow> = result.cells.iter().chain(&result.baseline).map(SweepRow::from).collect();
    sweep_rows_csv(&rows)
}

pub fn sweep_rows_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.backbone.as_str(),
            r.n_adaptation,
            optional(r.auc, "NA"),
            r.seed,
            optional(r.reference_auc, "")
        );
    }
    out
}

pub fn parse_sweep(text: &str) -> Result<Vec<SweepRow>, ParseError> {
    let mut rows = Rows::new("sweep.csv", text, SWEEP_HEADER)?;
    let mut out = Vec::new();
    while let Some(row) = rows.next_row(5) {
        let (line, f) = row?;
        let backbone = Backbone::parse(f[0]).ok_or_else(|| rows.error(line, format!("unknown objective {:?}", f[0])))?;
        out.push(SweepRow {
            backbone,
            n_adaptation: rows.field(line, "n_adaptation", f[1])?,
            auc: if f[2] == "NA" { None } else { Some(rows.field(line, "auc", f[2])?) },
            seed: rows.field(line, "seed", f[3])?,
            reference_auc: if f[4].is_empty() {
                None
            } else {
                Some(rows.field(line, "paper_reference_auc", f[4])?)
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::cohort::{generate_cohort, split_cohort, CohortParams, SplitConfig};

    fn cohort() -> Vec<ParticipantSeries> {
        generate_cohort(&CohortParams {
            n_participants: 60,
            horizon_days: 20,
            prevalence: 0.5,
            ..CohortParams::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let c = cohort();
        let text = dataset_csv(&c);
        assert!(text.starts_with("participant_id,day,rhr,tib,cal,rhr_missing,tib_missing,cal_missing,ili_positive\n"));
        assert_eq!(text.lines().count(), 1 + 60 * 20);
        assert!(!text.contains('\r'));
        assert_eq!(parse_dataset(&text, Some(&episodes_csv(&c))).unwrap(), c);
    }

    #[test]
    fn dataset_rejects_bad_rows() {
        let c = cohort();
        let text = dataset_csv(&c);
        assert!(parse_dataset(&text.replacen("participant_id", "pid", 1), None).is_err());
        let broken = text.replacen("\n0,1,", "\n0,2,", 1);
        assert_eq!(parse_dataset(&broken, None).unwrap_err().line, 3);
        let flag = text.replacen(",0\n", ",2\n", 1);
        assert!(parse_dataset(&flag, None).is_err());
    }

    #[test]
    fn splits_round_trip() {
        let c = generate_cohort(&CohortParams {
            n_participants: 80,
            horizon_days: 12,
            ..CohortParams::default()
        })
        .unwrap();
        let cfg = SplitConfig {
            adaptation_sizes: vec![10, 20],
            test_size: 16,
            min_ssl: 20,
        };
        let splits = split_cohort(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut back = parse_splits(&splits_csv(&splits), &[10, 20]).unwrap();
        back.test.sort_unstable();
        let mut expected = splits.clone();
        expected.test.sort_unstable();
        assert_eq!(back, expected);
        assert!(parse_splits(&splits_csv(&splits), &[10, 40]).is_err());
    }

    #[test]
    fn sweep_round_trip_with_failures() {
        let rows = vec![
            SweepRow {
                backbone: Backbone::Pretrained(Feature::Rhr),
                n_adaptation: 25,
                auc: Some(0.625),
                seed: 17,
                reference_auc: Some(0.55),
            },
            SweepRow {
                backbone: Backbone::Random,
                n_adaptation: 25,
                auc: None,
                seed: 3,
                reference_auc: None,
            },
        ];
        let text = sweep_rows_csv(&rows);
        assert_eq!(
            text,
            "objective,n_adaptation,auc,seed,paper_reference_auc\nrhr,25,0.625,17,0.55\nrandom_backbone,25,NA,3,\n"
        );
        assert_eq!(parse_sweep(&text).unwrap(), rows);
    }

    #[test]
    fn scores_round_trip() {
        let set = ScoredSet {
            scores: vec![0.25, 0.9],
            labels: vec![0, 1],
            participant_ids: vec![4, 5],
            window_end_days: vec![9, 30],
        };
        assert_eq!(parse_scores(&scores_csv(&set)).unwrap(), set);
    }
}
