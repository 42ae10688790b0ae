//! Four-stage clip filtration over precomputed per-clip scores.
//!
//! Stages run in a fixed order: occlusion, scene change, lip sync,
//! coherence. A clip is attributed to the first stage that rejects it.
//! Durations are kept as integer milliseconds so reported hours are exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::Rng;

pub const STAGE_NAMES: [&str; 4] = ["occlusion", "scene_change", "sync", "coherence"];

const MS_PER_HOUR: u64 = 3_600_000;

/// Scores of one clip, ingested from a scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub duration_s: f64,
    /// Fraction of occluded frames.
    pub occlusion_ratio: f64,
    pub scene_change_score: f64,
    pub sync_confidence: f64,
    pub coherence_score: f64,
    /// Stage (1–4) that rejected the clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected_at: Option<u8>,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Input(format!("clip {}: duration_s must be positive", self.id)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_ratio) {
            return Err(Error::Input(format!("clip {}: occlusion_ratio outside [0, 1]", self.id)));
        }
        if !(self.scene_change_score >= 0.0 && self.scene_change_score.is_finite()) {
            return Err(Error::Input(format!("clip {}: scene_change_score must be ≥ 0", self.id)));
        }
        if !(self.sync_confidence.is_finite() && self.coherence_score.is_finite()) {
            return Err(Error::Input(format!("clip {}: scores must be finite", self.id)));
        }
        Ok(())
    }

    /// Duration rounded to whole milliseconds.
    pub fn duration_ms(&self) -> u64 {
        (self.duration_s * 1000.0).round() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationThresholds {
    pub max_occlusion_ratio: f64,
    pub max_scene_change_score: f64,
    pub min_sync_confidence: f64,
    pub min_coherence_score: f64,
}

impl CurationThresholds {
    /// Thresholds no valid record can fail.
    pub fn pass_all() -> Self {
        Self {
            max_occlusion_ratio: 1.0,
            max_scene_change_score: f64::MAX,
            min_sync_confidence: f64::MIN,
            min_coherence_score: f64::MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.max_occlusion_ratio,
            self.max_scene_change_score,
            self.min_sync_confidence,
            self.min_coherence_score,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(config_err!("curation thresholds must be finite"));
        }
        Ok(())
    }

    /// Whether `r` passes stage `stage` (1–4).
    pub fn keeps(&self, stage: u8, r: &ClipRecord) -> Result<bool> {
        Ok(match stage {
            1 => r.occlusion_ratio <= self.max_occlusion_ratio,
            2 => r.scene_change_score <= self.max_scene_change_score,
            3 => r.sync_confidence >= self.min_sync_confidence,
            4 => r.coherence_score >= self.min_coherence_score,
            s => return Err(config_err!("curation stage {s} outside 1..=4")),
        })
    }
}

/// Result of one stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageOutcome {
    pub survivors: Vec<ClipRecord>,
    /// Rejected records with `rejected_at` set.
    pub rejected: Vec<ClipRecord>,
}

/// Applies stage `stage` to records that no stage has rejected yet.
/// Input order is preserved in both outputs.
pub fn apply_stage(records: Vec<ClipRecord>, stage: u8, thresholds: &CurationThresholds) -> Result<StageOutcome> {
    if !(1..=4).contains(&stage) {
        return Err(config_err!("curation stage {stage} outside 1..=4"));
    }
    let mut out = StageOutcome::default();
    for mut r in records {
        if let Some(s) = r.rejected_at {
            return Err(Error::Input(format!("clip {} was already rejected at stage {s}", r.id)));
        }
        if thresholds.keeps(stage, &r)? {
            out.survivors.push(r);
        } else {
            r.rejected_at = Some(stage);
            out.rejected.push(r);
        }
    }
    Ok(out)
}

/// Remaining clips and duration after one stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clips: Option<usize>,
    pub duration_ms: u64,
    /// `duration_ms` in hours, as rendered in the table.
    pub hours: String,
}

/// Origin plus one row per stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub rows: Vec<StageRow>,
}

/// Exact hours: an integer when whole, otherwise rounded half-up to two
/// decimals.
pub fn format_hours(ms: u64) -> String {
    if ms % MS_PER_HOUR == 0 {
        return (ms / MS_PER_HOUR).to_string();
    }
    let centi = (ms as u128 * 100 + MS_PER_HOUR as u128 / 2) / MS_PER_HOUR as u128;
    format!("{}.{:02}", centi / 100, centi % 100)
}

fn stage_label(i: usize) -> String {
    if i == 0 {
        "Origin".into()
    } else {
        format!("Stage {i}")
    }
}

impl CurationReport {
    fn from_counts(counts: &[(Option<usize>, u64)]) -> Self {
        Self {
            rows: counts
                .iter()
                .enumerate()
                .map(|(i, &(clips, ms))| StageRow {
                    stage: stage_label(i),
                    clips,
                    duration_ms: ms,
                    hours: format_hours(ms),
                })
                .collect(),
        }
    }

    /// Report for known per-stage totals in whole hours, without clip
    /// counts.
    pub fn from_hours(hours: &[u64]) -> Self {
        let counts: Vec<_> = hours.iter().map(|&h| (None, h * MS_PER_HOUR)).collect();
        Self::from_counts(&counts)
    }

    pub fn hours_non_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].duration_ms <= w[0].duration_ms)
    }

    /// Aligned plain-text table, one column per stage.
    pub fn render_table(&self) -> String {
        let mut lines: Vec<(String, Vec<String>)> = vec![
            ("Curation Stage".into(), self.rows.iter().map(|r| r.stage.clone()).collect()),
            ("Data Size (hours)".into(), self.rows.iter().map(|r| r.hours.clone()).collect()),
        ];
        if self.rows.iter().all(|r| r.clips.is_some()) {
            lines.push((
                "Clips".into(),
                self.rows.iter().map(|r| r.clips.unwrap_or(0).to_string()).collect(),
            ));
        }
        let label_w = lines.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0);
        let col_w: Vec<usize> = (0..self.rows.len())
            .map(|i| lines.iter().map(|(_, c)| c[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (label, cells) in &lines {
            let _ = write!(out, "{label:<label_w$}");
            for (cell, w) in cells.iter().zip(&col_w) {
                let _ = write!(out, "  {cell:>w$}");
            }
            out.push('\n');
        }
        out
    }
}

/// Annotated records (input order) and the stage report.
#[derive(Clone, Debug, PartialEq)]
pub struct CurationOutcome {
    pub records: Vec<ClipRecord>,
    pub report: CurationReport,
}

impl CurationOutcome {
    pub fn survivors(&self) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(|r| r.rejected_at.is_none())
    }
}

/// Runs stages 1 → 4 in order.
pub fn run_pipeline(records: Vec<ClipRecord>, thresholds: &CurationThresholds) -> Result<CurationOutcome> {
    thresholds.validate()?;
    for r in &records {
        r.validate()?;
    }
    let total: u64 = records.iter().map(ClipRecord::duration_ms).sum();
    let mut counts = vec![(Some(records.len()), total)];
    let n = records.len();
    let mut remaining: Vec<(usize, ClipRecord)> = records.into_iter().enumerate().collect();
    let mut done: Vec<Option<ClipRecord>> = vec![None; n];
    for stage in 1..=4u8 {
        let (idx, recs): (Vec<usize>, Vec<ClipRecord>) = remaining.into_iter().unzip();
        let kept: Vec<bool> = recs
            .iter()
            .map(|r| thresholds.keeps(stage, r))
            .collect::<Result<_>>()?;
        remaining = Vec::new();
        for ((i, mut r), keep) in idx.into_iter().zip(recs).zip(kept) {
            if keep {
                remaining.push((i, r));
            } else {
                r.rejected_at = Some(stage);
                done[i] = Some(r);
            }
        }
        let ms = remaining.iter().map(|(_, r)| r.duration_ms()).sum();
        counts.push((Some(remaining.len()), ms));
    }
    for (i, r) in remaining {
        done[i] = Some(r);
    }
    Ok(CurationOutcome {
        records: done.into_iter().map(|r| r.expect("every record placed")).collect(),
        report: CurationReport::from_counts(&counts),
    })
}

/// Rejections per stage plus survivors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionHistogram {
    /// Index `k` counts `rejected_at = k + 1`.
    pub rejected: [usize; 4],
    pub survivors: usize,
}

impl RejectionHistogram {
    pub fn total(&self) -> usize {
        self.rejected.iter().sum::<usize>() + self.survivors
    }
}

pub fn summarize_rejections(records: &[ClipRecord]) -> Result<RejectionHistogram> {
    let mut h = RejectionHistogram::default();
    for r in records {
        match r.rejected_at {
            None => h.survivors += 1,
            Some(s @ 1..=4) => h.rejected[s as usize - 1] += 1,
            Some(s) => return Err(Error::Input(format!("clip {}: rejected_at {s} outside 1..=4", r.id))),
        }
    }
    Ok(h)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[ClipRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path.as_ref(), s).map_err(|e| Error::io(path.as_ref(), e))
}

/// A corpus with known answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedCorpus {
    pub records: Vec<ClipRecord>,
    pub thresholds: CurationThresholds,
    pub manifest: PlantedManifest,
}

/// The generator's own labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedManifest {
    pub expected_survivors: BTreeSet<String>,
    /// Stage each rejected clip must be attributed to.
    pub expected_rejected_at: BTreeMap<String, u8>,
    pub expected_histogram: RejectionHistogram,
}

/// `n` clips where roughly a third survive and the rest carry violations
/// planted at one or more stages; the first violated stage is the label.
/// Some survivors sit exactly on a threshold.
pub fn planted_corpus(n: usize, seed: u64) -> PlantedCorpus {
    let th = CurationThresholds {
        max_occlusion_ratio: 0.1,
        max_scene_change_score: 0.5,
        min_sync_confidence: 3.0,
        min_coherence_score: 0.8,
    };
    let mut rng = Rng::new(seed);
    let mut records = Vec::with_capacity(n);
    let mut survivors = BTreeSet::new();
    let mut rejected = BTreeMap::new();
    let mut hist = RejectionHistogram::default();
    for i in 0..n {
        let id = format!("clip_{i:04}");
        let ms = 2_000 + rng.below(58_000) as u64;
        let mut r = ClipRecord {
            id: id.clone(),
            duration_s: ms as f64 / 1000.0,
            occlusion_ratio: rng.uniform_range(0.0, 0.08),
            scene_change_score: rng.uniform_range(0.0, 0.4),
            sync_confidence: rng.uniform_range(3.5, 9.0),
            coherence_score: rng.uniform_range(0.85, 1.0),
            rejected_at: None,
        };
        if rng.below(10) == 0 {
            match rng.below(4) {
                0 => r.occlusion_ratio = th.max_occlusion_ratio,
                1 => r.scene_change_score = th.max_scene_change_score,
                2 => r.sync_confidence = th.min_sync_confidence,
                _ => r.coherence_score = th.min_coherence_score,
            }
        }
        let first = rng.below(6);
        let label = if first >= 4 { None } else { Some(first as u8 + 1) };
        if let Some(stage) = label {
            for s in stage..=4 {
                if s == stage || rng.below(3) == 0 {
                    match s {
                        1 => r.occlusion_ratio = rng.uniform_range(0.15, 1.0),
                        2 => r.scene_change_score = rng.uniform_range(0.6, 5.0),
                        3 => r.sync_confidence = rng.uniform_range(-2.0, 2.5),
                        _ => r.coherence_score = rng.uniform_range(0.0, 0.7),
                    }
                }
            }
            rejected.insert(id, stage);
            hist.rejected[stage as usize - 1] += 1;
        } else {
            survivors.insert(id);
            hist.survivors += 1;
        }
        records.push(r);
    }
    PlantedCorpus {
        records,
        thresholds: th,
        manifest: PlantedManifest {
            expected_survivors: survivors,
            expected_rejected_at: rejected,
            expected_histogram: hist,
        },
    }
}
