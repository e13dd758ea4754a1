//! Anomaly scores, restoration, and two-stage screening with a pruned and a
//! full model.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::net::{ForcePrediction, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    /// `|F_C|` per point.
    pub point_scores: Vec<f64>,
    /// Maximum point score.
    pub object_score: f64,
    pub prediction: ForcePrediction,
}

/// Scores computed directly from a force prediction.
pub fn score_prediction(prediction: ForcePrediction) -> ScoreResult {
    let point_scores: Vec<f64> = prediction.resultant.iter().map(|v| v.norm()).collect();
    let object_score = point_scores.iter().copied().fold(0.0, f64::max);
    ScoreResult {
        point_scores,
        object_score,
        prediction,
    }
}

pub fn score(network: &Network, cloud: &PointCloud) -> Result<ScoreResult> {
    Ok(score_prediction(network.forward(cloud)?))
}

/// Applies the predicted corrective force: `p + F_C` row-wise.
pub fn restore(cloud: &PointCloud, prediction: &ForcePrediction) -> Result<PointCloud> {
    if cloud.len() != prediction.len() {
        return Err(Error::ShapeMismatch {
            context: "restore",
            expected: cloud.len(),
            found: prediction.len(),
        });
    }
    PointCloud::new(
        cloud
            .points()
            .iter()
            .zip(&prediction.resultant)
            .map(|(p, f)| p + f)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HqcConfig {
    /// Fraction of samples the pruned model may pass as normal.
    pub b: f64,
}

impl Default for HqcConfig {
    fn default() -> Self {
        Self { b: 0.25 }
    }
}

impl HqcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0 && self.b < 1.0) {
            return Err(Error::config("b", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BypassedNormal,
    Rescored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HqcRecord {
    pub sample_id: usize,
    pub pruned_score: f64,
    pub stage: Stage,
    pub final_object_score: f64,
    /// Full-model point scores; present only for rescored samples.
    pub final_point_scores: Option<Vec<f64>>,
    /// Pruned-model point scores, kept for every sample.
    pub pruned_point_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HqcSummary {
    pub b: f64,
    pub n: usize,
    pub bypass_count: usize,
    pub stage1_seconds: f64,
    pub stage2_seconds: f64,
    pub total_seconds: f64,
    pub effective_fps: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HqcReport {
    /// Ordered by sample id.
    pub records: Vec<HqcRecord>,
    pub summary: HqcSummary,
}

impl HqcReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,pruned_score,stage,final_score\n");
        for r in &self.records {
            let stage = match r.stage {
                Stage::BypassedNormal => "bypassed_normal",
                Stage::Rescored => "rescored",
            };
            let _ = writeln!(
                s,
                "{},{},{stage},{}",
                r.sample_id, r.pruned_score, r.final_object_score
            );
        }
        s
    }
}

/// Marks the `floor(b * n)` lowest scores, ranked by `(score, index)`.
pub fn select_bypass(scores: &[f64], b: f64) -> Vec<bool> {
    let n = scores.len();
    let k = ((b * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let mut out = vec![false; n];
    for &i in &order[..k] {
        out[i] = true;
    }
    out
}

/// Screens every sample with `pruned`, passes the lowest `floor(b N)` as
/// normal and rescores the rest with `full`.
pub fn hqc_run(
    samples: &[PointCloud],
    pruned: &Network,
    full: &Network,
    cfg: &HqcConfig,
) -> Result<HqcReport> {
    cfg.validate()?;
    let n = samples.len();
    if n == 0 {
        return Err(Error::invalid("HQC needs at least one sample"));
    }
    let start = Instant::now();
    let stage1: Vec<ScoreResult> = samples
        .par_iter()
        .map(|c| score(pruned, c))
        .collect::<Result<_>>()?;
    let stage1_seconds = start.elapsed().as_secs_f64();

    let pruned_scores: Vec<f64> = stage1.iter().map(|r| r.object_score).collect();
    let bypass = select_bypass(&pruned_scores, cfg.b);
    let mut warnings = Vec::new();
    if (cfg.b * n as f64) < 1.0 {
        warnings.push(format!(
            "b * N = {} < 1: no sample is bypassed",
            cfg.b * n as f64
        ));
    }

    let t2 = Instant::now();
    let rescore: Vec<usize> = (0..n).filter(|&i| !bypass[i]).collect();
    let stage2: Vec<ScoreResult> = rescore
        .par_iter()
        .map(|&i| score(full, &samples[i]))
        .collect::<Result<_>>()?;
    let stage2_seconds = t2.elapsed().as_secs_f64();
    let total_seconds = start.elapsed().as_secs_f64();

    let mut stage2 = stage2.into_iter();
    let records = stage1
        .into_iter()
        .enumerate()
        .map(|(i, s1)| {
            if bypass[i] {
                HqcRecord {
                    sample_id: i,
                    pruned_score: s1.object_score,
                    stage: Stage::BypassedNormal,
                    final_object_score: s1.object_score,
                    final_point_scores: None,
                    pruned_point_scores: s1.point_scores,
                }
            } else {
                let s2 = stage2.next().expect("one full score per rescored sample");
                HqcRecord {
                    sample_id: i,
                    pruned_score: s1.object_score,
                    stage: Stage::Rescored,
                    final_object_score: s2.object_score,
                    final_point_scores: Some(s2.point_scores),
                    pruned_point_scores: s1.point_scores,
                }
            }
        })
        .collect();
    Ok(HqcReport {
        records,
        summary: HqcSummary {
            b: cfg.b,
            n,
            bypass_count: bypass.iter().filter(|&&x| x).count(),
            stage1_seconds,
            stage2_seconds,
            total_seconds,
            effective_fps: n as f64 / total_seconds.max(f64::MIN_POSITIVE),
            warnings,
        },
    })
}

/// Red/blue heat-map colors: red = `min(score / p99, 1)`, blue = `1 - red`,
/// where `p99` is the nearest-rank 99th percentile of the scores.
pub fn heatmap_colors(scores: &[f64]) -> Vec<[u8; 3]> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let p99 = sorted[rank - 1];
    scores
        .iter()
        .map(|&s| {
            let red = if p99 > 0.0 { (s / p99).min(1.0) } else { 0.0 };
            let r = (red * 255.0).round() as u8;
            [r, 0, 255 - r]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    #[test]
    fn zero_forces_score_zero_and_restore_identity() {
        let p = ForcePrediction::zeros(4);
        let r = score_prediction(p.clone());
        assert_eq!(r.point_scores, vec![0.0; 4]);
        assert_eq!(r.object_score, 0.0);
        let c = PointCloud::from_xyz(&[[0.0, 1.0, 2.0]; 4]).unwrap();
        assert_eq!(restore(&c, &p).unwrap().points(), c.points());
    }

    #[test]
    fn three_four_five() {
        let p = ForcePrediction::new(
            vec![Vec3::new(1.0, 4.0, 0.0)],
            vec![Vec3::new(2.0, 0.0, 0.0)],
        )
        .unwrap();
        let r = score_prediction(p);
        assert_eq!(r.point_scores, vec![5.0]);
        assert_eq!(r.object_score, 5.0);
    }

    #[test]
    fn restore_undoes_known_damage() {
        let clean = vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0)];
        let damage = vec![Vec3::new(0.0, 0.0, 0.25), Vec3::zeros()];
        let damaged: Vec<Vec3> = clean.iter().zip(&damage).map(|(p, d)| p + d).collect();
        let fc: Vec<Vec3> = damage.iter().map(|d| -d).collect();
        let pred = ForcePrediction::new(fc, vec![Vec3::zeros(); 2]).unwrap();
        let out = restore(&PointCloud::new(damaged).unwrap(), &pred).unwrap();
        assert_eq!(out.points(), &clean[..]);
        assert!(restore(&PointCloud::new(clean).unwrap(), &ForcePrediction::zeros(3)).is_err());
    }

    #[test]
    fn bypass_selection() {
        let s: Vec<f64> = (1..=8).map(|i| i as f64 / 10.0).collect();
        let mut shuffled = s.clone();
        shuffled.reverse();
        let by = select_bypass(&shuffled, 0.25);
        assert_eq!(
            by,
            vec![false, false, false, false, false, false, true, true]
        );
        assert_eq!(select_bypass(&[0.1, 0.2], 0.25), vec![false, false]);
        // Ties at the boundary go to the lower id.
        assert_eq!(
            select_bypass(&[0.5, 0.1, 0.5, 0.5], 0.5),
            vec![true, true, false, false]
        );
    }

    #[test]
    fn heatmap_is_blue_for_zero_and_monotone() {
        assert!(heatmap_colors(&[0.0; 5]).iter().all(|c| *c == [0, 0, 255]));
        let s = [0.1, 0.5, 0.2, 0.9, 0.0];
        let c = heatmap_colors(&s);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] < s[j] {
                    assert!(c[i][0] <= c[j][0]);
                }
            }
        }
    }
}
