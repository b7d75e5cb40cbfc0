//! Pose evaluation: OKS, score-ordered greedy matching, 101-point
//! interpolated AP, PCK and an exhaustive matching oracle.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};

/// Per-keypoint falloff used for the synthetic data.
pub const DEFAULT_FALLOFF: f64 = 0.08;

/// One detected or annotated person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInstance {
    pub image_id: u64,
    /// Flat `(x, y, v)` triples in pixels; `v > 0` marks a visible keypoint.
    pub keypoints: Vec<f64>,
    /// `(x, y, w, h)`.
    pub bbox: [f64; 4],
    pub bbox_score: f64,
    pub kp_scores: Vec<f64>,
    pub area: f64,
}

impl PoseInstance {
    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len() / 3
    }

    pub fn xy(&self, i: usize) -> [f64; 2] {
        [self.keypoints[3 * i], self.keypoints[3 * i + 1]]
    }

    pub fn visible(&self, i: usize) -> bool {
        self.keypoints[3 * i + 2] > 0.0
    }

    pub fn num_visible(&self) -> usize {
        (0..self.num_keypoints()).filter(|&i| self.visible(i)).count()
    }
}

/// Reads JSON-lines instances, skipping blank lines.
pub fn read_instances(reader: impl BufRead) -> Result<Vec<PoseInstance>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_instances(mut writer: impl Write, instances: &[PoseInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut writer, inst)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksConfig {
    /// Falloff `k_i` per keypoint.
    pub falloff: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl OksConfig {
    /// Uniform falloff with thresholds `0.50, 0.55, .., 0.95`.
    pub fn uniform(keypoints: usize, k: f64) -> Self {
        Self { falloff: vec![k; keypoints], thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.falloff.is_empty() || self.falloff.iter().any(|&k| !(k > 0.0)) {
            return config("OKS falloff constants must be positive");
        }
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || self.thresholds.windows(2).any(|w| w[1] <= w[0])
        {
            return config("OKS thresholds must strictly increase inside (0, 1)");
        }
        Ok(())
    }
}

/// `s_bbox * mean(s_kp)`.
pub fn instance_score(inst: &PoseInstance) -> Result<f64> {
    if inst.kp_scores.is_empty() {
        return Err(Error::EmptyInput("instance has no keypoint scores".into()));
    }
    Ok(inst.bbox_score * inst.kp_scores.iter().sum::<f64>() / inst.kp_scores.len() as f64)
}

/// Mean of `exp(-d^2 / (2 area k^2))` over the ground truth's visible keypoints.
pub fn oks(pred: &PoseInstance, gt: &PoseInstance, cfg: &OksConfig) -> Result<f64> {
    let k = gt.num_keypoints();
    if pred.num_keypoints() != k || cfg.falloff.len() != k {
        return contract(format!("keypoint counts differ: pred {}, gt {k}, config {}", pred.num_keypoints(), cfg.falloff.len()));
    }
    if !(gt.area > 0.0) {
        return contract("ground-truth area must be positive");
    }
    let mut sum = 0.0;
    let mut n = 0;
    for i in (0..k).filter(|&i| gt.visible(i)) {
        let (p, g) = (pred.xy(i), gt.xy(i));
        let d2 = (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
        sum += (-d2 / (2.0 * gt.area * cfg.falloff[i].powi(2))).exp();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Undefined("OKS of a ground truth with no visible keypoints".into()));
    }
    Ok(sum / n as f64)
}

/// How detections are ranked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// Box score times mean keypoint score.
    #[default]
    Rescored,
    /// Box score alone.
    BboxOnly,
}

pub fn detection_score(inst: &PoseInstance, scoring: Scoring) -> Result<f64> {
    match scoring {
        Scoring::Rescored => instance_score(inst),
        Scoring::BboxOnly => Ok(inst.bbox_score),
    }
}

/// Detections and matchable ground truths of one image, with the OKS table
/// `oks[d][g]` in detection rank order.
#[derive(Debug, Clone)]
pub struct ImageCase {
    pub image_id: u64,
    /// Indices into the detection list, best score first.
    pub ranked: Vec<usize>,
    pub scores: Vec<f64>,
    pub num_gts: usize,
    pub oks: Vec<Vec<f64>>,
}

/// Groups detections and ground truths by image. Ground truths without
/// visible keypoints are ignored.
pub fn build_cases(dets: &[PoseInstance], gts: &[PoseInstance], cfg: &OksConfig, scoring: Scoring) -> Result<Vec<ImageCase>> {
    cfg.validate()?;
    let mut images: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        images.entry(d.image_id).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        if g.num_visible() > 0 {
            images.entry(g.image_id).or_default().1.push(i);
        }
    }
    images
        .into_iter()
        .map(|(image_id, (ds, gs))| {
            let mut scored = ds.iter().map(|&i| Ok((i, detection_score(&dets[i], scoring)?))).collect::<Result<Vec<_>>>()?;
            scored.sort_by(|a, b| b.1.total_cmp(&a.1));
            let oks = scored
                .iter()
                .map(|&(d, _)| gs.iter().map(|&g| oks(&dets[d], &gts[g], cfg)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageCase {
                image_id,
                ranked: scored.iter().map(|s| s.0).collect(),
                scores: scored.iter().map(|s| s.1).collect(),
                num_gts: gs.len(),
                oks,
            })
        })
        .collect()
}

/// Greedy matching: each detection in rank order takes the unmatched ground
/// truth with the highest OKS at or above `threshold` (lowest index on ties).
pub fn greedy_match(case: &ImageCase, threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; case.num_gts];
    case.oks
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &o) in row.iter().enumerate() {
                if !taken[g] && o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            let g = best.map(|b| b.0);
            if let Some(g) = g {
                taken[g] = true;
            }
            g
        })
        .collect()
}

/// 101-point interpolated AP from per-detection outcomes listed in global rank order.
fn interpolated_ap(hits: &[bool], num_gts: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gts as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while j < recall.len() && recall[j] < level {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    sum / 101.0
}

/// Ranks every detection across images (score descending, then image order,
/// then in-image rank) and computes AP.
fn ap_from_matches(cases: &[ImageCase], matches: &[Vec<Option<usize>>]) -> Result<f64> {
    let num_gts: usize = cases.iter().map(|c| c.num_gts).sum();
    if num_gts == 0 {
        return Err(Error::Undefined("AP with no ground truth".into()));
    }
    let mut all: Vec<(f64, bool)> = cases
        .iter()
        .zip(matches)
        .flat_map(|(c, m)| c.scores.iter().zip(m).map(|(&s, g)| (s, g.is_some())))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let hits: Vec<bool> = all.iter().map(|a| a.1).collect();
    Ok(interpolated_ap(&hits, num_gts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `(threshold, AP)` pairs.
    pub per_threshold: Vec<(f64, f64)>,
    pub mean: f64,
}

fn report(cfg: &OksConfig, ap: impl Fn(f64) -> Result<f64>) -> Result<ApReport> {
    let per_threshold =
        cfg.thresholds.iter().map(|&t| Ok((t, ap(t)?))).collect::<Result<Vec<_>>>()?;
    let mean = per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64;
    Ok(ApReport { per_threshold, mean })
}

/// OKS-based AP with greedy matching at every configured threshold.
pub fn average_precision(dets: &[PoseInstance], gts: &[PoseInstance], cfg: &OksConfig, scoring: Scoring) -> Result<ApReport> {
    let cases = build_cases(dets, gts, cfg, scoring)?;
    report(cfg, |t| {
        let matches: Vec<_> = cases.iter().map(|c| greedy_match(c, t)).collect();
        ap_from_matches(&cases, &matches)
    })
}

/// Best assignment by enumeration: among all injective matchings with
/// OKS >= `threshold`, the one whose per-detection key `(OKS, -gt index)` in
/// rank order is lexicographically largest (an unmatched detection ranks
/// below any match).
pub fn exhaustive_match(case: &ImageCase, threshold: f64) -> Vec<Option<usize>> {
    fn key(case: &ImageCase, m: &[Option<usize>]) -> Vec<(bool, f64, i64)> {
        m.iter()
            .enumerate()
            .map(|(d, g)| match g {
                Some(g) => (true, case.oks[d][*g], -(*g as i64)),
                None => (false, 0.0, 0),
            })
            .collect()
    }
    fn better(a: &[(bool, f64, i64)], b: &[(bool, f64, i64)]) -> bool {
        for (x, y) in a.iter().zip(b) {
            let ord = x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2));
            if ord.is_ne() {
                return ord.is_gt();
            }
        }
        false
    }
    fn rec(
        case: &ImageCase,
        t: f64,
        d: usize,
        taken: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<(bool, f64, i64)>, Vec<Option<usize>>)>,
    ) {
        if d == case.oks.len() {
            let k = key(case, cur);
            if best.as_ref().is_none_or(|(bk, _)| better(&k, bk)) {
                *best = Some((k, cur.clone()));
            }
            return;
        }
        cur.push(None);
        rec(case, t, d + 1, taken, cur, best);
        cur.pop();
        for g in 0..case.num_gts {
            if !taken[g] && case.oks[d][g] >= t {
                taken[g] = true;
                cur.push(Some(g));
                rec(case, t, d + 1, taken, cur, best);
                cur.pop();
                taken[g] = false;
            }
        }
    }
    let mut best = None;
    rec(case, threshold, 0, &mut vec![false; case.num_gts], &mut Vec::new(), &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

/// AP computed from [`exhaustive_match`] assignments, with precision and
/// recall evaluated directly at every rank cut-off.
pub fn exhaustive_average_precision(
    dets: &[PoseInstance],
    gts: &[PoseInstance],
    cfg: &OksConfig,
    scoring: Scoring,
) -> Result<ApReport> {
    let cases = build_cases(dets, gts, cfg, scoring)?;
    let num_gts: usize = cases.iter().map(|c| c.num_gts).sum();
    report(cfg, |t| {
        if num_gts == 0 {
            return Err(Error::Undefined("AP with no ground truth".into()));
        }
        let mut all: Vec<(f64, bool)> = Vec::new();
        for c in &cases {
            let m = exhaustive_match(c, t);
            all.extend(c.scores.iter().zip(&m).map(|(&s, g)| (s, g.is_some())));
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        let cut = |n: usize| {
            let tp = all[..n].iter().filter(|a| a.1).count();
            (tp as f64 / n as f64, tp as f64 / num_gts as f64)
        };
        let mut sum = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let best = (1..=all.len()).map(cut).filter(|&(_, rec)| rec >= level).map(|(p, _)| p).fold(None, |m: Option<f64>, p| {
                Some(m.map_or(p, |m| m.max(p)))
            });
            sum += best.unwrap_or(0.0);
        }
        Ok(sum / 101.0)
    })
}

/// Fraction of visible ground-truth keypoints within `alpha * norm` pixels,
/// with one normalizer per instance.
pub fn pck_with_norms(preds: &[PoseInstance], gts: &[PoseInstance], norms: &[f64], alpha: f64) -> Result<f64> {
    if preds.len() != gts.len() || norms.len() != gts.len() {
        return contract("pck needs one prediction and normalizer per ground truth");
    }
    if norms.iter().any(|&n| !(n > 0.0)) {
        return contract("pck normalizer must be positive");
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, g), &norm) in preds.iter().zip(gts).zip(norms) {
        if p.num_keypoints() != g.num_keypoints() {
            return contract("keypoint counts differ");
        }
        for i in (0..g.num_keypoints()).filter(|&i| g.visible(i)) {
            let (a, b) = (p.xy(i), g.xy(i));
            total += 1;
            hit += (((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() <= alpha * norm) as usize;
        }
    }
    if total == 0 {
        return Err(Error::Undefined("PCK with no visible keypoints".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// PCK normalized by each ground-truth box diagonal.
pub fn pck(preds: &[PoseInstance], gts: &[PoseInstance], alpha: f64) -> Result<f64> {
    let norms: Vec<f64> = gts.iter().map(|g| g.bbox[2].hypot(g.bbox[3])).collect();
    pck_with_norms(preds, gts, &norms, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(image_id: u64, pts: &[[f64; 2]], score: f64) -> PoseInstance {
        PoseInstance {
            image_id,
            keypoints: pts.iter().flat_map(|p| [p[0], p[1], 2.0]).collect(),
            bbox: [0.0, 0.0, 10.0, 10.0],
            bbox_score: score,
            kp_scores: vec![1.0; pts.len()],
            area: 100.0,
        }
    }

    #[test]
    fn instance_score_examples() {
        let mut i = inst(0, &[[0.0, 0.0]; 2], 1.0);
        assert_eq!(instance_score(&i).unwrap(), 1.0);
        i.bbox_score = 0.9;
        i.kp_scores = vec![0.8, 0.6];
        assert!((instance_score(&i).unwrap() - 0.63).abs() < 1e-15);
        i.bbox_score = 0.0;
        assert_eq!(instance_score(&i).unwrap(), 0.0);
    }

    #[test]
    fn oks_examples() {
        let cfg = OksConfig::uniform(1, 0.08);
        let gt = inst(0, &[[5.0, 5.0]], 1.0);
        assert_eq!(oks(&gt, &gt, &cfg).unwrap(), 1.0);
        let d = (2.0 * 100.0 * 0.08f64.powi(2)).sqrt();
        let p = inst(0, &[[5.0 + d, 5.0]], 1.0);
        assert!((oks(&p, &gt, &cfg).unwrap() - (-1.0f64).exp()).abs() < 1e-12);

        let cfg2 = OksConfig::uniform(2, 0.08);
        let mut g2 = inst(0, &[[5.0, 5.0], [1.0, 1.0]], 1.0);
        g2.keypoints[5] = 0.0;
        let p2 = inst(0, &[[5.0, 5.0], [9.0, 9.0]], 1.0);
        assert_eq!(oks(&p2, &g2, &cfg2).unwrap(), 1.0);
        g2.keypoints[2] = 0.0;
        assert!(matches!(oks(&p2, &g2, &cfg2), Err(Error::Undefined(_))));
    }

    #[test]
    fn perfect_and_empty_ap() {
        let cfg = OksConfig::uniform(2, 0.08);
        let gts = vec![inst(0, &[[1.0, 2.0], [3.0, 4.0]], 1.0), inst(1, &[[5.0, 5.0], [6.0, 6.0]], 1.0)];
        let r = average_precision(&gts, &gts, &cfg, Scoring::Rescored).unwrap();
        assert!(r.per_threshold.iter().all(|p| p.1 == 1.0));
        let r = average_precision(&[], &gts, &cfg, Scoring::Rescored).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn hand_case_matches_oracle() {
        let cfg = OksConfig::uniform(1, 0.08);
        let gts = vec![inst(0, &[[0.0, 0.0]], 1.0), inst(0, &[[2.0, 0.0]], 1.0)];
        let dets = vec![inst(0, &[[1.0, 0.0]], 0.9), inst(0, &[[0.2, 0.0]], 0.8), inst(0, &[[9.0, 9.0]], 0.7)];
        let a = average_precision(&dets, &gts, &cfg, Scoring::BboxOnly).unwrap();
        let b = exhaustive_average_precision(&dets, &gts, &cfg, Scoring::BboxOnly).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ap_ignores_monotone_score_transforms() {
        let cfg = OksConfig::uniform(1, 0.08);
        let gts = vec![inst(0, &[[0.0, 0.0]], 1.0), inst(1, &[[2.0, 0.0]], 1.0)];
        let dets = vec![inst(0, &[[0.5, 0.0]], 0.3), inst(1, &[[2.8, 0.0]], 0.9), inst(1, &[[2.0, 0.1]], 0.5)];
        let a = average_precision(&dets, &gts, &cfg, Scoring::BboxOnly).unwrap();
        let sq: Vec<_> = dets.iter().map(|d| PoseInstance { bbox_score: d.bbox_score.powi(3), ..d.clone() }).collect();
        assert_eq!(a, average_precision(&sq, &gts, &cfg, Scoring::BboxOnly).unwrap());
    }

    #[test]
    fn pck_counts() {
        let gt = inst(0, &[[0.0, 0.0], [10.0, 10.0]], 1.0);
        let norm = 200f64.sqrt();
        assert_eq!(pck(&[gt.clone()], &[gt.clone()], 0.5).unwrap(), 1.0);
        let far = inst(0, &[[100.0, 0.0], [10.0, 100.0]], 1.0);
        assert_eq!(pck(&[far], &[gt.clone()], 0.5).unwrap(), 0.0);
        let half = inst(0, &[[0.4 * norm, 0.0], [10.0, 10.0 + 0.6 * norm]], 1.0);
        assert_eq!(pck(&[half], &[gt], 0.5).unwrap(), 0.5);
    }

    #[test]
    fn jsonl_round_trip() {
        let a = vec![inst(3, &[[1.5, 2.0]], 0.25)];
        let mut buf = Vec::new();
        write_instances(&mut buf, &a).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("\"bbox_score\""));
        assert_eq!(read_instances(&buf[..]).unwrap(), a);
    }
}
