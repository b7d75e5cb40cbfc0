//! Top-down inference over scenes and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticScene;
use crate::error::{Error, Result};
use crate::eval::{average_precision, pck, ApReport, OksConfig, PoseInstance, Scoring, DEFAULT_FALLOFF};
use crate::likelihood::{keypoint_score, DEFAULT_SCORE_A};
use crate::model::PoseModel;
use crate::train::{batch_of, prepare_samples, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub score_a: f64,
    pub scoring: Scoring,
    pub crop_padding: f64,
    pub pck_alpha: f64,
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { score_a: DEFAULT_SCORE_A, scoring: Scoring::Rescored, crop_padding: 1.25, pck_alpha: 0.5, batch: 32 }
    }
}

/// One detection per ground-truth box: the box is cropped, the model
/// predicts in the patch, and keypoints are mapped back to image pixels.
/// Keypoint scores come from the predicted scales; the box score is copied
/// from the ground truth.
pub fn predict_instances(model: &PoseModel, scenes: &[SyntheticScene], opts: &EvalOptions) -> Result<Vec<PoseInstance>> {
    let samples = prepare_samples(scenes, model.input_size(), opts.crop_padding)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("no annotated instances to predict".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(opts.batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = batch_of(&refs)?;
        for (params, s) in model.predict(&x, None)?.iter().zip(chunk) {
            let gt = &scenes.iter().find(|sc| sc.index == s.image_id).expect("sample from scene").instances[s.instance];
            let keypoints = params
                .mu
                .data()
                .chunks(2)
                .flat_map(|u| {
                    let p = s.transform.from_normalized([u[0], u[1]]);
                    [p[0], p[1], 2.0]
                })
                .collect();
            out.push(PoseInstance {
                image_id: s.image_id,
                keypoints,
                bbox: gt.bbox,
                bbox_score: gt.bbox_score,
                kp_scores: keypoint_score(params, opts.score_a)?,
                area: gt.area,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scoring: Scoring,
    pub score_a: f64,
    pub instances: usize,
    pub ap: ApReport,
    pub pck: f64,
    pub pck_alpha: f64,
    /// Mean `|dx| + |dy|` per keypoint in image pixels.
    pub mean_l1_px: f64,
}

/// Metrics for detections paired one-to-one (same order) with ground truths.
pub fn evaluate_instances(dets: &[PoseInstance], gts: &[PoseInstance], opts: &EvalOptions) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::EmptyInput("no ground-truth instances to evaluate".into()));
    }
    let k = gts[0].num_keypoints();
    let cfg = OksConfig::uniform(k, DEFAULT_FALLOFF);
    let ap = average_precision(dets, gts, &cfg, opts.scoring)?;
    let pck = pck(dets, gts, opts.pck_alpha)?;
    let (mut l1, mut n) = (0.0, 0usize);
    for (d, g) in dets.iter().zip(gts) {
        for i in (0..k).filter(|&i| g.visible(i)) {
            let (a, b) = (d.xy(i), g.xy(i));
            l1 += (a[0] - b[0]).abs() + (a[1] - b[1]).abs();
            n += 1;
        }
    }
    Ok(EvalReport {
        scoring: opts.scoring,
        score_a: opts.score_a,
        instances: gts.len(),
        ap,
        pck,
        pck_alpha: opts.pck_alpha,
        mean_l1_px: l1 / n.max(1) as f64,
    })
}

/// Inference-mode evaluation of `model` on `scenes`.
pub fn evaluate(model: &PoseModel, scenes: &[SyntheticScene], opts: &EvalOptions) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("dataset has no scenes".into()));
    }
    let dets = predict_instances(model, scenes, opts)?;
    let gts: Vec<PoseInstance> = scenes.iter().flat_map(|s| s.instances.iter().cloned()).collect();
    evaluate_instances(&dets, &gts, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::model::ModelConfig;

    #[test]
    fn oracle_predictions_score_perfectly() {
        let scenes = synth_generate(3, 4, &SynthConfig { figures: 2, ..Default::default() }).unwrap();
        let gts: Vec<PoseInstance> = scenes.iter().flat_map(|s| s.instances.clone()).collect();
        let r = evaluate_instances(&gts, &gts, &EvalOptions::default()).unwrap();
        assert_eq!(r.ap.mean, 1.0);
        assert_eq!(r.pck, 1.0);
        assert_eq!(r.mean_l1_px, 0.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let model = PoseModel::new(&ModelConfig::default(), 0).unwrap();
        assert!(matches!(evaluate(&model, &[], &EvalOptions::default()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn predictions_land_in_image_space() {
        let scenes = synth_generate(1, 3, &SynthConfig::default()).unwrap();
        let model = PoseModel::new(&ModelConfig::default(), 0).unwrap();
        let dets = predict_instances(&model, &scenes, &EvalOptions::default()).unwrap();
        assert_eq!(dets.len(), 3);
        for (d, s) in dets.iter().zip(&scenes) {
            let g = &s.instances[0];
            assert_eq!(d.image_id, s.index);
            assert!(d.kp_scores.iter().all(|&v| v > 0.0 && v <= 1.0));
            // Crop boxes are the padded square around the instance box.
            let (cx, cy) = (g.bbox[0] + g.bbox[2] / 2.0, g.bbox[1] + g.bbox[3] / 2.0);
            let half = 0.5 * 1.25 * g.bbox[2].max(g.bbox[3]);
            for i in 0..d.num_keypoints() {
                let p = d.xy(i);
                assert!((p[0] - cx).abs() <= half + 1e-9 && (p[1] - cy).abs() <= half + 1e-9);
            }
        }
        let r = evaluate(&model, &scenes, &EvalOptions::default()).unwrap();
        assert_eq!(r.instances, 3);
    }
}
