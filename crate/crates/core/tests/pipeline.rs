use std::fs;

use proptest::prelude::*;
use querypose::data::{read_dataset, synth_generate, write_dataset, SynthConfig};
use querypose::eval::{average_precision, oks, OksConfig, PoseInstance, Scoring};
use querypose::model::{ModelConfig, PoseModel};
use querypose::numerics::Checkpoint;
use querypose::pipeline::{evaluate, predict_instances, EvalOptions};
use querypose::train::{prepare_samples, train, TrainConfig};

#[test]
fn train_save_reload_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { figures: 2, ..Default::default() };
    let scenes = synth_generate(11, 6, &cfg).unwrap();
    write_dataset(&tmp.path().join("data"), &scenes, &cfg, 11).unwrap();
    let data = read_dataset(&tmp.path().join("data")).unwrap();

    let samples = prepare_samples(&data.scenes, (64, 64), 1.25).unwrap();
    assert_eq!(samples.len(), 12);
    let tcfg = TrainConfig { steps: 8, batch_size: 4, val_every: 2, ..Default::default() };
    let run = tmp.path().join("run");
    let outcome = train(&ModelConfig::default(), &tcfg, &samples, None, Some(&run)).unwrap();

    let lines: Vec<serde_json::Value> = fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, outcome.log);
    assert!(lines.iter().filter(|v| v["event"] == "epoch").all(|v| v["loss"].as_f64().unwrap().is_finite()));

    let reloaded = PoseModel::from_checkpoint(&Checkpoint::load(&run.join("checkpoint.qpc")).unwrap()).unwrap();
    let opts = EvalOptions::default();
    let a = predict_instances(&outcome.model, &data.scenes, &opts).unwrap();
    let b = predict_instances(&reloaded, &data.scenes, &opts).unwrap();
    assert_eq!(a, b);

    let report = evaluate(&reloaded, &data.scenes, &opts).unwrap();
    assert_eq!(report.instances, 12);
    assert!((0.0..=1.0).contains(&report.ap.mean) && (0.0..=1.0).contains(&report.pck));
    let bbox = evaluate(&reloaded, &data.scenes, &EvalOptions { scoring: Scoring::BboxOnly, ..opts }).unwrap();
    assert_eq!(bbox.mean_l1_px, report.mean_l1_px);
}

#[test]
fn checkpoint_of_other_shape_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.qpc");
    let model = PoseModel::new(&ModelConfig::default(), 0).unwrap();
    model.to_checkpoint(serde_json::json!({ "model": ModelConfig::default() })).save(&path).unwrap();
    let mut ck = Checkpoint::load(&path).unwrap();
    let mut other = ModelConfig::default();
    other.decoder.ffn_dim *= 2;
    ck.meta["model"] = serde_json::to_value(&other).unwrap();
    assert!(matches!(PoseModel::from_checkpoint(&ck), Err(querypose::Error::Format { .. })));
}

fn instance(xy: &[f64], vis: &[bool], score: f64) -> PoseInstance {
    PoseInstance {
        image_id: 0,
        keypoints: xy.chunks(2).zip(vis).flat_map(|(p, &v)| [p[0], p[1], if v { 2.0 } else { 0.0 }]).collect(),
        bbox: [0.0, 0.0, 30.0, 30.0],
        bbox_score: score,
        kp_scores: vec![1.0; vis.len()],
        area: 400.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oks_is_a_similarity(
        gt in prop::collection::vec(0.0f64..30.0, 8),
        noise in prop::collection::vec(-5.0f64..5.0, 8),
        vis in prop::collection::vec(any::<bool>(), 4),
    ) {
        prop_assume!(vis.iter().any(|&v| v));
        let cfg = OksConfig::uniform(4, 0.08);
        let g = instance(&gt, &vis, 1.0);
        let d: Vec<f64> = gt.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let s = oks(&instance(&d, &[true; 4], 1.0), &g, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(oks(&g, &g, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn ap_is_bounded_and_order_free(
        pts in prop::collection::vec(0.0f64..30.0, 8 * 3),
        noise in prop::collection::vec(-4.0f64..4.0, 8 * 3),
        scores in prop::collection::vec(0.05f64..1.0, 3),
    ) {
        let cfg = OksConfig::uniform(4, 0.08);
        let gts: Vec<_> = pts.chunks(8).map(|c| instance(c, &[true; 4], 1.0)).collect();
        let dets: Vec<_> = pts
            .chunks(8)
            .zip(noise.chunks(8))
            .zip(&scores)
            .map(|((p, n), &s)| instance(&p.iter().zip(n).map(|(a, b)| a + b).collect::<Vec<_>>(), &[true; 4], s))
            .collect();
        let ap = average_precision(&dets, &gts, &cfg, Scoring::Rescored).unwrap();
        prop_assert!(ap.per_threshold.iter().all(|&(_, v)| (0.0..=1.0).contains(&v)));
        let mut reversed = dets.clone();
        reversed.reverse();
        let distinct = scores.iter().enumerate().all(|(i, a)| scores[i + 1..].iter().all(|b| a != b));
        if distinct {
            prop_assert_eq!(average_precision(&reversed, &gts, &cfg, Scoring::Rescored).unwrap(), ap);
        }
    }
}
