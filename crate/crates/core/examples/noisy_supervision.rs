//! Trains an identity field from corrupted masks (flipped boundary pixels,
//! objects dropped from whole frames) and tracks its held-out segmentation
//! against clean ground truth as training goes on.
//!
//! Boundary flips average out. Frames that drop an object pull its logits
//! toward void, and held-out quality moves around from stage to stage
//! depending on which frames training has visited recently.
//!
//! cargo run --release --example noisy_supervision

use sa4d::eval::{evaluate_frame, frame_metrics, summarize};
use sa4d::field::{AdamState, IdentityField};
use sa4d::pipeline::{predict_view, train_from, TrainConfig};
use sa4d::synth::{generate_scene, NoiseModel, SceneSpec};

fn main() -> sa4d::Result<()> {
    let spec = SceneSpec {
        object_count: 2,
        gaussians_per_object: 150,
        width: 40,
        height: 40,
        noise: NoiseModel {
            boundary_flip: 0.2,
            void_dropout: 0.1,
            seed: 11,
            ..NoiseModel::default()
        },
        seed: 3,
        ..SceneSpec::default()
    };
    let data = generate_scene(&spec)?;
    let frames = data.training_frames();
    let mut per = Vec::new();
    for (i, f) in data.train.iter().enumerate() {
        per.push(frame_metrics(i, Some(f.timestamp), evaluate_frame(&f.mask, &f.gt)?));
    }
    println!("training masks score mIoU {:.3} against ground truth", summarize(per).mean_iou);

    let mut cfg = TrainConfig {
        iterations: 1000,
        ..TrainConfig::default()
    };
    let mut field = IdentityField::new(cfg.field, 1);
    let mut adam = AdamState::new(&field, cfg.learning_rate);
    for stage in 1..=5 {
        cfg.seed = stage;
        let out = train_from(field, adam, &data.scene, &data.motion, &frames, &cfg)?;
        (field, adam) = (out.field, out.adam);
        let tail = &out.trace[out.trace.len() - 100..];
        let ce = tail.iter().map(|r| r.loss_2d).sum::<f64>() / tail.len() as f64;

        let mut per = Vec::new();
        let mut missed = 0;
        for (i, f) in data.held_out.iter().enumerate() {
            let pred = predict_view(&field, &data.scene, &data.motion, &f.camera, f.timestamp)?;
            let m = frame_metrics(i, Some(f.timestamp), evaluate_frame(&pred, &f.gt)?);
            missed += m.objects.iter().filter(|o| o.iou < 0.5).count();
            per.push(m);
        }
        let report = summarize(per);
        println!(
            "{:5} iterations: CE {ce:.3}, held-out mIoU {:.3}, {missed} (view, object) pairs below IoU 0.5",
            stage * 1000,
            report.mean_iou
        );
    }
    Ok(())
}
