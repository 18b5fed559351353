//! Trains a time-aware and a time-invariant identity field on a scene where
//! part of one object moves over to another halfway through, then compares
//! held-out segmentation quality before and after the hand-over.
//!
//! cargo run --release --example drift_recovery

use sa4d::field::FieldConfig;
use sa4d::pipeline::{predict_view, train, TrainConfig};
use sa4d::synth::{generate_scene, SceneSpec};
use sa4d::eval::{evaluate_frame, frame_metrics};

fn main() -> sa4d::Result<()> {
    let spec = SceneSpec {
        object_count: 2,
        gaussians_per_object: 160,
        drift_cohort: 80,
        frame_count: 24,
        held_out_count: 8,
        seed: 7,
        ..SceneSpec::default()
    };
    let data = generate_scene(&spec)?;
    let frames = data.clean_training_frames();
    let iterations = 2000;

    for temporal in [true, false] {
        let cfg = TrainConfig {
            iterations,
            seed: 1,
            field: FieldConfig {
                temporal,
                ..FieldConfig::default()
            },
            ..TrainConfig::default()
        };
        let start = std::time::Instant::now();
        let out = train(&data.scene, &data.motion, &frames, &cfg)?;
        let secs = start.elapsed().as_secs_f64();
        let tail = &out.trace[out.trace.len().saturating_sub(50)..];
        let l2d = tail.iter().map(|r| r.loss_2d).sum::<f64>() / tail.len().max(1) as f64;
        println!("temporal={temporal}: {iterations} iterations in {secs:.1}s, final CE {l2d:.4}");
        let (mut pre, mut post) = (Vec::new(), Vec::new());
        for (i, f) in data.held_out.iter().enumerate() {
            let pred = predict_view(&out.field, &data.scene, &data.motion, &f.camera, f.timestamp)?;
            let m = frame_metrics(i, Some(f.timestamp), evaluate_frame(&pred, &f.gt)?);
            println!("  t = {:.3}  mIoU {:.3}", f.timestamp, m.mean_iou);
            if f.timestamp < spec.transfer_time {
                pre.push(m.mean_iou);
            } else if f.timestamp > spec.transfer_time {
                post.push(m.mean_iou);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!("  before hand-over {:.3}, after {:.3}", mean(&pre), mean(&post));
    }
    Ok(())
}
