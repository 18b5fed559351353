//! Trains an identity field, segments every Gaussian at each training
//! timestamp, refines the segmentations (outlier removal and boundary
//! pruning) and stores them as an identity table. Reports how much
//! refinement removed and how the table cost scales with the timestamp
//! interval.
//!
//! cargo run --release --example identity_table

use sa4d::pipeline::{build_table, segment_all, train, IdentityTable, RefinementConfig, TrainConfig};
use sa4d::synth::{generate_scene, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec {
        object_count: 3,
        gaussians_per_object: 100,
        width: 40,
        height: 40,
        frame_count: 16,
        seed: 21,
        ..SceneSpec::default()
    };
    let data = generate_scene(&spec)?;
    let frames = data.clean_training_frames();
    let cfg = TrainConfig {
        iterations: 800,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(&data.scene, &data.motion, &frames, &cfg)?;

    let table = build_table(&out.field, &data.scene, &data.motion, &frames, &RefinementConfig::default())?;
    table.validate()?;
    let t = table.timestamps[table.timestamps.len() / 2];
    let raw = segment_all(&out.field, &data.scene, t)?;
    println!("t = {t:.3}");
    for id in table.objects() {
        println!(
            "  object {id}: {} Gaussians segmented, {} after refinement",
            raw[id as usize - 1].len(),
            table.lookup(t, id).len()
        );
    }

    let path = std::env::temp_dir().join("sa4d-table.json");
    table.save(&path)?;
    let back = IdentityTable::load(&path)?;
    assert_eq!(back, table);
    println!("saved and reloaded {}", path.display());

    for stride in [1, 2, 4, 8] {
        let cfg = RefinementConfig {
            stride,
            ..RefinementConfig::default()
        };
        let t = build_table(&out.field, &data.scene, &data.motion, &frames, &cfg)?;
        println!(
            "interval {stride}: {} timestamps in {:.3} s",
            t.timestamps.len(),
            t.meta.build_seconds
        );
    }
    Ok(())
}
