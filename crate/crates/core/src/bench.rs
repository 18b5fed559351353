//! Mask-rendering throughput: identity-table lookup against recomputing
//! segmentation and refinement from the field for every frame.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deformation::{export_scene, MotionProgram};
use crate::editing::{anything_mask_from_labels, colorize, render_anything_mask, MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::field::IdentityField;
use crate::images::MaskImage;
use crate::pipeline::{nearest_frame, refine_at, IdentityTable, TrainingFrame};
use crate::scene::{Camera, CanonicalScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub repeats: usize,
    pub table_seconds: f64,
    pub recompute_seconds: f64,
    pub table_fps: f64,
    pub recompute_fps: f64,
    pub speedup: f64,
    /// Whether both paths produced the same ID rasters bit for bit.
    pub identical: bool,
}

impl BenchReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Anything mask at `t` with memberships recomputed from the field and
/// refined with the settings recorded in `table`.
pub fn recompute_mask(
    field: &IdentityField,
    canonical: &CanonicalScene,
    motion: &MotionProgram,
    frames: &[TrainingFrame],
    table: &IdentityTable,
    cam: &Camera,
    t: f64,
) -> Result<MaskImage> {
    let sets = refine_at(field, canonical, motion, frames, t, &table.meta.refinement())?;
    let deformed = export_scene(canonical, motion, t)?;
    let slot_of: std::collections::HashMap<u32, usize> =
        deformed.gaussians.iter().enumerate().map(|(s, g)| (g.index, s)).collect();
    let mut labels = vec![0u16; deformed.gaussians.len()];
    for (k, set) in sets.iter().enumerate() {
        for i in set {
            labels[slot_of[i]] = k as u16 + 1;
        }
    }
    anything_mask_from_labels(&deformed, cam, &labels, MASK_THRESHOLD)
}

/// Anything mask at `t` with memberships read from `table`.
pub fn lookup_mask(
    canonical: &CanonicalScene,
    motion: &MotionProgram,
    table: &IdentityTable,
    cam: &Camera,
    t: f64,
) -> Result<MaskImage> {
    let deformed = export_scene(canonical, motion, t)?;
    Ok(render_anything_mask(&deformed, table, cam, t)?.0)
}

/// Renders an anything mask (plus its visualization) at every timestamp
/// stored in `table`, seen from the training frame nearest that timestamp,
/// once through each path, `repeats` times over.
pub fn bench(
    field: &IdentityField,
    canonical: &CanonicalScene,
    motion: &MotionProgram,
    frames: &[TrainingFrame],
    table: &IdentityTable,
    repeats: usize,
) -> Result<BenchReport> {
    if table.timestamps.is_empty() {
        return Err(Error::Data("identity table has no timestamps".into()));
    }
    let repeats = repeats.max(1);
    let views: Vec<(f64, &Camera)> = table
        .timestamps
        .iter()
        .map(|&t| {
            let f = nearest_frame(frames, t).ok_or_else(|| Error::Data("no frames".into()))?;
            Ok((t, &frames[f].camera))
        })
        .collect::<Result<_>>()?;

    let start = Instant::now();
    let mut table_masks = Vec::new();
    for _ in 0..repeats {
        table_masks.clear();
        for (t, cam) in &views {
            let m = lookup_mask(canonical, motion, table, cam, *t)?;
            std::hint::black_box(colorize(&m));
            table_masks.push(m);
        }
    }
    let table_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut recompute_masks = Vec::new();
    for _ in 0..repeats {
        recompute_masks.clear();
        for (t, cam) in &views {
            let m = recompute_mask(field, canonical, motion, frames, table, cam, *t)?;
            std::hint::black_box(colorize(&m));
            recompute_masks.push(m);
        }
    }
    let recompute_seconds = start.elapsed().as_secs_f64();

    let n = (views.len() * repeats) as f64;
    Ok(BenchReport {
        frames: views.len(),
        repeats,
        table_seconds,
        recompute_seconds,
        table_fps: n / table_seconds,
        recompute_fps: n / recompute_seconds,
        speedup: recompute_seconds / table_seconds,
        identical: table_masks == recompute_masks,
    })
}
