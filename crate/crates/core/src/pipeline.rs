//! Training loop, per-timestamp segmentation, refinement and the identity
//! table.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformation::{export_scene, DeformedScene, MotionProgram};
use crate::editing::{anything_mask_from_labels, MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::field::{
    adam_step, save_checkpoint, AdamState, FieldConfig, FieldGradients, IdentityField, CLASS_COUNT, ENCODING_DIM,
};
use crate::images::{MaskImage, RgbImage};
use crate::knn::NeighborIndex;
use crate::losses::{loss_2d, loss_3d, loss_proj, LossConfig};
use crate::scene::{Camera, CanonicalScene};
use crate::splat::{backward_payload, Projection};

/// One supervised view: camera, timestamp and an object-ID mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingFrame {
    pub camera: Camera,
    pub timestamp: f64,
    pub image: Option<RgbImage>,
    pub mask: MaskImage,
}

impl TrainingFrame {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if !(0.0..=1.0).contains(&self.timestamp) {
            return Err(Error::Data(format!("frame timestamp {} outside [0, 1]", self.timestamp)));
        }
        if self.mask.width != self.camera.width || self.mask.height != self.camera.height {
            return Err(Error::Data(format!(
                "mask is {}×{} but camera is {}×{}",
                self.mask.width, self.mask.height, self.camera.width, self.camera.height
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub losses: LossConfig,
    pub field: FieldConfig,
    /// Where to dump the parameters if the loss turns non-finite.
    #[serde(skip)]
    pub diagnostic_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            learning_rate: 5e-4,
            seed: 0,
            losses: LossConfig::default(),
            field: FieldConfig::default(),
            diagnostic_checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss_2d: f64,
    pub loss_3d: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub field: IdentityField,
    pub adam: AdamState,
    pub trace: Vec<LossRecord>,
    /// Frame index drawn at each iteration.
    pub frame_draws: Vec<usize>,
}

/// Loss trace as CSV with columns `iter,l2d,l3d,loss`.
pub fn trace_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("iter,l2d,l3d,loss\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.iteration, r.loss_2d, r.loss_3d, r.total));
    }
    s
}

struct FrameCache {
    projection: Projection,
    neighbors: NeighborIndex,
}

/// Trains a freshly initialized field against `frames`.
pub fn train(
    canonical: &CanonicalScene,
    motion: &MotionProgram,
    frames: &[TrainingFrame],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let field = IdentityField::new(cfg.field, cfg.seed);
    let adam = AdamState::new(&field, cfg.learning_rate);
    train_from(field, adam, canonical, motion, frames, cfg)
}

/// Continues training from existing parameters and optimizer state.
///
/// Each iteration draws one frame uniformly at random, renders identity
/// encodings through the frozen deformed scene, and takes one Adam step on
/// `λ2d·CE + λ3d·kNN-KL`.
pub fn train_from(
    mut field: IdentityField,
    mut adam: AdamState,
    canonical: &CanonicalScene,
    motion: &MotionProgram,
    frames: &[TrainingFrame],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if frames.is_empty() {
        return Err(Error::Data("no training frames".into()));
    }
    cfg.losses.validate()?;
    for f in frames {
        f.validate()?;
    }
    let canonical_positions = canonical.positions();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache: Vec<Option<FrameCache>> = frames.iter().map(|_| None).collect();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut frame_draws = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let fi = rng.gen_range(0..frames.len());
        frame_draws.push(fi);
        let frame = &frames[fi];
        if cache[fi].is_none() {
            let deformed = export_scene(canonical, motion, frame.timestamp)?;
            cache[fi] = Some(FrameCache {
                projection: Projection::new(&deformed.gaussians, &frame.camera),
                neighbors: NeighborIndex::new(&deformed.positions()),
            });
        }
        let fc = cache[fi].as_ref().expect("cached above");
        let step = frame_loss(
            &field,
            &canonical_positions,
            frame.timestamp,
            &fc.projection,
            &fc.neighbors,
            &frame.mask.labels,
            &cfg.losses,
            &mut rng,
        )
        .and_then(|fl| {
            if fl.total.is_finite() {
                Ok(fl)
            } else {
                Err(Error::Numerical(format!(
                    "non-finite loss at iteration {iteration} (2D {}, 3D {})",
                    fl.loss_2d, fl.loss_3d
                )))
            }
        });
        let fl = match step {
            Ok(fl) => fl,
            Err(e @ Error::Numerical(_)) => {
                if let Some(path) = &cfg.diagnostic_checkpoint {
                    save_checkpoint(path, &field, &adam)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        adam_step(&mut field, &fl.gradients, &mut adam)?;
        trace.push(LossRecord {
            iteration,
            loss_2d: fl.loss_2d,
            loss_3d: fl.loss_3d,
            total: fl.total,
        });
        if iteration % 100 == 0 {
            log::debug!("iter {iteration}: loss {:.4} (2D {:.4}, 3D {:.4})", fl.total, fl.loss_2d, fl.loss_3d);
        }
    }
    Ok(TrainOutcome {
        field,
        adam,
        trace,
        frame_draws,
    })
}

/// Loss terms of one frame and the gradient of their weighted sum.
pub struct FrameLoss {
    pub loss_2d: f64,
    pub loss_3d: f64,
    pub total: f64,
    pub gradients: FieldGradients,
}

/// Evaluates `λ2d·CE + λ3d·kNN-KL` for one frame and backpropagates it
/// through the classifier, the compositing and the field.
///
/// `projection` and `neighbors` must describe the scene deformed to `t`;
/// `rng` picks the Gaussians sampled by the 3D term.
#[allow(clippy::too_many_arguments)]
pub fn frame_loss<R: Rng>(
    field: &IdentityField,
    canonical_positions: &[Vector3<f64>],
    t: f64,
    projection: &Projection,
    neighbors: &NeighborIndex,
    labels: &[u16],
    lc: &LossConfig,
    rng: &mut R,
) -> Result<FrameLoss> {
    let acts = field.forward(canonical_positions, t)?;
    let enc = acts.encodings.as_slice().expect("standard layout");
    let out = projection.render(enc, ENCODING_DIM, true)?;
    let rendered = ArrayView2::from_shape((out.width * out.height, ENCODING_DIM), &out.image).expect("raster shape");

    let mut gradients = field.zero_gradients();
    let logits = field.logits(rendered);
    let (loss_2d, d_logits) = loss_2d(logits.view(), labels)?;
    let d_raster = field.classifier_backward(rendered, &(lc.lambda_2d * d_logits), &mut gradients);
    let d_enc_flat = backward_payload(&out, d_raster.as_slice().expect("standard layout"))?;
    let mut d_enc =
        Array2::from_shape_vec((canonical_positions.len(), ENCODING_DIM), d_enc_flat).expect("gradient shape");

    let loss_3d = if lc.lambda_3d > 0.0 {
        let nl = loss_3d(field, acts.encodings.view(), neighbors, lc, rng)?;
        d_enc += &field.classifier_backward(acts.encodings.view(), &(lc.lambda_3d * nl.d_logits), &mut gradients);
        nl.value
    } else {
        0.0
    };
    field.backward(&acts, &d_enc, &mut gradients);
    Ok(FrameLoss {
        loss_2d,
        loss_3d,
        total: lc.lambda_2d * loss_2d + lc.lambda_3d * loss_3d,
        gradients,
    })
}

/// Predicted object ID of every canonical Gaussian at time `t`.
pub fn classify_gaussians(field: &IdentityField, canonical: &CanonicalScene, t: f64) -> Result<Vec<u16>> {
    let enc = field.encodings(&canonical.positions(), t)?;
    Ok(IdentityField::argmax_rows(&field.logits(enc.view())))
}

/// Canonical indices whose predicted ID at `t` is `object_id`.
pub fn segment_at(field: &IdentityField, canonical: &CanonicalScene, t: f64, object_id: u32) -> Result<Vec<u32>> {
    if object_id as usize >= CLASS_COUNT {
        return Err(Error::Usage(format!("object ID {object_id} exceeds class capacity")));
    }
    let labels = classify_gaussians(field, canonical, t)?;
    Ok(members_of(canonical, &labels, object_id as u16))
}

/// Index sets for objects `1..=object_count`, one classification pass.
pub fn segment_all(field: &IdentityField, canonical: &CanonicalScene, t: f64) -> Result<Vec<Vec<u32>>> {
    let labels = classify_gaussians(field, canonical, t)?;
    Ok((1..=canonical.object_count as u16).map(|id| members_of(canonical, &labels, id)).collect())
}

fn members_of(canonical: &CanonicalScene, labels: &[u16], id: u16) -> Vec<u32> {
    canonical
        .gaussians
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == id)
        .map(|(g, _)| g.index)
        .collect()
}

/// Object-ID mask of a view predicted directly from the field at `t`.
pub fn predict_view(
    field: &IdentityField,
    canonical: &CanonicalScene,
    motion: &MotionProgram,
    cam: &Camera,
    t: f64,
) -> Result<MaskImage> {
    let labels = classify_gaussians(field, canonical, t)?;
    let deformed = export_scene(canonical, motion, t)?;
    anything_mask_from_labels(&deformed, cam, &labels, MASK_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    /// Keep every `stride`-th training timestamp.
    pub stride: usize,
    pub outlier_neighbors: usize,
    pub outlier_sigma: f64,
    pub lambda_proj: f64,
    pub remove_outliers: bool,
    pub prune_boundary: bool,
    /// Remove members with negative rather than positive projection
    /// gradient.
    pub invert_prune: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            stride: 1,
            outlier_neighbors: 10,
            outlier_sigma: 2.0,
            lambda_proj: 1.0,
            remove_outliers: true,
            prune_boundary: true,
            invert_prune: false,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("refinement stride must be at least 1".into()));
        }
        if self.outlier_neighbors == 0 || !(self.outlier_sigma.is_finite() && self.lambda_proj >= 0.0) {
            return Err(Error::Config("invalid outlier or projection parameters".into()));
        }
        Ok(())
    }
}

/// Drops members whose mean distance to their nearest co-members exceeds
/// the mean of that statistic by `outlier_sigma` standard deviations.
/// `positions` is indexed by canonical index.
pub fn remove_outliers(indices: &[u32], positions: &[Vector3<f64>], cfg: &RefinementConfig) -> Vec<u32> {
    let k = cfg.outlier_neighbors;
    if indices.len() <= k {
        return indices.to_vec();
    }
    let pts: Vec<Vector3<f64>> = indices.iter().map(|i| positions[*i as usize]).collect();
    let index = NeighborIndex::new(&pts);
    let mean_dist: Vec<f64> = (0..pts.len())
        .map(|j| {
            index
                .nearest(&pts[j], k, Some(j))
                .iter()
                .map(|(_, d2)| d2.sqrt())
                .sum::<f64>()
                / k as f64
        })
        .collect();
    let n = mean_dist.len() as f64;
    let mu = mean_dist.iter().sum::<f64>() / n;
    let sigma = (mean_dist.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n).sqrt();
    let limit = mu + cfg.outlier_sigma * sigma;
    indices
        .iter()
        .zip(&mean_dist)
        .filter(|(_, d)| **d <= limit)
        .map(|(i, _)| *i)
        .collect()
}

/// Projection-gradient pruning of one object's members against the target
/// region of `object_id` in `frame`.
///
/// The members are rendered as a point mask through the full deformed
/// scene. A member is dropped when its presence increases the projection
/// loss, i.e. when its compositing weight falls more on off-target pixels
/// (scaled by `lambda_proj`) than on target pixels. Objects absent from the
/// frame's mask are left untouched.
pub fn prune_boundary(
    indices: &[u32],
    scene: &DeformedScene,
    frame: &TrainingFrame,
    object_id: u16,
    cfg: &RefinementConfig,
) -> Result<Vec<u32>> {
    let target = frame.mask.region(object_id);
    if !target.iter().any(|t| *t) {
        return Ok(indices.to_vec());
    }
    let slot_of = slot_map(scene);
    let mut payload = vec![0.0; scene.gaussians.len()];
    for i in indices {
        let slot = slot_of(*i)?;
        payload[slot] = 1.0;
    }
    let out = Projection::new(&scene.gaussians, &frame.camera).render(&payload, 1, true)?;
    let (_, grad) = loss_proj(&out, &target, cfg.lambda_proj)?;
    let mut kept = Vec::with_capacity(indices.len());
    for i in indices {
        let g = grad[slot_of(*i)?];
        let drop = if cfg.invert_prune { g < 0.0 } else { g > 0.0 };
        if !drop {
            kept.push(*i);
        }
    }
    Ok(kept)
}

fn slot_map(scene: &DeformedScene) -> impl Fn(u32) -> Result<usize> + '_ {
    let identity = scene.gaussians.iter().enumerate().all(|(s, g)| g.index as usize == s);
    let mut lookup = std::collections::HashMap::new();
    if !identity {
        for (s, g) in scene.gaussians.iter().enumerate() {
            lookup.insert(g.index, s);
        }
    }
    move |i: u32| {
        if identity {
            if (i as usize) < scene.gaussians.len() {
                return Ok(i as usize);
            }
        } else if let Some(s) = lookup.get(&i) {
            return Ok(*s);
        }
        Err(Error::Usage(format!("Gaussian {i} is not in the scene")))
    }
}

/// Outlier removal followed by boundary pruning for every object.
/// `raw[k]` holds the members of object `k + 1`. Each object is pruned
/// against the frame nearest the scene's timestamp among those whose mask
/// contains the object.
pub fn refine_segmentation(
    raw: &[Vec<u32>],
    scene: &DeformedScene,
    frames: &[TrainingFrame],
    cfg: &RefinementConfig,
) -> Result<Vec<Vec<u32>>> {
    let positions = scene_positions_by_index(scene);
    raw.iter()
        .enumerate()
        .map(|(k, members)| {
            let id = k as u16 + 1;
            let mut m = members.clone();
            if cfg.remove_outliers {
                m = remove_outliers(&m, &positions, cfg);
            }
            if cfg.prune_boundary {
                match nearest_frame_with(frames, scene.timestamp, id) {
                    Some(f) => m = prune_boundary(&m, scene, &frames[f], id, cfg)?,
                    None => log::warn!("object {id} appears in no mask; boundary pruning skipped"),
                }
            }
            Ok(m)
        })
        .collect()
}

fn scene_positions_by_index(scene: &DeformedScene) -> Vec<Vector3<f64>> {
    let n = scene.gaussians.iter().map(|g| g.index as usize + 1).max().unwrap_or(0);
    let mut p = vec![Vector3::zeros(); n];
    for g in &scene.gaussians {
        p[g.index as usize] = g.position;
    }
    p
}

/// Index of the frame whose timestamp is nearest `t`; ties go to the
/// earlier frame in the list.
pub fn nearest_frame(frames: &[TrainingFrame], t: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in frames.iter().enumerate() {
        let d = (f.timestamp - t).abs();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Like [`nearest_frame`], restricted to frames whose mask contains
/// `object_id`.
pub fn nearest_frame_with(frames: &[TrainingFrame], t: f64, object_id: u16) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in frames.iter().enumerate() {
        let d = (f.timestamp - t).abs();
        if best.is_none_or(|(_, bd)| d < bd) && f.mask.labels.contains(&object_id) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub t_index: usize,
    pub object_id: u16,
    pub indices: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub stride: usize,
    pub lambda_proj: f64,
    pub outlier_neighbors: usize,
    pub outlier_sigma: f64,
    pub remove_outliers: bool,
    pub prune_boundary: bool,
    #[serde(default)]
    pub invert_prune: bool,
    pub build_seconds: f64,
}

impl TableMeta {
    /// The refinement settings the table was built with.
    pub fn refinement(&self) -> RefinementConfig {
        RefinementConfig {
            stride: self.stride,
            outlier_neighbors: self.outlier_neighbors,
            outlier_sigma: self.outlier_sigma,
            lambda_proj: self.lambda_proj,
            remove_outliers: self.remove_outliers,
            prune_boundary: self.prune_boundary,
            invert_prune: self.invert_prune,
        }
    }
}

/// Per-timestamp object membership, queried by nearest timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityTable {
    pub timestamps: Vec<f64>,
    pub entries: Vec<TableEntry>,
    pub meta: TableMeta,
}

impl IdentityTable {
    pub fn empty() -> Self {
        IdentityTable {
            timestamps: Vec::new(),
            entries: Vec::new(),
            meta: TableMeta {
                stride: 1,
                lambda_proj: 1.0,
                outlier_neighbors: 10,
                outlier_sigma: 2.0,
                remove_outliers: true,
                prune_boundary: true,
                invert_prune: false,
                build_seconds: 0.0,
            },
        }
    }

    /// Index of the stored timestamp nearest `t`; exact ties go to the
    /// earlier one.
    pub fn nearest_index(&self, t: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, ts) in self.timestamps.iter().enumerate() {
            let d = (ts - t).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Members of `object_id` at the stored timestamp nearest `t`; empty
    /// for unknown objects or an empty table.
    pub fn lookup(&self, t: f64, object_id: u16) -> &[u32] {
        let Some(ti) = self.nearest_index(t) else {
            return &[];
        };
        self.entries
            .iter()
            .find(|e| e.t_index == ti && e.object_id == object_id)
            .map(|e| e.indices.as_slice())
            .unwrap_or(&[])
    }

    /// Sorted object IDs with an entry.
    pub fn objects(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.entries.iter().map(|e| e.object_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Checks ordering and per-timestamp disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("table timestamps are not strictly increasing".into()));
        }
        for (ti, _) in self.timestamps.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for e in self.entries.iter().filter(|e| e.t_index == ti) {
                for i in &e.indices {
                    if !seen.insert(*i) {
                        return Err(Error::Data(format!(
                            "Gaussian {i} belongs to two objects at timestamp index {ti}"
                        )));
                    }
                }
            }
        }
        if let Some(e) = self.entries.iter().find(|e| e.t_index >= self.timestamps.len()) {
            return Err(Error::Data(format!("entry references missing timestamp index {}", e.t_index)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: IdentityTable = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        t.validate()?;
        Ok(t)
    }
}

/// Sorted distinct frame timestamps.
pub fn training_timestamps(frames: &[TrainingFrame]) -> Vec<f64> {
    let mut ts: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

/// Segments and refines every object at every `stride`-th training
/// timestamp. Timestamps are processed in parallel.
pub fn build_table(
    field: &IdentityField,
    canonical: &CanonicalScene,
    motion: &MotionProgram,
    frames: &[TrainingFrame],
    cfg: &RefinementConfig,
) -> Result<IdentityTable> {
    cfg.validate()?;
    let start = Instant::now();
    let timestamps: Vec<f64> = training_timestamps(frames).into_iter().step_by(cfg.stride).collect();
    let per_t: Vec<Vec<Vec<u32>>> = timestamps
        .par_iter()
        .map(|&t| refine_at(field, canonical, motion, frames, t, cfg))
        .collect::<Result<_>>()?;
    let mut entries = Vec::new();
    for (t_index, sets) in per_t.into_iter().enumerate() {
        for (k, indices) in sets.into_iter().enumerate() {
            entries.push(TableEntry {
                t_index,
                object_id: k as u16 + 1,
                indices,
            });
        }
    }
    let table = IdentityTable {
        timestamps,
        entries,
        meta: TableMeta {
            stride: cfg.stride,
            lambda_proj: cfg.lambda_proj,
            outlier_neighbors: cfg.outlier_neighbors,
            outlier_sigma: cfg.outlier_sigma,
            remove_outliers: cfg.remove_outliers,
            prune_boundary: cfg.prune_boundary,
            invert_prune: cfg.invert_prune,
            build_seconds: start.elapsed().as_secs_f64(),
        },
    };
    table.validate()?;
    Ok(table)
}

/// Segmentation plus refinement at one timestamp, recomputed from the
/// field; one set per object `1..=object_count`.
pub fn refine_at(
    field: &IdentityField,
    canonical: &CanonicalScene,
    motion: &MotionProgram,
    frames: &[TrainingFrame],
    t: f64,
    cfg: &RefinementConfig,
) -> Result<Vec<Vec<u32>>> {
    let raw = segment_all(field, canonical, t)?;
    let deformed = export_scene(canonical, motion, t)?;
    refine_segmentation(&raw, &deformed, frames, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::PositionalEncodingConfig;
    use crate::scene::Gaussian;
    use nalgebra::{Matrix4, UnitQuaternion};

    fn pt(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn cfg() -> RefinementConfig {
        RefinementConfig::default()
    }

    #[test]
    fn far_point_is_an_outlier() {
        let mut positions = Vec::new();
        for i in 0..40 {
            let a = i as f64 * 0.7;
            positions.push(pt(0.1 * a.cos(), 0.1 * a.sin(), 0.01 * (i % 7) as f64));
        }
        positions.push(pt(10.0, 0.0, 0.0));
        let idx: Vec<u32> = (0..41).collect();
        let kept = remove_outliers(&idx, &positions, &cfg());
        assert!(!kept.contains(&40));
        assert!(kept.len() >= 38);
    }

    #[test]
    fn identical_points_and_small_sets_are_kept() {
        let positions = vec![pt(1.0, 2.0, 3.0); 30];
        let idx: Vec<u32> = (0..30).collect();
        assert_eq!(remove_outliers(&idx, &positions, &cfg()), idx);
        let few: Vec<u32> = (0..10).collect();
        let spread: Vec<Vector3<f64>> = (0..10).map(|i| pt(i as f64 * 100.0, 0.0, 0.0)).collect();
        assert_eq!(remove_outliers(&few, &spread, &cfg()), few);
    }

    fn splat(index: u32, x: f64, y: f64, s: f64) -> Gaussian {
        Gaussian {
            index,
            position: pt(x, y, 5.0),
            rotation: UnitQuaternion::identity(),
            scale: Vector3::repeat(s),
            opacity: 0.9,
            color: Vector3::zeros(),
        }
    }

    fn frame_with_left_target(lo: usize) -> TrainingFrame {
        let cam = Camera {
            extrinsic: Matrix4::identity(),
            fx: 20.0,
            fy: 20.0,
            cx: 15.5,
            cy: 15.5,
            width: 32,
            height: 32,
        };
        let mut mask = MaskImage::new(32, 32);
        for y in 0..32 {
            for x in 0..lo {
                mask.labels[y * 32 + x] = 1;
            }
        }
        TrainingFrame {
            camera: cam,
            timestamp: 0.0,
            image: None,
            mask,
        }
    }

    #[test]
    fn pruning_keeps_inside_and_drops_outside_members() {
        let scene = DeformedScene {
            timestamp: 0.0,
            gaussians: vec![splat(0, -2.0, 0.0, 0.1), splat(1, 2.0, 0.0, 0.1)],
        };
        let frame = frame_with_left_target(16);
        let kept = prune_boundary(&[0, 1], &scene, &frame, 1, &cfg()).unwrap();
        assert_eq!(kept, vec![0]);
        let inverted = RefinementConfig {
            invert_prune: true,
            ..cfg()
        };
        assert_eq!(prune_boundary(&[0, 1], &scene, &frame, 1, &inverted).unwrap(), vec![1]);
        // Object absent from the mask: nothing pruned.
        assert_eq!(prune_boundary(&[0, 1], &scene, &frame, 2, &cfg()).unwrap(), vec![0, 1]);
    }

    /// A member whose weight falls 70% on the target region survives a
    /// symmetric penalty and is removed when spill costs three times more.
    #[test]
    fn straddling_member_depends_on_spill_penalty() {
        let scene = DeformedScene {
            timestamp: 0.0,
            gaussians: vec![splat(0, 0.0, 0.0, 1.2)],
        };
        let probe = frame_with_left_target(16);
        let out = Projection::new(&scene.gaussians, &probe.camera).render(&[1.0], 1, true).unwrap();
        let rec = out.weights.as_ref().unwrap();
        let col_weight: Vec<f64> = (0..32)
            .map(|x| (0..32).map(|y| rec.pixel(y * 32 + x).iter().map(|e| e.1).sum::<f64>()).sum())
            .collect();
        let total: f64 = col_weight.iter().sum();
        // Choose the split column giving the inside fraction closest to 0.7.
        let (mut best, mut best_gap, mut acc) = (0, f64::INFINITY, 0.0);
        for (x, w) in col_weight.iter().enumerate() {
            acc += w;
            let gap = (acc / total - 0.7).abs();
            if gap < best_gap {
                best_gap = gap;
                best = x + 1;
            }
        }
        let frame = frame_with_left_target(best);
        let inside: f64 = col_weight[..best].iter().sum::<f64>() / total;
        assert!((inside - 0.7).abs() < 0.04, "inside fraction {inside}");
        let keep = prune_boundary(&[0], &scene, &frame, 1, &cfg()).unwrap();
        assert_eq!(keep, vec![0]);
        let harsh = RefinementConfig {
            lambda_proj: 3.0,
            ..cfg()
        };
        assert!(prune_boundary(&[0], &scene, &frame, 1, &harsh).unwrap().is_empty());
    }

    fn table(ts: &[f64]) -> IdentityTable {
        let mut t = IdentityTable::empty();
        t.timestamps = ts.to_vec();
        for (i, _) in ts.iter().enumerate() {
            t.entries.push(TableEntry {
                t_index: i,
                object_id: 1,
                indices: vec![i as u32],
            });
        }
        t
    }

    #[test]
    fn lookup_uses_nearest_timestamp_with_earlier_ties() {
        let t = table(&[0.0, 0.5, 1.0]);
        assert_eq!(t.lookup(0.5, 1), &[1]);
        assert_eq!(t.lookup(0.3, 1), &[1]);
        assert_eq!(t.lookup(0.9, 1), &[2]);
        assert_eq!(t.lookup(0.3, 7), &[] as &[u32]);
        let t2 = table(&[0.0, 0.5]);
        assert_eq!(t2.lookup(0.25, 1), &[0]);
        assert_eq!(IdentityTable::empty().lookup(0.3, 1), &[] as &[u32]);
    }

    #[test]
    fn table_validation_and_json_round_trip() {
        let mut t = table(&[0.0, 0.25]);
        t.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("table.json");
        t.save(&p).unwrap();
        assert_eq!(IdentityTable::load(&p).unwrap(), t);
        t.entries.push(TableEntry {
            t_index: 0,
            object_id: 2,
            indices: vec![0],
        });
        assert!(t.validate().is_err());
        let unsorted = table(&[0.5, 0.25]);
        assert!(unsorted.validate().is_err());
    }

    fn tiny_field() -> IdentityField {
        IdentityField::new(
            FieldConfig {
                encoding: PositionalEncodingConfig {
                    position_freqs: 2,
                    time_freqs: 1,
                },
                temporal: true,
            },
            3,
        )
    }

    fn tiny_scene(n: u32, objects: u32) -> CanonicalScene {
        CanonicalScene {
            gaussians: (0..n).map(|i| splat(i, i as f64 * 0.1, 0.0, 0.05)).collect(),
            object_count: objects,
        }
    }

    #[test]
    fn forced_classifier_assigns_everything_to_one_class() {
        let mut f = tiny_field();
        f.classifier.weight.fill(0.0);
        f.classifier.bias.fill(0.0);
        f.classifier.bias[3] = 5.0;
        let scene = tiny_scene(12, 4);
        assert_eq!(segment_at(&f, &scene, 0.2, 3).unwrap(), (0..12).collect::<Vec<_>>());
        assert!(segment_at(&f, &scene, 0.2, 2).unwrap().is_empty());
        assert!(matches!(segment_at(&f, &scene, 0.2, 256), Err(Error::Usage(_))));
    }

    #[test]
    fn segmentation_partitions_gaussians() {
        let f = tiny_field();
        let scene = tiny_scene(40, 255);
        let labels = classify_gaussians(&f, &scene, 0.4).unwrap();
        let mut all: Vec<u32> = Vec::new();
        for id in 0..256u32 {
            let s = segment_at(&f, &scene, 0.4, id).unwrap();
            for i in &s {
                assert_eq!(labels[*i as usize] as u32, id);
            }
            all.extend(s);
        }
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn zero_iterations_returns_initial_parameters() {
        let scene = tiny_scene(12, 1);
        let motion = MotionProgram::all_static(12, 1);
        let frame = frame_with_left_target(8);
        let cfg = TrainConfig {
            iterations: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&scene, &motion, &[frame], &cfg).unwrap();
        assert_eq!(out.field, IdentityField::new(cfg.field, 4));
        assert!(out.trace.is_empty());
        assert!(matches!(train(&scene, &motion, &[], &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn nearest_frame_tie_goes_to_first() {
        let mut a = frame_with_left_target(1);
        a.timestamp = 0.2;
        let mut b = a.clone();
        b.timestamp = 0.4;
        assert_eq!(nearest_frame(&[a.clone(), b.clone()], 0.3), Some(0));
        assert_eq!(nearest_frame(&[a, b], 0.31), Some(1));
        assert_eq!(nearest_frame(&[], 0.3), None);
    }
}
