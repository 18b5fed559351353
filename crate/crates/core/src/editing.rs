//! Object-level edits and anything-mask rendering.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::deformation::{export_scene, DeformedScene, MotionProgram};
use crate::error::{Error, Result};
use crate::images::{MaskImage, RgbImage};
use crate::pipeline::IdentityTable;
use crate::scene::{Camera, CanonicalScene, Gaussian};
use crate::splat::{Projection, RenderOutput};

/// Mask value an object must exceed to claim a pixel.
pub const MASK_THRESHOLD: f64 = 0.1;

fn identity_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn unit_scale() -> f64 {
    1.0
}

/// One object-level edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    Remove {
        object_id: u16,
    },
    Recolor {
        object_id: u16,
        rgb: [f64; 3],
    },
    /// Duplicates an object under fresh indices, shifted by `translation`.
    Copy {
        object_id: u16,
        translation: [f64; 3],
    },
    /// Inserts an object of a named source scene, evaluated at
    /// `time_offset + time_scale·t` and moved by a rigid transform.
    Compose {
        source: String,
        object_id: u16,
        /// Quaternion `[w, x, y, z]`.
        #[serde(default = "identity_rotation")]
        rotation: [f64; 4],
        #[serde(default)]
        translation: [f64; 3],
        #[serde(default)]
        time_offset: f64,
        #[serde(default = "unit_scale")]
        time_scale: f64,
    },
}

/// Ordered edits; serialized as a bare JSON array.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EditScript {
    pub edits: Vec<Edit>,
}

impl EditScript {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// A scene that compose edits can draw objects from.
#[derive(Clone, Debug)]
pub struct SourceScene {
    pub canonical: CanonicalScene,
    pub motion: MotionProgram,
    pub table: IdentityTable,
}

/// Where an output Gaussian came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    Original { object_id: u16 },
    Copy { object_id: u16, of: u32 },
    Composed { source: String, object_id: u16, of: u32 },
}

impl Origin {
    /// Object ID: 0 for unsegmented originals.
    pub fn object_id(&self) -> u16 {
        match self {
            Origin::Original { object_id } | Origin::Copy { object_id, .. } | Origin::Composed { object_id, .. } => {
                *object_id
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EditedScene {
    pub scene: DeformedScene,
    /// Parallel to `scene.gaussians`.
    pub origins: Vec<Origin>,
}

impl EditedScene {
    pub fn labels(&self) -> Vec<u16> {
        self.origins.iter().map(Origin::object_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum GroupKey {
    Copy { object_id: u16 },
    Composed { source: String, object_id: u16 },
}

fn check_object(table: &IdentityTable, id: u16, what: &str) -> Result<()> {
    if table.objects().contains(&id) {
        Ok(())
    } else {
        Err(Error::Script(format!("{what} references object {id}, which the identity table does not contain")))
    }
}

fn validate_script(
    table: &IdentityTable,
    script: &EditScript,
    sources: &HashMap<String, SourceScene>,
) -> Result<()> {
    for (k, edit) in script.edits.iter().enumerate() {
        let what = format!("edit {k}");
        match edit {
            Edit::Remove { object_id } | Edit::Copy { object_id, .. } => check_object(table, *object_id, &what)?,
            Edit::Recolor { object_id, rgb } => {
                check_object(table, *object_id, &what)?;
                if rgb.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Script(format!("{what}: non-finite color")));
                }
            }
            Edit::Compose {
                source,
                object_id,
                rotation,
                translation,
                time_offset,
                time_scale,
            } => {
                let src = sources
                    .get(source)
                    .ok_or_else(|| Error::Script(format!("{what}: unknown source scene {source:?}")))?;
                check_object(&src.table, *object_id, &what)?;
                let finite = rotation
                    .iter()
                    .chain(translation)
                    .chain([time_offset, time_scale])
                    .all(|v| v.is_finite());
                if !finite || Quaternion::new(rotation[0], rotation[1], rotation[2], rotation[3]).norm() == 0.0 {
                    return Err(Error::Script(format!("{what}: invalid transform")));
                }
            }
        }
    }
    Ok(())
}

/// Applies `script` to the scene at time `t`.
///
/// Membership is resolved through `table` against the original Gaussians
/// only. The whole script is validated before anything is changed. The
/// output lists surviving originals first, then copied and composed groups
/// in a fixed order, so edits on disjoint objects commute.
pub fn apply_edits(
    canonical: &CanonicalScene,
    motion: &MotionProgram,
    table: &IdentityTable,
    script: &EditScript,
    sources: &HashMap<String, SourceScene>,
    t: f64,
) -> Result<EditedScene> {
    validate_script(table, script, sources)?;
    let base = export_scene(canonical, motion, t)?;
    let n = base.gaussians.len();
    let slot_of: HashMap<u32, usize> = base.gaussians.iter().enumerate().map(|(s, g)| (g.index, s)).collect();
    let owner = table_labels(&base, table, t);
    let members = |id: u16| -> Vec<usize> { table.lookup(t, id).iter().filter_map(|i| slot_of.get(i).copied()).collect() };

    let mut current: Vec<Option<Gaussian>> = base.gaussians.into_iter().map(Some).collect();
    let mut groups: BTreeMap<GroupKey, Vec<(Gaussian, u32)>> = BTreeMap::new();

    for edit in &script.edits {
        match edit {
            Edit::Remove { object_id } => {
                for s in members(*object_id) {
                    current[s] = None;
                }
            }
            Edit::Recolor { object_id, rgb } => {
                for s in members(*object_id) {
                    if let Some(g) = current[s].as_mut() {
                        g.color = Vector3::from(*rgb);
                    }
                }
            }
            Edit::Copy {
                object_id,
                translation,
            } => {
                let shift = Vector3::from(*translation);
                let group = groups.entry(GroupKey::Copy { object_id: *object_id }).or_default();
                for s in members(*object_id) {
                    if let Some(g) = &current[s] {
                        let mut c = g.clone();
                        c.position += shift;
                        group.push((c, g.index));
                    }
                }
            }
            Edit::Compose {
                source,
                object_id,
                rotation,
                translation,
                time_offset,
                time_scale,
            } => {
                let src = &sources[source];
                let ts = (time_offset + time_scale * t).clamp(0.0, 1.0);
                let exported = export_scene(&src.canonical, &src.motion, ts)?;
                let r = UnitQuaternion::from_quaternion(Quaternion::new(
                    rotation[0],
                    rotation[1],
                    rotation[2],
                    rotation[3],
                ));
                let shift = Vector3::from(*translation);
                let wanted: std::collections::HashSet<u32> = src.table.lookup(ts, *object_id).iter().copied().collect();
                let group = groups
                    .entry(GroupKey::Composed {
                        source: source.clone(),
                        object_id: *object_id,
                    })
                    .or_default();
                for g in exported.gaussians.iter().filter(|g| wanted.contains(&g.index)) {
                    let mut c = g.clone();
                    c.position = r * g.position + shift;
                    c.rotation = r * g.rotation;
                    group.push((c, g.index));
                }
            }
        }
    }

    let mut gaussians = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    for (s, g) in current.into_iter().enumerate() {
        if let Some(g) = g {
            gaussians.push(g);
            origins.push(Origin::Original { object_id: owner[s] });
        }
    }
    let mut next_index = canonical.gaussians.iter().map(|g| g.index + 1).max().unwrap_or(0);
    for (key, members) in groups {
        for (mut g, of) in members {
            match &key {
                GroupKey::Copy { object_id } => {
                    g.index = next_index;
                    next_index += 1;
                    origins.push(Origin::Copy {
                        object_id: *object_id,
                        of,
                    });
                }
                GroupKey::Composed { source, object_id } => origins.push(Origin::Composed {
                    source: source.clone(),
                    object_id: *object_id,
                    of,
                }),
            }
            gaussians.push(g);
        }
    }
    Ok(EditedScene {
        scene: DeformedScene { timestamp: t, gaussians },
        origins,
    })
}

/// Object-ID raster from per-Gaussian labels (0 = unassigned).
///
/// Every object's members are composited as a point mask through the whole
/// scene; each pixel takes the object with the largest mask value above
/// `threshold`, ties going to the lower ID.
pub fn anything_mask_from_labels(scene: &DeformedScene, cam: &Camera, labels: &[u16], threshold: f64) -> Result<MaskImage> {
    let ids = label_ids(labels);
    let mut mask = MaskImage::new(cam.width, cam.height);
    if ids.is_empty() {
        check_labels(scene, labels)?;
        return Ok(mask);
    }
    let out = render_point_masks(scene, cam, labels, &ids)?;
    for (p, m) in mask.labels.iter_mut().enumerate() {
        let px = out.pixel(p);
        let mut best: Option<usize> = None;
        for (c, v) in px.iter().enumerate() {
            if *v > threshold && best.is_none_or(|b| *v > px[b]) {
                best = Some(c);
            }
        }
        if let Some(c) = best {
            *m = ids[c];
        }
    }
    Ok(mask)
}

/// Soft point mask of each object in `ids`, composited through the whole
/// scene; `result[k]` is row-major over the image.
pub fn object_masks(scene: &DeformedScene, cam: &Camera, labels: &[u16], ids: &[u16]) -> Result<Vec<Vec<f64>>> {
    if ids.is_empty() {
        check_labels(scene, labels)?;
        return Ok(Vec::new());
    }
    let out = render_point_masks(scene, cam, labels, ids)?;
    let k = ids.len();
    Ok((0..k).map(|c| out.image.iter().skip(c).step_by(k).copied().collect()).collect())
}

fn label_ids(labels: &[u16]) -> Vec<u16> {
    let mut ids: Vec<u16> = labels.iter().copied().filter(|l| *l != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn check_labels(scene: &DeformedScene, labels: &[u16]) -> Result<()> {
    if labels.len() != scene.gaussians.len() {
        return Err(Error::Usage(format!(
            "{} labels for {} Gaussians",
            labels.len(),
            scene.gaussians.len()
        )));
    }
    Ok(())
}

fn render_point_masks(scene: &DeformedScene, cam: &Camera, labels: &[u16], ids: &[u16]) -> Result<RenderOutput> {
    check_labels(scene, labels)?;
    let k = ids.len();
    let mut payload = vec![0.0; labels.len() * k];
    for (s, l) in labels.iter().enumerate() {
        if let Some(c) = ids.iter().position(|id| id == l) {
            payload[s * k + c] = 1.0;
        }
    }
    Projection::new(&scene.gaussians, cam).render(&payload, k, false)
}

/// Per-Gaussian labels for `scene` from the table entry nearest `t`.
pub fn table_labels(scene: &DeformedScene, table: &IdentityTable, t: f64) -> Vec<u16> {
    let slot_of: HashMap<u32, usize> = scene.gaussians.iter().enumerate().map(|(s, g)| (g.index, s)).collect();
    let mut labels = vec![0u16; scene.gaussians.len()];
    for id in table.objects() {
        for i in table.lookup(t, id) {
            if let Some(s) = slot_of.get(i) {
                labels[*s] = id;
            }
        }
    }
    labels
}

/// Anything mask of `scene` with memberships from the table, plus its
/// color visualization.
pub fn render_anything_mask(
    scene: &DeformedScene,
    table: &IdentityTable,
    cam: &Camera,
    t: f64,
) -> Result<(MaskImage, RgbImage)> {
    let mask = anything_mask_from_labels(scene, cam, &table_labels(scene, table, t), MASK_THRESHOLD)?;
    let vis = colorize(&mask);
    Ok((mask, vis))
}

/// Fixed, well-separated display color for an object ID; void is black.
pub fn palette_color(id: u16) -> [u8; 3] {
    if id == 0 {
        return [0, 0, 0];
    }
    let h = (id as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |v: f64| (55.0 + 200.0 * v).round() as u8;
    [q(r), q(g), q(b)]
}

pub fn colorize(mask: &MaskImage) -> RgbImage {
    let mut img = RgbImage::new(mask.width, mask.height);
    for (p, id) in mask.labels.iter().enumerate() {
        img.data[p * 3..p * 3 + 3].copy_from_slice(&palette_color(*id));
    }
    img
}
