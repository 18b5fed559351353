//! Synthetic scenes with exact per-Gaussian ground truth, noisy tracker-like
//! masks, and the on-disk dataset layout.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::{export_scene, ground_truth_labels, Members, MotionProgram, Track, Trajectory};
use crate::editing::{anything_mask_from_labels, MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::images::{MaskImage, RgbImage};
use crate::pipeline::TrainingFrame;
use crate::scene::{Camera, CanonicalScene, Gaussian, MAX_OBJECTS};
use crate::splat::Projection;

/// Corruptions applied to ground-truth masks to imitate a video tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Probability that an object's whole region becomes void in a frame.
    pub void_dropout: f64,
    /// Probability that a pixel near a label boundary takes the label
    /// across the boundary.
    pub boundary_flip: f64,
    /// Chebyshev radius defining "near a boundary".
    pub boundary_distance: usize,
    /// Probability that an object's region is relabeled as another object
    /// in a frame.
    pub wrong_id: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            void_dropout: 0.0,
            boundary_flip: 0.0,
            boundary_distance: 2,
            wrong_id: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("void_dropout", self.void_dropout),
            ("boundary_flip", self.boundary_flip),
            ("wrong_id", self.wrong_id),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("noise rate {name} = {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Applies the channels in order: boundary flips (computed from the
    /// input labels), wrong IDs, then void dropout.
    pub fn corrupt<R: Rng>(&self, mask: &MaskImage, rng: &mut R) -> MaskImage {
        let (w, h) = (mask.width, mask.height);
        let src = &mask.labels;
        let mut out = src.clone();
        let d = self.boundary_distance as isize;
        if self.boundary_flip > 0.0 {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let here = src[y as usize * w + x as usize];
                    let other = (1..=d).find_map(|r| {
                        ring(x, y, r)
                            .filter(|(u, v)| *u >= 0 && *v >= 0 && *u < w as isize && *v < h as isize)
                            .map(|(u, v)| src[v as usize * w + u as usize])
                            .find(|l| *l != here)
                    });
                    if let Some(l) = other {
                        if rng.gen_bool(self.boundary_flip) {
                            out[y as usize * w + x as usize] = l;
                        }
                    }
                }
            }
        }
        let ids = mask.ids();
        if self.wrong_id > 0.0 && ids.len() >= 2 {
            let before = out.clone();
            for id in &ids {
                if rng.gen_bool(self.wrong_id) {
                    let others: Vec<u16> = ids.iter().copied().filter(|o| o != id).collect();
                    let to = others[rng.gen_range(0..others.len())];
                    for (o, b) in out.iter_mut().zip(&before) {
                        if b == id {
                            *o = to;
                        }
                    }
                }
            }
        }
        if self.void_dropout > 0.0 {
            let present = MaskImage {
                width: w,
                height: h,
                labels: out.clone(),
            }
            .ids();
            for id in present {
                if rng.gen_bool(self.void_dropout) {
                    for o in out.iter_mut().filter(|o| **o == id) {
                        *o = 0;
                    }
                }
            }
        }
        MaskImage {
            width: w,
            height: h,
            labels: out,
        }
    }
}

/// Pixels at Chebyshev distance exactly `r` from `(x, y)`, row by row.
fn ring(x: isize, y: isize, r: isize) -> impl Iterator<Item = (isize, isize)> {
    (-r..=r).flat_map(move |dy| {
        (-r..=r).filter_map(move |dx| {
            if dx.abs() == r || dy.abs() == r {
                Some((x + dx, y + dy))
            } else {
                None
            }
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub object_count: u32,
    pub gaussians_per_object: usize,
    /// Gaussians that serve object 1 before the transfer time and object 2
    /// afterwards.
    pub drift_cohort: usize,
    pub transfer_time: f64,
    /// Distance of the drift cohort's center from object 1's center, in
    /// blob radii.
    pub lobe_distance: f64,
    pub frame_count: usize,
    pub held_out_count: usize,
    pub width: usize,
    pub height: usize,
    pub blob_radius: f64,
    /// Center-to-center distance between neighboring objects.
    pub spacing: f64,
    /// Training camera azimuth sweep over the sequence, radians.
    pub orbit: f64,
    /// Objects move (translate or spin) when true.
    pub animate: bool,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            object_count: 2,
            gaussians_per_object: 160,
            drift_cohort: 0,
            transfer_time: 0.5,
            lobe_distance: 0.6,
            frame_count: 24,
            held_out_count: 8,
            width: 48,
            height: 48,
            blob_radius: 0.5,
            spacing: 1.6,
            orbit: 0.3,
            animate: true,
            noise: NoiseModel::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.object_count == 0 || self.object_count > MAX_OBJECTS {
            return Err(Error::Config(format!(
                "object count {} outside 1..={MAX_OBJECTS}",
                self.object_count
            )));
        }
        if self.gaussians_per_object == 0 || self.frame_count == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("Gaussian count, frame count and image size must be positive".into()));
        }
        if self.drift_cohort > 0 && self.object_count < 2 {
            return Err(Error::Config("a drift cohort needs at least two objects".into()));
        }
        if !(0.0..=1.0).contains(&self.transfer_time) {
            return Err(Error::Config("transfer time outside [0, 1]".into()));
        }
        if !(self.blob_radius > 0.0 && self.spacing > 0.0) {
            return Err(Error::Config("blob radius and spacing must be positive".into()));
        }
        self.noise.validate()
    }

    pub fn gaussian_count(&self) -> usize {
        self.object_count as usize * self.gaussians_per_object + self.drift_cohort
    }

    fn center(&self, k: usize) -> Vector3<f64> {
        let off = (self.object_count as f64 - 1.0) / 2.0;
        Vector3::new((k as f64 - off) * self.spacing, 0.0, 0.0)
    }

    fn lobe_radius(&self) -> f64 {
        let ratio = self.drift_cohort as f64 / self.gaussians_per_object as f64;
        self.blob_radius * ratio.cbrt().clamp(0.3, 1.0)
    }

    fn focal(&self) -> f64 {
        let half = (self.object_count as f64 - 1.0) / 2.0 * self.spacing + self.blob_radius * 1.6;
        0.5 * self.width.min(self.height) as f64 * CAMERA_DISTANCE / half
    }

    fn camera(&self, azimuth: f64, elevation: f64) -> Camera {
        let eye = Vector3::new(CAMERA_DISTANCE * azimuth.sin(), -elevation, -CAMERA_DISTANCE * azimuth.cos());
        let f = self.focal();
        Camera::look_at(
            eye,
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            f,
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    /// Monocular training camera at time `t`.
    pub fn training_camera(&self, t: f64) -> Camera {
        self.camera(self.orbit * (t - 0.5), 0.6)
    }

    pub fn held_out_camera(&self) -> Camera {
        self.camera(0.5 * self.orbit + 0.1, 1.0)
    }

    pub fn training_timestamps(&self) -> Vec<f64> {
        if self.frame_count == 1 {
            return vec![0.0];
        }
        (0..self.frame_count).map(|i| i as f64 / (self.frame_count - 1) as f64).collect()
    }

    /// Midpoints between consecutive training timestamps, spread evenly.
    pub fn held_out_timestamps(&self) -> Vec<f64> {
        let gaps = self.frame_count.saturating_sub(1);
        if gaps == 0 || self.held_out_count == 0 {
            return Vec::new();
        }
        let n = self.held_out_count.min(gaps);
        let step = gaps as f64 / n as f64;
        (0..n)
            .map(|j| {
                let i = ((j as f64 + 0.5) * step).floor() as usize;
                (i.min(gaps - 1) as f64 + 0.5) / gaps as f64
            })
            .collect()
    }
}

const CAMERA_DISTANCE: f64 = 4.0;

/// A rendered view with its clean and corrupted masks.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFrame {
    pub camera: Camera,
    pub timestamp: f64,
    pub image: RgbImage,
    pub gt: MaskImage,
    pub mask: MaskImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub scene: CanonicalScene,
    pub motion: MotionProgram,
    pub train: Vec<DatasetFrame>,
    pub held_out: Vec<DatasetFrame>,
}

impl Dataset {
    /// Training frames supervised by the noisy masks.
    pub fn training_frames(&self) -> Vec<TrainingFrame> {
        self.train.iter().map(|f| to_training(f, &f.mask)).collect()
    }

    /// Training frames supervised by the clean masks.
    pub fn clean_training_frames(&self) -> Vec<TrainingFrame> {
        self.train.iter().map(|f| to_training(f, &f.gt)).collect()
    }
}

fn to_training(f: &DatasetFrame, mask: &MaskImage) -> TrainingFrame {
    TrainingFrame {
        camera: f.camera.clone(),
        timestamp: f.timestamp,
        image: Some(f.image.clone()),
        mask: mask.clone(),
    }
}

#[allow(clippy::approx_constant)]
fn random_unit(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(
        rng.gen_range(-3.14..3.14),
        rng.gen_range(-1.5..1.5),
        rng.gen_range(-3.14..3.14),
    )
}

fn in_ball(rng: &mut ChaCha8Rng, radius: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

fn object_color(k: usize) -> Vector3<f64> {
    const BASE: [[f64; 3]; 6] = [
        [0.85, 0.25, 0.2],
        [0.2, 0.55, 0.85],
        [0.3, 0.8, 0.3],
        [0.9, 0.75, 0.2],
        [0.6, 0.3, 0.8],
        [0.2, 0.8, 0.75],
    ];
    let b = BASE[k % BASE.len()];
    let shade = 1.0 - 0.15 * (k / BASE.len() % 4) as f64;
    Vector3::new(b[0], b[1], b[2]) * shade
}

/// Builds the canonical scene and motion program for `spec`.
pub fn build_scene(spec: &SceneSpec) -> Result<(CanonicalScene, MotionProgram)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gaussians = Vec::with_capacity(spec.gaussian_count());
    let mut push = |rng: &mut ChaCha8Rng, center: Vector3<f64>, radius: f64, color: Vector3<f64>| {
        let s = radius * 0.14;
        gaussians.push(Gaussian {
            index: gaussians.len() as u32,
            position: center + in_ball(rng, radius),
            rotation: random_unit(rng),
            scale: Vector3::new(rng.gen_range(0.7..1.3), rng.gen_range(0.7..1.3), rng.gen_range(0.7..1.3)) * s,
            opacity: rng.gen_range(0.5..0.9),
            color: color + Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05)),
        });
    };
    let mut tracks = Vec::new();
    let p = spec.gaussians_per_object as u32;
    for k in 0..spec.object_count as usize {
        for _ in 0..p {
            push(&mut rng, spec.center(k), spec.blob_radius, object_color(k));
        }
        let trajectory = if !spec.animate {
            Trajectory::Static
        } else if k % 2 == 0 {
            Trajectory::Linear {
                velocity: [0.0, if k % 4 == 0 { 0.3 } else { -0.3 }, 0.0],
            }
        } else {
            let c = spec.center(k);
            Trajectory::Circular {
                center: [c.x, c.y, c.z],
                axis: [0.0, 1.0, 0.0],
                angular_velocity: 1.2,
            }
        };
        tracks.push(Track {
            members: Members::Range {
                start: k as u32 * p,
                end: (k as u32 + 1) * p,
            },
            trajectory,
            object_id: Some(k as u32 + 1),
        });
    }
    if spec.drift_cohort > 0 {
        let lobe_center = spec.center(0) + Vector3::new(0.0, -spec.lobe_distance * spec.blob_radius, 0.0);
        for _ in 0..spec.drift_cohort {
            push(&mut rng, lobe_center, spec.lobe_radius(), object_color(0));
        }
        let offset = spec.center(1) - spec.center(0);
        let start = spec.object_count * p;
        tracks.push(Track {
            members: Members::Range {
                start,
                end: start + spec.drift_cohort as u32,
            },
            trajectory: Trajectory::Drift {
                from_track: 0,
                to_track: 1,
                transfer_time: spec.transfer_time,
                blend_width: 0.0,
                offset: [offset.x, offset.y, offset.z],
            },
            object_id: None,
        });
    }
    let scene = CanonicalScene {
        gaussians,
        object_count: spec.object_count,
    };
    let motion = MotionProgram { tracks };
    scene.validate()?;
    motion.validate(&scene)?;
    Ok((scene, motion))
}

/// A scene extended with spurious Gaussians meant to contaminate raw
/// segmentations. The added Gaussians belong to no object.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub scene: CanonicalScene,
    pub motion: MotionProgram,
    /// `outliers[k]` are far from object `k + 1` and move with it.
    pub outliers: Vec<Vec<u32>>,
    /// `straddlers[k]` sit on the silhouette rim of object `k + 1`.
    pub straddlers: Vec<Vec<u32>>,
}

impl Injection {
    /// All spurious indices attached to object `object_id`.
    pub fn spurious(&self, object_id: u16) -> Vec<u32> {
        let k = object_id as usize - 1;
        self.outliers[k].iter().chain(&self.straddlers[k]).copied().collect()
    }
}

/// Appends `fraction` of each object's size as far outliers and as many
/// again as rim straddlers, all riding the object's trajectory.
///
/// Outliers land 3 to 5 object radii from the object center. Straddlers
/// are placed just beyond the radius along the image-vertical axis, so
/// their footprints overlap the object's silhouette edge.
pub fn inject_spurious_members(
    scene: &CanonicalScene,
    motion: &MotionProgram,
    fraction: f64,
    seed: u64,
) -> Result<Injection> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("injection fraction {fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    let mut motion_out = motion.clone();
    let mut outliers = Vec::new();
    let mut straddlers = Vec::new();
    for id in 1..=scene.object_count {
        let track = motion
            .tracks
            .iter()
            .find(|tr| tr.object_id == Some(id) && !matches!(tr.trajectory, Trajectory::Drift { .. }))
            .ok_or_else(|| Error::Data(format!("object {id} has no track")))?;
        let members = track.members.indices();
        let pts: Vec<Vector3<f64>> = members.iter().map(|i| scene.gaussians[*i as usize].position).collect();
        let center = pts.iter().sum::<Vector3<f64>>() / pts.len().max(1) as f64;
        let radius = pts.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
        let template = &scene.gaussians[members[0] as usize];
        let count = (fraction * members.len() as f64).ceil() as usize;
        let mut add = |rng: &mut ChaCha8Rng, position: Vector3<f64>| {
            let index = out.gaussians.len() as u32;
            out.gaussians.push(Gaussian {
                index,
                position,
                rotation: random_unit(rng),
                scale: Vector3::repeat(radius * 0.14),
                opacity: 0.7,
                color: template.color,
            });
            index
        };
        let far: Vec<u32> = (0..count)
            .map(|_| {
                let dir = in_ball(&mut rng, 1.0).normalize();
                let d = rng.gen_range(3.0..5.0) * radius;
                add(&mut rng, center + dir * d)
            })
            .collect();
        let rim: Vec<u32> = (0..count)
            .map(|j| {
                let side = if j % 2 == 0 { 1.0 } else { -1.0 };
                let dir = Vector3::new(rng.gen_range(-0.2..0.2), side, 0.0).normalize();
                add(&mut rng, center + dir * radius * 1.3)
            })
            .collect();
        let mut all = far.clone();
        all.extend(&rim);
        motion_out.tracks.push(Track {
            members: Members::Explicit(all),
            trajectory: track.trajectory.clone(),
            object_id: None,
        });
        outliers.push(far);
        straddlers.push(rim);
    }
    out.validate()?;
    motion_out.validate(&out)?;
    Ok(Injection {
        scene: out,
        motion: motion_out,
        outliers,
        straddlers,
    })
}

/// Renders one view: color image and ground-truth ID mask.
pub fn render_view(
    scene: &CanonicalScene,
    motion: &MotionProgram,
    cam: &Camera,
    t: f64,
) -> Result<(RgbImage, MaskImage)> {
    let deformed = export_scene(scene, motion, t)?;
    let colors: Vec<f64> = deformed.gaussians.iter().flat_map(|g| [g.color.x, g.color.y, g.color.z]).collect();
    let out = Projection::new(&deformed.gaussians, cam).render(&colors, 3, false)?;
    let image = RgbImage::from_floats(cam.width, cam.height, &out.image)?;
    let labels = ground_truth_labels(motion, scene.len(), t)?;
    let gt = anything_mask_from_labels(&deformed, cam, &labels, MASK_THRESHOLD)?;
    Ok((image, gt))
}

/// Generates a full dataset; deterministic in `spec.seed` and
/// `spec.noise.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Dataset> {
    let (scene, motion) = build_scene(spec)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise.seed);
    let mut train = Vec::new();
    for t in spec.training_timestamps() {
        let cam = spec.training_camera(t);
        let (image, gt) = render_view(&scene, &motion, &cam, t)?;
        let mask = spec.noise.corrupt(&gt, &mut noise_rng);
        train.push(DatasetFrame {
            camera: cam,
            timestamp: t,
            image,
            gt,
            mask,
        });
    }
    let mut held_out = Vec::new();
    let cam = spec.held_out_camera();
    for t in spec.held_out_timestamps() {
        let (image, gt) = render_view(&scene, &motion, &cam, t)?;
        held_out.push(DatasetFrame {
            camera: cam.clone(),
            timestamp: t,
            image,
            mask: gt.clone(),
            gt,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        scene,
        motion,
        train,
        held_out,
    })
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    scene: CanonicalScene,
    motion: MotionProgram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub split: String,
    pub timestamp: f64,
    pub camera: Camera,
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    generator: String,
    format_version: u32,
    seed: u64,
    noise_seed: u64,
    spec: SceneSpec,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

impl Dataset {
    /// Writes `scene.json`, `cameras.json`, `manifest.json` and
    /// `frames/NNNN.{ppm,gt.pgm,mask.pgm}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let frames_dir = dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        write_json(
            &dir.join("scene.json"),
            &SceneFile {
                scene: self.scene.clone(),
                motion: self.motion.clone(),
            },
        )?;
        let mut records = Vec::new();
        let all = self.train.iter().map(|f| ("train", f)).chain(self.held_out.iter().map(|f| ("held_out", f)));
        for (n, (split, f)) in all.enumerate() {
            let id = format!("{n:04}");
            f.image.save(&frames_dir.join(format!("{id}.ppm")))?;
            f.gt.save(&frames_dir.join(format!("{id}.gt.pgm")))?;
            if split == "train" {
                f.mask.save(&frames_dir.join(format!("{id}.mask.pgm")))?;
            }
            records.push(FrameRecord {
                id,
                split: split.to_string(),
                timestamp: f.timestamp,
                camera: f.camera.clone(),
            });
        }
        write_json(&dir.join("cameras.json"), &CamerasFile { frames: records })?;
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                generator: "sa4d-synth".into(),
                format_version: 1,
                seed: self.spec.seed,
                noise_seed: self.spec.noise.seed,
                spec: self.spec.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let sf: SceneFile = read_json(&dir.join("scene.json"))?;
        sf.scene.validate()?;
        sf.motion.validate(&sf.scene)?;
        let cams: CamerasFile = read_json(&dir.join("cameras.json"))?;
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let frames_dir = dir.join("frames");
        let mut train = Vec::new();
        let mut held_out = Vec::new();
        for r in cams.frames {
            let image = RgbImage::load(&frames_dir.join(format!("{}.ppm", r.id)))?;
            let gt = MaskImage::load(&frames_dir.join(format!("{}.gt.pgm", r.id)))?;
            let frame = |mask: MaskImage| DatasetFrame {
                camera: r.camera.clone(),
                timestamp: r.timestamp,
                image: image.clone(),
                gt: gt.clone(),
                mask,
            };
            match r.split.as_str() {
                "train" => {
                    let mask = MaskImage::load(&frames_dir.join(format!("{}.mask.pgm", r.id)))?;
                    let f = frame(mask);
                    to_training(&f, &f.mask).validate()?;
                    train.push(f);
                }
                "held_out" => held_out.push(frame(gt.clone())),
                other => return Err(Error::Data(format!("frame {}: unknown split {other:?}", r.id))),
            }
        }
        if train.is_empty() {
            return Err(Error::Data(format!("{}: dataset has no training frames", dir.display())));
        }
        Ok(Dataset {
            spec: manifest.spec,
            scene: sf.scene,
            motion: sf.motion,
            train,
            held_out,
        })
    }
}
