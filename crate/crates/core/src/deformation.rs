//! Analytic deformation: maps canonical Gaussians to a timestamp.
//!
//! A [`MotionProgram`] assigns every canonical Gaussian to exactly one
//! track. Drift tracks hand their members from one track's motion to
//! another's at a transfer time, which is how a Gaussian ends up serving a
//! different object partway through a sequence.

use nalgebra::{Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{CanonicalScene, Gaussian};

/// Which canonical indices a track covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Members {
    /// Half-open range `start..end`.
    Range { start: u32, end: u32 },
    Explicit(Vec<u32>),
}

impl Members {
    pub fn indices(&self) -> Vec<u32> {
        match self {
            Members::Range { start, end } => (*start..*end).collect(),
            Members::Explicit(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    Linear {
        velocity: [f64; 3],
    },
    /// Rigid rotation about `axis` through `center`, `angular_velocity`
    /// radians per unit time.
    Circular {
        center: [f64; 3],
        axis: [f64; 3],
        angular_velocity: f64,
    },
    /// Members follow `from_track` before the transfer and `to_track`
    /// afterwards, displaced by `offset` when on the destination track.
    Drift {
        from_track: usize,
        to_track: usize,
        transfer_time: f64,
        #[serde(default)]
        blend_width: f64,
        #[serde(default)]
        offset: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub members: Members,
    pub trajectory: Trajectory,
    /// Owning object; unset means background (void). Drift tracks inherit
    /// ownership from the tracks they reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionProgram {
    pub tracks: Vec<Track>,
}

/// The canonical scene evaluated at one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedScene {
    pub timestamp: f64,
    pub gaussians: Vec<Gaussian>,
}

impl DeformedScene {
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Applies a non-drift trajectory to a pose.
fn rigid_motion(
    traj: &Trajectory,
    position: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
    t: f64,
) -> (Vector3<f64>, UnitQuaternion<f64>) {
    match traj {
        Trajectory::Static | Trajectory::Drift { .. } => (position, rotation),
        Trajectory::Linear { velocity } => (position + Vector3::from(*velocity) * t, rotation),
        Trajectory::Circular {
            center,
            axis,
            angular_velocity,
        } => {
            let c = Vector3::from(*center);
            let r = UnitQuaternion::from_axis_angle(
                &Unit::new_normalize(Vector3::from(*axis)),
                angular_velocity * t,
            );
            (c + r * (position - c), r * rotation)
        }
    }
}

impl MotionProgram {
    /// A single static track covering `n` Gaussians owned by `object_id`.
    pub fn all_static(n: u32, object_id: u32) -> Self {
        MotionProgram {
            tracks: vec![Track {
                members: Members::Range { start: 0, end: n },
                trajectory: Trajectory::Static,
                object_id: Some(object_id),
            }],
        }
    }

    /// Checks coverage and references; returns the owning track of every
    /// canonical index.
    pub fn track_of_each(&self, n: usize) -> Result<Vec<usize>> {
        let mut owner = vec![usize::MAX; n];
        for (ti, track) in self.tracks.iter().enumerate() {
            for idx in track.members.indices() {
                let slot = owner.get_mut(idx as usize).ok_or_else(|| {
                    Error::Config(format!("track {ti} references index {idx} beyond scene size {n}"))
                })?;
                if *slot != usize::MAX {
                    return Err(Error::Config(format!(
                        "index {idx} covered by tracks {} and {ti}",
                        *slot
                    )));
                }
                *slot = ti;
            }
            if let Trajectory::Drift {
                from_track,
                to_track,
                transfer_time,
                blend_width,
                ..
            } = &track.trajectory
            {
                for r in [*from_track, *to_track] {
                    let target = self.tracks.get(r).ok_or_else(|| {
                        Error::Config(format!("drift track {ti} references missing track {r}"))
                    })?;
                    if matches!(target.trajectory, Trajectory::Drift { .. }) {
                        return Err(Error::Config(format!(
                            "drift track {ti} references another drift track {r}"
                        )));
                    }
                }
                if !(*transfer_time > 0.0 && *transfer_time < 1.0) {
                    return Err(Error::Config(format!(
                        "drift track {ti}: transfer time {transfer_time} outside (0, 1)"
                    )));
                }
                if blend_width.is_nan() || *blend_width < 0.0 {
                    return Err(Error::Config(format!("drift track {ti}: negative blend width")));
                }
            }
            if let Some(id) = track.object_id {
                if id == 0 {
                    return Err(Error::Config(format!("track {ti}: object ID 0 is reserved for void")));
                }
            }
        }
        if let Some(gap) = owner.iter().position(|o| *o == usize::MAX) {
            return Err(Error::Config(format!("index {gap} is not covered by any track")));
        }
        Ok(owner)
    }

    pub fn validate(&self, scene: &CanonicalScene) -> Result<()> {
        self.track_of_each(scene.len())?;
        for (ti, track) in self.tracks.iter().enumerate() {
            if let Some(id) = track.object_id {
                if id > scene.object_count {
                    return Err(Error::Config(format!(
                        "track {ti}: object {id} exceeds object_count {}",
                        scene.object_count
                    )));
                }
            }
        }
        Ok(())
    }

    fn track_object(&self, ti: usize, t: f64) -> u32 {
        let track = &self.tracks[ti];
        match &track.trajectory {
            Trajectory::Drift {
                from_track,
                to_track,
                transfer_time,
                ..
            } => {
                let src = if t < *transfer_time { *from_track } else { *to_track };
                self.tracks[src].object_id.unwrap_or(0)
            }
            _ => track.object_id.unwrap_or(0),
        }
    }

    fn pose(&self, ti: usize, g: &Gaussian, t: f64) -> (Vector3<f64>, UnitQuaternion<f64>) {
        match &self.tracks[ti].trajectory {
            Trajectory::Drift {
                from_track,
                to_track,
                transfer_time,
                blend_width,
                offset,
            } => {
                let from = rigid_motion(&self.tracks[*from_track].trajectory, g.position, g.rotation, t);
                let to = rigid_motion(
                    &self.tracks[*to_track].trajectory,
                    g.position + Vector3::from(*offset),
                    g.rotation,
                    t,
                );
                let lo = transfer_time - blend_width / 2.0;
                let hi = transfer_time + blend_width / 2.0;
                if *blend_width <= 0.0 {
                    if t < *transfer_time {
                        from
                    } else {
                        to
                    }
                } else if t <= lo {
                    from
                } else if t >= hi {
                    to
                } else {
                    let s = smoothstep((t - lo) / blend_width);
                    (from.0.lerp(&to.0, s), from.1.slerp(&to.1, s))
                }
            }
            traj => rigid_motion(traj, g.position, g.rotation, t),
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Usage(format!("timestamp {t} outside [0, 1]")))
    }
}

/// Evaluates the canonical scene at `t`.
pub fn export_scene(canonical: &CanonicalScene, mp: &MotionProgram, t: f64) -> Result<DeformedScene> {
    check_time(t)?;
    let owner = mp.track_of_each(canonical.len())?;
    let gaussians = canonical
        .gaussians
        .iter()
        .zip(&owner)
        .map(|(g, &ti)| {
            let (position, rotation) = mp.pose(ti, g, t);
            Gaussian {
                position,
                rotation,
                ..g.clone()
            }
        })
        .collect();
    Ok(DeformedScene {
        timestamp: t,
        gaussians,
    })
}

/// Ground-truth object ID of every canonical Gaussian at `t`. Drift members
/// switch to the destination object at the transfer time itself.
pub fn ground_truth_labels(mp: &MotionProgram, n: usize, t: f64) -> Result<Vec<u16>> {
    check_time(t)?;
    let owner = mp.track_of_each(n)?;
    Ok(owner.iter().map(|&ti| mp.track_object(ti, t) as u16).collect())
}
