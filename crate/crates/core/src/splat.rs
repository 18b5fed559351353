//! Front-to-back alpha compositing of per-Gaussian payloads.
//!
//! Geometry is frozen: the only gradients this module produces are with
//! respect to the payloads, and because compositing is linear in the
//! payload those reduce to `Σ_p upstream(p) · w_i(p)` over the retained
//! per-pixel weights.

use rayon::prelude::*;

use crate::deformation::DeformedScene;
use crate::error::{Error, Result};
use crate::scene::{project_gaussian, Camera, Gaussian, SplatFootprint};

/// Side length of a screen tile in pixels.
pub const TILE_SIZE: usize = 16;
/// Traversal stops once transmittance falls below this value.
pub const TRANSMITTANCE_MIN: f64 = 1e-7;
/// Contributions with smaller weights are not kept in the weight record.
pub const WEIGHT_RECORD_MIN: f64 = 1e-6;

/// Per-pixel `(slot, w)` contributions in compressed row form.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl WeightRecord {
    fn from_pixels(pixels: Vec<Vec<(u32, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(pixels.len() + 1);
        let mut entries = Vec::with_capacity(pixels.iter().map(Vec::len).sum());
        offsets.push(0);
        for p in pixels {
            entries.extend(p);
            offsets.push(entries.len());
        }
        WeightRecord { offsets, entries }
    }

    /// Contributions at pixel `p` (row-major), front to back.
    pub fn pixel(&self, p: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn pixel_count(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Output of a compositing pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Payload dimension.
    pub dim: usize,
    /// Number of Gaussians in the rendered scene (payload rows).
    pub gaussian_count: usize,
    /// `height × width × dim`, row-major.
    pub image: Vec<f64>,
    /// Transmittance left after traversal, per pixel.
    pub transmittance: Vec<f64>,
    /// Sum of all compositing weights per pixel, including those too small
    /// for the record.
    pub weight_sum: Vec<f64>,
    pub weights: Option<WeightRecord>,
}

impl RenderOutput {
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.image[p * self.dim..(p + 1) * self.dim]
    }

    /// Largest per-pixel deviation of `Σ w + T` from one.
    pub fn conservation_error(&self) -> f64 {
        self.weight_sum
            .iter()
            .zip(&self.transmittance)
            .map(|(s, t)| (s + t - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Drops the weight record.
    pub fn without_weights(mut self) -> Self {
        self.weights = None;
        self
    }
}

/// Footprints of one scene under one camera, depth sorted and binned into
/// tiles. Reusable across payloads.
#[derive(Clone, Debug)]
pub struct Projection {
    pub width: usize,
    pub height: usize,
    pub gaussian_count: usize,
    footprints: Vec<SplatFootprint>,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of each footprint's
    /// non-zero alpha region.
    bounds: Vec<[usize; 4]>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl Projection {
    pub fn new(gaussians: &[Gaussian], cam: &Camera) -> Self {
        let mut footprints: Vec<(u32, SplatFootprint)> = gaussians
            .iter()
            .enumerate()
            .filter_map(|(slot, g)| project_gaussian(g, slot as u32, cam).map(|fp| (g.index, fp)))
            .collect();
        footprints.sort_by(|(ia, a), (ib, b)| {
            a.depth
                .total_cmp(&b.depth)
                .then(ia.cmp(ib))
                .then(a.source_index.cmp(&b.source_index))
        });
        let footprints: Vec<SplatFootprint> = footprints.into_iter().map(|(_, fp)| fp).collect();

        let (w, h) = (cam.width, cam.height);
        let tiles_x = w.div_ceil(TILE_SIZE);
        let tiles_y = h.div_ceil(TILE_SIZE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        let mut bounds = Vec::with_capacity(footprints.len());
        for (fi, fp) in footprints.iter().enumerate() {
            let r = fp.cutoff_radius() * (1.0 + 1e-9) + 1e-9;
            let ex = r * fp.cov2d[(0, 0)].sqrt();
            let ey = r * fp.cov2d[(1, 1)].sqrt();
            let x0 = (fp.mean2d.x - ex).ceil().max(0.0);
            let x1 = (fp.mean2d.x + ex).floor().min((w - 1) as f64);
            let y0 = (fp.mean2d.y - ey).ceil().max(0.0);
            let y1 = (fp.mean2d.y + ey).floor().min((h - 1) as f64);
            if x0 > x1 || y0 > y1 {
                bounds.push([1, 0, 1, 0]);
                continue;
            }
            let b = [x0 as usize, x1 as usize, y0 as usize, y1 as usize];
            bounds.push(b);
            for ty in b[2] / TILE_SIZE..=b[3] / TILE_SIZE {
                for tx in b[0] / TILE_SIZE..=b[1] / TILE_SIZE {
                    tiles[ty * tiles_x + tx].push(fi as u32);
                }
            }
        }
        Projection {
            width: w,
            height: h,
            gaussian_count: gaussians.len(),
            footprints,
            bounds,
            tiles,
            tiles_x,
        }
    }

    pub fn footprints(&self) -> &[SplatFootprint] {
        &self.footprints
    }

    fn check_payload(&self, payload: &[f64], dim: usize) -> Result<()> {
        if payload.len() != self.gaussian_count * dim {
            return Err(Error::Usage(format!(
                "payload holds {} values, expected {} Gaussians × {dim}",
                payload.len(),
                self.gaussian_count
            )));
        }
        Ok(())
    }

    /// Tiled production compositor.
    pub fn render(&self, payload: &[f64], dim: usize, keep_weights: bool) -> Result<RenderOutput> {
        self.check_payload(payload, dim)?;
        let (w, h) = (self.width, self.height);
        struct TilePixel {
            p: usize,
            value: Vec<f64>,
            t: f64,
            wsum: f64,
            contribs: Vec<(u32, f64)>,
        }
        let per_tile: Vec<Vec<TilePixel>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|ti| {
                let tx = ti % self.tiles_x;
                let ty = ti / self.tiles_x;
                let list = &self.tiles[ti];
                let mut out = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
                for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                    for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                        let mut value = vec![0.0; dim];
                        let mut contribs = Vec::new();
                        let mut t = 1.0;
                        let mut wsum = 0.0;
                        for &fi in list {
                            let b = &self.bounds[fi as usize];
                            if x < b[0] || x > b[1] || y < b[2] || y > b[3] {
                                continue;
                            }
                            let fp = &self.footprints[fi as usize];
                            let a = fp.alpha_at(x as f64, y as f64);
                            if a == 0.0 {
                                continue;
                            }
                            let wgt = a * t;
                            wsum += wgt;
                            let src = fp.source_index as usize;
                            for (v, e) in value.iter_mut().zip(&payload[src * dim..(src + 1) * dim]) {
                                *v += wgt * e;
                            }
                            if keep_weights && wgt >= WEIGHT_RECORD_MIN {
                                contribs.push((fp.source_index, wgt));
                            }
                            t *= 1.0 - a;
                            if t < TRANSMITTANCE_MIN {
                                break;
                            }
                        }
                        out.push(TilePixel {
                            p: y * w + x,
                            value,
                            t,
                            wsum,
                            contribs,
                        });
                    }
                }
                out
            })
            .collect();

        let mut image = vec![0.0; w * h * dim];
        let mut transmittance = vec![1.0; w * h];
        let mut weight_sum = vec![0.0; w * h];
        let mut pixels: Vec<Vec<(u32, f64)>> = if keep_weights { vec![Vec::new(); w * h] } else { Vec::new() };
        for tp in per_tile.into_iter().flatten() {
            image[tp.p * dim..(tp.p + 1) * dim].copy_from_slice(&tp.value);
            transmittance[tp.p] = tp.t;
            weight_sum[tp.p] = tp.wsum;
            if keep_weights {
                pixels[tp.p] = tp.contribs;
            }
        }
        Ok(RenderOutput {
            width: w,
            height: h,
            dim,
            gaussian_count: self.gaussian_count,
            image,
            transmittance,
            weight_sum,
            weights: keep_weights.then(|| WeightRecord::from_pixels(pixels)),
        })
    }

    /// Brute-force oracle: every pixel visits every footprint, no early
    /// termination, double-double accumulation.
    pub fn render_reference(&self, payload: &[f64], dim: usize) -> Result<RenderOutput> {
        self.check_payload(payload, dim)?;
        let (w, h) = (self.width, self.height);
        let mut image = vec![0.0; w * h * dim];
        let mut transmittance = vec![1.0; w * h];
        let mut weight_sum = vec![0.0; w * h];
        let mut pixels = vec![Vec::new(); w * h];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut acc = vec![Dd::ZERO; dim];
                let mut t = Dd::ONE;
                let mut wsum = Dd::ZERO;
                for fp in &self.footprints {
                    let a = fp.alpha_at(x as f64, y as f64);
                    if a == 0.0 {
                        continue;
                    }
                    let wgt = t.mul(a);
                    wsum = wsum.add(wgt);
                    let src = fp.source_index as usize;
                    for (v, e) in acc.iter_mut().zip(&payload[src * dim..(src + 1) * dim]) {
                        *v = v.add(wgt.mul(*e));
                    }
                    if wgt.value() >= WEIGHT_RECORD_MIN {
                        pixels[p].push((fp.source_index, wgt.value()));
                    }
                    t = t.mul_dd(Dd::ONE.add(-a));
                }
                for (o, v) in image[p * dim..(p + 1) * dim].iter_mut().zip(&acc) {
                    *o = v.value();
                }
                transmittance[p] = t.value();
                weight_sum[p] = wsum.value();
            }
        }
        Ok(RenderOutput {
            width: w,
            height: h,
            dim,
            gaussian_count: self.gaussian_count,
            image,
            transmittance,
            weight_sum,
            weights: Some(WeightRecord::from_pixels(pixels)),
        })
    }
}

/// Composites `payload` (`dim` values per Gaussian) over `scene`.
pub fn render(scene: &DeformedScene, cam: &Camera, payload: &[f64], dim: usize) -> Result<RenderOutput> {
    Projection::new(&scene.gaussians, cam).render(payload, dim, true)
}

/// Oracle counterpart of [`render`].
pub fn render_reference(scene: &DeformedScene, cam: &Camera, payload: &[f64], dim: usize) -> Result<RenderOutput> {
    Projection::new(&scene.gaussians, cam).render_reference(payload, dim)
}

/// Per-Gaussian payload gradients given an upstream gradient raster of the
/// same shape as `out.image`.
pub fn backward_payload(out: &RenderOutput, upstream: &[f64]) -> Result<Vec<f64>> {
    let rec = out
        .weights
        .as_ref()
        .ok_or_else(|| Error::Usage("render output carries no weight record".into()))?;
    if upstream.len() != out.image.len() {
        return Err(Error::Usage(format!(
            "upstream gradient holds {} values, expected {}",
            upstream.len(),
            out.image.len()
        )));
    }
    let d = out.dim;
    let mut grad = vec![0.0; out.gaussian_count * d];
    for p in 0..rec.pixel_count() {
        let up = &upstream[p * d..(p + 1) * d];
        if up.iter().all(|u| *u == 0.0) {
            continue;
        }
        for &(slot, w) in rec.pixel(p) {
            let g = &mut grad[slot as usize * d..(slot as usize + 1) * d];
            for (gi, u) in g.iter_mut().zip(up) {
                *gi += w * u;
            }
        }
    }
    Ok(grad)
}

/// Unevaluated double-double number.
#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn renorm(hi: f64, lo: f64) -> Dd {
        let s = hi + lo;
        Dd { hi: s, lo: lo - (s - hi) }
    }

    fn add(self, b: impl Into<Dd>) -> Dd {
        let b = b.into();
        let (s, e) = Self::two_sum(self.hi, b.hi);
        Self::renorm(s, e + self.lo + b.lo)
    }

    fn mul(self, b: f64) -> Dd {
        let p = self.hi * b;
        let e = self.hi.mul_add(b, -p);
        Self::renorm(p, e + self.lo * b)
    }

    fn mul_dd(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p);
        Self::renorm(p, e + self.hi * b.lo + self.lo * b.hi)
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, UnitQuaternion, Vector3};

    pub(crate) fn cam(size: usize) -> Camera {
        Camera {
            extrinsic: Matrix4::identity(),
            fx: 40.0,
            fy: 40.0,
            cx: (size / 2) as f64,
            cy: (size / 2) as f64,
            width: size,
            height: size,
        }
    }

    fn g(index: u32, pos: [f64; 3], s: f64, opacity: f64) -> Gaussian {
        Gaussian {
            index,
            position: pos.into(),
            rotation: UnitQuaternion::identity(),
            scale: Vector3::repeat(s),
            opacity,
            color: Vector3::new(0.2, 0.4, 0.6),
        }
    }

    fn scene(gs: Vec<Gaussian>) -> DeformedScene {
        DeformedScene {
            timestamp: 0.0,
            gaussians: gs,
        }
    }

    #[test]
    fn empty_scene_renders_zero() {
        let c = cam(8);
        let out = render(&scene(vec![]), &c, &[], 3).unwrap();
        assert!(out.image.iter().all(|v| *v == 0.0));
        assert!(out.transmittance.iter().all(|t| *t == 1.0));
        let r = render_reference(&scene(vec![]), &c, &[], 3).unwrap();
        assert!(r.image.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_gaussian_center() {
        let c = cam(8);
        let s = scene(vec![g(0, [0.0, 0.0, 4.0], 0.1, 0.5)]);
        let out = render(&s, &c, &[2.0, -1.0], 2).unwrap();
        let p = 4 * 8 + 4;
        assert_eq!(out.pixel(p), &[1.0, -0.5]);
        assert_eq!(out.transmittance[p], 0.5);
    }

    #[test]
    fn two_coincident_gaussians_front_to_back() {
        let c = cam(8);
        let s = scene(vec![g(0, [0.0, 0.0, 4.0], 0.1, 0.5), g(1, [0.0, 0.0, 4.5], 0.1, 1.0)]);
        let out = render(&s, &c, &[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let p = 4 * 8 + 4;
        let v = out.pixel(p);
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.495).abs() < 1e-15);
    }

    #[test]
    fn opaque_clamped_reference() {
        let c = cam(8);
        let s = scene(vec![g(0, [0.0, 0.0, 4.0], 0.1, 1.0)]);
        let out = render_reference(&s, &c, &[1.0, 2.0, 3.0], 3).unwrap();
        let p = 4 * 8 + 4;
        assert_eq!(out.pixel(p), &[0.99, 0.99 * 2.0, 0.99 * 3.0]);
    }

    #[test]
    fn backward_simple_cases() {
        let c = cam(8);
        let s = scene(vec![g(0, [0.0, 0.0, 4.0], 0.01, 0.5)]);
        let out = render(&s, &c, &[1.0], 1).unwrap();
        assert_eq!(backward_payload(&out, &vec![0.0; 64]).unwrap(), vec![0.0]);
        // Tiny footprint: only the center pixel carries weight.
        let mut up = vec![0.0; 64];
        up[4 * 8 + 4] = 3.0;
        let gr = backward_payload(&out, &up).unwrap();
        assert!((gr[0] - 1.5).abs() < 1e-15);
        assert!(backward_payload(&out.clone().without_weights(), &up).is_err());
        assert!(backward_payload(&out, &up[..10]).is_err());
    }

    #[test]
    fn backward_is_adjoint_of_render() {
        use rand::{Rng, SeedableRng};
        let c = cam(8);
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<Gaussian> = (0..4)
                .map(|i| {
                    let pos = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(3.0..5.0)];
                    g(i, pos, rng.gen_range(0.05..0.3), rng.gen_range(0.1..1.0))
                })
                .collect();
            let payload: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = render(&scene(gs), &c, &payload, 2).unwrap();
            let grad = backward_payload(&out, &up).unwrap();
            let lhs: f64 = grad.iter().zip(&payload).map(|(a, b)| a * b).sum();
            let rhs: f64 = out.image.iter().zip(&up).map(|(a, b)| a * b).sum();
            // Only contributions below the weight-record floor are missing.
            assert!((lhs - rhs).abs() <= 64.0 * 4.0 * WEIGHT_RECORD_MIN, "seed {seed}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn payload_length_checked() {
        let c = cam(8);
        let s = scene(vec![g(0, [0.0, 0.0, 4.0], 0.1, 0.5)]);
        assert!(matches!(render(&s, &c, &[1.0, 2.0], 3), Err(Error::Usage(_))));
    }

    #[test]
    fn depth_ties_break_by_index() {
        let c = cam(8);
        let a = g(3, [0.0, 0.0, 4.0], 0.1, 0.6);
        let b = g(1, [0.0, 0.0, 4.0], 0.1, 0.6);
        let s1 = scene(vec![a.clone(), b.clone()]);
        let s2 = scene(vec![b, a]);
        let o1 = render(&s1, &c, &[1.0, 0.0], 1).unwrap();
        let o2 = render(&s2, &c, &[0.0, 1.0], 1).unwrap();
        assert_eq!(o1.image, o2.image);
    }
}
