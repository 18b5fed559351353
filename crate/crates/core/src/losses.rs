//! Training and refinement objectives.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{softmax_rows, IdentityField};
use crate::knn::NeighborIndex;
use crate::splat::{backward_payload, RenderOutput};

/// Probabilities are clamped to this floor inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    /// Neighbors per sampled Gaussian in the 3D term.
    pub neighbors: usize,
    /// Gaussians sampled per iteration for the 3D term.
    pub samples: usize,
    /// Penalty on mask spill outside the target region.
    pub lambda_proj: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_2d: 1.0,
            lambda_3d: 2.0,
            neighbors: 5,
            samples: 1000,
            lambda_proj: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_2d, self.lambda_3d, self.lambda_proj];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.neighbors == 0 || self.samples == 0 {
            return Err(Error::Config("neighbor and sample counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-pixel mean cross-entropy of `logits` (one row per pixel) against
/// the mask labels. Returns the loss and its gradient w.r.t. the logits.
pub fn loss_2d(logits: ArrayView2<f64>, labels: &[u16]) -> Result<(f64, Array2<f64>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::Usage(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| **l as usize >= classes) {
        return Err(Error::Data(format!("mask ID {bad} exceeds class capacity {classes}")));
    }
    let mut probs = logits.to_owned();
    softmax_rows(&mut probs);
    let mut loss = 0.0;
    for p in 0..n {
        // log-sum-exp form keeps large margins finite
        let z = logits.row(p);
        let m = z.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[labels[p] as usize];
    }
    let scale = 1.0 / n.max(1) as f64;
    for (p, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
        row[labels[p] as usize] -= 1.0;
        row *= scale;
    }
    Ok((loss * scale, probs))
}

/// k-NN KL term over given class distributions.
///
/// `neighbors[s]` lists the neighbors of `samples[s]`. Returns the mean KL
/// and its gradient w.r.t. every distribution entry.
pub fn neighbor_kl(probs: ArrayView2<f64>, samples: &[usize], neighbors: &[Vec<usize>]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(probs.dim());
    let pairs: usize = neighbors.iter().map(Vec::len).sum();
    if pairs == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / pairs as f64;
    let mut loss = 0.0;
    for (&j, nbrs) in samples.iter().zip(neighbors) {
        let fj = probs.row(j);
        for &i in nbrs {
            let fi = probs.row(i);
            for c in 0..fj.len() {
                let (a, b) = (fj[c], fi[c]);
                let (la, lb) = (a.max(PROB_FLOOR).ln(), b.max(PROB_FLOOR).ln());
                loss += a * (la - lb);
                let dla = if a >= PROB_FLOOR { 1.0 } else { 0.0 };
                grad[(j, c)] += scale * (la - lb + dla);
                if b >= PROB_FLOOR {
                    grad[(i, c)] -= scale * a / b;
                }
            }
        }
    }
    (loss * scale, grad)
}

/// Backpropagates a gradient on softmax outputs to the logits.
pub fn softmax_backward(probs: ArrayView2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for ((f, d), mut o) in probs.axis_iter(Axis(0)).zip(d_probs.axis_iter(Axis(0))).zip(out.axis_iter_mut(Axis(0))) {
        if d.iter().all(|v| *v == 0.0) {
            continue;
        }
        let dot: f64 = f.iter().zip(d).map(|(a, b)| a * b).sum();
        for c in 0..f.len() {
            o[c] = f[c] * (d[c] - dot);
        }
    }
    out
}

/// Output of [`loss_3d`].
#[derive(Clone, Debug)]
pub struct NeighborLoss {
    pub value: f64,
    /// Gradient w.r.t. the classifier logits of every Gaussian.
    pub d_logits: Array2<f64>,
    pub sampled: Vec<usize>,
}

/// Samples `min(samples, N)` Gaussians without replacement and averages the
/// KL divergence between each one's class distribution and those of its `k`
/// nearest neighbors in `index` (built over deformed positions).
pub fn loss_3d<R: Rng>(
    field: &IdentityField,
    encodings: ArrayView2<f64>,
    index: &NeighborIndex,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<NeighborLoss> {
    let n = encodings.nrows();
    if index.len() != n {
        return Err(Error::Usage(format!("neighbor index over {} points, {n} encodings", index.len())));
    }
    if n < cfg.neighbors + 1 {
        return Err(Error::Config(format!(
            "3D regularization needs at least {} Gaussians, scene has {n}",
            cfg.neighbors + 1
        )));
    }
    let m = cfg.samples.min(n);
    let sampled = sample(rng, n, m).into_vec();
    let neighbors: Vec<Vec<usize>> = sampled.iter().map(|&j| index.query(j, cfg.neighbors)).collect();
    let probs = field.classify(encodings);
    let (value, d_probs) = neighbor_kl(probs.view(), &sampled, &neighbors);
    Ok(NeighborLoss {
        value,
        d_logits: softmax_backward(probs.view(), &d_probs),
        sampled,
    })
}

/// Mask projection loss of a rendered point mask (payload dimension 1)
/// against a binary target, with per-Gaussian membership gradients.
pub fn loss_proj(rendered: &RenderOutput, target: &[bool], lambda_proj: f64) -> Result<(f64, Vec<f64>)> {
    if rendered.dim != 1 {
        return Err(Error::Usage(format!("point mask must have one channel, found {}", rendered.dim)));
    }
    if target.len() != rendered.width * rendered.height {
        return Err(Error::Usage(format!(
            "target mask holds {} pixels, render has {}",
            target.len(),
            rendered.width * rendered.height
        )));
    }
    let upstream: Vec<f64> = target.iter().map(|g| if *g { -1.0 } else { lambda_proj }).collect();
    let loss = rendered.image.iter().zip(&upstream).map(|(m, u)| m * u).sum();
    Ok((loss, backward_payload(rendered, &upstream)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::DeformedScene;
    use crate::field::FieldConfig;
    use crate::scene::{Camera, Gaussian};
    use crate::splat::render;
    use approx::assert_abs_diff_eq;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        d / n
    }

    #[test]
    fn ce_of_uniform_logits() {
        let logits = Array2::zeros((3, 4));
        let (l, _) = loss_2d(logits.view(), &[0, 3, 1]).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(4f64.ln(), 1.3863, epsilon = 1e-4);
    }

    #[test]
    fn ce_vanishes_with_margin() {
        let mut logits = Array2::zeros((2, 5));
        logits[(0, 2)] = 1e3;
        logits[(1, 0)] = 1e3;
        let (l, g) = loss_2d(logits.view(), &[2, 0]).unwrap();
        assert!((0.0..1e-12).contains(&l));
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ce_rejects_out_of_range_ids() {
        let logits = Array2::zeros((1, 4));
        assert!(matches!(loss_2d(logits.view(), &[4]), Err(Error::Data(_))));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-2.0..2.0));
        let labels = [0, 5, 2, 2];
        let (_, g) = loss_2d(logits.view(), &labels).unwrap();
        let h = 1e-6;
        let mut num = Vec::new();
        for idx in 0..logits.len() {
            let (r, c) = (idx / 6, idx % 6);
            let mut p = logits.clone();
            p[(r, c)] += h;
            let mut m = logits.clone();
            m[(r, c)] -= h;
            num.push((loss_2d(p.view(), &labels).unwrap().0 - loss_2d(m.view(), &labels).unwrap().0) / (2.0 * h));
        }
        assert!(rel_err(g.as_slice().unwrap(), &num) < 1e-5);
    }

    #[test]
    fn two_class_kl_example() {
        let probs = Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.5, 0.5]).unwrap();
        let (l, _) = neighbor_kl(probs.view(), &[0], &[vec![1]]);
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert_abs_diff_eq!(l, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.3680, epsilon = 1e-4);
    }

    fn test_field(seed: u64) -> IdentityField {
        IdentityField::new(FieldConfig::default(), seed)
    }

    #[test]
    fn identical_encodings_give_zero_kl() {
        let f = test_field(1);
        let enc = Array2::from_shape_fn((12, 32), |(_, j)| j as f64 * 0.3 - 2.0);
        let pts: Vec<Vector3<f64>> = (0..12).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let idx = NeighborIndex::new(&pts);
        let cfg = LossConfig {
            samples: 12,
            ..LossConfig::default()
        };
        let l = loss_3d(&f, enc.view(), &idx, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_abs_diff_eq!(l.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_is_non_negative_and_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = test_field(2);
        let pts: Vec<Vector3<f64>> = (0..30)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let idx = NeighborIndex::new(&pts);
        let cfg = LossConfig {
            samples: 10,
            ..LossConfig::default()
        };
        for draw in 0..100 {
            let enc = Array2::from_shape_fn((30, 32), |_| rng.gen_range(-20.0..20.0));
            let l = loss_3d(&f, enc.view(), &idx, &cfg, &mut ChaCha8Rng::seed_from_u64(draw)).unwrap();
            assert!(l.value >= 0.0);
        }

        // Gradient of the KL term w.r.t. logits on a fixed sample.
        let logits = Array2::from_shape_fn((30, 8), |_| rng.gen_range(-2.0..2.0));
        let value = |z: &Array2<f64>| {
            let l = {
                let mut p = z.clone();
                softmax_rows(&mut p);
                p
            };
            let samples = vec![0, 7, 19];
            let nbrs: Vec<Vec<usize>> = samples.iter().map(|&j| idx.query(j, 5)).collect();
            neighbor_kl(l.view(), &samples, &nbrs)
        };
        let mut probs = logits.clone();
        softmax_rows(&mut probs);
        let (_, dp) = value(&logits);
        let dz = softmax_backward(probs.view(), &dp);
        let h = 1e-6;
        let mut num = Vec::new();
        for k in 0..logits.len() {
            let (r, c) = (k / 8, k % 8);
            let mut p = logits.clone();
            p[(r, c)] += h;
            let mut m = logits.clone();
            m[(r, c)] -= h;
            num.push((value(&p).0 - value(&m).0) / (2.0 * h));
        }
        assert!(rel_err(dz.as_slice().unwrap(), &num) < 1e-5);
    }

    #[test]
    fn too_few_gaussians_is_config_error() {
        let f = test_field(3);
        let pts = vec![Vector3::zeros(); 5];
        let idx = NeighborIndex::new(&pts);
        let enc = Array2::zeros((5, 32));
        let r = loss_3d(&f, enc.view(), &idx, &LossConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn splat_at(index: u32, x: f64, y: f64, s: f64) -> Gaussian {
        Gaussian {
            index,
            position: Vector3::new(x, y, 5.0),
            rotation: UnitQuaternion::identity(),
            scale: Vector3::new(s, s, s),
            opacity: 0.8,
            color: Vector3::zeros(),
        }
    }

    fn camera() -> Camera {
        Camera {
            extrinsic: nalgebra::Matrix4::identity(),
            fx: 20.0,
            fy: 20.0,
            cx: 8.0,
            cy: 8.0,
            width: 16,
            height: 16,
        }
    }

    #[test]
    fn projection_loss_examples() {
        let cam = camera();
        let scene = DeformedScene {
            timestamp: 0.0,
            gaussians: vec![splat_at(0, -1.0, 0.0, 0.1), splat_at(1, 1.0, 0.0, 0.1)],
        };
        let out = render(&scene, &cam, &[1.0, 1.0], 1).unwrap();
        // Left half of the image is the target region.
        let target: Vec<bool> = (0..256).map(|p| p % 16 < 8).collect();
        let (_, g) = loss_proj(&out, &target, 1.0).unwrap();
        let w = |slot: u32| {
            let rec = out.weights.as_ref().unwrap();
            (0..256).flat_map(|p| rec.pixel(p).iter().filter(move |e| e.0 == slot).map(|e| e.1)).sum::<f64>()
        };
        assert!(g[0] < 0.0);
        assert_abs_diff_eq!(g[0], -w(0), epsilon = 1e-12);
        assert!(g[1] > 0.0);
        assert_abs_diff_eq!(g[1], w(1), epsilon = 1e-12);

        let (_, g3) = loss_proj(&out, &target, 3.0).unwrap();
        assert_abs_diff_eq!(g3[1], 3.0 * w(1), epsilon = 1e-12);

        let zero = render(&scene, &cam, &[0.0, 0.0], 1).unwrap();
        let (l, gz) = loss_proj(&zero, &target, 2.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(gz, loss_proj(&out, &target, 2.0).unwrap().1);

        // A binary mask equal to its target scores minus its area.
        let mut exact = zero.clone();
        exact.image = target.iter().map(|t| if *t { 1.0 } else { 0.0 }).collect();
        assert_eq!(loss_proj(&exact, &target, 5.0).unwrap().0, -128.0);

        assert!(matches!(loss_proj(&out, &target[..10], 1.0), Err(Error::Usage(_))));
    }
}
