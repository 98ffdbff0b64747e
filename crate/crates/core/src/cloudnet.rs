//! Point-cloud branch.
//!
//! Points are sampled to a fixed count, aligned by a learned 3×3 input
//! transform, lifted to 64-d per-point features, aligned again by a learned
//! 64×64 feature transform, lifted to 1024-d and max-pooled over the point
//! axis. Per-point layers share weights across points and the pooling is a
//! coordinate-wise max, so the output does not depend on point order.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{mlp, mlp_forward, DenseBnRelu, Linear};
use crate::tensor::{Graph, Mode, ParamStore, Real, Tensor, Var};

/// Unordered set of 3-D points (meters). Missing returns are flagged invalid.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub valid: Vec<bool>,
}

/// Bitwise equality, so clouds with NaN holes compare equal to themselves.
impl PartialEq for PointCloud {
    fn eq(&self, other: &Self) -> bool {
        self.valid == other.valid
            && self.points.len() == other.points.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

impl PointCloud {
    /// Points with any non-finite coordinate are marked invalid.
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        let valid = points.iter().map(|p| p.iter().all(|c| c.is_finite())).collect();
        Self { points, valid }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `u64` little-endian count, then `count × 3` little-endian `f32`.
    /// Invalid points are written as NaN.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.points.len() * 12);
        out.extend_from_slice(&(self.points.len() as u64).to_le_bytes());
        for (p, &ok) in self.points.iter().zip(&self.valid) {
            for &c in p {
                let c = if ok { c } else { f32::NAN };
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(path, "missing point count"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != n * 12 {
            return Err(Error::format(
                path,
                format!("{n} points need {} bytes, found {}", n * 12, body.len()),
            ));
        }
        let points = body
            .chunks_exact(12)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap());
                [f(0), f(1), f(2)]
            })
            .collect();
        Ok(Self::new(points))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?, path)
    }
}

/// Points per sampled cloud at desk scale.
pub const DEFAULT_SAMPLES: usize = 512;

/// Drops invalid points and draws exactly `n_sample` of the rest: uniformly
/// without replacement when there are enough, with replacement otherwise.
/// The result is in draw order.
pub fn sample_cloud(raw: &PointCloud, n_sample: usize, seed: u64) -> Result<PointCloud> {
    let valid: Vec<[f32; 3]> = raw
        .points
        .iter()
        .zip(&raw.valid)
        .filter(|(_, &ok)| ok)
        .map(|(p, _)| *p)
        .collect();
    if valid.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<[f32; 3]> = if valid.len() >= n_sample {
        index::sample(&mut rng, valid.len(), n_sample)
            .into_iter()
            .map(|i| valid[i])
            .collect()
    } else {
        (0..n_sample).map(|_| valid[rng.gen_range(0..valid.len())]).collect()
    };
    Ok(PointCloud {
        valid: vec![true; points.len()],
        points,
    })
}

/// Stacks equally sized clouds into a `[B, N, 3]` tensor.
pub fn clouds_to_tensor<T: Real>(clouds: &[&PointCloud]) -> Result<Tensor<T>> {
    let n = clouds.first().map_or(0, |c| c.len());
    if clouds.iter().any(|c| c.len() != n) {
        return Err(Error::shape("clouds_to_tensor", "clouds differ in size"));
    }
    let data = clouds
        .iter()
        .flat_map(|c| c.points.iter().flat_map(|p| p.iter().map(|&v| T::of(v as f64))))
        .collect();
    Tensor::new(&[clouds.len(), n, 3], data)
}

/// Layer widths of the point branch.
///
/// The sample count is a data setting; the branch accepts any `N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloudConfig {
    /// Per-point layers of both T-nets.
    pub tnet_point: Vec<usize>,
    /// Fully connected layers between pooling and the matrix output.
    pub tnet_head: Vec<usize>,
    /// Per-point lift from 3-d to the feature-transform width.
    pub lift: Vec<usize>,
    /// Per-point layers after the feature transform; the last is the output width.
    pub global: Vec<usize>,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            tnet_point: vec![64, 128, 1024],
            tnet_head: vec![512, 256],
            lift: vec![64, 64],
            global: vec![128, 1024],
        }
    }
}

impl CloudConfig {
    pub fn feature_dim(&self) -> usize {
        *self.global.last().expect("global mlp is non-empty")
    }

    pub fn feature_transform_dim(&self) -> usize {
        *self.lift.last().expect("lift mlp is non-empty")
    }
}

/// Regresses a `k×k` alignment matrix from a `[B, N, k]` set.
#[derive(Clone, Debug)]
pub struct TNet {
    pub k: usize,
    pub point: Vec<DenseBnRelu>,
    pub head: Vec<DenseBnRelu>,
    pub out: Linear,
}

impl TNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        cfg: &CloudConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let point = mlp(store, &format!("{name}.point"), k, &cfg.tnet_point, rng);
        let pooled = *cfg.tnet_point.last().expect("tnet widths");
        let head = mlp(store, &format!("{name}.fc"), pooled, &cfg.tnet_head, rng);
        let last = cfg.tnet_head.last().copied().unwrap_or(pooled);
        let out = Linear::identity_transform(store, &format!("{name}.out"), last, k);
        Self { k, point, head, out }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.k {
            return Err(Error::dim("tnet", &s, &[self.k]));
        }
        let (b, n) = (s[0], s[1]);
        let flat = g.reshape(x, &[b * n, self.k])?;
        let h = mlp_forward(&self.point, store, g, flat, mode)?;
        let width = g.shape(h)[1];
        let h = g.reshape(h, &[b, n, width])?;
        let pooled = g.reduce_max_axis(h, 1)?;
        let h = mlp_forward(&self.head, store, g, pooled, mode)?;
        let m = self.out.forward(store, g, h)?;
        g.reshape(m, &[b, self.k, self.k])
    }
}

/// `out[b, n, :] = points[b, n, :] · T[b]`.
pub fn apply_transform<T: Real>(g: &mut Graph<T>, points: Var, transform: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(points).to_vec(), g.shape(transform).to_vec());
    if ps.len() != 3 || ts.len() != 3 || ts[1] != ts[2] || ps[2] != ts[1] || ps[0] != ts[0] {
        return Err(Error::dim("apply_transform", &ps, &ts));
    }
    g.batch_matmul(points, transform)
}

/// Nodes produced by [`CloudBranch::forward`].
#[derive(Clone, Copy, Debug)]
pub struct CloudOutput {
    /// `[B, F]` global feature.
    pub feature: Var,
    /// `[B, 3, 3]`.
    pub input_transform: Var,
    /// `[B, K, K]`.
    pub feature_transform: Var,
}

#[derive(Clone, Debug)]
pub struct CloudBranch {
    pub config: CloudConfig,
    pub tnet3: TNet,
    pub lift: Vec<DenseBnRelu>,
    pub tnet64: TNet,
    pub global: Vec<DenseBnRelu>,
}

impl CloudBranch {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &CloudConfig, rng: &mut ChaCha8Rng) -> Self {
        let tnet3 = TNet::new(store, &format!("{name}.tnet3"), 3, config, rng);
        let lift = mlp(store, &format!("{name}.lift"), 3, &config.lift, rng);
        let k = config.feature_transform_dim();
        let tnet64 = TNet::new(store, &format!("{name}.tnet64"), k, config, rng);
        let global = mlp(store, &format!("{name}.global"), k, &config.global, rng);
        Self {
            config: config.clone(),
            tnet3,
            lift,
            tnet64,
            global,
        }
    }

    /// `[B, N, 3]` points to a `[B, F]` feature.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        points: Var,
        mode: Mode,
    ) -> Result<CloudOutput> {
        let input_transform = self.tnet3.forward(store, g, points, mode)?;
        let aligned = apply_transform(g, points, input_transform)?;
        let lifted = self.lift_points(store, g, aligned, mode)?;
        let feature_transform = self.tnet64.forward(store, g, lifted, mode)?;
        let aligned = apply_transform(g, lifted, feature_transform)?;
        let feature = self.pool_global(store, g, aligned, mode)?;
        Ok(CloudOutput {
            feature,
            input_transform,
            feature_transform,
        })
    }

    /// The same pipeline with both transforms replaced by the identity.
    pub fn forward_untransformed<T: Real>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        points: Var,
        mode: Mode,
    ) -> Result<Var> {
        let lifted = self.lift_points(store, g, points, mode)?;
        self.pool_global(store, g, lifted, mode)
    }

    fn lift_points<T: Real>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let h = mlp_forward(&self.lift, store, g, flat, mode)?;
        let width = g.shape(h)[1];
        g.reshape(h, &[s[0], s[1], width])
    }

    fn pool_global<T: Real>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let h = mlp_forward(&self.global, store, g, flat, mode)?;
        let width = g.shape(h)[1];
        let h = g.reshape(h, &[s[0], s[1], width])?;
        g.reduce_max_axis(h, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid_cloud(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| [i as f32, (i * 2) as f32, -(i as f32)]).collect())
    }

    #[test]
    fn sampling_drops_holes_and_hits_exact_count() {
        // 640×480 depth image with every third pixel missing
        let pts: Vec<[f32; 3]> = (0..640 * 480)
            .map(|i| {
                if i % 3 == 0 {
                    [f32::NAN; 3]
                } else {
                    [i as f32, 1.0, 2.0]
                }
            })
            .collect();
        let raw = PointCloud::new(pts);
        assert_eq!(raw.len(), 307_200);
        let s = sample_cloud(&raw, 20_480, 1).unwrap();
        assert_eq!(s.len(), 20_480);
        assert!(s.points.iter().all(|p| p.iter().all(|c| c.is_finite())));
        let mut ids: Vec<u32> = s.points.iter().map(|p| p[0] as u32).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 20_480, "drawn without replacement");
    }

    #[test]
    fn exact_size_input_is_permuted() {
        let raw = grid_cloud(64);
        let s = sample_cloud(&raw, 64, 3).unwrap();
        let mut a: Vec<u32> = s.points.iter().map(|p| p[0] as u32).collect();
        a.sort_unstable();
        assert_eq!(a, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn small_cloud_samples_with_replacement() {
        let raw = grid_cloud(10);
        let s = sample_cloud(&raw, 512, 4).unwrap();
        assert_eq!(s.len(), 512);
        for p in &s.points {
            assert!(raw.points.contains(p));
        }
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let raw = PointCloud::new(vec![[f32::NAN, 0.0, 0.0]; 5]);
        assert!(matches!(sample_cloud(&raw, 8, 0), Err(Error::EmptyCloud)));
    }

    #[test]
    fn file_round_trip_keeps_holes() {
        let mut pts = grid_cloud(5).points;
        pts[2] = [f32::NAN, 0.0, 0.0];
        let c = PointCloud::new(pts);
        let bytes = c.encode();
        assert_eq!(&bytes[..8], &5u64.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 5 * 12);
        let back = PointCloud::decode(&bytes, Path::new("c")).unwrap();
        assert_eq!(back.valid, vec![true, true, false, true, true]);
        assert_eq!(back.points[4], c.points[4]);
        assert!(PointCloud::decode(&bytes[..20], Path::new("c")).is_err());
    }

    #[test]
    fn transform_identity_and_scaling() {
        let mut g = Graph::<f64>::new();
        let pts = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap();
        let p = g.input(pts.clone());
        let eye = Tensor::new(&[1, 3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let i = g.input(eye.clone());
        let y = apply_transform(&mut g, p, i).unwrap();
        assert_eq!(g.value(y).data(), pts.data());
        let two = g.input(Tensor::new(&[1, 3, 3], eye.data().iter().map(|v| v * 2.0).collect()).unwrap());
        let y = apply_transform(&mut g, p, two).unwrap();
        let want: Vec<f64> = pts.data().iter().map(|v| v * 2.0).collect();
        assert_eq!(g.value(y).data(), &want[..]);
        let bad = g.input(Tensor::zeros(&[1, 4, 4]));
        assert!(matches!(apply_transform(&mut g, p, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn transform_matches_matvec_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, n, k) = (2, 5, 3);
        let pts: Vec<f64> = (0..b * n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tr: Vec<f64> = (0..b * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new(&[b, n, k], pts.clone()).unwrap());
        let t = g.input(Tensor::new(&[b, k, k], tr.clone()).unwrap());
        let y = apply_transform(&mut g, p, t).unwrap();
        for bi in 0..b {
            for ni in 0..n {
                for j in 0..k {
                    let want: f64 = (0..k).map(|i| pts[(bi * n + ni) * k + i] * tr[(bi * k + i) * k + j]).sum();
                    assert!((g.value(y).data()[(bi * n + ni) * k + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tnets_emit_identity_at_init() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let branch = CloudBranch::new(&mut store, "cloud", &CloudConfig::default(), &mut rng);
        let mut g = Graph::new();
        let raw = grid_cloud(32);
        let x = g.input(clouds_to_tensor(&[&raw, &raw]).unwrap());
        let out = branch.forward(&store, &mut g, x, Mode::Train).unwrap();
        assert_eq!(g.shape(out.feature), &[2, 1024]);
        for (t, k) in [(out.input_transform, 3), (out.feature_transform, 64)] {
            for (i, &v) in g.value(t).data().iter().enumerate() {
                let (r, c) = ((i / k) % k, i % k);
                assert_eq!(v, if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    fn small_config() -> CloudConfig {
        CloudConfig {
            tnet_point: vec![6, 8],
            tnet_head: vec![5],
            lift: vec![4, 4],
            global: vec![6, 7],
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_is_permutation_invariant(seed in 0u64..1000) {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let branch = CloudBranch::new(&mut store, "c", &small_config(), &mut rng);
            let pts: Vec<[f32; 3]> = (0..8).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let mut perm = pts.clone();
            perm.reverse();
            perm.swap(0, 3);
            let run = |p: &[[f32; 3]]| {
                let mut g = Graph::new();
                let c = PointCloud::new(p.to_vec());
                let x = g.input(clouds_to_tensor(&[&c]).unwrap());
                let out = branch.forward(&store, &mut g, x, Mode::Eval).unwrap();
                g.value(out.feature).data().to_vec()
            };
            let (a, b) = (run(&pts), run(&perm));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
