//! Point-cloud primitives shared by every stage of the pipeline.
//!
//! Everything here is a pure function of its inputs: normalization, PCA
//! normal estimation, exact k-nearest-neighbor queries, random patch
//! sampling and the point/voxel quantization maps used by the network.

use rustc_hash::FxHashMap as HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Default neighborhood size for [`estimate_normals`].
pub const DEFAULT_NORMAL_K: usize = 16;
/// Default voxel edge length, in normalized units.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.03;

/// A set of 3D points with optional unit normals and per-point binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    labels: Option<Vec<u8>>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if let Some(index) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            points,
            normals: None,
            labels: None,
        })
    }

    pub fn from_xyz(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
    }

    /// Attaches normals. Each must be finite with unit length (within 1e-6).
    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::ShapeMismatch {
                context: "normals",
                expected: self.points.len(),
                found: normals.len(),
            });
        }
        if let Some(i) = normals
            .iter()
            .position(|n| !n.iter().all(|c| c.is_finite()) || (n.norm() - 1.0).abs() > 1e-6)
        {
            return Err(Error::invalid(format!(
                "normal {i} is not a finite unit vector"
            )));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    /// Attaches binary per-point labels (1 = anomalous).
    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::ShapeMismatch {
                context: "labels",
                expected: self.points.len(),
                found: labels.len(),
            });
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::invalid(format!("label {i} is not binary")));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    pub fn max_radius(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }
}

/// Centers the cloud on its centroid and scales it to unit max radius.
///
/// When every point coincides the radius stays 0 and no scaling happens.
/// Point order, normals and labels are preserved.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let centered: Vec<Vec3> = cloud.points.iter().map(|p| p - c).collect();
    let r = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let points = if r > 0.0 {
        centered.into_iter().map(|p| p / r).collect()
    } else {
        centered
    };
    PointCloud {
        points,
        normals: cloud.normals.clone(),
        labels: cloud.labels.clone(),
    }
}

/// Indices of the `k` nearest points to `query`, ascending by distance with
/// ties broken by lower index. Brute force, so exact.
pub fn knn(points: &[Vec3], query: &Vec3, k: usize) -> Vec<usize> {
    let k = k.min(points.len());
    if k == 0 {
        return Vec::new();
    }
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_unstable_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

/// A point whose neighborhood covariance had rank < 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateNeighborhood {
    pub index: usize,
}

/// Returns `v` or `-v`, whichever has a positive z, then y, then x component.
fn tie_break_sign(v: Vec3) -> Vec3 {
    for c in [v.z, v.y, v.x] {
        if c > 0.0 {
            return v;
        }
        if c < 0.0 {
            return -v;
        }
    }
    v
}

/// PCA normals from the `k` nearest neighbors of every point.
///
/// Each normal is the eigenvector of the smallest covariance eigenvalue,
/// oriented to have non-negative dot product with `p - centroid`. Points
/// whose neighborhood is degenerate get `+z` and are listed in the warnings.
pub fn estimate_normals(
    cloud: &PointCloud,
    k: usize,
) -> Result<(PointCloud, Vec<DegenerateNeighborhood>)> {
    let n = cloud.len();
    if k < 3 {
        return Err(Error::invalid(format!(
            "normal estimation needs k >= 3, got {k}"
        )));
    }
    if k > n {
        return Err(Error::invalid(format!(
            "normal estimation k = {k} exceeds point count {n}"
        )));
    }
    let pts = &cloud.points;
    let centroid = cloud.centroid();
    let results: Vec<(Vec3, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nbrs = knn(pts, &pts[i], k);
            let mean = nbrs.iter().map(|&j| pts[j]).sum::<Vec3>() / k as f64;
            let mut cov = Matrix3::zeros();
            for &j in &nbrs {
                let d = pts[j] - mean;
                cov += d * d.transpose();
            }
            cov /= k as f64;
            let eig = SymmetricEigen::new(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let (l1, l2) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
            if l2 <= 1e-24 || l1 <= 1e-12 * l2 {
                return (Vec3::z(), true);
            }
            let normal = eig.eigenvectors.column(order[0]).into_owned().normalize();
            let radial = pts[i] - centroid;
            let dot = normal.dot(&radial);
            let oriented = if dot.abs() <= 1e-9 * radial.norm().max(1e-300) {
                tie_break_sign(normal)
            } else if dot < 0.0 {
                -normal
            } else {
                normal
            };
            (oriented, false)
        })
        .collect();
    let warnings = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1)
        .map(|(index, _)| DegenerateNeighborhood { index })
        .collect();
    let normals = results.into_iter().map(|r| r.0).collect();
    Ok((
        PointCloud {
            points: cloud.points.clone(),
            normals: Some(normals),
            labels: cloud.labels.clone(),
        },
        warnings,
    ))
}

/// A seed point together with its `K` nearest neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchIndex {
    pub seed: usize,
    /// Member indices, seed first, then ascending by distance from the seed.
    pub members: Vec<usize>,
    pub seed_normal: Vec3,
}

/// Draws `g` distinct seeds uniformly and grows each into a `k`-NN patch.
///
/// Patches may overlap. The result is a pure function of the cloud, `g`,
/// `k` and the state of `rng`.
pub fn sample_patches<R: Rng + ?Sized>(
    cloud: &PointCloud,
    g: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<PatchIndex>> {
    let n = cloud.len();
    let normals = cloud
        .normals()
        .ok_or_else(|| Error::invalid("patch sampling requires normals"))?;
    if g == 0 || k == 0 {
        return Err(Error::invalid("patch count and patch size must be >= 1"));
    }
    if g > n {
        return Err(Error::invalid(format!(
            "patch count {g} exceeds point count {n}"
        )));
    }
    if k > n {
        return Err(Error::invalid(format!(
            "patch size {k} exceeds point count {n}"
        )));
    }
    let seeds = rand::seq::index::sample(rng, n, g).into_vec();
    Ok(seeds
        .into_iter()
        .map(|seed| {
            // The seed is always a member, even when duplicates of it exist.
            let mut members = Vec::with_capacity(k);
            members.push(seed);
            members.extend(
                knn(&cloud.points, &cloud.points[seed], (k + 1).min(n))
                    .into_iter()
                    .filter(|&j| j != seed)
                    .take(k - 1),
            );
            PatchIndex {
                seed,
                members,
                seed_normal: normals[seed],
            }
        })
        .collect())
}

/// Sparse occupancy of a cloud at a fixed voxel size, with point/voxel maps.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    /// Occupied voxel coordinates, sorted lexicographically.
    pub coords: Vec<[i32; 3]>,
    pub point_to_voxel: Vec<usize>,
    pub voxel_to_points: Vec<Vec<usize>>,
}

impl VoxelGrid {
    pub fn num_voxels(&self) -> usize {
        self.coords.len()
    }

    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }
}

pub fn voxel_coord(p: &Vec3, voxel_size: f64) -> [i32; 3] {
    [
        (p.x / voxel_size).floor() as i32,
        (p.y / voxel_size).floor() as i32,
        (p.z / voxel_size).floor() as i32,
    ]
}

/// Quantizes every point to `floor(p / voxel_size)`.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::invalid(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let per_point: Vec<[i32; 3]> = cloud
        .points
        .iter()
        .map(|p| voxel_coord(p, voxel_size))
        .collect();
    let mut coords = per_point.clone();
    coords.sort_unstable();
    coords.dedup();
    let lookup: HashMap<[i32; 3], usize> =
        coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let point_to_voxel: Vec<usize> = per_point.iter().map(|c| lookup[c]).collect();
    let mut voxel_to_points = vec![Vec::new(); coords.len()];
    for (i, &v) in point_to_voxel.iter().enumerate() {
        voxel_to_points[v].push(i);
    }
    Ok(VoxelGrid {
        voxel_size,
        coords,
        point_to_voxel,
        voxel_to_points,
    })
}

/// Copies each voxel's feature row (`width` wide) to every point it contains.
pub fn devoxelize(grid: &VoxelGrid, voxel_features: &[f64], width: usize) -> Result<Vec<f64>> {
    let rows = if width == 0 {
        0
    } else {
        voxel_features.len() / width
    };
    if width == 0 || voxel_features.len() % width != 0 || rows != grid.num_voxels() {
        return Err(Error::ShapeMismatch {
            context: "devoxelize feature rows",
            expected: grid.num_voxels(),
            found: rows,
        });
    }
    let mut out = Vec::with_capacity(grid.num_points() * width);
    for &v in &grid.point_to_voxel {
        out.extend_from_slice(&voxel_features[v * width..(v + 1) * width]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-3.0..5.0),
                        rng.random_range(-1.0..2.0),
                        rng.random_range(0.0..4.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn sphere(n: usize) -> PointCloud {
        // Fibonacci lattice, nearly uniform.
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        PointCloud::new(
            (0..n)
                .map(|i| {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - y * y).sqrt();
                    let t = golden * i as f64;
                    Vec3::new(r * t.cos(), y, r * t.sin())
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_non_finite_with_index() {
        let err = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
        assert!(err.to_string().contains("point 1"));
        assert!(PointCloud::new(vec![]).is_err());
    }

    #[test]
    fn normalize_symmetric_pair() {
        let c = PointCloud::from_xyz(&[[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        let n = normalize_cloud(&c);
        assert_eq!(n.points()[0], Vec3::new(-1.0, 0.0, 0.0));
        assert_eq!(n.points()[1], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn normalize_single_point() {
        let c = PointCloud::from_xyz(&[[5.0, 5.0, 5.0]]).unwrap();
        let n = normalize_cloud(&c);
        assert_eq!(n.points()[0], Vec3::zeros());
        assert_eq!(n.max_radius(), 0.0);
    }

    #[test]
    fn normalize_random_cloud_and_idempotence() {
        let c = random_cloud(100, 7);
        let n = normalize_cloud(&c);
        assert!(n.centroid().norm() < 1e-9);
        assert!((n.max_radius() - 1.0).abs() <= 1e-9);
        let nn = normalize_cloud(&n);
        for (a, b) in n.points().iter().zip(nn.points()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn planar_normals_point_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..50)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    0.0,
                )
            })
            .collect();
        let (c, warn) = estimate_normals(&PointCloud::new(pts).unwrap(), 16).unwrap();
        assert!(warn.is_empty());
        for n in c.normals().unwrap() {
            assert!((n - Vec3::z()).norm() < 1e-6, "{n:?}");
        }
    }

    #[test]
    fn sphere_normals_match_radial_direction() {
        let s = sphere(500);
        let (c, warn) = estimate_normals(&s, DEFAULT_NORMAL_K).unwrap();
        assert!(warn.is_empty());
        let max_deg = c
            .points()
            .iter()
            .zip(c.normals().unwrap())
            .map(|(p, n)| p.normalize().dot(n).clamp(-1.0, 1.0).acos().to_degrees())
            .fold(0.0, f64::max);
        assert!(max_deg < 5.0, "max angular error {max_deg}");
        for n in c.normals().unwrap() {
            assert!((n.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn collinear_points_warn() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let (out, warn) = estimate_normals(&c, 3).unwrap();
        assert_eq!(warn.len(), 3);
        assert_eq!(out.normals().unwrap()[0], Vec3::z());
        assert!(estimate_normals(&c, 4).is_err());
    }

    #[test]
    fn singleton_patches_cover_every_point() {
        let (c, _) = estimate_normals(&sphere(40), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = sample_patches(&c, 40, 1, &mut rng).unwrap();
        let mut seeds: Vec<usize> = patches.iter().map(|p| p.seed).collect();
        seeds.sort();
        assert_eq!(seeds, (0..40).collect::<Vec<_>>());
        assert!(patches.iter().all(|p| p.members == vec![p.seed]));
        assert!(sample_patches(&c, 41, 1, &mut rng).is_err());
    }

    #[test]
    fn patches_are_deterministic_and_exact_knn() {
        let (c, _) = estimate_normals(&sphere(2048), 16).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_patches(&c, 64, 32, &mut rng).unwrap()
        };
        let a = run(42);
        assert_eq!(a, run(42));
        let mut covered = vec![false; c.len()];
        for p in &a {
            assert_eq!(p.members.len(), 32);
            assert_eq!(p.members[0], p.seed);
            // Brute-force oracle: sort all indices by (distance, index).
            let q = c.points()[p.seed];
            let mut all: Vec<usize> = (0..c.len()).collect();
            all.sort_by(|&i, &j| {
                (c.points()[i] - q)
                    .norm_squared()
                    .total_cmp(&(c.points()[j] - q).norm_squared())
                    .then(i.cmp(&j))
            });
            let mut want = all[..32].to_vec();
            let mut got = p.members.clone();
            want.sort();
            got.sort();
            assert_eq!(got, want);
            for &m in &p.members {
                covered[m] = true;
            }
        }
        let coverage = covered.iter().filter(|&&b| b).count() as f64 / c.len() as f64;
        eprintln!("patch union coverage: {coverage:.3}");
        assert!(coverage > 0.3 && coverage <= 1.0);
    }

    #[test]
    fn voxelize_floor_convention() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [0.01, 0.01, 0.01]]).unwrap();
        let g = voxelize(&c, 0.03).unwrap();
        assert_eq!(g.coords, vec![[0, 0, 0]]);
        let c = PointCloud::from_xyz(&[[0.031, 0.0, -0.01]]).unwrap();
        assert_eq!(voxelize(&c, 0.03).unwrap().coords, vec![[1, 0, -1]]);
        assert!(voxelize(&c, 0.0).is_err());
    }

    #[test]
    fn voxelize_normalized_cloud_brute_force() {
        let c = normalize_cloud(&random_cloud(2048, 11));
        let g = voxelize(&c, DEFAULT_VOXEL_SIZE).unwrap();
        assert!(g.num_voxels() <= 2048);
        assert!(g.coords.windows(2).all(|w| w[0] < w[1]));
        let mut seen = vec![0usize; c.len()];
        for (v, members) in g.voxel_to_points.iter().enumerate() {
            for &i in members {
                seen[i] += 1;
                assert_eq!(g.point_to_voxel[i], v);
                let p = c.points()[i];
                let want = [
                    (p.x / 0.03).floor() as i32,
                    (p.y / 0.03).floor() as i32,
                    (p.z / 0.03).floor() as i32,
                ];
                assert_eq!(g.coords[v], want);
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn devoxelize_broadcasts_rows() {
        let c =
            PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [0.02, 0.02, 0.0]]).unwrap();
        let g = voxelize(&c, 0.03).unwrap();
        assert_eq!(devoxelize(&g, &[7.0], 1).unwrap(), vec![7.0, 7.0, 7.0]);
        assert!(devoxelize(&g, &[7.0, 8.0], 1).is_err());

        let c = normalize_cloud(&random_cloud(300, 5));
        let g = voxelize(&c, 0.1).unwrap();
        let feats: Vec<f64> = g.coords.iter().flat_map(|v| v.map(f64::from)).collect();
        let per_point = devoxelize(&g, &feats, 3).unwrap();
        for (i, p) in c.points().iter().enumerate() {
            let row = &per_point[3 * i..3 * i + 3];
            assert_eq!(
                row,
                &[
                    (p.x / 0.1).floor(),
                    (p.y / 0.1).floor(),
                    (p.z / 0.1).floor()
                ]
            );
        }
    }
}
