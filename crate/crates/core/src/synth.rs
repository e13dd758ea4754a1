//! Synthetic intra-class-variance dataset built from primitive shapes.
//!
//! Every class is one primitive; its subclasses differ in aspect ratio.
//! Anomalous test clouds receive pseudo-anomaly defects on the clean
//! surface (with analytic normals), then Gaussian noise is added to every
//! cloud.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dagen::{generate, DaGenParams};
use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, PointCloud, Vec3};
use crate::io::{write_atomic, write_mask, write_xyz, DatasetLayout};

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    Cylinder,
    Box,
    Cone,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cylinder => "cylinder",
            Primitive::Box => "box",
            Primitive::Cone => "cone",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: Vec<Primitive>,
    pub subclasses_per_class: usize,
    pub points_per_cloud: usize,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomalous_per_class: usize,
    /// Variance of the per-coordinate Gaussian noise.
    pub noise_variance: f64,
    pub defect_params: DaGenParams,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: vec![Primitive::Sphere, Primitive::Cylinder, Primitive::Box],
            subclasses_per_class: 2,
            points_per_cloud: 2048,
            train_per_class: 4,
            test_normal_per_class: 12,
            test_anomalous_per_class: 12,
            noise_variance: 0.002,
            defect_params: DaGenParams::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("classes", "must list at least one primitive"));
        }
        for (field, v) in [
            ("subclasses_per_class", self.subclasses_per_class),
            ("points_per_cloud", self.points_per_cloud),
            ("train_per_class", self.train_per_class),
            ("test_normal_per_class", self.test_normal_per_class),
            ("test_anomalous_per_class", self.test_anomalous_per_class),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::config(
                "noise_variance",
                "must be a finite value >= 0",
            ));
        }
        let mut seen = self.classes.clone();
        seen.sort_by_key(|p| p.name());
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::config("classes", "primitives must be distinct"));
        }
        self.defect_params.validate()?;
        if self.defect_params.patches > self.points_per_cloud {
            return Err(Error::config(
                "defect_params.patches",
                "must not exceed points_per_cloud",
            ));
        }
        Ok(())
    }
}

/// Aspect factor of subclass `s` out of `count`: evenly spaced in [0.6, 1].
pub fn subclass_aspect(s: usize, count: usize) -> f64 {
    if count <= 1 {
        1.0
    } else {
        1.0 - 0.4 * s as f64 / (count - 1) as f64
    }
}

fn pick_area<R: Rng>(rng: &mut R, areas: &[f64]) -> usize {
    let total: f64 = areas.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &a) in areas.iter().enumerate() {
        if u < a {
            return i;
        }
        u -= a;
    }
    areas.len() - 1
}

/// Samples `n` surface points of a primitive with outward unit normals.
pub fn sample_primitive<R: Rng>(
    rng: &mut R,
    shape: Primitive,
    aspect: f64,
    n: usize,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, q) = match shape {
            Primitive::Sphere => {
                // Ellipsoid with semi-axes (1, 1, aspect); uniform in the
                // sphere's parameterization, then scaled.
                let z: f64 = rng.random_range(-1.0..1.0);
                let t = rng.random_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                let u = Vec3::new(r * t.cos(), r * t.sin(), z);
                let p = Vec3::new(u.x, u.y, aspect * u.z);
                let q = Vec3::new(u.x, u.y, u.z / aspect).normalize();
                (p, q)
            }
            Primitive::Cylinder => {
                let (r, h) = (0.6, 2.0 * aspect);
                let face = pick_area(rng, &[2.0 * PI * r * h, PI * r * r, PI * r * r]);
                let t = rng.random_range(0.0..2.0 * PI);
                match face {
                    0 => {
                        let z = rng.random_range(-h / 2.0..h / 2.0);
                        let q = Vec3::new(t.cos(), t.sin(), 0.0);
                        (Vec3::new(r * q.x, r * q.y, z), q)
                    }
                    f => {
                        let rr = r * rng.random::<f64>().sqrt();
                        let s = if f == 1 { 1.0 } else { -1.0 };
                        (
                            Vec3::new(rr * t.cos(), rr * t.sin(), s * h / 2.0),
                            Vec3::new(0.0, 0.0, s),
                        )
                    }
                }
            }
            Primitive::Box => {
                let e = [1.0, 0.7 * aspect, 0.5];
                let areas = [
                    e[1] * e[2],
                    e[1] * e[2],
                    e[0] * e[2],
                    e[0] * e[2],
                    e[0] * e[1],
                    e[0] * e[1],
                ];
                let f = pick_area(rng, &areas);
                let axis = f / 2;
                let s = if f % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = Vec3::zeros();
                let mut q = Vec3::zeros();
                for a in 0..3 {
                    p[a] = if a == axis {
                        s * e[a] / 2.0
                    } else {
                        rng.random_range(-e[a] / 2.0..e[a] / 2.0)
                    };
                }
                q[axis] = s;
                (p, q)
            }
            Primitive::Cone => {
                let (r, h) = (0.7, 1.6 * aspect);
                let slant = (r * r + h * h).sqrt();
                let face = pick_area(rng, &[PI * r * slant, PI * r * r]);
                let t = rng.random_range(0.0..2.0 * PI);
                let (c, s) = (t.cos(), t.sin());
                if face == 0 {
                    // Radius grows linearly from the apex; sqrt gives uniform area.
                    let f = rng.random::<f64>().sqrt();
                    let p = Vec3::new(f * r * c, f * r * s, h / 2.0 - f * h);
                    let q = Vec3::new(h * c, h * s, r).normalize();
                    (p, q)
                } else {
                    let rr = r * rng.random::<f64>().sqrt();
                    (Vec3::new(rr * c, rr * s, -h / 2.0), -Vec3::z())
                }
            }
        };
        pts.push(p);
        nrm.push(q);
    }
    (pts, nrm)
}

/// A clean, normalized primitive cloud with analytic normals.
pub fn clean_cloud<R: Rng>(
    rng: &mut R,
    shape: Primitive,
    aspect: f64,
    n: usize,
) -> Result<PointCloud> {
    let (pts, nrm) = sample_primitive(rng, shape, aspect, n);
    // Centering and uniform scaling leave normals unchanged.
    normalize_cloud(&PointCloud::new(pts)?).with_normals(nrm)
}

fn add_noise<R: Rng>(rng: &mut R, cloud: &PointCloud, variance: f64) -> Result<PointCloud> {
    if variance == 0.0 {
        return PointCloud::new(cloud.points().to_vec());
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite std");
    let pts = cloud
        .points()
        .iter()
        .map(|p| p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
        .collect();
    PointCloud::new(pts)
}

/// One generated file: subclass, points and (for test clouds) the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub stem: String,
    pub subclass: usize,
    pub cloud: PointCloud,
    pub mask: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClass {
    pub name: String,
    pub primitive: Primitive,
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

fn class_seed(seed: u64, class: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(class as u64 + 1)
}

/// Generates one class in memory. Subclasses alternate across files.
pub fn synthesize_class(cfg: &SynthConfig, class: usize) -> Result<SynthClass> {
    let shape = cfg.classes[class];
    let mut rng = ChaCha8Rng::seed_from_u64(class_seed(cfg.seed, class));
    let n = cfg.points_per_cloud;
    let s = cfg.subclasses_per_class;

    let mut train = Vec::with_capacity(cfg.train_per_class);
    for i in 0..cfg.train_per_class {
        let sub = i % s;
        let clean = clean_cloud(&mut rng, shape, subclass_aspect(sub, s), n)?;
        train.push(SynthSample {
            stem: format!("train_{i:03}"),
            subclass: sub,
            cloud: add_noise(&mut rng, &clean, cfg.noise_variance)?,
            mask: None,
        });
    }

    let mut test = Vec::new();
    for i in 0..cfg.test_normal_per_class {
        let sub = i % s;
        let clean = clean_cloud(&mut rng, shape, subclass_aspect(sub, s), n)?;
        test.push(SynthSample {
            stem: format!("good_{i:03}"),
            subclass: sub,
            cloud: add_noise(&mut rng, &clean, cfg.noise_variance)?,
            mask: Some(vec![0; n]),
        });
    }
    for i in 0..cfg.test_anomalous_per_class {
        let sub = i % s;
        let clean = clean_cloud(&mut rng, shape, subclass_aspect(sub, s), n)?;
        let params = DaGenParams {
            rng_seed: rng.random(),
            ..cfg.defect_params.clone()
        };
        let damaged = generate(&clean, &params)?;
        test.push(SynthSample {
            stem: format!("defect_{i:03}"),
            subclass: sub,
            cloud: add_noise(&mut rng, &damaged.perturbed, cfg.noise_variance)?,
            mask: Some(damaged.mask),
        });
    }
    Ok(SynthClass {
        name: shape.name().to_string(),
        primitive: shape,
        train,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub name: String,
    pub primitive: Primitive,
    pub subclasses: usize,
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub seed: u64,
    pub points_per_cloud: usize,
    pub noise_variance: f64,
    pub classes: Vec<ManifestClass>,
    pub config: SynthConfig,
}

/// Writes the whole dataset under `root` and returns its layout.
pub fn synthesize_dataset(cfg: &SynthConfig, root: &Path) -> Result<DatasetLayout> {
    cfg.validate()?;
    let classes = (0..cfg.classes.len())
        .into_par_iter()
        .map(|c| synthesize_class(cfg, c))
        .collect::<Result<Vec<_>>>()?;
    classes.par_iter().try_for_each(|class| -> Result<()> {
        let dir = root.join(&class.name);
        for s in &class.train {
            write_xyz(&dir.join("train").join(format!("{}.xyz", s.stem)), &s.cloud)?;
        }
        for s in &class.test {
            write_xyz(&dir.join("test").join(format!("{}.xyz", s.stem)), &s.cloud)?;
            if let Some(m) = &s.mask {
                write_mask(&dir.join("gt").join(format!("{}.txt", s.stem)), m)?;
            }
        }
        Ok(())
    })?;
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION,
        seed: cfg.seed,
        points_per_cloud: cfg.points_per_cloud,
        noise_variance: cfg.noise_variance,
        classes: classes
            .iter()
            .map(|c| ManifestClass {
                name: c.name.clone(),
                primitive: c.primitive,
                subclasses: cfg.subclasses_per_class,
                train: c.train.len(),
                test_normal: cfg.test_normal_per_class,
                test_anomalous: cfg.test_anomalous_per_class,
            })
            .collect(),
        config: cfg.clone(),
    };
    write_atomic(
        &root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    DatasetLayout::open(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normals_are_unit_and_outward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [
            Primitive::Sphere,
            Primitive::Cylinder,
            Primitive::Box,
            Primitive::Cone,
        ] {
            for aspect in [1.0, 0.6] {
                let (p, n) = sample_primitive(&mut rng, shape, aspect, 500);
                for (p, n) in p.iter().zip(&n) {
                    assert!((n.norm() - 1.0).abs() < 1e-12);
                    // Convex shapes centered near the origin: normals point away.
                    assert!(p.dot(n) > -1e-12, "{shape:?} {p:?} {n:?}");
                }
            }
        }
    }

    #[test]
    fn cone_points_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (r, h) = (0.7, 1.6);
        let (pts, _) = sample_primitive(&mut rng, Primitive::Cone, 1.0, 300);
        for p in pts {
            let rad = (p.x * p.x + p.y * p.y).sqrt();
            let on_base = (p.z + h / 2.0).abs() < 1e-12 && rad <= r + 1e-12;
            let on_side = (rad - r * (h / 2.0 - p.z) / h).abs() < 1e-9;
            assert!(on_base || on_side);
        }
    }

    #[test]
    fn noise_has_requested_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = PointCloud::new(vec![Vec3::zeros(); 40_000]).unwrap();
        let noisy = add_noise(&mut rng, &base, 0.002).unwrap();
        let vals: Vec<f64> = noisy
            .points()
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var.sqrt() / 0.002f64.sqrt() - 1.0).abs() < 0.05);
    }

    #[test]
    fn invalid_noise_is_a_config_error() {
        let cfg = SynthConfig {
            noise_variance: -1.0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "noise_variance"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn class_contains_every_subclass_and_exact_masks() {
        let cfg = SynthConfig {
            points_per_cloud: 256,
            test_normal_per_class: 2,
            test_anomalous_per_class: 3,
            defect_params: DaGenParams {
                patches: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let c = synthesize_class(&cfg, 1).unwrap();
        let subs: std::collections::BTreeSet<usize> = c.train.iter().map(|s| s.subclass).collect();
        assert_eq!(subs.len(), 2);
        for s in &c.test {
            let m = s.mask.as_ref().unwrap();
            assert_eq!(m.len(), 256);
            assert_eq!(s.stem.starts_with("defect"), m.contains(&1));
        }
        assert_eq!(synthesize_class(&cfg, 1).unwrap(), c);
    }
}
