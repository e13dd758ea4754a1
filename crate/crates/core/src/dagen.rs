//! Pseudo-anomaly synthesis.
//!
//! A normal cloud is split into random k-NN patches; a subset of them is
//! displaced along a perturbed surface normal with a magnitude that is
//! largest at the patch seed and decays to zero at the patch rim. The
//! applied displacement field is returned alongside the damaged cloud and
//! serves as exact per-point supervision.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DEFAULT_NORMAL_K;
use crate::geometry::{estimate_normals, sample_patches, PatchIndex, PointCloud, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaGenParams {
    /// Number of patches sampled per cloud (G).
    pub patches: usize,
    /// Points per patch (K); `None` means `ceil(n / patches)`.
    pub patch_size: Option<usize>,
    pub gamma_range: [f64; 2],
    pub lambda_range: [f64; 2],
    pub sigma_range: [f64; 2],
    /// Fraction of the sampled patches that are actually displaced.
    pub perturb_fraction: f64,
    pub rng_seed: u64,
}

impl Default for DaGenParams {
    fn default() -> Self {
        Self {
            patches: 64,
            patch_size: None,
            gamma_range: [0.06, 0.12],
            lambda_range: [0.95, 1.0],
            sigma_range: [0.0, 0.08],
            perturb_fraction: 0.10,
            rng_seed: 0,
        }
    }
}

impl DaGenParams {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: &[f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        let g = &self.gamma_range;
        if !ordered(g) || g[0] <= 0.0 || g[1] >= 1.0 {
            return Err(Error::config(
                "gamma_range",
                "must be an ordered interval inside (0, 1)",
            ));
        }
        let l = &self.lambda_range;
        if !ordered(l) || l[0] < 0.0 || l[1] > 1.0 {
            return Err(Error::config(
                "lambda_range",
                "must be an ordered interval inside [0, 1]",
            ));
        }
        let s = &self.sigma_range;
        if !ordered(s) || s[0] < 0.0 || s[1] >= 1.0 {
            return Err(Error::config(
                "sigma_range",
                "must be an ordered interval inside [0, 1)",
            ));
        }
        if !(self.perturb_fraction > 0.0 && self.perturb_fraction <= 1.0) {
            return Err(Error::config("perturb_fraction", "must lie in (0, 1]"));
        }
        if self.patches == 0 {
            return Err(Error::config("patches", "must be >= 1"));
        }
        if self.patch_size == Some(0) {
            return Err(Error::config("patch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Patch size used for a cloud of `n` points.
    pub fn patch_size_for(&self, n: usize) -> usize {
        self.patch_size
            .unwrap_or_else(|| n.div_ceil(self.patches.max(1)))
    }

    /// Number of patches displaced per sample: `round(fraction * G)`, at least 1.
    pub fn perturbed_count(&self) -> usize {
        ((self.perturb_fraction * self.patches as f64).round() as usize)
            .clamp(1, self.patches.max(1))
    }
}

/// Random parameters drawn for one displaced patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchDraw {
    /// +1 pushes along the normal, -1 against it.
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub sigma: f64,
    /// Random unit direction mixed into the normal.
    pub eta: Vec3,
}

impl PatchDraw {
    /// `beta * lambda * normal + (1 - lambda) * eta`; its norm is at most 1.
    pub fn direction(&self, normal: &Vec3) -> Vec3 {
        normal * (self.beta * self.lambda) + self.eta * (1.0 - self.lambda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPerturbation {
    pub patch: PatchIndex,
    pub draw: PatchDraw,
    /// Attenuation per member, aligned with `patch.members`.
    pub attenuation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAnomalySample {
    /// Damaged cloud; its labels equal `mask`.
    pub perturbed: PointCloud,
    /// Applied displacement per point, zero outside displaced patches.
    pub displacement: Vec<Vec3>,
    pub mask: Vec<u8>,
    pub perturbations: Vec<PatchPerturbation>,
}

/// Attenuation of each patch member: `1 - rho / max(rho)`, where `rho` is
/// the member's distance from the seed inside the seed's tangent plane.
///
/// The seed gets 1 and the farthest member 0. A patch with all `rho = 0`
/// is uniformly 1.
pub fn attenuation(patch: &PatchIndex, cloud: &PointCloud) -> Vec<f64> {
    let pts = cloud.points();
    let seed = pts[patch.seed];
    let nu = patch.seed_normal;
    let rho: Vec<f64> = patch
        .members
        .iter()
        .map(|&m| {
            let d = pts[m] - seed;
            (d - nu * d.dot(&nu)).norm()
        })
        .collect();
    let max = rho.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![1.0; rho.len()];
    }
    rho.iter().map(|r| 1.0 - r / max).collect()
}

/// Displacement of every patch member for one set of drawn parameters:
/// `direction * gamma * pi * (1 - sigma * |pi|)`.
pub fn perturb_patch(patch: &PatchIndex, draw: &PatchDraw, attenuation: &[f64]) -> Vec<Vec3> {
    let dir = draw.direction(&patch.seed_normal);
    attenuation
        .iter()
        .map(|&pi| dir * (draw.gamma * pi * (1.0 - draw.sigma * pi.abs())))
        .collect()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

pub fn draw_patch_params<R: Rng + ?Sized>(rng: &mut R, params: &DaGenParams) -> PatchDraw {
    let beta = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let gamma = uniform(rng, params.gamma_range);
    let lambda = uniform(rng, params.lambda_range);
    let sigma = uniform(rng, params.sigma_range);
    let e: [f64; 3] = UnitSphere.sample(rng);
    PatchDraw {
        beta,
        gamma,
        lambda,
        sigma,
        eta: Vec3::new(e[0], e[1], e[2]),
    }
}

/// Produces one pseudo-anomalous sample from a normal cloud.
///
/// Normals are estimated (k = 16) when the cloud carries none. Overlapping
/// displacements add up, accumulated in ascending patch order.
pub fn generate(cloud: &PointCloud, params: &DaGenParams) -> Result<PseudoAnomalySample> {
    params.validate()?;
    let n = cloud.len();
    let k = params.patch_size_for(n);
    if params.patches > n {
        return Err(Error::invalid(format!(
            "patch count {} exceeds point count {n}",
            params.patches
        )));
    }
    if k > n {
        return Err(Error::invalid(format!(
            "patch size {k} exceeds point count {n}"
        )));
    }
    let with_normals;
    let cloud = if cloud.normals().is_some() {
        cloud
    } else {
        if n < 3 {
            return Err(Error::invalid("normal estimation needs at least 3 points"));
        }
        with_normals = estimate_normals(cloud, DEFAULT_NORMAL_K.min(n))?.0;
        &with_normals
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let patches = sample_patches(cloud, params.patches, k, &mut rng)?;
    let mut chosen = index::sample(&mut rng, patches.len(), params.perturbed_count()).into_vec();
    chosen.sort_unstable();

    let mut displacement = vec![Vec3::zeros(); n];
    let mut perturbations = Vec::with_capacity(chosen.len());
    for pi in chosen {
        let patch = &patches[pi];
        let draw = draw_patch_params(&mut rng, params);
        let att = attenuation(patch, cloud);
        for (&m, d) in patch.members.iter().zip(perturb_patch(patch, &draw, &att)) {
            displacement[m] += d;
        }
        perturbations.push(PatchPerturbation {
            patch: patch.clone(),
            draw,
            attenuation: att,
        });
    }

    let mask: Vec<u8> = displacement
        .iter()
        .map(|d| u8::from(d.norm() > 0.0))
        .collect();
    let points = cloud
        .points()
        .iter()
        .zip(&displacement)
        .map(|(p, d)| p + d)
        .collect();
    let perturbed = PointCloud::new(points)?.with_labels(mask.clone())?;
    Ok(PseudoAnomalySample {
        perturbed,
        displacement,
        mask,
        perturbations,
    })
}
