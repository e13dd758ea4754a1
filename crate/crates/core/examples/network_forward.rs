//! Builds the full and pruned force networks, runs one forward/backward pass
//! on a unit sphere and reports parameter counts, voxel levels and timings.

use std::time::Instant;

use mc4ad::geometry::{normalize_cloud, PointCloud, Vec3};
use mc4ad::net::{ForwardOptions, Network, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sphere(n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pts = (0..n)
        .map(|_| {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            v.normalize()
        })
        .collect();
    normalize_cloud(&PointCloud::new(pts).unwrap())
}

fn main() -> mc4ad::error::Result<()> {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2048);
    let cloud = sphere(n);
    for cfg in [NetworkConfig::default(), NetworkConfig::pruned()] {
        let net = Network::build(&cfg, 7)?;
        let t0 = Instant::now();
        let trace = net.forward_traced(&cloud, ForwardOptions::default())?;
        let fwd = t0.elapsed();
        let ones = vec![Vec3::new(1.0, 1.0, 1.0); n];
        let t1 = Instant::now();
        let g = net.backward(&trace, &ones, &ones)?;
        let bwd = t1.elapsed();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "{:?}: {} params, levels {:?}, forward {:.1} ms, backward {:.1} ms, |grad| {norm:.3e}",
            cfg.variant,
            net.parameter_count(),
            trace.level_sizes(),
            fwd.as_secs_f64() * 1e3,
            bwd.as_secs_f64() * 1e3,
        );
    }
    Ok(())
}
