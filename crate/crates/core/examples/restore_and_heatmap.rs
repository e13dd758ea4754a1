//! Scores a damaged cloud, applies the predicted corrective force and
//! exports a red/blue anomaly heat map.
//!
//! Usage: `restore_and_heatmap [checkpoint] [out.ply]`. Untrained weights
//! are used when no checkpoint is given, so the numbers are only
//! meaningful with a trained model.

use mc4ad::dagen::{generate, DaGenParams};
use mc4ad::io::write_ply;
use mc4ad::net::{Checkpoint, Network, NetworkConfig};
use mc4ad::scoring::{heatmap_colors, restore, score};
use mc4ad::synth::{clean_cloud, Primitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_distance(a: &[mc4ad::geometry::Vec3], b: &[mc4ad::geometry::Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

fn main() -> mc4ad::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let net = match args.next() {
        Some(p) => Network::from_checkpoint(&Checkpoint::load(p.as_ref())?)?,
        None => Network::build(&NetworkConfig::default(), 0)?,
    };
    let out = args.next();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean = clean_cloud(&mut rng, Primitive::Sphere, 1.0, 2048)?;
    let damaged = generate(
        &clean,
        &DaGenParams {
            rng_seed: 21,
            ..DaGenParams::default()
        },
    )?;

    let result = score(&net, &damaged.perturbed)?;
    let restored = restore(&damaged.perturbed, &result.prediction)?;
    println!("object score {:.4}", result.object_score);
    println!(
        "mean distance to clean: damaged {:.5}, restored {:.5}",
        mean_distance(damaged.perturbed.points(), clean.points()),
        mean_distance(restored.points(), clean.points())
    );

    if let Some(path) = out {
        let colors = heatmap_colors(&result.point_scores);
        write_ply(path.as_ref(), &damaged.perturbed, Some(&colors))?;
        println!("wrote {path}");
    }
    Ok(())
}
