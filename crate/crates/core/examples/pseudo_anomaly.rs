//! Damages a clean cylinder with DA-Gen and prints what happened to each
//! displaced patch. Writes the damaged cloud as a colored PLY when given a
//! path.

use mc4ad::dagen::{generate, DaGenParams};
use mc4ad::io::write_ply;
use mc4ad::synth::{clean_cloud, Primitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mc4ad::error::Result<()> {
    let out = std::env::args().nth(1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clean = clean_cloud(&mut rng, Primitive::Cylinder, 1.0, 2048)?;

    let params = DaGenParams {
        rng_seed: 11,
        ..DaGenParams::default()
    };
    let sample = generate(&clean, &params)?;

    let moved = sample.mask.iter().filter(|&&m| m == 1).count();
    let max = sample
        .displacement
        .iter()
        .map(|d| d.norm())
        .fold(0.0, f64::max);
    println!(
        "{} of {} points in {} displaced patches, max displacement {max:.4}",
        moved,
        clean.len(),
        sample.perturbations.len()
    );
    for p in &sample.perturbations {
        let d = &p.draw;
        println!(
            "  seed {:4}  {:2} members  beta {:+}  gamma {:.3}  lambda {:.3}  sigma {:.3}",
            p.patch.seed,
            p.patch.members.len(),
            d.beta,
            d.gamma,
            d.lambda,
            d.sigma
        );
    }

    if let Some(path) = out {
        let colors: Vec<[u8; 3]> = sample
            .mask
            .iter()
            .map(|&m| if m == 1 { [255, 0, 0] } else { [160, 160, 160] })
            .collect();
        write_ply(path.as_ref(), &sample.perturbed, Some(&colors))?;
        println!("wrote {path}");
    }
    Ok(())
}
