//! Two-stage screening: a pruned network scores every cloud, the lowest
//! quarter is passed as normal and the rest is rescored by the full network.
//!
//! Pass two checkpoint paths (pruned, full) to use trained weights;
//! otherwise freshly initialized networks are used.

use mc4ad::geometry::normalize_cloud;
use mc4ad::net::{Checkpoint, Network, NetworkConfig};
use mc4ad::scoring::{hqc_run, score, HqcConfig, Stage};
use mc4ad::synth::{clean_cloud, Primitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn load_or_build(path: Option<String>, cfg: NetworkConfig) -> mc4ad::error::Result<Network> {
    match path {
        Some(p) => Network::from_checkpoint(&Checkpoint::load(p.as_ref())?),
        None => Network::build(&cfg, 1),
    }
}

fn main() -> mc4ad::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let pruned = load_or_build(args.next(), NetworkConfig::pruned())?;
    let full = load_or_build(args.next(), NetworkConfig::default())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shapes = [Primitive::Sphere, Primitive::Cylinder, Primitive::Box, Primitive::Cone];
    let samples = (0..12)
        .map(|i| {
            let aspect = if i % 2 == 0 { 1.0 } else { 0.7 };
            clean_cloud(&mut rng, shapes[i % 4], aspect, 2048).map(|c| normalize_cloud(&c))
        })
        .collect::<mc4ad::error::Result<Vec<_>>>()?;

    let report = hqc_run(&samples, &pruned, &full, &HqcConfig::default())?;
    print!("{}", report.to_csv());
    let s = &report.summary;
    println!(
        "bypassed {} of {}; stage 1 {:.3} s, stage 2 {:.3} s, {:.1} clouds/s",
        s.bypass_count, s.n, s.stage1_seconds, s.stage2_seconds, s.effective_fps
    );

    // Rescored samples carry exactly the full network's score.
    for r in report.records.iter().filter(|r| r.stage == Stage::Rescored) {
        let alone = score(&full, &samples[r.sample_id])?.object_score;
        assert_eq!(alone.to_bits(), r.final_object_score.to_bits());
    }
    Ok(())
}
