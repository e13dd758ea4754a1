//! Trains the pruned network for a few epochs on freshly sampled normal
//! clouds and prints the per-epoch losses.
//!
//! Usage: `train_small [epochs] [out_dir]`. With an output directory the
//! checkpoint, optimizer state and loss log are written there.

use mc4ad::net::NetworkConfig;
use mc4ad::synth::{clean_cloud, Primitive};
use mc4ad::training::{train, TrainConfig, TrainOutputs, TrainSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mc4ad::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let outputs = TrainOutputs {
        dir: args.next().map(Into::into),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clouds = [(Primitive::Sphere, 1.0), (Primitive::Sphere, 0.6)]
        .iter()
        .map(|&(shape, aspect)| clean_cloud(&mut rng, shape, aspect, 1024))
        .collect::<mc4ad::error::Result<Vec<_>>>()?;

    let spec = TrainSpec {
        network: NetworkConfig::pruned(),
        train: TrainConfig {
            epochs,
            batch_size: 4,
            ..TrainConfig::default()
        },
        ..TrainSpec::default()
    };
    println!("epoch        lr     L_dist      L_dir      L_sym     L_comb");
    let outcome = train(&clouds, &spec, &outputs, None, |e| {
        println!(
            "{:5} {:9.2e} {:10.5} {:10.5} {:10.5} {:10.5}",
            e.epoch, e.lr, e.l_dist, e.l_dir, e.l_sym, e.l_comb
        );
    })?;
    println!(
        "{} optimizer steps, {} parameters",
        outcome.state.adam.step,
        outcome.network.parameter_count()
    );
    Ok(())
}
