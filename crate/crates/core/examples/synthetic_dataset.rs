//! Writes a small intra-class-variance dataset and walks its layout.
//!
//! Usage: `cargo run --example synthetic_dataset -- [out_dir]`. Without an
//! argument the dataset goes to a temporary directory that is removed
//! afterwards.

use std::path::PathBuf;

use mc4ad::io::load_test_sample;
use mc4ad::synth::{synthesize_dataset, Primitive, SynthConfig};

fn main() -> mc4ad::error::Result<()> {
    let (root, _guard) = match std::env::args().nth(1) {
        Some(p) => (PathBuf::from(p), None),
        None => {
            let d = tempfile::tempdir().map_err(|e| mc4ad::error::Error::Io {
                path: PathBuf::from("tempdir"),
                source: e,
            })?;
            (d.path().to_path_buf(), Some(d))
        }
    };
    let cfg = SynthConfig {
        classes: vec![Primitive::Sphere, Primitive::Cone],
        points_per_cloud: 1024,
        train_per_class: 2,
        test_normal_per_class: 2,
        test_anomalous_per_class: 2,
        seed: 5,
        ..SynthConfig::default()
    };
    let layout = synthesize_dataset(&cfg, &root)?;
    println!("dataset at {}", root.display());
    for class in &layout.classes {
        println!(
            "{}: {} train, {} test",
            class.name,
            class.train.len(),
            class.test.len()
        );
        for entry in &class.test {
            let (cloud, mask) = load_test_sample(entry)?;
            let anomalous = mask.iter().filter(|&&m| m == 1).count();
            println!("  {:<11} {} points, {anomalous} masked", entry.stem, cloud.len());
        }
    }
    Ok(())
}
