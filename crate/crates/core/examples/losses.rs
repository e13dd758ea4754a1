//! Evaluates the three training losses and their gradients on a tiny
//! hand-written force prediction.

use mc4ad::geometry::Vec3;
use mc4ad::losses::{combined_loss, term_gradient, LossConfig, TargetSign, Term};
use mc4ad::net::ForcePrediction;

fn main() -> mc4ad::error::Result<()> {
    let external = vec![
        Vec3::new(0.0, 0.0, -0.05),
        Vec3::new(0.01, 0.0, 0.0),
        Vec3::zeros(),
    ];
    let internal = vec![
        Vec3::new(0.0, 0.0, -0.04),
        Vec3::new(-0.01, 0.0, 0.0),
        Vec3::zeros(),
    ];
    let pred = ForcePrediction::new(external, internal)?;
    // Applied damage: the first point was pushed up by 0.1.
    let displacement = vec![Vec3::new(0.0, 0.0, 0.1), Vec3::zeros(), Vec3::zeros()];

    for sign in [TargetSign::Corrective, TargetSign::Damage] {
        let cfg = LossConfig {
            target_sign: sign,
            ..LossConfig::default()
        };
        let target = cfg.target(&displacement);
        let (loss, grad) = combined_loss(&pred, &target, &cfg)?;
        println!(
            "{sign:?}: L_dist {:.5}  L_dir {:.5}  L_sym {:.5}  total {:.5}",
            loss.dist, loss.dir, loss.sym, loss.total
        );
        println!("  dL/dF_E[0] = {:?}", grad.external[0].as_slice());
        let g_dir = term_gradient(&pred, &target, &cfg, Term::Dir)?;
        println!("  dL_dir/dF_E[0] = {:?}", g_dir.external[0].as_slice());
    }
    Ok(())
}
