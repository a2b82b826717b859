//! How far a noisy tag registration moves shared content, by viewing
//! distance and tag size.

use sharedspace::colocation::NoiseSpec;
use sharedspace::sim::registration_sweep;

fn main() -> anyhow::Result<()> {
    let noise = NoiseSpec::default();
    let table = registration_sweep(&[0.5, 1.0, 2.0, 3.0, 5.0], &[0.1, 0.2], &noise, 100)?;
    print!("{}", table.to_text());
    if let Some(m) = table.mean_within(3.0) {
        println!("mean within 3 m: {:.3} cm", m * 100.0);
    }
    Ok(())
}
