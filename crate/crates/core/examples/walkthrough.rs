//! Runs the two-user living-room scenario on the virtual clock and prints
//! the latency table, bandwidth and final scene.

use std::path::PathBuf;

use sharedspace::sim::{run_virtual, RunOptions, Scenario, SimServices, StalenessProbe};

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/flagship/scenario.toml"));
    let scenario = Scenario::load(&path)?;
    let services = SimServices::from_scenario(&scenario)?;
    let options = RunOptions {
        probe: Some(StalenessProbe {
            owner: "bob".into(),
            observer: "alice".into(),
            object: "cube-1".into(),
        }),
    };
    let out = run_virtual(&scenario, &services, &options)?;

    println!("{}", out.report.to_text());
    println!("{}", out.bandwidth.to_text());
    for c in &out.clients {
        for r in &c.requests {
            println!(
                "{:>12} {:<32} issued {:>6.3}s executed {:?} failed {:?}",
                c.user(),
                r.text,
                r.issued_at,
                r.executed_at,
                r.failed
            );
        }
        for i in &c.issues {
            println!("{:>12} issue: {i:?}", c.user());
        }
    }
    for o in out.session.state().scene.iter() {
        println!("{} {:?} color={:?} at {:?}", o.object_id, o.name, o.color, o.pose.position);
    }
    let worst = out.staleness.iter().map(|s| s.error).fold(0.0, f64::max);
    println!("staleness samples {} worst {:.4} m", out.staleness.len(), worst);
    println!("uploads {:?}", out.uploads);
    println!("digest {}", out.digest);
    Ok(())
}
