//! Measures interaction and response synchronization in real time over
//! loopback TCP, using a receive-only pseudo user on the observer's clock.

use std::path::PathBuf;

use sharedspace::sim::{run_realtime, Scenario, SimServices};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/realtime/scenario.toml"));
    let scenario = Scenario::load(&path)?;
    let services = SimServices::from_scenario(&scenario)?;
    let out = run_realtime(&scenario, &services).await?;
    println!("{}", out.report.to_text());
    for (ch, bytes) in &out.transport {
        println!("{ch:<18} {bytes:>10} bytes on the socket, {:>10} framed", out.framed.get(ch).copied().unwrap_or(0));
    }
    for c in &out.clients {
        for i in &c.issues {
            println!("{} issue: {i:?}", c.user());
        }
    }
    println!("wall time {:.2}s", out.elapsed.as_secs_f64());
    Ok(())
}
