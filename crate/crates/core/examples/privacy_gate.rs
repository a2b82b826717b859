//! Audits the bundled capture corpus before and after cropping, then runs
//! fifty consent-gated requests and checks every image upload against the
//! approvals seen on the wire.

use std::path::PathBuf;

use sharedspace::privacy::{PrivacyCorpus, PrivacyLevel, PrivacyPolicy};
use sharedspace::sim::{run_virtual, RunOptions, Scenario, SimServices};

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/privacy");
    let corpus = PrivacyCorpus::load(dir.join("corpus.txt"))?;
    let summary = corpus.audit(&PrivacyPolicy::twelve_category());
    println!("{} frames", summary.frames);
    for level in PrivacyLevel::ALL {
        println!(
            "{:<18} original {:>6.2}%  cropped {:>6.2}%",
            level.label(),
            summary.original[&level] * 100.0,
            summary.cropped[&level] * 100.0
        );
    }

    let scenario = Scenario::load(dir.join("scenario.toml"))?;
    let services = SimServices::from_scenario(&scenario)?;
    let out = run_virtual(&scenario, &services, &RunOptions::default())?;
    let a = &out.uploads;
    println!(
        "uploads {} with image {} approvals {} rejections {} timeouts {} violations {:?}",
        a.uploads, a.with_image, a.approvals, a.rejections, a.timeouts, a.violations
    );
    let done = out.clients[0].requests.iter().filter(|r| r.executed_at.is_some()).count();
    println!("requests answered {done}/{}", out.clients[0].requests.len());
    Ok(())
}
