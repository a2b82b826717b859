//! Encodes one sync record, shows its 48 bytes, and checks the golden set.

use std::path::PathBuf;

use sharedspace::sync::{run_conformance, GoldenSet, SyncRecord};

fn main() -> anyhow::Result<()> {
    let r = SyncRecord {
        object_id: 7,
        position: [0.5, 1.0, -1.25],
        rotation: [0.0, 0.70710677, 0.0, 0.70710677],
        scale: [1.0, 1.0, 1.0],
        events: 0,
    };
    let bytes = r.encode();
    println!("{} bytes: {}", bytes.len(), hex::encode(bytes));
    assert_eq!(SyncRecord::decode(&bytes)?, r);

    let set = GoldenSet::load(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/wire/golden.toml"))
        .map_err(anyhow::Error::msg)?;
    let report = run_conformance(&set, 10_000, 1);
    print!("{}", report.to_text());
    anyhow::ensure!(report.passed(), "conformance failed");
    Ok(())
}
