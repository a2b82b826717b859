//! Claims arriving in one order at the authoritative ledger: every grant
//! bumps the epoch and names the user who lost the object.

use sharedspace::colocation::UserId;
use sharedspace::sync::OwnershipLedger;

fn main() -> anyhow::Result<()> {
    let (alice, bob, carol) = (UserId::from("alice"), UserId::from("bob"), UserId::from("carol"));
    let mut ledger = OwnershipLedger::new();
    ledger.insert_owned(1, alice.clone());
    for who in [&bob, &bob, &carol, &alice] {
        let out = ledger.claim(who, 1)?;
        let lost = out.previous_owner.as_ref().filter(|p| *p != who);
        println!(
            "{who} claims cube-1: epoch {}, {}",
            out.epoch,
            lost.map_or("no transfer".to_string(), |p| format!("{p} is told it lost the object"))
        );
    }
    println!("final owner {}", ledger.owner_of(1).map_or("nobody", |u| u.as_str()));
    Ok(())
}
