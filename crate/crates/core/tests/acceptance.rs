//! Acceptance criteria 1 to 12 on the shipped scenarios. Prints one
//! pass/fail line per criterion, then exits nonzero if any criterion failed.
//!
//! `ACCEPTANCE_CRITERIA=4,11` restricts the run to a subset.

use ergolab::audit::{Audit, CRITERIA};
use ergolab::scenario::Scenario;

fn selected() -> Vec<u32> {
    match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(v) if !v.trim().is_empty() => v.split(',').map(|s| s.trim().parse().expect("criterion number")).collect(),
        _ => CRITERIA.to_vec(),
    }
}

fn main() {
    let main = Scenario::builtin("heat", &[]).expect("heat scenario");
    let mut audit = Audit::new(main).expect("companion scenarios");
    let report = audit
        .run_all(&selected(), |o| {
            println!("{}", o.line());
        })
        .expect("audit configuration");
    let failed: Vec<u32> = report.criteria.iter().filter(|c| !c.pass).map(|c| c.id).collect();
    println!("acceptance: {} of {} criteria passed", report.criteria.len() - failed.len(), report.criteria.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
