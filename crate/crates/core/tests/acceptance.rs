//! Runs every acceptance criterion against its time limit and prints one
//! PASS/FAIL line each. Exits non-zero when any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

fn main() -> ExitCode {
    let mut failed = 0;
    let criteria = common::all();
    for c in &criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(c.check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > c.limit => Err(format!("took {took:.2?}, limit {:?}; {detail}", c.limit)),
            other => other,
        };
        let (tag, text) = match &outcome {
            Ok(detail) => ("PASS", detail),
            Err(reason) => {
                failed += 1;
                ("FAIL", reason)
            }
        };
        println!("{tag} {} [{took:.2?} / {:?}] {text}", c.name, c.limit);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
