//! Acceptance gate: runs every criterion and prints one line per
//! criterion, then fails if any did not pass.
//!
//! The MNIST-based criteria (5 to 7) take several minutes on one core.

mod common;

use std::time::Instant;

use common::criteria::{self, Outcome};

#[test]
fn acceptance() {
    let data = common::mnist();
    let suite: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 mask constraints", Box::new(criteria::mask_constraints)),
        ("2 edge-pop correctness", Box::new(criteria::edgepop)),
        ("3 backprop vs finite differences", Box::new(criteria::backprop)),
        ("4 metric oracles", Box::new(criteria::metrics)),
        ("5 freeze and ownership audit", Box::new(|| criteria::freeze_audit(&data))),
        (
            "6 trend reproduction",
            Box::new(|| {
                criteria::trends(&data, &mut |r| {
                    eprintln!(
                        "    seed {}: ensemble {:.4} vs mean member {:.4}; IA {:.4} vs MC {:.4}; ECE {:.4} vs single {:.4}",
                        r.seed, r.ensemble_acc, r.mean_member_acc, r.ia_orthogonal, r.ia_mc, r.ece_orthogonal, r.ece_single
                    )
                })
            }),
        ),
        ("7 subnetwork-count sweep", Box::new(|| criteria::sweep(&data))),
        ("8 persistence", Box::new(criteria::persistence)),
    ];

    let mut failed = Vec::new();
    let mut lines = Vec::new();
    for (name, check) in &suite {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failed.push(*name);
                format!("FAIL criterion {name} ({secs:.1}s): {reason}")
            }
        };
        eprintln!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary:");
    for line in &lines {
        println!("{line}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
