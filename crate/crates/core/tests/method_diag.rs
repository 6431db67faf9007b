//! Diagnostic: short runs of every method on one domain pair. Run manually:
//! `cargo test -p mmda-core --test method_diag -- --ignored --nocapture`

use mmda_core::evaluator::average_last_k;
use mmda_core::trainer::{run_experiment, ExperimentConfig, Method};
use std::time::Instant;

#[test]
#[ignore]
fn method_sweep_single_pair() {
    for method in Method::ALL {
        let start = Instant::now();
        let cfg = ExperimentConfig::new(method, "d1", "d2", 1);
        let outcome = run_experiment(&cfg).unwrap();
        let records = &outcome.records;
        let last9 = average_last_k(records, 9, |r| r.target_top1).unwrap();
        let last9_src = average_last_k(records, 9, |r| r.source_top1).unwrap();
        let last = records.last().unwrap();
        println!(
            "{:<18} src {:.3}  tgt {:.3}  (m0 {:.3} m1 {:.3})  losses y {:.3} d {:?} c {:.3}  [{:.1}s]",
            method.as_str(),
            last9_src,
            last9,
            last.modality_target_top1[0],
            last.modality_target_top1[1],
            last.loss_y,
            last.loss_d.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            last.loss_c,
            start.elapsed().as_secs_f64(),
        );
    }
}
