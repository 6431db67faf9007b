//! Diagnostic: probe accuracies across default domains. Run manually:
//! `cargo test -p mmda-core --test probe_diag -- --ignored --nocapture`

use mmda_core::synthdata::{generate_domains, nearest_mean_probe, SyntheticDomainSpec};

#[test]
#[ignore]
fn probe_matrix() {
    let specs: Vec<SyntheticDomainSpec> =
        (0..3).map(|i| SyntheticDomainSpec::default_domain(i, 1)).collect();
    let domains = generate_domains(&specs, 1).unwrap();
    for src in 0..3 {
        for tgt in 0..3 {
            let app = nearest_mean_probe(&domains[src].train, &domains[tgt].test, 0);
            let mot = nearest_mean_probe(&domains[src].train, &domains[tgt].test, 1);
            println!(
                "{} -> {}: appearance {:.3}  motion {:.3}",
                domains[src].spec.domain_id, domains[tgt].spec.domain_id, app, mot
            );
        }
    }
}
