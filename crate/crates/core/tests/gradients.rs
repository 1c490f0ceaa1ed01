use mantis_core::gradsuite::{run_gradient_suite, SuiteOptions};

#[test]
fn suite_passes_for_other_seeds() {
    for seed in [1, 2] {
        let results = run_gradient_suite(&SuiteOptions {
            seed,
            ..Default::default()
        })
        .unwrap();
        let failed: Vec<String> = results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| format!("{}: {}", r.name, r.report))
            .collect();
        assert!(failed.is_empty(), "seed {seed}: {failed:#?}");
    }
}
