use std::io::Write;
use xva_core::verify::{render, run, tol, VerifyConfig, TITLES};

#[test]
fn tolerances_are_pinned() {
    assert_eq!(tol::SE_MULTIPLE, 3.0);
    assert_eq!(tol::SE_RELATIVE, 1e-3);
    assert_eq!(tol::LINEAR_RUNTIME_SECONDS, 60.0);
    assert_eq!(tol::IDENTITY, 1e-10);
    assert_eq!(tol::COLLAPSE, 1e-12);
    assert_eq!(tol::DEGENERATE, 1e-8);
    assert_eq!(tol::WEALTH_INDEPENDENCE, 1e-10);
    assert_eq!(tol::REFINEMENT, (1.5, 3.0));
    assert_eq!(tol::CLOSEOUT_TUPLES, 10_000);
    let cfg = VerifyConfig::default();
    assert_eq!((cfg.paths, cfg.steps), (100_000, 128));
}

#[test]
fn acceptance() {
    let cfg = VerifyConfig::default();
    let mut failed = Vec::new();
    for id in 1..=TITLES.len() {
        let outcome = run(id, &cfg);
        // Written to the handle directly so the line survives output capture.
        writeln!(std::io::stdout().lock(), "{}", outcome.line()).unwrap();
        if !outcome.passed() {
            eprint!("{}", render(std::slice::from_ref(&outcome)));
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
