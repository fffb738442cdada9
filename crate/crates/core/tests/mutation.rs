use insider_volterra::suite::{Suite, SuiteOptions};

#[test]
fn flipped_theta0_breaks_portfolio_formula() {
    let suite = Suite::new(SuiteOptions { mutate_theta0_sign: true, ..SuiteOptions::default() });
    let r = suite.run(9);
    println!("{}", r.line());
    assert!(!r.passed, "the portfolio criterion must catch a flipped θ₀");
    assert!(r.metrics["max_relative_error"] > 0.2);
}
