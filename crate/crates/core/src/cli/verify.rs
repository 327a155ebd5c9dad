use serde_json::json;

use super::{manifest, Cli, VerifyArgs, EXIT_OK, EXIT_VERIFY_FAILED};
use crate::error::Result;
use crate::verify::{run_suite, Suite, SuiteReport};

pub fn format_report(report: &SuiteReport) -> String {
    let mut s = format!(
        "{:<12} {:<66} {:>6} {:>12} {:>4} {:<10} {}\n",
        "suite", "check", "trials", "worst", "", "threshold", "result"
    );
    for r in &report.rows {
        s.push_str(&format!(
            "{:<12} {:<66} {:>6} {:>12.3e} {:>4} {:<10.1e} {}\n",
            r.suite,
            r.check,
            r.trials,
            r.worst,
            if r.upper_bound { "<=" } else { ">" },
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}

pub fn run(cli: &Cli, args: &VerifyArgs) -> Result<i32> {
    let suite: Suite = args.suite.parse()?;
    let seed = cli.seed.unwrap_or(0);
    let report = run_suite(suite, seed, args.trials)?;
    print!("{}", format_report(&report));
    let passed = report.all_passed();
    if let Some(out) = &cli.out {
        manifest::create_dir(out)?;
        let doc = json!({
            "command": "verify",
            "tool": manifest::tool_version(),
            "suite": args.suite,
            "seed": seed,
            "trials": args.trials,
            "passed": passed,
            "rows": report.rows,
        });
        manifest::write(&out.join("verify_report.json"), &doc)?;
    }
    Ok(if passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
}
