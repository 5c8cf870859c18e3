//! Finite-difference verification of every kernel from the command line.

use covernet::gradcheck::{run_kernel_suite, suite_passes, FaultInjection};

use crate::error::{CliError, CliResult};

pub fn run(inject_fault: bool) -> CliResult<()> {
    let fault = if inject_fault {
        FaultInjection::ConvInputOffset
    } else {
        FaultInjection::None
    };
    let checks = run_kernel_suite(fault);
    for check in &checks {
        println!(
            "{:<24} max_rel_err {:>12.3e}  tolerance {:.0e}  {}",
            check.name,
            check.max_rel_err,
            check.tolerance,
            if check.pass() { "PASS" } else { "FAIL" },
        );
    }
    let passed = checks.iter().filter(|c| c.pass()).count();
    println!("suite: {}/{} checks passed", passed, checks.len());
    if suite_passes(&checks) {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "{} gradient check(s) failed",
            checks.len() - passed
        )))
    }
}
