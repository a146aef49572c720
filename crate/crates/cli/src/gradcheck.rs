use clap::Args;
use deepe_core::gradcheck::{run_gradcheck, tolerance_for, GradcheckOptions};
use deepe_core::Precision;

use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// 64 (default) or 32. At 32 bits the tolerance is loosened and a
    /// warning is printed.
    #[arg(long, default_value = "64", value_parser = ["32", "64"])]
    pub precision: String,
    /// Scale analytic gradients by 1 + 1e-3; the check should then fail.
    #[arg(long)]
    pub perturb_backward: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: &GradcheckArgs) -> CmdResult {
    let precision = if args.precision == "32" { Precision::F32 } else { Precision::F64 };
    if precision == Precision::F32 {
        eprintln!(
            "warning: 32-bit finite differences are coarse; tolerance raised to {:e}",
            tolerance_for(precision)
        );
    }
    let report = run_gradcheck(&GradcheckOptions {
        precision,
        perturb_backward: args.perturb_backward,
        seed: args.seed,
    })?;
    for g in &report.groups {
        let mark = if g.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        println!("{:<28} {:>5} params  max rel err {:.3e}  {mark}", g.group, g.checked, g.max_rel_error);
    }
    println!(
        "precision {} tolerance {:e}: max rel err {:.3e}",
        report.precision,
        report.tolerance,
        report.max_rel_error()
    );
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|g| g.group.as_str()).collect();
        Err(Failure::Check(format!("gradient check failed for {}", names.join(", "))))
    }
}
