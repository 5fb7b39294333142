//! Euler discretization error of the expected reward and of its gradient:
//! both shrink linearly in the step size.

use flowtune::verify::{standard_grad_check, standard_value_check};

fn main() -> flowtune::Result<()> {
    println!("value error |J - J~| against dt on five random rate models:");
    for report in standard_value_check(1)? {
        print!("  {:<34} slope {:.3}  errors", report.check, report.slope);
        for p in &report.points {
            print!(" {:.2e}", p.error);
        }
        println!("  pass={}", report.pass);
    }
    println!("\ngradient error ||grad J - grad J~||_inf against dt:");
    for report in standard_grad_check(1)? {
        print!("  {:<34} slope {:.3}  errors", report.check, report.slope);
        for p in &report.points {
            print!(" {:.2e}", p.error);
        }
        println!("  pass={}", report.pass);
    }
    Ok(())
}
