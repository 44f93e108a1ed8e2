//! Finite-difference check of every gradient the model uses.

use tubelink::gradcheck::{timed_gradcheck, GradcheckOptions};

fn main() -> tubelink::Result<()> {
    let (report, seconds) = timed_gradcheck(&GradcheckOptions::default())?;
    for c in &report.cases {
        let verdict = if c.passed { "ok" } else { "FAIL" };
        println!("{:<24} {:>3} instances  max rel err {:.2e}  {verdict}", c.name, c.instances, c.max_relative_error);
    }
    println!("all passed: {} in {seconds:.1}s", report.passed);
    Ok(())
}
