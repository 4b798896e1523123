//! Verify every differentiable primitive and a full-model micro instance
//! against central finite differences.
//!
//!     cargo run --release --example gradcheck

use steerer::harness::{run_gradcheck, GradCheckOptions};

fn main() -> steerer::Result<()> {
    let opts = GradCheckOptions {
        trials: 20,
        corrupt: None,
    };
    let report = run_gradcheck(17, &opts)?;
    print!("{}", report.to_text());
    if report.all_passed() {
        println!("all gradients verified");
    }
    Ok(())
}
