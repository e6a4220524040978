use std::time::Instant;

use nsf_core::dsp::StftConfig;
use nsf_core::gradcheck::run_suite;

fn main() -> nsf_core::Result<()> {
    let start = Instant::now();
    for r in run_suite(&StftConfig::standard_set(), 1)? {
        println!("{:<45} {:.3e} (tol {:.0e}, {} coords) {}", r.name, r.rel_error, r.tolerance, r.coordinates, if r.passed() { "ok" } else { "FAIL" });
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
