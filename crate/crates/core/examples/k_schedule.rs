//! The active-expert curriculum: `k` rises linearly from `k_min` to `N`.

use smdk::schedule::KSchedule;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = 2000;
    let linear = KSchedule::linear(2, 8, steps)?;
    let fixed = KSchedule::constant(2, steps)?;
    let mut last = 0;
    for t in 0..steps {
        let k = linear.k_at(t)?;
        if k != last {
            println!("step {t:>5}: k = {k}");
            last = k;
        }
    }
    println!("constant schedule at step 1999: k = {}", fixed.k_at(1999)?);
    Ok(())
}
