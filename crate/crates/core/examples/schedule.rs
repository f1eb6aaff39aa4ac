//! Timestep intervals and routing for a few layer and group counts.
//!
//! cargo run --example schedule

use latte::schedule::TimestepSchedule;

fn main() -> latte::Result<()> {
    for (layers, groups, overlap) in [(28, 4, 100), (8, 4, 100), (12, 3, 60), (8, 1, 0)] {
        let s = TimestepSchedule::build(layers, groups, 1000, overlap)?;
        println!("L = {layers}, K = {groups}, overlap {overlap}");
        for k in 0..groups {
            let (i, t) = (s.infer_intervals[k], s.train_intervals[k]);
            println!(
                "  group {k} layers {:?}: inference [{}, {}], training [{}, {}]",
                s.layers_of(k),
                i.hi,
                i.lo,
                t.hi,
                t.lo
            );
        }
        let probes: Vec<String> = [1000.0, 750.25, 500.5, 250.75, 0.0]
            .iter()
            .map(|&tau| format!("{tau} -> {}", s.route(tau).unwrap()))
            .collect();
        println!("  routing: {}", probes.join(", "));
    }
    Ok(())
}
