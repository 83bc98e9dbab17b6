//! Runs the desk-scale ablation and prints per-seed target mIoU.
//!
//! Usage: `desk_ablation [iterations] [seeds] [variants]`, e.g.
//! `desk_ablation 300 5 baseline,meta,mmuda`.

use std::time::Instant;

use mmuda_core::meta::{DeskBenchmark, Variant};

fn main() -> mmuda_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut bench = DeskBenchmark::default();
    if let Some(it) = args.get(1) {
        bench.iterations = it.parse().expect("iterations");
    }
    let seeds: u64 = args.get(2).map_or(5, |s| s.parse().expect("seed count"));
    let variants: Vec<Variant> = args
        .get(3)
        .map_or("baseline,meta,mmuda", String::as_str)
        .split(',')
        .map(|v| v.parse())
        .collect::<mmuda_core::Result<_>>()?;
    let mut sums = vec![0.0; variants.len()];
    for seed in 0..seeds {
        let data = bench.data(seed)?;
        let mut line = format!("seed {seed}");
        for (i, &v) in variants.iter().enumerate() {
            let t = Instant::now();
            let m = bench.run(seed, v, &data)?;
            sums[i] += m;
            line += &format!("  {} {:.2} ({:.0}s)", v.id(), 100.0 * m, t.elapsed().as_secs_f64());
        }
        println!("{line}");
    }
    let means: Vec<String> =
        variants.iter().zip(&sums).map(|(v, s)| format!("{} {:.2}", v.id(), 100.0 * s / seeds as f64)).collect();
    println!("mean  {}", means.join("  "));
    Ok(())
}
