//! Prints the ablation table and the lambda sweep on the default benchmark.
//!
//! Usage: `cargo run --release -p pseudolabel --example ablation [seeds]`

use pseudolabel::sim::trainer::{run_ablation, TrainerConfig, Variant};

fn main() -> pseudolabel::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let base = TrainerConfig::default();
    let start = std::time::Instant::now();
    for s in run_ablation(&base, &Variant::ALL, seeds)? {
        let burn: f64 = s.runs.iter().map(|r| r.burn_in.miou).sum::<f64>() / s.seeds as f64;
        println!(
            "{:<9} miou {:7.3} (burn-in {:7.3}) acc {:.4} precision {:?}",
            s.variant.name(),
            s.mean_miou,
            burn,
            s.mean_pixel_accuracy,
            s.mean_pseudo_precision
        );
    }
    println!("ablation took {:.1?}", start.elapsed());
    for lambda in [0.0, 1.0, 2.0, 4.0, 8.0] {
        let mut cfg = base.clone();
        cfg.loss.lambda = lambda;
        let s = &run_ablation(&cfg, &[Variant::Full], seeds.min(10))?[0];
        println!("lambda {lambda:<4} miou {:7.3}", s.mean_miou);
    }
    Ok(())
}
