//! Trains ablation variants on a toy corpus and prints held-out metrics.
//!
//! cargo run --release -p nsf-core --example ablation_pilot -- configs/smoke.toml base S3 L3

use std::path::PathBuf;
use std::time::Instant;

use nsf_core::train::ablation::{run_ablation, Variant};
use nsf_core::train::{toy_dataset, TrainConfig};

fn main() -> nsf_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "configs/smoke.toml".into()));
    let variants: Vec<Variant> = args.map(|s| s.parse()).collect::<nsf_core::Result<_>>()?;
    let cfg = TrainConfig::load(&path)?;
    let train_data = toy_dataset(20, 0.5, 7)?;
    let heldout = toy_dataset(5, 0.5, 1007)?;
    println!("variant  train_loss  heldout_loss  periodicity  inter_harmonic  flatness  seconds");
    for v in variants {
        let start = Instant::now();
        let row = run_ablation(&cfg, v, &train_data, &heldout)?;
        println!(
            "{:<7}  {:>10.1}  {:>12.1}  {:>11.4}  {:>14.5}  {:>8.4}  {:>7.1}",
            v.id(),
            row.final_train_loss,
            row.heldout.total,
            row.metrics.periodicity,
            row.metrics.inter_harmonic,
            row.metrics.flatness,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
