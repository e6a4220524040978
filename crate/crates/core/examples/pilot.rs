//! Trains a config on a toy corpus and prints the loss trajectory.
//!
//! cargo run --release -p nsf-core --example pilot -- configs/smoke.toml [n_utts]

use std::path::PathBuf;
use std::time::Instant;

use nsf_core::train::{evaluate, toy_dataset, train_with, TrainConfig, Vocoder};

fn main() -> nsf_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "configs/smoke.toml".into()));
    let n: usize = args.next().map(|s| s.parse().expect("n_utts")).unwrap_or(20);
    let cfg = TrainConfig::load(&path)?;
    let data = toy_dataset(n, 0.5, 7)?;
    let start = Instant::now();
    let initial = evaluate(&Vocoder::new(cfg.clone())?, &data)?;
    println!("initial mean loss {:.3}", initial.total);
    let outcome = train_with(Vocoder::new(cfg)?, &data, &mut |r| {
        if r.step % 20 == 0 {
            println!("step {:4} loss {:10.3} |g| {:8.3}", r.step, r.report.total, r.grad_norm);
        }
    })?;
    for e in &outcome.epochs {
        println!("epoch {} mean loss {:.3}", e.epoch, e.mean_total());
    }
    let fin = evaluate(&Vocoder::from_checkpoint(outcome.checkpoint)?, &data)?;
    println!(
        "final mean loss {:.3} ratio {:.3} ({:.1}s)",
        fin.total,
        fin.total / initial.total,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
