use std::time::Instant;

use pivotlab::harness::{RunConfig, Trainer};

fn main() -> pivotlab::Result<()> {
    let mut config = RunConfig::default();
    config.eval = pivotlab::harness::EvalMode::Exact;
    let mut seed = 0;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        if k == "seed" {
            seed = v.parse().unwrap();
        } else {
            config.set(k, v)?;
        }
    }
    let t = Instant::now();
    let trainer = Trainer::new(config, seed)?;
    eprintln!("setup {:?}", t.elapsed());
    let out = trainer.run()?;
    for r in &out.log {
        println!(
            "{:>4} train {:.3} eval {:.6} H {:.4} unrec {} tok {}/{} w {:.3} b {:.3}",
            r.step, r.train_success_rate, r.eval_success_rate, r.entropy, r.unrecoverable_pivots,
            r.tokens_main, r.tokens_aux, r.estimator_w, r.estimator_b
        );
    }
    eprintln!("total {:?} rollouts {}", t.elapsed(), out.rollouts);
    Ok(())
}
