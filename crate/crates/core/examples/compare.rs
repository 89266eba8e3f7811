use pivotlab::harness::stats::{mean, wilcoxon_greater};
use pivotlab::harness::{run_variants, EvalMode, RunConfig};

// usage: compare key=value... -- label:key=value,key=value ...
fn main() -> pivotlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let split = args.iter().position(|a| a == "--").unwrap_or(args.len());
    let mut base = RunConfig::default();
    base.eval = EvalMode::Exact;
    for kv in &args[..split] {
        let (k, v) = kv.split_once('=').unwrap();
        base.set(k, v)?;
    }
    let mut variants = Vec::new();
    for spec in args.iter().skip(split + 1) {
        let (label, sets) = spec.split_once(':').unwrap();
        let mut c = base.clone();
        for kv in sets.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').unwrap();
            c.set(k, v)?;
        }
        variants.push((label.to_string(), c));
    }
    let t = std::time::Instant::now();
    let rows = run_variants(&variants, &base.seeds, None)?;
    for r in &rows {
        let e = r.final_evals();
        let peaks: Vec<f64> = r.runs.iter().map(|o| o.log.iter().map(|x| x.eval_success_rate).fold(0.0, f64::max)).collect();
        let declines = r.runs.iter().zip(&peaks).filter(|(o, p)| o.final_eval() <= 0.9 * **p && **p > 0.0).count();
        let s = r.summary();
        println!(
            "{:<14} eval {:.4} ± {:.4}  H {:.4}  rollouts {:.0}  peak {:.4}  declines {}  per-seed {:?}",
            r.label, s.eval_mean, s.eval_std, s.entropy_mean, s.rollouts_mean, mean(&peaks), declines,
            e.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    if rows.len() >= 2 {
        let last = rows.len() - 1;
        let p = wilcoxon_greater(&rows[0].final_evals(), &rows[last].final_evals())?;
        println!("wilcoxon {} > {}: p = {:.4}", rows[0].label, rows[last].label, p.p_value);
    }
    eprintln!("elapsed {:?}", t.elapsed());
    Ok(())
}
