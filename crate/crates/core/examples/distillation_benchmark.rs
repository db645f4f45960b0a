//! Runs the synthetic distillation benchmark for the seeds given on the
//! command line (default 0 1 2) and prints ADE₁ per model.

use trajkd::benchmark::{median, run_seed, BenchmarkConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse())
        .collect::<Result<_, _>>()?;
    let seeds = if seeds.is_empty() {
        vec![0, 1, 2]
    } else {
        seeds
    };
    let config = BenchmarkConfig::default();
    let mut gains = Vec::new();
    for seed in seeds {
        let out = run_seed(&config, seed)?;
        println!(
            "seed {seed}: const-vel {:.3}  teacher {:.3}  student {:.3}  distilled {:.3}  gain {:+.1}%",
            out.baseline.ade_1,
            out.teacher.ade_1,
            out.student.ade_1,
            out.distilled.ade_1,
            out.kd_gain_percent()
        );
        gains.push(out.kd_gain_percent());
    }
    println!("median gain {:+.1}%", median(&gains).unwrap_or(f64::NAN));
    Ok(())
}
