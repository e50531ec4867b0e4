//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if any fails.
//!
//! Pass criterion numbers to run a subset:
//! `cargo test -p bagan-cli --test acceptance -- 2 3 4`.

mod balance;
mod fid_oracle;
mod loss_oracle;
mod penalty;
mod schedules;
mod toy;

use std::process::ExitCode;
use std::time::Instant;

/// Outcome of one criterion: pass flag plus a human-readable detail line.
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn run(n: usize, toy: &mut toy::ToyRuns) -> Verdict {
    let outcome = match n {
        1 => schedules::criterion(),
        2 => loss_oracle::criterion(),
        3 => penalty::criterion(),
        4 => fid_oracle::criterion(),
        5 => balance::criterion(),
        6 => toy.dispersion(),
        7 => toy.training_effect(),
        8 => toy.ablation(),
        9 => toy.stability(),
        _ => unreachable!(),
    };
    outcome.unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")))
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|n| (1..=9).contains(n))
        .collect();
    let selected = if selected.is_empty() { (1..=9).collect() } else { selected };

    tch::set_num_threads(1);
    let mut toy = toy::ToyRuns::default();
    let mut failed = 0;
    for n in selected {
        let start = Instant::now();
        let v = run(n, &mut toy);
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {status} ({}; {:.1}s)", v.detail, start.elapsed().as_secs_f64());
        if !v.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
