//! Pass/fail bookkeeping for the acceptance suite.

use std::time::{Duration, Instant};

/// Result of one acceptance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

/// Collects criterion outcomes and prints one line per criterion.
#[derive(Debug, Default)]
pub struct Report {
    lines: Vec<(usize, bool)>,
}

impl Report {
    /// Run `check`, fail it if it exceeds `budget`, and print a PASS/FAIL line.
    pub fn run(&mut self, id: usize, name: &str, budget: Duration, check: impl FnOnce() -> Outcome) -> bool {
        let start = Instant::now();
        let outcome = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            }
        };
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let passed = outcome.passed && in_time;
        let timing = if in_time {
            format!("{:.1}s", elapsed.as_secs_f64())
        } else {
            format!("{:.1}s, over the {:.0}s budget", elapsed.as_secs_f64(), budget.as_secs_f64())
        };
        println!(
            "criterion {id} {}: {name} ({}; {timing})",
            if passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
        self.lines.push((id, passed));
        passed
    }

    pub fn failed(&self) -> Vec<usize> {
        self.lines.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect()
    }
}
