use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::planner::PlanResult;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlannerStats {
    pub decisions: usize,
    pub expansions: usize,
    pub mean_depth: f64,
    pub max_depth: usize,
}

impl PlannerStats {
    pub fn record(&mut self, r: &PlanResult) {
        let n = self.decisions as f64;
        self.mean_depth = (self.mean_depth * n + r.mean_depth) / (n + 1.0);
        self.decisions += 1;
        self.expansions += r.expansions;
        self.max_depth = self.max_depth.max(r.max_depth);
    }

    pub fn merge(&self, other: &PlannerStats) -> PlannerStats {
        let total = self.decisions + other.decisions;
        let mean_depth = if total == 0 {
            0.0
        } else {
            (self.mean_depth * self.decisions as f64 + other.mean_depth * other.decisions as f64) / total as f64
        };
        PlannerStats {
            decisions: total,
            expansions: self.expansions + other.expansions,
            mean_depth,
            max_depth: self.max_depth.max(other.max_depth),
        }
    }
}

/// Scores of one agent over a paired episode set.
///
/// JSON-lines schema (one object per report): `agent`, `config_hash`,
/// `seed`, `episodes`, `mean`, `stderr`, `episode_seeds`, `scores`,
/// `wall_clock_secs`, `planner` (null or `{decisions, expansions,
/// mean_depth, max_depth}`). CSV schema: `agent,episode,seed,score`, one row
/// per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub config_hash: u64,
    pub seed: u64,
    pub episodes: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(episodes)`.
    pub stderr: f64,
    pub episode_seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub wall_clock_secs: f64,
    pub planner: Option<PlannerStats>,
}

impl EvalReport {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, self)?;
        writeln!(w)
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "agent,episode,seed,score")?;
        }
        for (i, (seed, score)) in self.episode_seeds.iter().zip(&self.scores).enumerate() {
            writeln!(w, "{},{i},{seed},{score}", self.agent)?;
        }
        Ok(())
    }

    /// Whether this report's mean exceeds `other`'s by more than `k`
    /// combined standard errors.
    pub fn beats(&self, other: &EvalReport, k: f64) -> bool {
        self.mean - other.mean > k * combined_stderr(self.stderr, other.stderr)
    }
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn combined_stderr(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}
