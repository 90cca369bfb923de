//! Bulk thimbles runs for the win-rate statistic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::protocol::{run_with_decisions, Flow, ProtocolError, RunOptions, SessionConfig};

pub const SUMMARY_KIND: &str = "fairness_summary";

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FairnessReport {
    pub kind: String,
    pub v: u32,
    pub sessions: usize,
    pub seed: String,
    pub n: usize,
    pub accepter_wins: usize,
    pub rate: f64,
    /// `matrix[x-1][y-1]`: whether the accepter won with hidden index `x`
    /// and guess `y`, one forced session per cell.
    pub matrix: Vec<Vec<bool>>,
}

impl FairnessReport {
    pub fn matrix_wins(&self) -> usize {
        self.matrix.iter().flatten().filter(|w| **w).count()
    }
}

fn session_won(cfg: &SessionConfig) -> Result<bool, ProtocolError> {
    let run = run_with_decisions(cfg, RunOptions { record: false }, |_, _| None)?;
    run.report.accepter_won.ok_or(ProtocolError::Incomplete)
}

/// Runs `sessions` seeded two-thimble games, each side picking from its own
/// seed, plus one forced game per `(x, y)` cell.
pub fn run_fairness(sessions: usize, seed: &str) -> Result<FairnessReport, ProtocolError> {
    if sessions == 0 {
        return Err(ProtocolError::BadConfig("at least one session is required".into()));
    }
    let n = 2;
    let wins = (0..sessions)
        .into_par_iter()
        .map(|i| {
            let mut cfg = SessionConfig::new(Flow::Thimbles, format!("{seed}/{i}"));
            cfg.n = n;
            session_won(&cfg)
        })
        .try_fold(|| 0usize, |acc, w| w.map(|w| acc + w as usize))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let mut matrix = vec![vec![false; n]; n];
    for x in 1..=n {
        for y in 1..=n {
            let mut cfg = SessionConfig::new(Flow::Thimbles, format!("{seed}/matrix/{x}/{y}"));
            cfg.n = n;
            cfg.x = Some(x);
            cfg.y = Some(y);
            matrix[x - 1][y - 1] = session_won(&cfg)?;
        }
    }
    Ok(FairnessReport {
        kind: SUMMARY_KIND.into(),
        v: 1,
        sessions,
        seed: seed.into(),
        n,
        accepter_wins: wins,
        rate: wins as f64 / sessions as f64,
        matrix,
    })
}

/// Regenerates a stored summary and compares every statistic.
pub fn verify_summary(stored: &FairnessReport) -> Result<(), String> {
    if stored.kind != SUMMARY_KIND || stored.v != 1 {
        return Err(format!("unsupported summary kind {} v{}", stored.kind, stored.v));
    }
    let fresh = run_fairness(stored.sessions, &stored.seed).map_err(|e| e.to_string())?;
    if fresh.accepter_wins != stored.accepter_wins || fresh.matrix != stored.matrix || fresh.n != stored.n {
        return Err(format!(
            "regenerated {} wins over {} sessions, summary says {}",
            fresh.accepter_wins, fresh.sessions, stored.accepter_wins
        ));
    }
    if (fresh.rate - stored.rate).abs() > f64::EPSILON {
        return Err("stored rate does not match the win count".into());
    }
    Ok(())
}
