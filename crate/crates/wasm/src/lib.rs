//! Browser bindings. Each export takes and returns JSON strings so the page
//! needs no generated type glue; the plain functions underneath are what the
//! tests call natively.

use randlock_core::protocol::{run_local, trace, Flow, Role, SessionConfig};
use randlock_core::statetrace::verify_trace;
use randlock_core::transcript::{replay, Transcript};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest `n` the win matrix accepts; n² sessions run on the page's thread.
pub const MATRIX_MAX_N: usize = 6;

/// Runs one session from a partial config; missing fields take their
/// defaults.
pub fn play_json(config: &str) -> Result<String, String> {
    let cfg: SessionConfig = serde_json::from_str(config).map_err(|e| format!("bad config: {e}"))?;
    let (transcript, notes, trace) = if cfg.flow == Flow::Trace {
        let s = trace::run(&cfg).map_err(|e| e.to_string())?;
        let notes = s.notes.into_iter().map(|n| (Role::Challenger, n)).collect();
        let info = json!({ "path": s.path.to_string(), "verified": verify_trace(&s.run, &s.commitments) });
        (s.transcript, notes, Some(info))
    } else {
        let run = run_local(&cfg).map_err(|e| e.to_string())?;
        (run.transcript.expect("recorded"), run.notes, None)
    };
    let notes: Vec<Value> = notes.iter().map(|(role, line)| json!({ "who": role.alias(), "note": line })).collect();
    let out = json!({
        "report": transcript.report,
        "notes": notes,
        "trace": trace,
        "transcript": transcript,
    });
    Ok(out.to_string())
}

/// Plays every (x, y) pair of a thimbles or oprand game and reports which
/// pairs the accepter won.
pub fn win_matrix_json(flow: &str, n: usize, seed: &str) -> Result<String, String> {
    let flow = match flow {
        "thimbles" => Flow::Thimbles,
        "oprand" => Flow::OpRand,
        other => return Err(format!("the win matrix covers thimbles and oprand, not {other:?}")),
    };
    if !(2..=MATRIX_MAX_N).contains(&n) {
        return Err(format!("n must be within 2..={MATRIX_MAX_N}, got {n}"));
    }
    let mut rows = Vec::with_capacity(n);
    let mut wins = 0;
    for x in 1..=n {
        let mut row = Vec::with_capacity(n);
        for y in 1..=n {
            let mut cfg = SessionConfig::new(flow, format!("{seed}/{x}/{y}"));
            cfg.n = n;
            cfg.x = Some(x);
            cfg.y = Some(y);
            let won = run_local(&cfg).map_err(|e| e.to_string())?.report.accepter_won.unwrap_or(false);
            wins += won as usize;
            row.push(won);
        }
        rows.push(row);
    }
    Ok(json!({ "flow": flow, "n": n, "wins": wins, "matrix": rows }).to_string())
}

/// Checks a transcript written by the CLI, the daemon or `play`.
pub fn replay_json(transcript: &str) -> String {
    let t = match Transcript::from_json(transcript) {
        Ok(t) => t,
        Err(e) => return json!({ "ok": false, "index": null, "reason": e.to_string() }).to_string(),
    };
    match replay(&t) {
        Ok(s) => json!({
            "ok": true,
            "envelopes": s.envelopes,
            "proofs_checked": s.proofs_checked,
            "txs_accepted": s.txs_accepted,
            "reexecuted": s.reexecuted,
            "trace_verified": s.trace_verified,
        }),
        Err(e) => json!({ "ok": false, "index": e.index, "reason": e.reason }),
    }
    .to_string()
}

#[wasm_bindgen]
pub fn play(config: &str) -> Result<String, JsError> {
    play_json(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = winMatrix)]
pub fn win_matrix(flow: &str, n: usize, seed: &str) -> Result<String, JsError> {
    win_matrix_json(flow, n, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = replayTranscript)]
pub fn replay_transcript(transcript: &str) -> String {
    replay_json(transcript)
}
