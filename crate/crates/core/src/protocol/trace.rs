//! Single-party state-trace session: the owner commits to a tree over a
//! hidden state, funds one output per layer and reveals a path through it,
//! layer by layer. The transcript carries everything `verify_trace` needs.

use super::{ideal_key, Balances, Message, OutcomeReport, ProtocolError, Role, SessionConfig, SessionStatus};
use crate::group::{hash_p, keygen, KeyPair, Scalar};
use crate::ledger::{LedgerState, OutPoint};
use crate::proofs::{BackendTag, ProofSystem, Statement, WitnessData};
use crate::session_net::Envelope;
use crate::statetrace::{
    build_trace_tx, build_tree, reveal_step, PublicTreeCommitments, TracePath, TraceRun, TraceTree, TraceError,
};
use crate::transcript::{Origin, Recorder, Transcript};

/// What the tree-membership proof claims, derived from the public commitments.
pub fn statement(c: &PublicTreeCommitments) -> Statement {
    Statement::Trace { p_a: c.p_a, fns: c.fns.clone(), depth: c.depth, addresses: c.addresses(), state_lock: c.state_lock }
}

pub fn owner_key(party_seed: &[u8; 32]) -> KeyPair {
    keygen(&[&party_seed[..], b"trace"].concat())
}

/// The hidden state, unless the config fixes one.
pub fn hidden_state(cfg: &SessionConfig) -> Scalar {
    cfg.trace.state.unwrap_or_else(|| hash_p(&[&cfg.party_seed(Role::Challenger)[..], b"state"].concat()))
}

/// The executed path, unless the config fixes one: `depth` seeded steps.
pub fn chosen_path(cfg: &SessionConfig) -> TracePath {
    if let Some(p) = &cfg.trace.path {
        return p.clone();
    }
    let seed = cfg.party_seed(Role::Challenger);
    let k = cfg.trace.fns.len().max(1) as u64;
    let steps = (0..cfg.trace.depth)
        .map(|l| {
            let d = crate::group::sha256_parts(&[&seed, b"path", &l.to_be_bytes()]);
            (u64::from_be_bytes(d[..8].try_into().unwrap()) % k) as u8 + 1
        })
        .collect();
    TracePath::new(steps)
}

pub struct TraceSession {
    pub tree: TraceTree,
    pub path: TracePath,
    pub commitments: PublicTreeCommitments,
    pub run: TraceRun,
    pub ledger: LedgerState,
    pub notes: Vec<String>,
    pub transcript: Transcript,
}

/// Runs a trace session in-process and records it.
pub fn run(cfg: &SessionConfig) -> Result<TraceSession, ProtocolError> {
    let seed = cfg.party_seed(Role::Challenger);
    let wallet = keygen(&[&seed[..], b"wallet"].concat());
    let owner = owner_key(&seed);
    let params = &cfg.trace;
    let tree = build_tree(owner.public(), hidden_state(cfg), params.fns.clone(), params.depth)?;
    let path = chosen_path(cfg);
    if path.layer() > tree.depth() as usize || path.steps().iter().any(|j| *j as usize > tree.k()) {
        return Err(TraceError::InvalidPath(format!("{path} is not a path of a depth-{} tree with {} functions", tree.depth(), tree.k())).into());
    }
    let session = cfg.session_id();
    let proofs = ProofSystem::new(ideal_key(&session));
    let mut rec = Recorder::new(session, cfg.clone(), Origin::Local);
    let mut step = 0u32;
    let mut send = |rec: &mut Recorder, msg: Message| {
        rec.record(&Envelope::seal(session, step, Role::Challenger, &msg));
        step += 1;
    };
    let mut notes = Vec::new();

    send(&mut rec, Message::Hello { wallet: wallet.address(), params: Some(cfg.public_params()) });
    let mut ledger = rec.observer().cloned().expect("the hello creates the genesis");
    let genesis = ledger.genesis_id().expect("genesis present");

    let commitments = tree.commitments(params.defer_state);
    let pi_t = proofs.prove(&statement(&commitments), &WitnessData::Trace { state: tree.root_state() }, BackendTag::Ideal).map_err(|e| {
        ProtocolError::BadConfig(format!("tree commitment proof: {e}"))
    })?;
    notes.push(format!("the owner commits to {} nodes over depth {} with {} functions", tree.node_count(), tree.depth(), tree.k()));
    send(&mut rec, Message::TraceCommit { commitments: commitments.clone(), pi_t });

    let trace_tx = build_trace_tx(&tree, OutPoint::new(genesis, 0), &wallet, &ledger, params.defer_state)?;
    ledger.apply(&trace_tx.tx)?;
    notes.push(format!("the trace transaction locks one output per layer ({} outputs)", trace_tx.tx.outputs.len()));
    send(&mut rec, Message::Broadcast { txs: vec![trace_tx.tx.clone()] });

    let mut spends = Vec::new();
    for l in 0..=path.layer() {
        let prefix = path.prefix(l);
        let (next, tx) = reveal_step(&tree, &owner, &trace_tx, &prefix, &ledger, wallet.address())?;
        ledger = next;
        notes.push(format!("layer {l}: spend reveals node {prefix}"));
        send(&mut rec, Message::Broadcast { txs: vec![tx.clone()] });
        spends.push(tx);
    }

    let height = ledger.height();
    let balances = Balances { challenger: rec.balances().challenger, accepter: 0 };
    let report = OutcomeReport {
        flow: cfg.flow,
        session_id: session,
        status: SessionStatus::Completed,
        abort: None,
        accepter_won: None,
        winner: None,
        x: None,
        y: None,
        height,
        balances,
        reclaimed: false,
    };
    let transcript = rec.finish_with(report);
    Ok(TraceSession { tree, path, commitments, run: TraceRun { trace_tx, spends }, ledger, notes, transcript })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Flow;
    use crate::statetrace::verify_trace;
    use crate::transcript::replay;

    #[test]
    fn honest_trace_session_verifies_and_replays() {
        let cfg = SessionConfig::new(Flow::Trace, "trace-demo");
        let s = run(&cfg).unwrap();
        assert_eq!(s.path.layer(), 3);
        assert!(verify_trace(&s.run, &s.commitments));
        let summary = replay(&s.transcript).unwrap();
        assert_eq!(summary.trace_verified, Some(true));
        assert!(summary.reexecuted);
        // Every layer output came back to the wallet.
        assert_eq!(s.transcript.report.balances.challenger, cfg.deposit());
    }

    #[test]
    fn explicit_path_and_deferred_state() {
        let mut cfg = SessionConfig::new(Flow::Trace, "t");
        cfg.trace.path = Some("21".parse().unwrap());
        cfg.trace.defer_state = true;
        let s = run(&cfg).unwrap();
        assert_eq!(s.run.spends.len(), 3);
        assert!(s.commitments.state_lock.is_none());
        assert!(replay(&s.transcript).is_ok());
    }

    #[test]
    fn bad_path_rejected() {
        let mut cfg = SessionConfig::new(Flow::Trace, "t");
        cfg.trace.path = Some("1231".parse().unwrap());
        assert!(matches!(run(&cfg), Err(ProtocolError::Trace(TraceError::InvalidPath(_)))));
        cfg.trace.path = Some("3".parse().unwrap());
        assert!(run(&cfg).is_err());
    }
}
