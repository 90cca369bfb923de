//! In-process orchestration of both parties.

use std::collections::VecDeque;

use super::{make_party, summarize, Balances, Decision, DecisionKind, OutcomeReport, Party, ProtocolError, Role, SessionConfig};
use crate::session_net::Envelope;
use crate::transcript::{Origin, Recorder, Transcript};

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Seal every message into an envelope and keep a transcript. Off, the
    /// parties exchange messages directly, which is what bulk runs want.
    pub record: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { record: true }
    }
}

pub struct LocalRun {
    pub transcript: Option<Transcript>,
    pub report: OutcomeReport,
    /// Challenger first.
    pub parties: [Box<dyn Party>; 2],
    /// Narrative lines in the order the parties produced them.
    pub notes: Vec<(Role, String)>,
}

impl LocalRun {
    pub fn party(&self, role: Role) -> &dyn Party {
        self.parties[idx(role)].as_ref()
    }
}

fn idx(role: Role) -> usize {
    match role {
        Role::Challenger => 0,
        Role::Accepter => 1,
    }
}

/// Runs a session with every decision taken from the config or the seeds.
pub fn run_local(cfg: &SessionConfig) -> Result<LocalRun, ProtocolError> {
    run_with_decisions(cfg, RunOptions::default(), |_, _| None)
}

/// Runs a session, asking `choose` for each pending decision. A `None`
/// answer falls back to the party's own default.
pub fn run_with_decisions(
    cfg: &SessionConfig,
    opts: RunOptions,
    mut choose: impl FnMut(Role, DecisionKind) -> Option<Decision>,
) -> Result<LocalRun, ProtocolError> {
    let session = cfg.session_id();
    let mut parties = [
        make_party(cfg, Role::Challenger, cfg.party_seed(Role::Challenger), session)?,
        make_party(cfg, Role::Accepter, cfg.party_seed(Role::Accepter), session)?,
    ];
    let mut rec = opts.record.then(|| Recorder::new(session, cfg.clone(), Origin::Local));
    let mut queue: VecDeque<(Role, super::Out)> = VecDeque::new();
    let mut notes = Vec::new();
    let mut seen = [0usize; 2];
    let mut timeouts = 0;

    queue.extend(parties[0].start().into_iter().map(|o| (Role::Challenger, o)));
    loop {
        let mut progressed = true;
        while progressed {
            progressed = false;
            for role in Role::BOTH {
                let p = &mut parties[idx(role)];
                let Some(kind) = p.pending() else { continue };
                let Some(d) = choose(role, kind).or_else(|| p.auto_decision()) else { continue };
                queue.extend(p.decide(d)?.into_iter().map(|o| (role, o)));
                progressed = true;
            }
        }
        collect_notes(&parties, &mut seen, &mut notes);

        if let Some((sender, out)) = queue.pop_front() {
            let msg = match rec.as_mut() {
                Some(rec) => {
                    let env = Envelope::seal(session, out.step, sender, &out.msg);
                    rec.record(&env);
                    env.message()?
                }
                None => out.msg,
            };
            let receiver = sender.peer();
            let outs = parties[idx(receiver)].handle(&msg);
            queue.extend(outs.into_iter().map(|o| (receiver, o)));
            continue;
        }
        if parties.iter().all(|p| p.is_finished()) {
            break;
        }
        // Nothing in flight: whoever is still waiting hits its deadline.
        let Some(waiting) = Role::BOTH
            .into_iter()
            .find(|r| !parties[idx(*r)].is_finished() && !parties[idx(*r)].is_stalled())
            .or_else(|| Role::BOTH.into_iter().find(|r| !parties[idx(*r)].is_finished()))
        else {
            break;
        };
        timeouts += 1;
        if timeouts > 8 {
            break;
        }
        if let Some(rec) = rec.as_mut() {
            rec.record_timeout(waiting, "peer silent past the deadline");
        }
        let outs = parties[idx(waiting)].on_timeout();
        queue.extend(outs.into_iter().map(|o| (waiting, o)));
    }
    collect_notes(&parties, &mut seen, &mut notes);

    let refs: [&dyn Party; 2] = [parties[0].as_ref(), parties[1].as_ref()];
    let (report, transcript) = match rec {
        Some(rec) => {
            let t = rec.finish(&refs);
            (t.report.clone(), Some(t))
        }
        None => {
            let ledger = parties[0].ledger();
            let balances = Balances::from_ledger(ledger, parties[0].wallet(), parties[1].wallet());
            (summarize(cfg, session, &refs, ledger.height(), balances), None)
        }
    };
    Ok(LocalRun { transcript, report, parties, notes })
}

fn collect_notes(parties: &[Box<dyn Party>; 2], seen: &mut [usize; 2], notes: &mut Vec<(Role, String)>) {
    for role in Role::BOTH {
        let all = parties[idx(role)].notes();
        notes.extend(all[seen[idx(role)]..].iter().map(|n| (role, n.clone())));
        seen[idx(role)] = all.len();
    }
}
