use serde::{Deserialize, Serialize};

use super::{AbortCode, AbortInfo, Flow, Party, ProtocolError, Role, SessionConfig};
use crate::group::Address;
use crate::ledger::{LedgerState, SpendCondition};
use crate::session_net::SessionId;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Completed,
    Aborted,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Accepter,
    Challenger,
    /// No game result; the challenger recovers its stake once timelocks expire.
    ChallengerAfterTimelock,
}

/// Satoshis each party's wallet address controls.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct Balances {
    pub challenger: u64,
    pub accepter: u64,
}

impl Balances {
    pub fn from_ledger(ledger: &LedgerState, challenger: Address, accepter: Address) -> Self {
        let held = |addr: Address| {
            let cond = SpendCondition::p2pkh(addr);
            ledger.utxos().filter(|(_, o)| o.cond == cond).map(|(_, o)| o.amount).sum()
        };
        Balances { challenger: held(challenger), accepter: held(accepter) }
    }

    pub fn of(&self, role: Role) -> u64 {
        match role {
            Role::Challenger => self.challenger,
            Role::Accepter => self.accepter,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub flow: Flow,
    pub session_id: SessionId,
    pub status: SessionStatus,
    pub abort: Option<AbortInfo>,
    pub accepter_won: Option<bool>,
    pub winner: Option<Winner>,
    /// Challenger's hidden index, 1-based; introspection mode only.
    pub x: Option<usize>,
    /// Accepter's guess, 1-based; introspection mode only.
    pub y: Option<usize>,
    pub height: u64,
    pub balances: Balances,
    /// Both parties swept what they could after an abort.
    pub reclaimed: bool,
}

/// Outcome of a run from the parties one process drove.
pub fn summarize(
    cfg: &SessionConfig,
    session_id: SessionId,
    parties: &[&dyn Party],
    height: u64,
    balances: Balances,
) -> OutcomeReport {
    let abort = parties
        .iter()
        .filter_map(|p| p.abort_info().filter(|a| a.by == p.role()))
        .chain(parties.iter().filter_map(|p| p.abort_info()))
        .next()
        .cloned();
    let choice = |role: Role| {
        let own = parties.iter().find(|p| p.role() == role).and_then(|p| p.choice());
        own.map(|i| i + 1).filter(|_| cfg.introspect)
    };
    let mut report = OutcomeReport {
        flow: cfg.flow,
        session_id,
        status: if abort.is_some() { SessionStatus::Aborted } else { SessionStatus::Completed },
        reclaimed: abort.is_some() && cfg.flow.has_funds() && height >= cfg.refund_height(),
        abort,
        accepter_won: parties.iter().find_map(|p| p.verdict()),
        winner: None,
        x: choice(Role::Challenger),
        y: choice(Role::Accepter),
        height,
        balances,
    };
    report.winner = adjudicate(&report).ok();
    report
}

/// Winner is the accepter exactly when its guess matched.
pub fn adjudicate(report: &OutcomeReport) -> Result<Winner, ProtocolError> {
    match (report.accepter_won, &report.abort) {
        (Some(true), _) => Ok(Winner::Accepter),
        (Some(false), _) => Ok(Winner::Challenger),
        (None, Some(AbortInfo { by: Role::Challenger, code: AbortCode::PeerTimeout, .. })) => Ok(Winner::Challenger),
        (None, Some(_)) if report.reclaimed => Ok(Winner::ChallengerAfterTimelock),
        _ => Err(ProtocolError::Incomplete),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(won: Option<bool>, abort: Option<AbortInfo>, reclaimed: bool) -> OutcomeReport {
        OutcomeReport {
            flow: Flow::Thimbles,
            session_id: SessionId([0; 16]),
            status: if abort.is_some() { SessionStatus::Aborted } else { SessionStatus::Completed },
            abort,
            accepter_won: won,
            winner: None,
            x: None,
            y: None,
            height: 0,
            balances: Balances::default(),
            reclaimed,
        }
    }

    fn abort(by: Role, code: AbortCode) -> Option<AbortInfo> {
        Some(AbortInfo { by, step: 3, code, reason: String::new() })
    }

    #[test]
    fn verdicts() {
        assert_eq!(adjudicate(&report(Some(true), None, false)), Ok(Winner::Accepter));
        assert_eq!(adjudicate(&report(Some(false), None, false)), Ok(Winner::Challenger));
        assert_eq!(
            adjudicate(&report(None, abort(Role::Accepter, AbortCode::ProofRejected), true)),
            Ok(Winner::ChallengerAfterTimelock)
        );
        assert_eq!(adjudicate(&report(None, abort(Role::Challenger, AbortCode::PeerTimeout), false)), Ok(Winner::Challenger));
        assert_eq!(adjudicate(&report(None, abort(Role::Challenger, AbortCode::PeerTimeout), true)), Ok(Winner::Challenger));
        assert_eq!(adjudicate(&report(None, None, false)), Err(ProtocolError::Incomplete));
        assert_eq!(adjudicate(&report(None, abort(Role::Accepter, AbortCode::CommitmentMismatch), false)), Err(ProtocolError::Incomplete));
    }
}
