//! Commitment tree over a hidden state and its transition functions, spent
//! layer by layer from one multi-output transaction.
//!
//! Node points follow
//!
//! ```text
//! P_0          = P_a + s·G
//! P_{path ∥ j} = P_a + hash_p(P_path)·G + f_j(state_path)·G
//! ```
//!
//! Transition functions are affine (`f(x) = m·x + c`), which lets a verifier
//! check the chain on points alone: with `S = state·G`, `f(state)·G = m·S + c·G`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{hash_160, hash_p, hash_p_point, sig_gen, sig_ver, Address, GroupPoint, KeyPair, Scalar};
use crate::ledger::{check_condition, LedgerError, LedgerState, OutPoint, SpendCondition, Transaction, TxOut, Witness, SATS_PER_BTC};

pub const MAX_DEPTH: u32 = 8;
pub const MAX_LEAVES: usize = 4096;
/// Amount locked in each layer output.
pub const LAYER_AMOUNT: u64 = SATS_PER_BTC;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("depth {depth} with {k} functions is outside the supported range")]
    DepthLimit { depth: u32, k: usize },
    #[error("degenerate state: {0}")]
    DegenerateState(String),
    #[error("funding of {have} sat does not cover {need} sat")]
    InsufficientFunds { need: u64, have: u64 },
    #[error("funding outpoint is not in the ledger")]
    MissingFunding,
    #[error("out of order: {0}")]
    OutOfOrder(String),
    #[error("path does not extend the branch revealed on the previous layer")]
    WrongBranch,
    #[error("invalid path {0}")]
    InvalidPath(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// `f(x) = mul·x + add` over the scalar field.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TransitionFn {
    pub mul: Scalar,
    pub add: Scalar,
}

impl TransitionFn {
    pub fn add_const(c: u64) -> Self {
        TransitionFn { mul: Scalar::ONE, add: Scalar::from_u64(c) }
    }

    pub fn scale(c: u64) -> Self {
        TransitionFn { mul: Scalar::from_u64(c), add: Scalar::ZERO }
    }

    pub fn apply(&self, x: &Scalar) -> Scalar {
        self.mul * *x + self.add
    }

    /// `f(x)·G` from `x·G`.
    pub fn apply_point(&self, x_g: &GroupPoint) -> GroupPoint {
        *x_g * self.mul + self.add.base_mul()
    }
}

impl FromStr for TransitionFn {
    type Err = String;

    /// `add:N`, `mul:N` or `affine:M,C`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, arg) = s.split_once(':').ok_or_else(|| format!("expected kind:value, got {s:?}"))?;
        let num = |v: &str| v.trim().parse::<u64>().map_err(|e| format!("{v:?}: {e}"));
        match kind {
            "add" => Ok(TransitionFn::add_const(num(arg)?)),
            "mul" => Ok(TransitionFn::scale(num(arg)?)),
            "affine" => {
                let (m, c) = arg.split_once(',').ok_or("affine needs M,C")?;
                Ok(TransitionFn { mul: Scalar::from_u64(num(m)?), add: Scalar::from_u64(num(c)?) })
            }
            _ => Err(format!("unknown transition kind {kind:?}")),
        }
    }
}

/// `f₁(s) = s + 1`, `f₂(s) = 2s`.
pub fn default_fns() -> Vec<TransitionFn> {
    vec![TransitionFn::add_const(1), TransitionFn::scale(2)]
}

/// Bytes that open the layer-0 hashlock.
pub fn state_preimage(state: &Scalar) -> Vec<u8> {
    state.to_bytes().to_vec()
}

/// Sequence of 1-based function ids from the root.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct TracePath(Vec<u8>);

impl TracePath {
    pub fn root() -> Self {
        TracePath(Vec::new())
    }

    pub fn new(steps: Vec<u8>) -> Self {
        TracePath(steps)
    }

    pub fn steps(&self) -> &[u8] {
        &self.0
    }

    pub fn layer(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, j: u8) -> Self {
        let mut v = self.0.clone();
        v.push(j);
        TracePath(v)
    }

    pub fn prefix(&self, len: usize) -> Self {
        TracePath(self.0[..len].to_vec())
    }

    /// Position among the nodes of its layer, in lexicographic order.
    pub fn index_in_layer(&self, k: usize) -> usize {
        self.0.iter().fold(0, |acc, j| acc * k + (*j as usize - 1))
    }

    pub fn from_index(layer: usize, mut index: usize, k: usize) -> Self {
        let mut steps = vec![0u8; layer];
        for slot in steps.iter_mut().rev() {
            *slot = (index % k) as u8 + 1;
            index /= k;
        }
        TracePath(steps)
    }
}

impl fmt::Display for TracePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("root");
        }
        let parts: Vec<String> = self.0.iter().map(|j| j.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl fmt::Debug for TracePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TracePath({self})")
    }
}

impl FromStr for TracePath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.is_empty() || s == "root" {
            return Ok(TracePath::root());
        }
        let steps = if s.contains(',') {
            s.split(',').map(|p| p.trim().parse::<u8>().map_err(|e| e.to_string())).collect::<Result<Vec<_>, _>>()?
        } else {
            s.chars().map(|c| c.to_digit(10).map(|d| d as u8).ok_or(format!("bad step {c:?}"))).collect::<Result<Vec<_>, _>>()?
        };
        if steps.iter().any(|j| *j == 0) {
            return Err("steps are 1-based".into());
        }
        Ok(TracePath(steps))
    }
}

impl From<TracePath> for String {
    fn from(p: TracePath) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for TracePath {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct TraceNode {
    pub path: TracePath,
    pub point: GroupPoint,
    pub address: Address,
    /// `hash_p(P_parent)`, zero at the root.
    parent_hash: Scalar,
    state: Scalar,
}

impl TraceNode {
    /// Secret offset over `P_a`: the spend key is `sk_a + offset`.
    fn offset(&self) -> Scalar {
        self.parent_hash + self.state
    }
}

impl fmt::Debug for TraceNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TraceNode").field("path", &self.path).field("point", &self.point).finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub struct TraceTree {
    p_a: GroupPoint,
    fns: Vec<TransitionFn>,
    layers: Vec<Vec<TraceNode>>,
}

fn check_shape(k: usize, depth: u32) -> Result<(), TraceError> {
    let leaves = (k as u128).checked_pow(depth).unwrap_or(u128::MAX);
    if !(1..=MAX_DEPTH).contains(&depth) || k < 2 || leaves > MAX_LEAVES as u128 {
        return Err(TraceError::DepthLimit { depth, k });
    }
    Ok(())
}

pub fn build_tree(p_a: GroupPoint, state: Scalar, fns: Vec<TransitionFn>, depth: u32) -> Result<TraceTree, TraceError> {
    check_shape(fns.len(), depth)?;
    if p_a.is_identity() {
        return Err(TraceError::DegenerateState("owner key is the identity".into()));
    }
    let root_point = p_a + state.base_mul();
    if root_point.is_identity() {
        return Err(TraceError::DegenerateState("root commitment is the identity".into()));
    }
    let root = TraceNode {
        path: TracePath::root(),
        point: root_point,
        address: hash_160(&root_point).expect("non-identity"),
        parent_hash: Scalar::ZERO,
        state,
    };
    let mut layers = vec![vec![root]];
    for _ in 0..depth {
        let parents = layers.last().unwrap();
        let mut next = Vec::with_capacity(parents.len() * fns.len());
        for parent in parents {
            let parent_hash = hash_p_point(&parent.point);
            let first_child = next.len();
            for (j, f) in fns.iter().enumerate() {
                let child_state = f.apply(&parent.state);
                let point = p_a + (parent_hash + child_state).base_mul();
                if point.is_identity() {
                    return Err(TraceError::DegenerateState(format!("node {} is the identity", parent.path.child(j as u8 + 1))));
                }
                if next[first_child..].iter().any(|n: &TraceNode| n.point == point) {
                    return Err(TraceError::DegenerateState(format!("siblings under {} collide", parent.path)));
                }
                next.push(TraceNode {
                    path: parent.path.child(j as u8 + 1),
                    point,
                    address: hash_160(&point).expect("non-identity"),
                    parent_hash,
                    state: child_state,
                });
            }
        }
        layers.push(next);
    }
    Ok(TraceTree { p_a, fns, layers })
}

impl TraceTree {
    pub fn depth(&self) -> u32 {
        (self.layers.len() - 1) as u32
    }

    pub fn k(&self) -> usize {
        self.fns.len()
    }

    pub fn owner(&self) -> GroupPoint {
        self.p_a
    }

    pub fn fns(&self) -> &[TransitionFn] {
        &self.fns
    }

    pub fn node_count(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    pub fn layer(&self, l: usize) -> &[TraceNode] {
        &self.layers[l]
    }

    pub fn root_state(&self) -> Scalar {
        self.layers[0][0].state
    }

    pub fn node(&self, path: &TracePath) -> Result<&TraceNode, TraceError> {
        let k = self.k();
        if path.layer() > self.depth() as usize || path.steps().iter().any(|j| *j as usize > k || *j == 0) {
            return Err(TraceError::InvalidPath(path.to_string()));
        }
        Ok(&self.layers[path.layer()][path.index_in_layer(k)])
    }

    /// All node addresses, layer by layer.
    pub fn addresses(&self) -> Vec<Address> {
        self.layers.iter().flatten().map(|n| n.address).collect()
    }

    /// `hash_p` of the layer-0 preimage.
    pub fn state_lock(&self) -> Scalar {
        hash_p(&state_preimage(&self.root_state()))
    }

    pub fn commitments(&self, defer_state: bool) -> PublicTreeCommitments {
        PublicTreeCommitments {
            v: 1,
            p_a: self.p_a,
            depth: self.depth(),
            fns: self.fns.clone(),
            state_lock: (!defer_state).then(|| self.state_lock()),
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|n| NodeCommitment { path: n.path.clone(), point: n.point, address: n.address }).collect())
                .collect(),
        }
    }

    fn layer_condition(&self, l: usize, defer_state: bool) -> SpendCondition {
        if l == 0 {
            let leaf = SpendCondition::p2pkh(self.layers[0][0].address);
            if defer_state {
                leaf
            } else {
                SpendCondition::hash_lock(self.state_lock(), leaf)
            }
        } else {
            SpendCondition::any_of(self.layers[l].iter().map(|n| SpendCondition::p2pkh(n.address)).collect())
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct NodeCommitment {
    pub path: TracePath,
    pub point: GroupPoint,
    pub address: Address,
}

/// Public view of a tree: points and addresses, never the state.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PublicTreeCommitments {
    pub v: u32,
    pub p_a: GroupPoint,
    pub depth: u32,
    pub fns: Vec<TransitionFn>,
    pub state_lock: Option<Scalar>,
    pub layers: Vec<Vec<NodeCommitment>>,
}

impl PublicTreeCommitments {
    pub fn addresses(&self) -> Vec<Address> {
        self.layers.iter().flatten().map(|n| n.address).collect()
    }

    /// Checks every node against its parent on points alone.
    pub fn check_structure(&self) -> bool {
        let k = self.fns.len();
        if self.v != 1 || check_shape(k, self.depth).is_err() || self.layers.len() != self.depth as usize + 1 {
            return false;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.len() != k.pow(l as u32) {
                return false;
            }
            for (i, node) in layer.iter().enumerate() {
                if node.path != TracePath::from_index(l, i, k) || hash_160(&node.point).ok() != Some(node.address) {
                    return false;
                }
            }
        }
        let mut parent_states = vec![self.layers[0][0].point - self.p_a];
        for l in 1..self.layers.len() {
            let mut states = Vec::with_capacity(self.layers[l].len());
            for (i, node) in self.layers[l].iter().enumerate() {
                let parent = &self.layers[l - 1][i / k];
                let s = node.point - self.p_a - hash_p_point(&parent.point).base_mul();
                if s != self.fns[i % k].apply_point(&parent_states[i / k]) {
                    return false;
                }
                states.push(s);
            }
            parent_states = states;
        }
        true
    }
}

/// The layered transaction: output `l` locks the layer-`l` nodes.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TraceTx {
    pub tx: Transaction,
    pub depth: u32,
    pub defer_state: bool,
}

impl TraceTx {
    pub fn layer_outpoint(&self, l: usize) -> OutPoint {
        self.tx.outpoint(l as u32)
    }
}

/// Funds one output per layer from `funding`, which must be a P2PKH utxo of
/// `funding_key`. Any excess over `(depth + 1) · LAYER_AMOUNT` is fee.
pub fn build_trace_tx(
    tree: &TraceTree,
    funding: OutPoint,
    funding_key: &KeyPair,
    ledger: &LedgerState,
    defer_state: bool,
) -> Result<TraceTx, TraceError> {
    let utxo = ledger.utxo(&funding).ok_or(TraceError::MissingFunding)?;
    let layers = tree.depth() as usize + 1;
    let need = LAYER_AMOUNT * layers as u64;
    if utxo.amount < need {
        return Err(TraceError::InsufficientFunds { need, have: utxo.amount });
    }
    let outputs = (0..layers).map(|l| TxOut { amount: LAYER_AMOUNT, cond: tree.layer_condition(l, defer_state) }).collect();
    let mut tx = Transaction::new(vec![funding], outputs);
    let sig = sig_gen(&funding_key.secret(), &tx.sighash().0).expect("nonzero key");
    tx.inputs[0].witness = Witness::key_sig(funding_key.public(), sig);
    Ok(TraceTx { tx, depth: tree.depth(), defer_state })
}

/// Builds the spend of `path`'s layer output without checking ordering.
pub fn build_reveal(tree: &TraceTree, owner: &KeyPair, trace: &TraceTx, path: &TracePath, payout: Address) -> Result<Transaction, TraceError> {
    if owner.public() != tree.owner() {
        return Err(TraceError::DegenerateState("owner key does not match the tree".into()));
    }
    let node = tree.node(path)?;
    let layer = path.layer();
    let mut tx = Transaction::new(
        vec![trace.layer_outpoint(layer)],
        vec![TxOut { amount: LAYER_AMOUNT, cond: SpendCondition::p2pkh(payout) }],
    );
    let sk = owner.secret() + node.offset();
    let sig = sig_gen(&sk, &tx.sighash().0).map_err(|_| TraceError::DegenerateState("zero node key".into()))?;
    let key_sig = Witness::key_sig(node.point, sig);
    tx.inputs[0].witness = match (layer, trace.defer_state) {
        (0, true) => key_sig,
        (0, false) => Witness::preimage(state_preimage(&tree.root_state()), key_sig),
        _ => Witness::branch(path.index_in_layer(tree.k()) as u32, key_sig),
    };
    Ok(tx)
}

/// Spends the layer output for `path`, after all its ancestors, and returns
/// the updated ledger with the spend.
pub fn reveal_step(
    tree: &TraceTree,
    owner: &KeyPair,
    trace: &TraceTx,
    path: &TracePath,
    ledger: &LedgerState,
    payout: Address,
) -> Result<(LedgerState, Transaction), TraceError> {
    tree.node(path)?;
    let layer = path.layer();
    for l in 0..=tree.depth() as usize {
        let spent = !ledger.is_unspent(&trace.layer_outpoint(l));
        if l < layer && !spent {
            return Err(TraceError::OutOfOrder(format!("layer {l} has not been revealed yet")));
        }
        if l >= layer && spent {
            return Err(TraceError::OutOfOrder(format!("layer {l} is already spent")));
        }
    }
    if layer >= 2 {
        let (prev, idx) = ledger.spender(&trace.layer_outpoint(layer - 1)).ok_or(TraceError::WrongBranch)?;
        let revealed = prev.inputs[idx].witness.branch_index().ok_or(TraceError::WrongBranch)?;
        if revealed as usize != path.prefix(layer - 1).index_in_layer(tree.k()) {
            return Err(TraceError::WrongBranch);
        }
    }
    let tx = build_reveal(tree, owner, trace, path, payout)?;
    let next = ledger.apply_transaction(&tx)?;
    Ok((next, tx))
}

/// Spend sequence of one executed trace.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TraceRun {
    pub trace_tx: TraceTx,
    pub spends: Vec<Transaction>,
}

/// Checks a revealed trace against the public tree commitments without the
/// hidden state: every spend opens the committed node on its layer, extends
/// the previous branch, carries a valid signature, and its point satisfies
/// `P_child − P_a − hash_p(P_parent)·G = f_j(state)·G`.
pub fn verify_trace(run: &TraceRun, commitments: &PublicTreeCommitments) -> bool {
    if !commitments.check_structure() {
        return false;
    }
    let k = commitments.fns.len();
    let depth = commitments.depth as usize;
    let tx = &run.trace_tx.tx;
    if run.trace_tx.depth != commitments.depth || tx.outputs.len() != depth + 1 || run.spends.len() > depth + 1 {
        return false;
    }
    if run.trace_tx.defer_state != commitments.state_lock.is_none() {
        return false;
    }
    // The locking conditions must be exactly the committed ones.
    for (l, out) in tx.outputs.iter().enumerate() {
        let expected = if l == 0 {
            let leaf = SpendCondition::p2pkh(commitments.layers[0][0].address);
            match commitments.state_lock {
                Some(h) => SpendCondition::hash_lock(h, leaf),
                None => leaf,
            }
        } else {
            SpendCondition::any_of(commitments.layers[l].iter().map(|n| SpendCondition::p2pkh(n.address)).collect())
        };
        if out.cond != expected {
            return false;
        }
    }
    // The funding inputs are not locked by the tree, but their witnesses
    // must still be valid signatures over the trace transaction.
    let msg = tx.sighash();
    if !tx.inputs.iter().all(|i| matches!(&i.witness, Witness::KeySig { pk, sig } if sig_ver(pk, &msg.0, sig))) {
        return false;
    }
    let txid = tx.txid();
    let mut prev_point = GroupPoint::IDENTITY;
    let mut prev_state = GroupPoint::IDENTITY;
    let mut prev_index = 0usize;
    for (l, spend) in run.spends.iter().enumerate() {
        let Some(input) = spend.inputs.iter().find(|i| i.outpoint == OutPoint::new(txid, l as u32)) else {
            return false;
        };
        if !check_condition(&tx.outputs[l].cond, &input.witness, &spend.sighash(), u64::MAX) {
            return false;
        }
        let Some(point) = input.witness.revealed_key() else {
            return false;
        };
        if l == 0 {
            if point != commitments.layers[0][0].point {
                return false;
            }
            prev_state = point - commitments.p_a;
            if let Some(preimage) = input.witness.revealed_preimage() {
                let Ok(bytes) = <[u8; 32]>::try_from(preimage) else {
                    return false;
                };
                match Scalar::from_bytes(&bytes) {
                    Ok(s) if s.base_mul() == prev_state => {}
                    _ => return false,
                }
            }
        } else {
            let Some(index) = input.witness.branch_index().map(|i| i as usize) else {
                return false;
            };
            if index >= commitments.layers[l].len() || index / k != prev_index || commitments.layers[l][index].point != point {
                return false;
            }
            let state = point - commitments.p_a - hash_p_point(&prev_point).base_mul();
            if state != commitments.fns[index % k].apply_point(&prev_state) {
                return false;
            }
            prev_state = state;
            prev_index = index;
        }
        prev_point = point;
    }
    true
}
