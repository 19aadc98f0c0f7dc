//! Fault detection: gossip thresholds for `F` and `FA`, the Not Voter,
//! Not IT-to-RT and Not Masking rules, and current-round re-masking.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::eig::{InfoTree, NodeLabel, ProcessId, ProcessSet, ResolveTree, Value};
use crate::resolve::{self, Echoes};

/// Locally detected faulty processes (`f`) and those known to be detected by
/// every correct process (`fa`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultState {
    pub f: ProcessSet,
    pub fa: ProcessSet,
    /// `fa` at the end of each round.
    pub fa_log: BTreeMap<u32, ProcessSet>,
}

impl FaultState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `id` to `f`; returns true if new.
    pub fn add(&mut self, id: ProcessId) -> bool {
        self.f.insert(id)
    }

    pub fn snapshot_fa(&mut self, round: u32) {
        self.fa_log.insert(round, self.fa);
    }
}

/// Rule that put a process into a fault set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectRule {
    #[serde(rename = "GOSSIP")]
    Gossip,
    #[serde(rename = "GOSSIP_ALL")]
    GossipAll,
    #[serde(rename = "NOT_VOTER")]
    NotVoter,
    #[serde(rename = "NOT_IT_TO_RT")]
    NotItToRt,
    #[serde(rename = "NOT_MASKING")]
    NotMasking,
    #[serde(rename = "MALFORMED")]
    Malformed,
}

/// One sender's `F` list for the round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GossipReport {
    pub sender: ProcessId,
    pub suspects: ProcessSet,
}

/// Applies the `t+1` and `2t+1` list thresholds. Returns the ids newly added
/// to `f` and to `fa`.
pub fn merge_gossip(fs: &mut FaultState, reports: &[GossipReport], t: usize) -> (ProcessSet, ProcessSet) {
    let mut counts = [0usize; 64];
    for r in reports {
        for id in r.suspects.iter() {
            counts[id as usize] += 1;
        }
    }
    let mut new_f = ProcessSet::EMPTY;
    let mut new_fa = ProcessSet::EMPTY;
    for (id, &c) in counts.iter().enumerate() {
        let id = id as ProcessId;
        if c >= t + 1 && fs.f.insert(id) {
            new_f.insert(id);
        }
        if c >= 2 * t + 1 {
            fs.f.insert(id);
            if fs.fa.insert(id) {
                new_fa.insert(id);
            }
        }
    }
    (new_f, new_fa)
}

/// Inputs shared by the detection rules for one instance in one round.
#[derive(Clone, Copy, Debug)]
pub struct DetectCtx {
    pub n: usize,
    pub t: usize,
    pub me: ProcessId,
    /// Round local to the instance.
    pub round: u32,
    pub faulty: ProcessSet,
}

fn has_resolved_prefix(rt: &ResolveTree, label: &NodeLabel) -> bool {
    rt.contains(label)
}

/// Not Voter: `w` whose value for `sigma.w` is echoed by fewer than `n-t-1`
/// children. Looks at depth `r - 1`.
pub fn detect_not_voter(it: &InfoTree, rt: &ResolveTree, ctx: &DetectCtx) -> ProcessSet {
    let mut out = ProcessSet::EMPTY;
    if ctx.round < 2 {
        return out;
    }
    let need = ctx.n - ctx.t - 1;
    for tau in it.level(ctx.round as usize - 1) {
        let Some(w) = tau.last() else { continue };
        if w == ctx.me || ctx.faulty.contains(w) || out.contains(w) || has_resolved_prefix(rt, tau) {
            continue;
        }
        let own = it.get(tau);
        let echoing = tau.children(ctx.n).filter(|c| it.get(c) == own).count();
        if echoing < need {
            out.insert(w);
        }
    }
    out
}

/// Not IT-to-RT: `w` with no value reaching `n-t` voters two rounds after it
/// spoke. Looks at depth `r - 2`. A node whose own branch is already closed
/// has no grandchildren to judge by and is skipped.
pub fn detect_not_it_to_rt(it: &InfoTree, rt: &ResolveTree, ctx: &DetectCtx) -> ProcessSet {
    let mut out = ProcessSet::EMPTY;
    if ctx.round < 3 {
        return out;
    }
    for tau in it.level(ctx.round as usize - 2) {
        let Some(w) = tau.last() else { continue };
        if ctx.faulty.contains(w) || out.contains(w) {
            continue;
        }
        let sigma = tau.parent().unwrap();
        if has_resolved_prefix(rt, &sigma) || !it.is_active(tau) {
            continue;
        }
        let e = Echoes::from_it(it, ctx.n, tau);
        if resolve::it_rule_value(&e, ctx.t).is_none() {
            out.insert(w);
        }
    }
    out
}

/// Outcome of one Not Masking pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskingOutcome {
    /// Labels overwritten with bottom.
    pub masked: Vec<NodeLabel>,
    /// `(u, parent)` pairs: `u` joins `f` at end of round unless `parent` has
    /// a resolved prefix by then.
    pub deferred: Vec<(ProcessId, NodeLabel)>,
}

/// Not Masking. For `tau = sigma.w` at depth `r - 3` leaning towards `d`,
/// and a child `u` whose echo is relayed as some `d' != d` by `t+1`
/// processes, every later non-bottom entry ending in `w.u` is masked.
pub fn detect_not_masking(it: &mut InfoTree, ctx: &DetectCtx) -> MaskingOutcome {
    let mut out = MaskingOutcome::default();
    if ctx.round < 4 {
        return out;
    }
    let r = ctx.round as usize;
    let mut offenders: Vec<(ProcessId, ProcessId)> = Vec::new();
    for tau in it.level(r - 3) {
        let Some(w) = tau.last() else { continue };
        let e = Echoes::from_it(it, ctx.n, tau);
        let leaning = resolve::leaning_from(&e, ctx.t);
        if leaning.is_empty() {
            continue;
        }
        for u in tau.child_ids(ctx.n).iter() {
            if u == ctx.me || offenders.contains(&(w, u)) {
                continue;
            }
            let tu = tau.child(u);
            let mut tally: HashMap<Value, usize> = HashMap::new();
            for g in tu.children(ctx.n) {
                if let Some(v) = it.get(&g) {
                    *tally.entry(v).or_default() += 1;
                }
            }
            let relayed_other = leaning
                .iter()
                .any(|d| tally.iter().any(|(v, &c)| v != d && c >= ctx.t + 1));
            if relayed_other {
                offenders.push((w, u));
            }
        }
    }
    if offenders.is_empty() {
        return out;
    }
    for depth in [r - 1, r] {
        let labels: Vec<NodeLabel> = it.level(depth).to_vec();
        for lab in labels {
            let Some(&(_, u)) = offenders.iter().find(|(w, u)| lab.ends_with_pair(*w, *u)) else {
                continue;
            };
            if it.get(&lab) != Some(Value::Bottom) {
                it.set(lab, Value::Bottom);
                out.masked.push(lab);
                out.deferred.push((u, lab.parent().unwrap()));
            }
        }
    }
    out
}

/// Rewrites entries ending in `x` at the given depths to bottom. Returns the
/// labels that changed.
pub fn remask(it: &mut InfoTree, x: ProcessId, depths: impl IntoIterator<Item = usize>) -> Vec<NodeLabel> {
    let mut changed = Vec::new();
    for d in depths {
        let labels: Vec<NodeLabel> = it.level(d).iter().copied().filter(|l| l.last() == Some(x)).collect();
        for lab in labels {
            if it.get(&lab) != Some(Value::Bottom) {
                it.set(lab, Value::Bottom);
                changed.push(lab);
            }
        }
    }
    changed
}
