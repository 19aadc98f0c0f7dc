//! Resolve rules: IT-to-RT evidence (supporters, confirmed echoers, voters),
//! the RT-only rules, branch closing, and the end-of-round fixpoint.
//!
//! Every evidence computation works on a target node `tau`. When `tau` is not
//! the root, `w` is its last id and the rule texts treat `w` as one of the
//! echoers on the IT side: `w` is confirmed when `IT(tau) = d`, and `u`
//! supports `w` when `u` echoed `d` for `tau` itself. The RT-side evidence
//! only ranges over the children of `tau`.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::eig::{InfoTree, NodeLabel, ProcessId, ProcessSet, PutRule, ResolveTree, Value};

/// Per-round parameters the rules depend on.
#[derive(Clone, Copy, Debug)]
pub struct RoundCtx {
    pub n: usize,
    pub t: usize,
    pub phi: usize,
    /// Round local to the instance, starting at 1.
    pub round: u32,
    pub faulty: ProcessSet,
    /// Shallowest depth scanned by ITRULE this round.
    pub it_rule_min_depth: usize,
}

impl RoundCtx {
    pub fn new(n: usize, t: usize, phi: usize, round: u32, faulty: ProcessSet) -> Self {
        RoundCtx { n, t, phi, round, faulty, it_rule_min_depth: (round as usize).saturating_sub(3) }
    }

    fn r(&self) -> usize {
        self.round as usize
    }

    fn is_last_round(&self) -> bool {
        self.r() == self.phi + 1
    }
}

/// Why a branch was closed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum CloseRule {
    #[serde(rename = "DECAYRULE")]
    Decay,
    #[serde(rename = "EARLYITRULE")]
    EarlyIt,
    #[serde(rename = "STRONGITRULE")]
    StrongIt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    Put { label: NodeLabel, value: Value, rule: PutRule },
    Close { label: NodeLabel, rule: CloseRule },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("resolve fixpoint did not settle after {0} sweeps")]
    Divergence(usize),
}

// ---------------------------------------------------------------------------
// Echo matrices
// ---------------------------------------------------------------------------

/// Values at a target node, its children and grandchildren, read either from
/// IT or from RT (with coloring).
#[derive(Clone, Debug)]
pub struct Echoes {
    n: usize,
    w: Option<ProcessId>,
    top: Option<Value>,
    kids: ProcessSet,
    kid: Vec<Option<Value>>,
    grand: Vec<Option<Value>>,
}

impl Echoes {
    fn build(n: usize, tau: &NodeLabel, read: impl Fn(&NodeLabel) -> Option<Value>) -> Self {
        let kids = tau.child_ids(n);
        let mut kid = vec![None; n];
        let mut grand = vec![None; n * n];
        for v in kids.iter() {
            let tv = tau.child(v);
            kid[v as usize] = read(&tv);
            for u in kids.iter().filter(|&u| u != v) {
                grand[v as usize * n + u as usize] = read(&tv.child(u));
            }
        }
        Echoes { n, w: tau.last(), top: read(tau), kids, kid, grand }
    }

    pub fn from_it(it: &InfoTree, n: usize, tau: &NodeLabel) -> Self {
        Self::build(n, tau, |l| it.get(l))
    }

    pub fn from_rt(rt: &ResolveTree, n: usize, tau: &NodeLabel) -> Self {
        Self::build(n, tau, |l| rt.value(l))
    }

    fn kid(&self, v: ProcessId) -> Option<Value> {
        self.kid[v as usize]
    }

    fn grand(&self, v: ProcessId, u: ProcessId) -> Option<Value> {
        self.grand[v as usize * self.n + u as usize]
    }

    /// Every value that occurs anywhere in the neighbourhood, ascending.
    pub fn values(&self) -> BTreeSet<Value> {
        self.top.iter().chain(self.kid.iter().flatten()).chain(self.grand.iter().flatten()).copied().collect()
    }

    fn top_is(&self, d: Value) -> bool {
        self.top == Some(d)
    }

    /// Supporter sets of every child echoer, and of `w` when present.
    fn supporters(&self, d: Value) -> (Vec<ProcessSet>, ProcessSet) {
        let mut sets = vec![ProcessSet::EMPTY; self.n];
        let w_backs = self.w.is_some() && self.top_is(d);
        for v in self.kids.iter() {
            let s = &mut sets[v as usize];
            if w_backs {
                s.insert(self.w.unwrap());
            }
            if self.kid(v) == Some(d) {
                s.insert(v);
            }
            for u in self.kids.iter() {
                if u != v && self.grand(v, u) == Some(d) {
                    s.insert(u);
                }
            }
        }
        let mut of_w = ProcessSet::EMPTY;
        if let Some(w) = self.w {
            if w_backs {
                of_w.insert(w);
            }
            for u in self.kids.iter() {
                if self.kid(u) == Some(d) {
                    of_w.insert(u);
                }
            }
        }
        (sets, of_w)
    }
}

// ---------------------------------------------------------------------------
// IT evidence
// ---------------------------------------------------------------------------

/// Evidence for `(tau, d)` from the information tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportEvidence {
    /// Supporters of each child echoer, keyed by echoer id; `w` included when
    /// the target is not the root.
    pub supporters: Vec<(ProcessId, ProcessSet)>,
    pub confirmed: ProcessSet,
    pub voters: ProcessSet,
}

pub fn support_from(e: &Echoes, t: usize, d: Value) -> SupportEvidence {
    let n = e.n;
    let (sets, of_w) = e.supporters(d);
    let mut confirmed = ProcessSet::EMPTY;
    for v in e.kids.iter() {
        if sets[v as usize].len() >= n - t {
            confirmed.insert(v);
        }
    }
    let w_confirmed = e.w.is_some() && e.top_is(d);
    if w_confirmed {
        confirmed.insert(e.w.unwrap());
    }
    let mut voters = ProcessSet::EMPTY;
    if w_confirmed {
        voters.insert(e.w.unwrap());
    }
    for u in e.kids.iter() {
        let mut backed = confirmed
            .intersection(e.kids)
            .iter()
            .filter(|&v| sets[v as usize].contains(u))
            .count();
        if w_confirmed && of_w.contains(u) {
            backed += 1;
        }
        if backed >= n - t {
            voters.insert(u);
        }
    }
    let mut supporters: Vec<_> = e.kids.iter().map(|v| (v, sets[v as usize])).collect();
    if let Some(w) = e.w {
        supporters.push((w, of_w));
        supporters.sort_by_key(|p| p.0);
    }
    SupportEvidence { supporters, confirmed, voters }
}

/// Supporters, confirmed echoers and voters of `(tau, d)`.
pub fn compute_support(it: &InfoTree, n: usize, t: usize, tau: &NodeLabel, d: Value) -> SupportEvidence {
    support_from(&Echoes::from_it(it, n, tau), t, d)
}

/// Voters without the confirmation requirement on the echoers they back.
pub fn unconfirmed_voters_from(e: &Echoes, t: usize, d: Value) -> ProcessSet {
    let n = e.n;
    let (sets, of_w) = e.supporters(d);
    let mut out = ProcessSet::EMPTY;
    if let Some(w) = e.w {
        if e.top_is(d) {
            out.insert(w);
        }
    }
    for u in e.kids.iter() {
        let mut backed = e.kids.iter().filter(|&v| sets[v as usize].contains(u)).count();
        if e.w.is_some() && of_w.contains(u) {
            backed += 1;
        }
        if backed >= n - t {
            out.insert(u);
        }
    }
    out
}

/// Values `d` for which `tau` has at least `t+1` unconfirmed voters.
pub fn leaning_targets(it: &InfoTree, n: usize, t: usize, tau: &NodeLabel) -> BTreeSet<Value> {
    let e = Echoes::from_it(it, n, tau);
    leaning_from(&e, t)
}

pub fn leaning_from(e: &Echoes, t: usize) -> BTreeSet<Value> {
    e.values().into_iter().filter(|&d| unconfirmed_voters_from(e, t, d).len() >= t + 1).collect()
}

/// The smallest value with at least `n - t` voters, if any.
pub fn it_rule_value(e: &Echoes, t: usize) -> Option<Value> {
    e.values().into_iter().find(|&d| support_from(e, t, d).voters.len() >= e.n - t)
}

// ---------------------------------------------------------------------------
// RT evidence
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RtSupportEvidence {
    pub rt_confirmed: ProcessSet,
    pub rt_voters: ProcessSet,
}

pub fn rt_support_from(e: &Echoes, t: usize, d: Value) -> RtSupportEvidence {
    let n = e.n;
    let mut rt_confirmed = ProcessSet::EMPTY;
    for v in e.kids.iter() {
        let below = e.kids.iter().filter(|&u| u != v && e.grand(v, u) == Some(d)).count();
        if e.kid(v) == Some(d) || below >= t + 1 {
            rt_confirmed.insert(v);
        }
    }
    // The sender itself never appears below its own node, so its children's
    // entries stand in for the grandchildren of a regular echoer.
    let w_confirmed = e.w.is_some() && e.kids.iter().filter(|&u| e.kid(u) == Some(d)).count() >= t + 1;
    let mut rt_voters = ProcessSet::EMPTY;
    for u in e.kids.iter() {
        let mut backed = rt_confirmed
            .iter()
            .filter(|&v| if v == u { e.kid(u) == Some(d) } else { e.grand(v, u) == Some(d) })
            .count();
        if w_confirmed && e.kid(u) == Some(d) {
            backed += 1;
        }
        if backed >= n - t {
            rt_voters.insert(u);
        }
    }
    if w_confirmed {
        rt_confirmed.insert(e.w.unwrap());
    }
    RtSupportEvidence { rt_confirmed, rt_voters }
}

/// RT-confirmed echoers and RT-voters of `(tau, d)`.
pub fn compute_rt_support(rt: &ResolveTree, n: usize, t: usize, tau: &NodeLabel, d: Value) -> RtSupportEvidence {
    rt_support_from(&Echoes::from_rt(rt, n, tau), t, d)
}

// ---------------------------------------------------------------------------
// Individual rules
// ---------------------------------------------------------------------------

fn put(rt: &mut ResolveTree, ctx: &RoundCtx, label: NodeLabel, value: Value, rule: PutRule) -> Mutation {
    rt.assign(label, value, rule, ctx.round).expect("rules only put unresolved labels");
    Mutation::Put { label, value, rule }
}

/// ITRULE: `n - t` voters for some value.
pub fn apply_it_rule(it: &InfoTree, rt: &mut ResolveTree, ctx: &RoundCtx, tau: &NodeLabel) -> Option<Mutation> {
    if rt.contains(tau) || !it.contains(tau) {
        return None;
    }
    let d = it_rule_value(&Echoes::from_it(it, ctx.n, tau), ctx.t)?;
    Some(put(rt, ctx, *tau, d, PutRule::ItRule))
}

/// LASTROUNDRULE: copy every unresolved leaf at depth `phi + 1`.
pub fn apply_last_round_rule(it: &InfoTree, rt: &mut ResolveTree, ctx: &RoundCtx) -> Vec<Mutation> {
    if !ctx.is_last_round() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for label in it.level(ctx.phi + 1) {
        if !rt.contains(label) {
            let v = it.get(label).expect("level labels are present");
            out.push(put(rt, ctx, *label, v, PutRule::LastRoundRule));
        }
    }
    out
}

/// GCRULE: `t + 1` RT-voters for some value. Applies to the root too.
pub fn apply_gc_rule(rt: &mut ResolveTree, ctx: &RoundCtx, tau: &NodeLabel) -> Option<Mutation> {
    if rt.contains(tau) {
        return None;
    }
    let e = Echoes::from_rt(rt, ctx.n, tau);
    let d = e.values().into_iter().find(|&d| rt_support_from(&e, ctx.t, d).rt_voters.len() >= ctx.t + 1)?;
    Some(put(rt, ctx, *tau, d, PutRule::GcRule))
}

/// RGCRULE: every child resolved and `n - t - 1` of them agree.
pub fn apply_rgc_rule(rt: &mut ResolveTree, ctx: &RoundCtx, tau: &NodeLabel) -> Option<Mutation> {
    if tau.is_root() || rt.contains(tau) {
        return None;
    }
    let d = rgc_value(rt, ctx, tau)?;
    Some(put(rt, ctx, *tau, d, PutRule::RgcRule))
}

fn rgc_value(rt: &ResolveTree, ctx: &RoundCtx, tau: &NodeLabel) -> Option<Value> {
    let mut vals = Vec::with_capacity(ctx.n);
    for c in tau.children(ctx.n) {
        vals.push(rt.value(&c)?);
    }
    vals.sort();
    let need = ctx.n - ctx.t - 1;
    vals.chunk_by(|a, b| a == b).find(|run| run.len() >= need).map(|run| run[0])
}

/// SRULE: enough children at bottom and every sibling already resolved.
pub fn apply_s_rule(rt: &mut ResolveTree, ctx: &RoundCtx, tau: &NodeLabel) -> Option<Mutation> {
    if tau.len() < 2 || rt.contains(tau) {
        return None;
    }
    let need = (ctx.t + 2).saturating_sub(tau.len()).max(1);
    let bottoms = tau.children(ctx.n).filter(|c| rt.value(c) == Some(Value::Bottom)).count();
    if bottoms < need {
        return None;
    }
    let parent = tau.parent().unwrap();
    if !parent.children(ctx.n).filter(|s| s != tau).all(|s| rt.contains(&s)) {
        return None;
    }
    Some(put(rt, ctx, *tau, Value::Bottom, PutRule::SRule))
}

/// SROOTRULE: `t + 1` depth-one nodes at bottom.
pub fn apply_sroot_rule(rt: &mut ResolveTree, ctx: &RoundCtx) -> Option<Mutation> {
    let root = NodeLabel::ROOT;
    if rt.contains(&root) {
        return None;
    }
    let bottoms = root.children(ctx.n).filter(|c| rt.value(c) == Some(Value::Bottom)).count();
    if bottoms < ctx.t + 1 {
        return None;
    }
    Some(put(rt, ctx, root, Value::Bottom, PutRule::SRootRule))
}

/// EARLYITRULE test on a depth `r - 1` node: every child not yet detected
/// echoes the node's own value.
fn early_it_holds(it: &InfoTree, ctx: &RoundCtx, sigma: &NodeLabel) -> Option<Value> {
    let own = it.get(sigma)?;
    sigma
        .children(ctx.n)
        .filter(|c| !ctx.faulty.contains(c.last().unwrap()))
        .all(|c| it.get(&c) == Some(own))
        .then_some(own)
}

/// STRONGITRULE test on a depth `r - 2` node: after dropping at most one
/// undetected child, every remaining undetected child echoes the node's value
/// and every pair of them cross-echoes consistently. At the root, a child whose
/// own value differs is only dropped while some fault is still undetected.
fn strong_it_holds(it: &InfoTree, ctx: &RoundCtx, sigma: &NodeLabel) -> Option<Value> {
    let own = it.get(sigma)?;
    let members: Vec<ProcessId> =
        sigma.child_ids(ctx.n).iter().filter(|&u| !ctx.faulty.contains(u)).collect();
    let bad_self: Vec<ProcessId> =
        members.iter().copied().filter(|&u| it.get(&sigma.child(u)) != Some(own)).collect();
    match bad_self[..] {
        [] => {}
        // With every fault already detected the dissenter is correct.
        [_] if !sigma.is_root() || ctx.faulty.len() < ctx.t => {}
        _ => return None,
    }
    let mut conflicts = Vec::new();
    for (i, &u) in members.iter().enumerate() {
        for &v in &members[i + 1..] {
            let uv = it.get(&sigma.child(u).child(v));
            let vu = it.get(&sigma.child(v).child(u));
            if uv.is_none() || uv != vu {
                conflicts.push((u, v));
            }
        }
    }
    let excluded: Option<ProcessId> = match (bad_self.first(), conflicts.first()) {
        (Some(&x), _) => Some(x),
        (None, None) => None,
        (None, Some(&(a, b))) => {
            if conflicts.iter().all(|&(u, v)| u == a || v == a) {
                Some(a)
            } else {
                Some(b)
            }
        }
    };
    let ok = conflicts.iter().all(|&(u, v)| Some(u) == excluded || Some(v) == excluded);
    ok.then_some(own)
}

/// DECAYRULE, EARLYITRULE and STRONGITRULE. Only runs while `r <= phi`.
pub fn apply_closing_rules(it: &mut InfoTree, rt: &mut ResolveTree, ctx: &RoundCtx) -> Vec<Mutation> {
    let r = ctx.r();
    let mut out = Vec::new();
    if r > ctx.phi {
        return out;
    }
    let decayed: Vec<NodeLabel> =
        rt.puts().filter(|(_, e)| e.round + 1 <= ctx.round).map(|(l, _)| *l).collect();
    for label in decayed {
        if it.is_active(&label) && it.close(label) {
            out.push(Mutation::Close { label, rule: CloseRule::Decay });
        }
    }
    let closing = |it: &mut InfoTree, rt: &mut ResolveTree, depth: usize, strong: bool, out: &mut Vec<Mutation>| {
        let labels: Vec<NodeLabel> = it.level(depth).iter().copied().filter(|l| it.is_active(l)).collect();
        for sigma in labels {
            let held = if strong { strong_it_holds(it, ctx, &sigma) } else { early_it_holds(it, ctx, &sigma) };
            if let Some(v) = held {
                let (prule, crule) = if strong {
                    (PutRule::StrongItRule, CloseRule::StrongIt)
                } else {
                    (PutRule::EarlyItRule, CloseRule::EarlyIt)
                };
                if !rt.contains(&sigma) {
                    out.push(put(rt, ctx, sigma, v, prule));
                }
                it.close(sigma);
                out.push(Mutation::Close { label: sigma, rule: crule });
            }
        }
    };
    if r >= 1 {
        closing(it, rt, r - 1, false, &mut out);
    }
    if r >= 2 {
        closing(it, rt, r - 2, true, &mut out);
    }
    out
}

// ---------------------------------------------------------------------------
// Fixpoint
// ---------------------------------------------------------------------------

/// One family of rules inside a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    It,
    LastRound,
    Gc,
    Rgc,
    S,
    SRoot,
    Closing,
}

pub const DEFAULT_ORDER: [Sweep; 7] =
    [Sweep::It, Sweep::LastRound, Sweep::Gc, Sweep::Rgc, Sweep::S, Sweep::SRoot, Sweep::Closing];

fn rt_candidates(rt: &ResolveTree, it: &InfoTree, max_depth: usize) -> Vec<NodeLabel> {
    let mut out: Vec<NodeLabel> = it
        .labels()
        .take_while(|l| l.len() <= max_depth)
        .filter(|l| rt.has_put_below(l) && !rt.contains(l))
        .copied()
        .collect();
    out.sort();
    out
}

fn run_sweep(kind: Sweep, it: &mut InfoTree, rt: &mut ResolveTree, ctx: &RoundCtx, log: &mut Vec<Mutation>) {
    let r = ctx.r();
    match kind {
        Sweep::It => {
            if r < 2 {
                return;
            }
            for depth in ctx.it_rule_min_depth..=r - 2 {
                let labels: Vec<NodeLabel> = it.level(depth).to_vec();
                for tau in labels {
                    if let Some(m) = apply_it_rule(it, rt, ctx, &tau) {
                        log.push(m);
                    }
                }
            }
        }
        Sweep::LastRound => log.extend(apply_last_round_rule(it, rt, ctx)),
        Sweep::Gc => {
            for tau in rt_candidates(rt, it, ctx.phi) {
                log.extend(apply_gc_rule(rt, ctx, &tau));
            }
        }
        Sweep::Rgc => {
            for tau in rt_candidates(rt, it, ctx.phi) {
                log.extend(apply_rgc_rule(rt, ctx, &tau));
            }
        }
        Sweep::S => {
            for tau in rt_candidates(rt, it, ctx.phi) {
                log.extend(apply_s_rule(rt, ctx, &tau));
            }
        }
        Sweep::SRoot => log.extend(apply_sroot_rule(rt, ctx)),
        Sweep::Closing => log.extend(apply_closing_rules(it, rt, ctx)),
    }
}

/// Applies rule families in priority order until none changes anything.
pub fn resolve_fixpoint(it: &mut InfoTree, rt: &mut ResolveTree, ctx: &RoundCtx) -> Result<Vec<Mutation>, ResolveError> {
    resolve_fixpoint_ordered(it, rt, ctx, &DEFAULT_ORDER)
}

/// [`resolve_fixpoint`] with an explicit rule-family order.
pub fn resolve_fixpoint_ordered(
    it: &mut InfoTree,
    rt: &mut ResolveTree,
    ctx: &RoundCtx,
    order: &[Sweep],
) -> Result<Vec<Mutation>, ResolveError> {
    let cap = 2 * it.len() + 2;
    let mut log = Vec::new();
    // Any mutation restarts from the first family, so a later family only
    // runs once every earlier one is exhausted.
    for _ in 0..cap {
        let before = log.len();
        for &kind in order {
            run_sweep(kind, it, rt, ctx, &mut log);
            if log.len() != before {
                break;
            }
        }
        if log.len() == before {
            return Ok(log);
        }
    }
    Err(ResolveError::Divergence(cap))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(s: &str) -> NodeLabel {
        s.parse().unwrap()
    }

    const D: Value = Value::Val(5);

    /// IT after an honest broadcast of `d` from the root at n processes:
    /// every node up to depth 2 holds `d`.
    fn honest_it(n: usize, d: Value, depth: usize) -> InfoTree {
        let mut it = InfoTree::new();
        it.set(NodeLabel::ROOT, d);
        let mut frontier = vec![NodeLabel::ROOT];
        for _ in 0..depth {
            let mut next = Vec::new();
            for p in &frontier {
                for c in p.children(n) {
                    it.set(c, d);
                    next.push(c);
                }
            }
            frontier = next;
        }
        it
    }

    /// Direct evaluation of the rule text by set enumeration: supporters,
    /// confirmed echoers and voters, with `w` as an echoer.
    fn oracle_voters(it: &InfoTree, n: usize, t: usize, tau: &NodeLabel, d: Value) -> ProcessSet {
        let w = tau.last();
        let kids: Vec<ProcessId> = tau.child_ids(n).iter().collect();
        let supports = |u: ProcessId, v: ProcessId| -> bool {
            if Some(v) == w {
                return (Some(u) == w && it.get(tau) == Some(d)) || (Some(u) != w && it.get(&tau.child(u)) == Some(d));
            }
            (Some(u) == w && it.get(tau) == Some(d))
                || (u == v && it.get(&tau.child(v)) == Some(d))
                || (u != v && Some(u) != w && it.get(&tau.child(v).child(u)) == Some(d))
        };
        let everyone: Vec<ProcessId> = kids.iter().copied().chain(w).collect();
        let confirmed: Vec<ProcessId> = everyone
            .iter()
            .copied()
            .filter(|&v| {
                if Some(v) == w {
                    it.get(tau) == Some(d)
                } else {
                    everyone.iter().filter(|&&u| supports(u, v)).count() >= n - t
                }
            })
            .collect();
        let mut voters = ProcessSet::EMPTY;
        for &u in &everyone {
            let is_voter = if Some(u) == w {
                it.get(tau) == Some(d)
            } else {
                confirmed.iter().filter(|&&v| supports(u, v)).count() >= n - t
            };
            if is_voter {
                voters.insert(u);
            }
        }
        voters
    }

    #[test]
    fn honest_broadcast_support_matches_oracle() {
        let it = honest_it(4, D, 3);
        let tau = l("2");
        let ev = compute_support(&it, 4, 1, &tau, D);
        assert_eq!(ev.confirmed, ProcessSet::full(4));
        assert_eq!(ev.voters, ProcessSet::full(4));
        assert_eq!(ev.voters, oracle_voters(&it, 4, 1, &tau, D));
        let root = compute_support(&it, 4, 1, &NodeLabel::ROOT, D);
        assert_eq!(root.voters, ProcessSet::full(4));
        assert_eq!(root.voters, oracle_voters(&it, 4, 1, &NodeLabel::ROOT, D));
    }

    #[test]
    fn no_evidence_no_voters() {
        let mut it = InfoTree::new();
        it.set(l("1"), Value::Val(0));
        let ev = compute_support(&it, 4, 1, &l("1"), D);
        assert!(ev.voters.is_empty());
        assert!(ev.confirmed.is_empty());
    }

    #[test]
    fn below_threshold_support_confirms_nobody() {
        // n=4, t=1: each child echo held only by its own echoer
        let mut it = InfoTree::new();
        let tau = l("3");
        it.set(tau, Value::Val(0));
        for c in tau.children(4) {
            it.set(c, D);
            for g in c.children(4) {
                it.set(g, Value::Val(1));
            }
        }
        let ev = compute_support(&it, 4, 1, &tau, D);
        assert!(ev.confirmed.is_empty());
        assert!(ev.voters.is_subset(ProcessSet::from_iter([3])));
    }

    #[test]
    fn it_rule_fires_at_threshold_only() {
        let it = honest_it(4, D, 3);
        let ctx = RoundCtx::new(4, 1, 3, 3, ProcessSet::EMPTY);
        let mut rt = ResolveTree::new();
        assert_eq!(
            apply_it_rule(&it, &mut rt, &ctx, &l("1")),
            Some(Mutation::Put { label: l("1"), value: D, rule: PutRule::ItRule })
        );
        // colored already: no-op
        let mut rt = ResolveTree::new();
        rt.assign(NodeLabel::ROOT, D, PutRule::GcRule, 2).unwrap();
        assert_eq!(apply_it_rule(&it, &mut rt, &ctx, &l("1")), None);
    }

    #[test]
    fn it_rule_needs_n_minus_t_voters() {
        // n=4,t=1: w=0 sends d; two children echo and relay d while child 3
        // goes dark (inherits nothing: echoes differ everywhere it appears).
        let n = 4;
        let mut it = honest_it(n, D, 3);
        let tau = l("0");
        let other = Value::Val(9);
        for lab in it.labels().copied().collect::<Vec<_>>() {
            if tau.is_prefix_of(&lab) && lab.len() >= 2 && lab.contains(3) {
                it.set(lab, other);
            }
        }
        let ev = compute_support(&it, n, 1, &tau, D);
        assert_eq!(ev.voters, oracle_voters(&it, n, 1, &tau, D));
        assert!(ev.voters.len() >= n - 1);
        // now also corrupt child 2's relays so only w and one child remain
        for lab in it.labels().copied().collect::<Vec<_>>() {
            if tau.is_prefix_of(&lab) && lab.len() == 3 && lab.last() == Some(2) {
                it.set(lab, other);
            }
        }
        it.set(l("0.2"), other);
        let ev = compute_support(&it, n, 1, &tau, D);
        assert_eq!(ev.voters, oracle_voters(&it, n, 1, &tau, D));
        assert!(ev.voters.len() < n - 1);
    }

    #[test]
    fn last_round_rule_copies_leaves() {
        let mut it = InfoTree::new();
        it.set(NodeLabel::ROOT, Value::Val(1));
        it.set(l("0"), Value::Val(1));
        it.set(l("0.1"), Value::Val(5));
        let ctx = RoundCtx::new(4, 1, 1, 2, ProcessSet::EMPTY);
        let mut rt = ResolveTree::new();
        let out = apply_last_round_rule(&it, &mut rt, &ctx);
        assert_eq!(out, vec![Mutation::Put { label: l("0.1"), value: Value::Val(5), rule: PutRule::LastRoundRule }]);
        assert!(rt.put(&l("0")).is_none());
        // colored already
        let mut rt = ResolveTree::new();
        rt.assign(l("0"), Value::Val(1), PutRule::ItRule, 1).unwrap();
        assert!(apply_last_round_rule(&it, &mut rt, &ctx).is_empty());
        // not the last round
        let ctx = RoundCtx::new(4, 1, 2, 2, ProcessSet::EMPTY);
        assert!(apply_last_round_rule(&it, &mut ResolveTree::new(), &ctx).is_empty());
    }

    #[test]
    fn rt_confirmed_by_coloring_and_threshold() {
        let n = 4;
        let mut rt = ResolveTree::new();
        rt.assign(l("2.0"), D, PutRule::ItRule, 3).unwrap();
        let ev = compute_rt_support(&rt, n, 1, &l("2"), D);
        assert!(ev.rt_confirmed.contains(0));
        // only t=1 children of 2.1 at d: not confirmed
        let mut rt = ResolveTree::new();
        rt.assign(l("2.1.0"), D, PutRule::LastRoundRule, 3).unwrap();
        let ev = compute_rt_support(&rt, n, 1, &l("2"), D);
        assert!(!ev.rt_confirmed.contains(1));
        rt.assign(l("2.1.3"), D, PutRule::LastRoundRule, 3).unwrap();
        let ev = compute_rt_support(&rt, n, 1, &l("2"), D);
        assert!(ev.rt_confirmed.contains(1));
    }

    #[test]
    fn honest_children_fixed_make_every_child_an_rt_voter() {
        let n = 4;
        let mut rt = ResolveTree::new();
        let tau = l("0");
        for c in tau.children(n) {
            rt.assign(c, D, PutRule::ItRule, 3).unwrap();
        }
        let ev = compute_rt_support(&rt, n, 1, &tau, D);
        let mut with_sender = tau.child_ids(n);
        with_sender.insert(0);
        assert_eq!(ev.rt_confirmed, with_sender);
        assert_eq!(ev.rt_voters, tau.child_ids(n));
        let ctx = RoundCtx::new(n, 1, 2, 3, ProcessSet::EMPTY);
        assert_eq!(apply_gc_rule(&mut rt, &ctx, &tau), Some(Mutation::Put { label: tau, value: D, rule: PutRule::GcRule }));
    }

    #[test]
    fn resolved_grandchildren_alone_do_not_make_rt_voters() {
        // n=4: each child is confirmed by its t+1 resolved children, but no
        // u has its own echo resolved, so u backs only n-t-1 echoers.
        let n = 4;
        let mut rt = ResolveTree::new();
        let tau = l("0");
        for g in tau.children(n).flat_map(|c| c.children(n).collect::<Vec<_>>()) {
            rt.assign(g, D, PutRule::LastRoundRule, 3).unwrap();
        }
        let ev = compute_rt_support(&rt, n, 1, &tau, D);
        assert_eq!(ev.rt_confirmed, tau.child_ids(n));
        assert!(ev.rt_voters.is_empty());
    }

    #[test]
    fn gc_rule_needs_t_plus_one_rt_voters() {
        // n=4,t=1 at the root: rt-voter u needs 3 confirmed children with
        // RT(v.u)=d. Confirm children by direct puts and fix relays.
        let n = 4;
        let ctx = RoundCtx::new(n, 1, 2, 3, ProcessSet::EMPTY);
        let mut rt = ResolveTree::new();
        for v in [0u8, 1] {
            rt.assign(NodeLabel::ROOT.child(v), D, PutRule::ItRule, 3).unwrap();
        }
        // with children 0 and 1 colored d, u=0 backs {0 (own), 1 (1.0 colored)} = 2 < 3
        assert_eq!(apply_gc_rule(&mut rt.clone(), &ctx, &NodeLabel::ROOT), None);
        rt.assign(l("2"), D, PutRule::ItRule, 3).unwrap();
        // now u=0,1,2 each back 3 confirmed children: 3 voters >= t+1
        assert!(apply_gc_rule(&mut rt, &ctx, &NodeLabel::ROOT).is_some());
    }

    #[test]
    fn rgc_rule_examples() {
        let n = 4;
        let ctx = RoundCtx::new(n, 1, 2, 3, ProcessSet::EMPTY);
        let mut rt = ResolveTree::new();
        rt.assign(l("2.0"), D, PutRule::ItRule, 3).unwrap();
        rt.assign(l("2.1"), D, PutRule::ItRule, 3).unwrap();
        assert_eq!(apply_rgc_rule(&mut rt, &ctx, &l("2")), None);
        rt.assign(l("2.3"), Value::Bottom, PutRule::ItRule, 3).unwrap();
        assert_eq!(apply_rgc_rule(&mut rt, &ctx, &l("2")), Some(Mutation::Put { label: l("2"), value: D, rule: PutRule::RgcRule }));
        assert_eq!(apply_rgc_rule(&mut rt, &ctx, &NodeLabel::ROOT), None);
    }

    /// Whenever RGCRULE fires the winning value is unique: enumerate every
    /// multiset of child values over a 3-symbol alphabet.
    #[test]
    fn rgc_value_is_unique() {
        for n in 4..=10usize {
            let t = (n - 1) / 3;
            for depth in 1..=t {
                let kids = n - depth;
                let need = n - t - 1;
                for a in 0..=kids {
                    for b in 0..=kids - a {
                        let c = kids - a - b;
                        let winners = [a, b, c].iter().filter(|&&k| k >= need).count();
                        assert!(winners <= 1, "n={n} t={t} depth={depth} split {a}/{b}/{c}");
                    }
                }
            }
        }
    }

    #[test]
    fn s_rule_examples() {
        let n = 4;
        let ctx = RoundCtx::new(n, 1, 2, 3, ProcessSet::EMPTY);
        let mut rt = ResolveTree::new();
        // tau = 0.1 needs t+2-2 = 1 child at bottom, siblings 0.2, 0.3 resolved
        rt.assign(l("0.1.2"), Value::Bottom, PutRule::LastRoundRule, 3).unwrap();
        rt.assign(l("0.2"), D, PutRule::ItRule, 3).unwrap();
        assert_eq!(apply_s_rule(&mut rt, &ctx, &l("0.1")), None);
        rt.assign(l("0.3"), D, PutRule::ItRule, 3).unwrap();
        assert_eq!(
            apply_s_rule(&mut rt, &ctx, &l("0.1")),
            Some(Mutation::Put { label: l("0.1"), value: Value::Bottom, rule: PutRule::SRule })
        );
        assert_eq!(apply_s_rule(&mut rt, &ctx, &l("0")), None);
    }

    #[test]
    fn sroot_rule_threshold() {
        let ctx = RoundCtx::new(4, 1, 2, 3, ProcessSet::EMPTY);
        let mut rt = ResolveTree::new();
        rt.assign(l("0"), Value::Bottom, PutRule::ItRule, 3).unwrap();
        assert_eq!(apply_sroot_rule(&mut rt, &ctx), None);
        rt.assign(l("1"), Value::Bottom, PutRule::ItRule, 3).unwrap();
        assert!(apply_sroot_rule(&mut rt, &ctx).is_some());
    }

    #[test]
    fn early_it_fires_on_unanimous_round_one() {
        let mut it = honest_it(7, D, 1);
        let mut rt = ResolveTree::new();
        let ctx = RoundCtx::new(7, 2, 2, 1, ProcessSet::EMPTY);
        let log = resolve_fixpoint(&mut it, &mut rt, &ctx).unwrap();
        assert_eq!(log[0], Mutation::Put { label: NodeLabel::ROOT, value: D, rule: PutRule::EarlyItRule });
        assert!(!it.is_active(&l("3")));
    }

    #[test]
    fn early_it_needs_every_undetected_child() {
        let mut it = honest_it(7, D, 1);
        it.set(l("6"), Value::Val(0));
        let ctx = RoundCtx::new(7, 2, 2, 1, ProcessSet::EMPTY);
        let mut rt = ResolveTree::new();
        assert!(apply_closing_rules(&mut it.clone(), &mut rt, &ctx).is_empty());
        // a dissenter already detected is ignored
        let ctx = RoundCtx::new(7, 2, 2, 1, ProcessSet::from_iter([6]));
        assert!(!apply_closing_rules(&mut it, &mut rt, &ctx).is_empty());
    }

    #[test]
    fn strong_it_fires_with_one_corrupt_relay() {
        let n = 7;
        let mut it = honest_it(n, D, 2);
        // process 6 equivocates on its own relays
        for v in 0..6u8 {
            it.set(l(&format!("{v}.6")), Value::Val(0));
        }
        let ctx = RoundCtx::new(n, 2, 2, 2, ProcessSet::EMPTY);
        let mut rt = ResolveTree::new();
        let log = apply_closing_rules(&mut it, &mut rt, &ctx);
        assert!(log.contains(&Mutation::Put { label: NodeLabel::ROOT, value: D, rule: PutRule::StrongItRule }));
    }

    #[test]
    fn strong_it_at_root_keeps_a_dissenter_only_while_a_fault_is_undetected() {
        // Process 3 holds its own consistent value E; every other child
        // echoes D. Excluding 3 is only sound if 3 might be faulty.
        let n = 7;
        let e = Value::Val(9);
        let mut it = honest_it(n, D, 2);
        it.set(l("3"), e);
        for u in l("3").child_ids(n).iter() {
            it.set(l("3").child(u), e);
        }
        let root_put = Mutation::Put { label: NodeLabel::ROOT, value: D, rule: PutRule::StrongItRule };
        let all_known = RoundCtx::new(n, 2, 2, 2, ProcessSet::from_iter([5, 6]));
        let log = apply_closing_rules(&mut it.clone(), &mut ResolveTree::new(), &all_known);
        assert!(!log.contains(&root_put));
        let one_known = RoundCtx::new(n, 2, 2, 2, ProcessSet::from_iter([6]));
        let log = apply_closing_rules(&mut it.clone(), &mut ResolveTree::new(), &one_known);
        assert!(log.contains(&root_put));
    }

    #[test]
    fn decay_closes_previous_round_puts() {
        let mut it = honest_it(4, D, 2);
        let mut rt = ResolveTree::new();
        rt.assign(NodeLabel::ROOT, D, PutRule::GcRule, 1).unwrap();
        let ctx = RoundCtx::new(4, 1, 3, 2, ProcessSet::EMPTY);
        let log = apply_closing_rules(&mut it, &mut rt, &ctx);
        assert_eq!(log[0], Mutation::Close { label: NodeLabel::ROOT, rule: CloseRule::Decay });
        assert!(it.labels().all(|lab| !it.is_active(lab)));
        // closing does not run past phi
        let ctx = RoundCtx::new(4, 1, 1, 2, ProcessSet::EMPTY);
        assert!(apply_closing_rules(&mut honest_it(4, D, 2), &mut rt, &ctx).is_empty());
    }

    #[test]
    fn s_rule_then_parent_in_one_fixpoint() {
        // n=7,t=2, phi=3, round 3. Node 0 has children 0.1 .. 0.6. Three
        // siblings are resolved to bottom, two to d, and 0.1 has two bottom
        // children. The parent lacks n-t-1 bottom children until SRULE fills
        // 0.1, and is then resolved to bottom in the same fixpoint.
        let n = 7;
        let mut it = InfoTree::new();
        it.set(NodeLabel::ROOT, D);
        it.set(l("0"), D);
        for c in l("0").children(n) {
            it.set(c, D);
        }
        for g in l("0.1").children(n) {
            it.set(g, Value::Bottom);
        }
        let mut rt = ResolveTree::new();
        for s in ["0.2", "0.3", "0.4"] {
            rt.assign(l(s), Value::Bottom, PutRule::ItRule, 2).unwrap();
        }
        for s in ["0.5", "0.6"] {
            rt.assign(l(s), D, PutRule::ItRule, 2).unwrap();
        }
        rt.assign(l("0.1.2"), Value::Bottom, PutRule::LastRoundRule, 3).unwrap();
        rt.assign(l("0.1.3"), Value::Bottom, PutRule::LastRoundRule, 3).unwrap();
        let mut ctx = RoundCtx::new(n, 2, 3, 3, ProcessSet::EMPTY);
        ctx.it_rule_min_depth = 5;
        let log = resolve_fixpoint(&mut it, &mut rt, &ctx).unwrap();
        let puts: Vec<Mutation> = log.into_iter().filter(|m| matches!(m, Mutation::Put { .. })).collect();
        assert_eq!(
            puts,
            vec![
                Mutation::Put { label: l("0.1"), value: Value::Bottom, rule: PutRule::SRule },
                Mutation::Put { label: l("0"), value: Value::Bottom, rule: PutRule::GcRule },
            ]
        );
    }

    #[test]
    fn gc_on_a_parent_runs_before_s_rule_on_its_child() {
        // Final round at n=7, t=2. Node 5's children 5.0 .. 5.2 resolve to 0,
        // 5.3 to bottom, 5.4 to 1, and 5.6 has leaves 0,0,0,bot,bot. Node 5
        // has enough RT-voters for 0 as soon as its children resolve, which
        // must win over SRULE putting 5.6 to bottom.
        let n = 7;
        let zero = Value::Val(0);
        let mut it = InfoTree::new();
        it.set(NodeLabel::ROOT, zero);
        for c in NodeLabel::ROOT.children(n) {
            it.set(c, zero);
        }
        let kid_value = |v: ProcessId| match v {
            3 => Value::Bottom,
            4 => Value::Val(1),
            _ => zero,
        };
        for v in l("5").child_ids(n).iter() {
            let c = l("5").child(v);
            it.set(c, kid_value(v));
            for u in c.child_ids(n).iter() {
                let leaf = if v == 6 && u >= 3 { Value::Bottom } else { kid_value(v) };
                it.set(c.child(u), leaf);
            }
        }
        let mut rt = ResolveTree::new();
        let mut ctx = RoundCtx::new(n, 2, 2, 3, ProcessSet::EMPTY);
        ctx.it_rule_min_depth = 5;
        let log = resolve_fixpoint(&mut it, &mut rt, &ctx).unwrap();
        assert!(log.contains(&Mutation::Put { label: l("5"), value: zero, rule: PutRule::GcRule }), "{log:?}");
        assert!(rt.put(&l("5.6")).is_none());
        assert_eq!(rt.value(&l("5.6")), Some(zero));
    }

    #[test]
    fn rgc_rule_needs_every_child_resolved() {
        let n = 7;
        let mut rt = ResolveTree::new();
        for s in ["0.2", "0.3", "0.4", "0.5"] {
            rt.assign(l(s), D, PutRule::ItRule, 2).unwrap();
        }
        rt.assign(l("0.6"), Value::Val(1), PutRule::ItRule, 2).unwrap();
        let ctx = RoundCtx::new(n, 2, 3, 3, ProcessSet::EMPTY);
        assert_eq!(apply_rgc_rule(&mut rt, &ctx, &l("0")), None);
        rt.assign(l("0.1"), Value::Bottom, PutRule::SRule, 3).unwrap();
        assert_eq!(apply_rgc_rule(&mut rt, &ctx, &l("0")), Some(Mutation::Put { label: l("0"), value: D, rule: PutRule::RgcRule }));
    }

    #[test]
    fn empty_state_is_a_fixpoint() {
        let mut it = InfoTree::new();
        let mut rt = ResolveTree::new();
        let ctx = RoundCtx::new(4, 1, 1, 1, ProcessSet::EMPTY);
        assert!(resolve_fixpoint(&mut it, &mut rt, &ctx).unwrap().is_empty());
    }

    #[test]
    fn leaning_honest_and_split() {
        let it = honest_it(4, D, 3);
        assert_eq!(leaning_targets(&it, 4, 1, &l("1")), BTreeSet::from([D]));
        assert!(leaning_targets(&InfoTree::new(), 4, 1, &l("1")).is_empty());

        // n=4,t=1 at the root: children 0,1 echo d and 2,3 echo d', relays
        // faithful. Each u backs only 2 echoers per value, below n-t=3.
        let d2 = Value::Val(6);
        let mut it = InfoTree::new();
        it.set(NodeLabel::ROOT, D);
        for c in NodeLabel::ROOT.children(4) {
            let v = if c.last().unwrap() < 2 { D } else { d2 };
            it.set(c, v);
            for g in c.children(4) {
                it.set(g, v);
            }
        }
        assert!(leaning_targets(&it, 4, 1, &NodeLabel::ROOT).is_empty());
        // Relays that alternate by relayer make the even ids unconfirmed
        // voters of d and the odd ids unconfirmed voters of d'.
        for c in NodeLabel::ROOT.children(4) {
            for g in c.children(4) {
                let u = g.last().unwrap();
                it.set(g, if u % 2 == 0 { D } else { d2 });
            }
        }
        assert_eq!(leaning_targets(&it, 4, 1, &NodeLabel::ROOT), BTreeSet::from([D, d2]));
    }
}
