//! Offline analysis of the top instance: which EIG nodes no correct process
//! resolved in time (fully corrupt), the tree they form, and the derived
//! per-depth corruption counts.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::agreement::InstanceId;
use crate::eig::{NodeLabel, ProcessId, Value};
use crate::trace::{ExecutionTrace, GlobalEvent, TraceRecord};

/// Grace period, in rounds past a node's depth, for some correct process to
/// resolve it or a descendant.
pub const RESOLVE_GRACE: usize = 2;

/// Maximum distance from a deep IT node to its nearest corrupt-tree ancestor.
pub const CT_ANCESTOR_GAP: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CtNodeKind {
    /// Last id became fully corrupt at this node's depth.
    Regular,
    /// Last id became fully corrupt one level up.
    Special,
    /// Neither, which the protocol should rule out.
    Other,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorruptTreeReport {
    /// Fully corrupt nodes whose non-root prefixes are all fully corrupt.
    pub ct: BTreeMap<NodeLabel, CtNodeKind>,
    /// Fully corrupt nodes with a prefix that is not.
    pub detached: Vec<NodeLabel>,
    /// Depth at which each id first heads a fully corrupt node.
    pub became_at: BTreeMap<ProcessId, usize>,
    /// `alpha[i]`: ids becoming fully corrupt at depth `i`; `alpha[0] = 0`.
    pub alpha: Vec<usize>,
    /// `waste[i] = alpha[0] + .. + alpha[i] - i`.
    pub waste: Vec<i64>,
    /// Deepest top-instance IT label at any correct process.
    pub max_it_depth: usize,
}

impl CorruptTreeReport {
    pub fn nodes_at(&self, depth: usize) -> impl Iterator<Item = &NodeLabel> {
        self.ct.keys().filter(move |l| l.len() == depth)
    }

    pub fn contains(&self, label: &NodeLabel) -> bool {
        label.is_root() || self.ct.contains_key(label)
    }
}

/// Earliest round each label, or something below it, was put at one process.
struct PutIndex {
    at: HashMap<NodeLabel, u32>,
    at_or_below: HashMap<NodeLabel, u32>,
}

impl PutIndex {
    fn new(puts: impl Iterator<Item = (NodeLabel, u32)>) -> Self {
        let mut at = HashMap::new();
        let mut at_or_below: HashMap<NodeLabel, u32> = HashMap::new();
        for (label, round) in puts {
            at.insert(label, round);
            for k in 0..=label.len() {
                let e = at_or_below.entry(label.prefix(k)).or_insert(round);
                *e = (*e).min(round);
            }
        }
        PutIndex { at, at_or_below }
    }

    /// Whether the label or an extension is in RT by `round`.
    fn resolved_by(&self, label: &NodeLabel, round: u32) -> bool {
        if self.at_or_below.get(label).is_some_and(|&r| r <= round) {
            return true;
        }
        (0..label.len()).any(|k| self.at.get(&label.prefix(k)).is_some_and(|&r| r <= round))
    }
}

/// Builds the corrupt tree from the in-memory snapshots of the top instance.
pub fn compute_fully_corrupt(trace: &ExecutionTrace) -> CorruptTreeReport {
    let mut candidates: BTreeSet<NodeLabel> = BTreeSet::new();
    let mut indexes = Vec::new();
    for per in trace.snapshots.values() {
        let Some(snap) = per.get(&InstanceId::TOP) else { continue };
        candidates.extend(snap.it_labels.iter().filter(|l| !l.is_root()).copied());
        indexes.push(PutIndex::new(snap.puts.iter().map(|&(l, _, _, r)| (l, r))));
    }
    let fully: BTreeSet<NodeLabel> = candidates
        .iter()
        .filter(|l| {
            let by = (l.len() + RESOLVE_GRACE) as u32;
            !indexes.iter().any(|ix| ix.resolved_by(l, by))
        })
        .copied()
        .collect();

    let mut became_at: BTreeMap<ProcessId, usize> = BTreeMap::new();
    for l in &fully {
        let z = l.last().unwrap();
        let e = became_at.entry(z).or_insert(l.len());
        *e = (*e).min(l.len());
    }

    let mut report = CorruptTreeReport {
        max_it_depth: candidates.iter().map(NodeLabel::len).max().unwrap_or(0),
        ..Default::default()
    };
    for l in &fully {
        if (1..l.len()).all(|k| fully.contains(&l.prefix(k))) {
            let i = became_at[&l.last().unwrap()];
            let kind = if i == l.len() {
                CtNodeKind::Regular
            } else if i + 1 == l.len() {
                CtNodeKind::Special
            } else {
                CtNodeKind::Other
            };
            report.ct.insert(*l, kind);
        } else {
            report.detached.push(*l);
        }
    }
    let top = became_at.values().copied().max().unwrap_or(0).max(report.max_it_depth);
    report.alpha = vec![0; top + 1];
    for &i in became_at.values() {
        report.alpha[i] += 1;
    }
    report.alpha[0] = 0;
    let mut sum = 0i64;
    report.waste = report
        .alpha
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            sum += a as i64;
            sum - i as i64
        })
        .collect();
    report.became_at = became_at;
    report
}

/// A deep IT node without a nearby corrupt-tree ancestor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TreeBoundViolation {
    pub process: ProcessId,
    pub label: NodeLabel,
}

/// Every top-instance IT label deeper than the gap must have a corrupt-tree
/// ancestor at most that many levels above it.
pub fn check_it_ct_bound(trace: &ExecutionTrace, report: &CorruptTreeReport) -> Result<(), TreeBoundViolation> {
    for (&p, per) in &trace.snapshots {
        let Some(snap) = per.get(&InstanceId::TOP) else { continue };
        for l in snap.it_labels.iter().filter(|l| l.len() > CT_ANCESTOR_GAP) {
            let lo = l.len() - CT_ANCESTOR_GAP;
            if !(lo..l.len()).any(|k| report.ct.contains_key(&l.prefix(k))) {
                return Err(TreeBoundViolation { process: p, label: *l });
            }
        }
    }
    Ok(())
}

/// A window `alpha[i1] = 2`, ones strictly between, `alpha[i2] = 0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CrossWindow {
    pub i1: usize,
    pub i2: usize,
    /// Corrupt-tree nodes of depth `i1 - 1` examined (the root when `i1 = 1`).
    pub roots: usize,
    /// Roots whose branches through both new ids reach depth `i2 + 1`.
    pub violations: Vec<NodeLabel>,
    /// Largest number of depth-`i2 + 1` corrupt-tree nodes under one root.
    pub max_survivors: usize,
}

pub fn cross_windows(alpha: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i1 in 1..alpha.len() {
        if alpha[i1] != 2 {
            continue;
        }
        let mut i = i1 + 1;
        while i < alpha.len() && alpha[i] == 1 {
            i += 1;
        }
        let i2 = if i < alpha.len() { i } else { alpha.len() };
        // Depths past the series have no new fully corrupt ids.
        if i2 >= alpha.len() || alpha[i2] == 0 {
            out.push((i1, i2));
        }
    }
    out
}

/// For every realized window, at most one of the two ids that became fully
/// corrupt at `i1` keeps a corrupt-tree branch to depth `i2 + 1` below each
/// depth-`i1 - 1` corrupt-tree node.
pub fn check_cross_extension(report: &CorruptTreeReport) -> Vec<CrossWindow> {
    let mut out = Vec::new();
    for (i1, i2) in cross_windows(&report.alpha) {
        let pair: Vec<ProcessId> = report.became_at.iter().filter(|(_, &i)| i == i1).map(|(&z, _)| z).collect();
        let roots: Vec<NodeLabel> = if i1 == 1 { vec![NodeLabel::ROOT] } else { report.nodes_at(i1 - 1).copied().collect() };
        let mut w = CrossWindow { i1, i2, roots: roots.len(), violations: Vec::new(), max_survivors: 0 };
        for sigma in &roots {
            let survivors: Vec<&NodeLabel> = report.nodes_at(i2 + 1).filter(|l| sigma.is_prefix_of(l)).collect();
            w.max_survivors = w.max_survivors.max(survivors.len());
            let through = |z: ProcessId| survivors.iter().any(|l| l.ids()[sigma.len()] == z);
            if pair.len() == 2 && through(pair[0]) && through(pair[1]) {
                w.violations.push(*sigma);
            }
        }
        out.push(w);
    }
    out
}

/// Outcome of the waste/monitor coupling check at one depth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WasteCheck {
    pub depth: usize,
    pub waste: i64,
    /// Smallest `|FA|` over correct processes at round `depth + 3`, if every
    /// correct process was still running then.
    pub min_fa: Option<usize>,
    pub fa_ok: bool,
    pub bad_agreement: bool,
    pub halt_ok: bool,
}

pub const WASTE_TRIGGER: i64 = 6;

/// For each depth with waste at least the trigger: `|FA| >= r + 3` at
/// `r = depth + 3` everywhere, and all correct decide BAD and halt within
/// six rounds of `depth`.
pub fn check_waste_coupling(trace: &ExecutionTrace, report: &CorruptTreeReport) -> Vec<WasteCheck> {
    let mut fa_at: HashMap<(ProcessId, u32), usize> = HashMap::new();
    let mut decisions: BTreeMap<ProcessId, Value> = BTreeMap::new();
    for rec in &trace.records {
        match rec {
            TraceRecord::Size { round, process, fa, .. } => {
                fa_at.insert((*process, *round), *fa);
            }
            TraceRecord::Global { process, event: GlobalEvent::Decide { value }, .. } => {
                decisions.insert(*process, *value);
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (i, &w) in report.waste.iter().enumerate() {
        if w < WASTE_TRIGGER {
            continue;
        }
        let r = i as u32 + 3;
        let mut min_fa = Some(usize::MAX);
        let mut fa_ok = true;
        for o in &trace.summary.outcomes {
            match fa_at.get(&(o.process, r)) {
                Some(&fa) => {
                    fa_ok &= fa >= r as usize + 3;
                    min_fa = min_fa.map(|m| m.min(fa));
                }
                // Halted before round r: the bound is about running processes.
                None if o.halt_round.is_some_and(|h| h < r) => {}
                None => {
                    fa_ok = false;
                    min_fa = None;
                }
            }
        }
        let bad_agreement = trace.summary.outcomes.iter().all(|o| decisions.get(&o.process).or(o.decision.as_ref()) == Some(&Value::Bad));
        let halt_ok = trace.summary.outcomes.iter().all(|o| o.halt_round.is_some_and(|h| h as usize <= i + 6));
        out.push(WasteCheck { depth: i, waste: w, min_fa: min_fa.filter(|&m| m != usize::MAX), fa_ok, bad_agreement, halt_ok });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eig::PutRule;
    use crate::trace::{InstanceSnapshot, TraceHeader, TraceSummary};

    fn l(s: &str) -> NodeLabel {
        s.parse().unwrap()
    }

    fn trace_with(snaps: Vec<(ProcessId, Vec<&str>, Vec<(&str, u32)>)>) -> ExecutionTrace {
        let snapshots = snaps
            .into_iter()
            .map(|(p, it, puts)| {
                let snap = InstanceSnapshot {
                    phi: 2,
                    last_round: 3,
                    killed: false,
                    it_labels: it.into_iter().map(l).collect(),
                    puts: puts.into_iter().map(|(x, r)| (l(x), Value::Val(0), PutRule::ItRule, r)).collect(),
                };
                (p, [(InstanceId::TOP, snap)].into_iter().collect())
            })
            .collect();
        ExecutionTrace {
            header: TraceHeader {
                schema_version: 1,
                n: 4,
                t: 1,
                seed: 0,
                adversary: "test".into(),
                alphabet_size: 2,
                corrupt: vec![3],
                inputs: vec![],
            },
            records: vec![],
            summary: TraceSummary { rounds: 3, terminated: true, f_actual: 0, deviators: vec![], outcomes: vec![] },
            snapshots,
        }
    }

    #[test]
    fn resolved_root_leaves_no_corrupt_tree() {
        let tr = trace_with(vec![(0, vec!["eps", "0", "1", "3"], vec![("eps", 1)])]);
        let rep = compute_fully_corrupt(&tr);
        assert!(rep.ct.is_empty());
        assert_eq!(rep.alpha, vec![0, 0]);
        assert_eq!(rep.waste, vec![0, -1]);
    }

    #[test]
    fn late_or_missing_puts_make_nodes_fully_corrupt() {
        // "3" is resolved at round 4 > 1 + 2; "3.0" never.
        let tr = trace_with(vec![
            (0, vec!["eps", "0", "3", "3.0", "3.1"], vec![("0", 2), ("3.1", 4)]),
            (1, vec!["eps", "0", "3", "3.0", "3.1"], vec![("0", 2)]),
        ]);
        let rep = compute_fully_corrupt(&tr);
        assert_eq!(rep.ct.get(&l("3")), Some(&CtNodeKind::Regular));
        assert_eq!(rep.ct.get(&l("3.0")), Some(&CtNodeKind::Regular));
        assert!(!rep.ct.contains_key(&l("3.1")));
        assert_eq!(rep.became_at[&3], 1);
        assert_eq!(rep.alpha[1], 1);
    }

    #[test]
    fn put_below_rescues_the_node() {
        let tr = trace_with(vec![(0, vec!["eps", "3", "3.0"], vec![("3.0", 3)])]);
        let rep = compute_fully_corrupt(&tr);
        assert!(!rep.ct.contains_key(&l("3")));
        assert!(!rep.ct.contains_key(&l("3.0")));
    }

    #[test]
    fn windows_match_two_ones_zero() {
        assert_eq!(cross_windows(&[0, 2, 1, 1, 0]), vec![(1, 4)]);
        assert_eq!(cross_windows(&[0, 2, 0, 2]), vec![(1, 2), (3, 4)]);
        assert_eq!(cross_windows(&[0, 2, 3]), vec![]);
    }
}
