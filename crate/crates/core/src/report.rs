//! Property verdicts computed from a finished execution trace.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::agreement::InstanceId;
use crate::analysis;
use crate::eig::{NodeLabel, ProcessId, Value};
use crate::trace::{ExecutionTrace, GlobalEvent, InstanceSnapshot, TraceRecord};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Per-process bit budget `sum_k coefficients[k] * n^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub coefficients: Vec<f64>,
    /// Count a budget overrun as a failure.
    #[serde(default)]
    pub enforce: bool,
}

impl Default for Budget {
    fn default() -> Self {
        Budget::monomial(1.0, 10)
    }
}

impl Budget {
    /// `c * n^k`, not enforced.
    pub fn monomial(c: f64, k: usize) -> Self {
        let mut coefficients = vec![0.0; k + 1];
        coefficients[k] = c;
        Budget { coefficients, enforce: false }
    }

    pub fn limit(&self, n: usize) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * n as f64 + c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<TraceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub name: &'static str,
    pub pass: bool,
    /// Informational verdicts do not affect the overall result.
    pub enforced: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation: Option<Violation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Counters {
    pub rounds: u32,
    pub f_actual: usize,
    pub max_halt_round: u32,
    pub max_messages: u64,
    pub max_bits: u64,
    pub max_it_nodes: usize,
    pub ct_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyReport {
    pub schema_version: u32,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub adversary: String,
    pub verdicts: Vec<Verdict>,
    pub counters: Counters,
    pub alpha: Vec<usize>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass || !v.enforced)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| !v.pass && v.enforced)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn verdict(name: &'static str, violation: Option<Violation>) -> Verdict {
    Verdict { name, pass: violation.is_none(), enforced: true, violation }
}

fn fail(message: String, record: Option<&TraceRecord>) -> Option<Violation> {
    Some(Violation { message, record: record.cloned() })
}

/// Final decision and halt round of each correct process, preferring the
/// event records over the summary when both exist.
struct Outcomes<'a> {
    decisions: BTreeMap<ProcessId, (Option<Value>, Option<&'a TraceRecord>)>,
    halts: BTreeMap<ProcessId, (Option<u32>, Option<&'a TraceRecord>)>,
}

fn outcomes(trace: &ExecutionTrace) -> Outcomes<'_> {
    let mut decisions = BTreeMap::new();
    let mut halts = BTreeMap::new();
    for o in &trace.summary.outcomes {
        decisions.insert(o.process, (o.decision, None));
        halts.insert(o.process, (o.halt_round, None));
    }
    let mut seen_decide = std::collections::HashSet::new();
    let mut seen_halt = std::collections::HashSet::new();
    for rec in &trace.records {
        if let TraceRecord::Global { round, process, event } = rec {
            if !trace.is_correct(*process) {
                continue;
            }
            match event {
                GlobalEvent::Decide { value } if seen_decide.insert(*process) => {
                    decisions.insert(*process, (Some(*value), Some(rec)));
                }
                GlobalEvent::Halt if seen_halt.insert(*process) => {
                    halts.insert(*process, (Some(*round), Some(rec)));
                }
                _ => {}
            }
        }
    }
    Outcomes { decisions, halts }
}

fn check_agreement(o: &Outcomes<'_>) -> Option<Violation> {
    let mut first: Option<(ProcessId, Value)> = None;
    for (&p, &(d, rec)) in &o.decisions {
        let Some(d) = d else {
            return fail(format!("process {p} never decided"), rec);
        };
        match first {
            None => first = Some((p, d.external())),
            Some((q, v)) if v != d.external() => {
                return fail(format!("process {p} decided {} but process {q} decided {v}", d.external()), rec);
            }
            _ => {}
        }
    }
    None
}

fn check_validity(trace: &ExecutionTrace, o: &Outcomes<'_>) -> Option<Violation> {
    let inputs: Vec<Value> = trace.header.inputs.iter().flatten().copied().collect();
    let unanimous = inputs.first().filter(|v| inputs.iter().all(|x| x == *v)).copied();
    for (&p, &(d, rec)) in &o.decisions {
        let Some(d) = d.map(Value::external) else { continue };
        if let Some(u) = unanimous {
            if d != u {
                return fail(format!("all correct inputs are {u} but process {p} decided {d}"), rec);
            }
        }
        if !d.is_bottom() {
            let support = inputs.iter().filter(|&&x| x == d).count();
            if support < trace.header.t + 1 {
                return fail(format!("process {p} decided {d} held by only {support} correct inputs"), rec);
            }
        }
    }
    None
}

fn check_early_stopping(trace: &ExecutionTrace, o: &Outcomes<'_>) -> Option<Violation> {
    let bound = (trace.summary.f_actual as u32 + 2).min(trace.header.t as u32 + 1);
    for (&p, &(h, rec)) in &o.halts {
        match h {
            None => return fail(format!("process {p} never halted"), rec),
            Some(h) if h > bound => {
                return fail(format!("process {p} halted in round {h}, bound min(f+2, t+1) = {bound}"), rec);
            }
            _ => {}
        }
    }
    None
}

fn check_no_false_detection(trace: &ExecutionTrace) -> Option<Violation> {
    trace.records.iter().find_map(|rec| match rec {
        TraceRecord::Detect { process, detected, rule, .. } if trace.is_correct(*process) && trace.is_correct(*detected) => {
            fail(format!("correct process {process} detected correct {detected} via {rule:?}"), Some(rec))
        }
        _ => None,
    })
}

/// Earliest local round each put label was assigned at one process.
fn put_rounds(snap: &InstanceSnapshot) -> HashMap<NodeLabel, u32> {
    snap.puts.iter().map(|&(l, _, _, r)| (l, r)).collect()
}

fn in_rt_by(puts: &HashMap<NodeLabel, u32>, label: &NodeLabel, round: u32) -> bool {
    (0..=label.len()).any(|k| puts.get(&label.prefix(k)).is_some_and(|&r| r <= round))
}

fn instances(trace: &ExecutionTrace) -> BTreeMap<InstanceId, Vec<(ProcessId, &InstanceSnapshot)>> {
    let mut by: BTreeMap<InstanceId, Vec<(ProcessId, &InstanceSnapshot)>> = BTreeMap::new();
    for (&p, per) in &trace.snapshots {
        for (iid, s) in per {
            by.entry(*iid).or_default().push((p, s));
        }
    }
    by
}

/// A label in one correct RT at local round `k - 2` is in every other
/// correct RT by round `k` (by the final round when `k` exceeds it).
/// Processes whose instance was killed before the deadline are skipped.
fn check_liveness(trace: &ExecutionTrace) -> Option<Violation> {
    for (iid, procs) in instances(trace) {
        let tables: Vec<_> = procs.iter().map(|(p, s)| (*p, *s, put_rounds(s))).collect();
        for (p, sp, _) in &tables {
            for &(label, _, _, k0) in &sp.puts {
                let deadline = (k0 + 2).min(sp.phi as u32 + 1);
                for (q, sq, tq) in &tables {
                    if q == p || sq.last_round < deadline {
                        continue;
                    }
                    if !in_rt_by(tq, &label, deadline) {
                        return fail(
                            format!("{iid}: {label} in RT of {p} at round {k0} but not in RT of {q} by round {deadline}"),
                            None,
                        );
                    }
                }
            }
        }
    }
    None
}

/// Put-tree entries for the same label carry the same value everywhere.
fn check_put_safety(trace: &ExecutionTrace) -> Option<Violation> {
    for (iid, procs) in instances(trace) {
        let mut seen: HashMap<NodeLabel, (ProcessId, Value)> = HashMap::new();
        for (p, s) in procs {
            for &(label, v, rule, _) in s.puts.iter().filter(|e| e.2.in_put_tree()) {
                match seen.get(&label) {
                    Some(&(q, w)) if w != v => {
                        let rec = trace.records.iter().find(|r| {
                            matches!(r, TraceRecord::Put { process, instance, label: l, .. } if *process == p && *instance == iid && *l == label)
                        });
                        return fail(format!("{iid}: {label} put to {v} by {p} ({rule}) but {w} by {q}"), rec);
                    }
                    Some(_) => {}
                    None => {
                        seen.insert(label, (p, v));
                    }
                }
            }
        }
    }
    None
}

pub fn check_properties(trace: &ExecutionTrace, budget: &Budget) -> PropertyReport {
    let o = outcomes(trace);
    let ct = analysis::compute_fully_corrupt(trace);
    let n = trace.header.n;

    let mut counters = Counters {
        rounds: trace.summary.rounds,
        f_actual: trace.summary.f_actual,
        max_halt_round: o.halts.values().filter_map(|h| h.0).max().unwrap_or(0),
        ct_size: ct.ct.len(),
        max_it_nodes: trace.snapshots.values().map(|per| per.values().map(|s| s.it_labels.len()).sum()).max().unwrap_or(0),
        ..Default::default()
    };
    let mut sent: BTreeMap<ProcessId, (u64, u64)> = BTreeMap::new();
    for rec in &trace.records {
        if let TraceRecord::Traffic { sender, recipient: None, eig_messages, bits, .. } = rec {
            let e = sent.entry(*sender).or_default();
            e.0 += *eig_messages as u64 * n as u64;
            e.1 += bits * n as u64;
        }
    }
    counters.max_messages = sent.values().map(|x| x.0).max().unwrap_or(0);
    counters.max_bits = sent.values().map(|x| x.1).max().unwrap_or(0);

    let tree = analysis::check_it_ct_bound(trace, &ct)
        .err()
        .and_then(|v| fail(format!("IT node {} at process {} has no corrupt-tree ancestor within {} levels", v.label, v.process, analysis::CT_ANCESTOR_GAP), None));
    let limit = budget.limit(n);
    let over = sent.iter().find(|(_, x)| x.1 as f64 > limit);
    let mut budget_verdict = verdict(
        "budget",
        over.and_then(|(p, x)| fail(format!("process {p} sent {} bits, budget {limit:.0}", x.1), None)),
    );
    budget_verdict.enforced = budget.enforce;

    let termination = if trace.summary.terminated {
        None
    } else {
        fail(format!("not every correct process halted by round {}", trace.header.t + 1), None)
    };

    PropertyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n,
        t: trace.header.t,
        seed: trace.header.seed,
        adversary: trace.header.adversary.clone(),
        verdicts: vec![
            verdict("termination", termination),
            verdict("agreement", check_agreement(&o)),
            verdict("validity", check_validity(trace, &o)),
            verdict("early_stopping", check_early_stopping(trace, &o)),
            verdict("no_false_detection", check_no_false_detection(trace)),
            verdict("liveness", check_liveness(trace)),
            verdict("put_safety", check_put_safety(trace)),
            verdict("tree_bound", tree),
            budget_verdict,
        ],
        counters,
        alpha: ct.alpha,
    }
}
