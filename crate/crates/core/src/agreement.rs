//! One run of the EIG agreement subprotocol at one process: send and receive
//! rules, the end-of-round resolve step, output and stopping.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::detect::{self, DetectCtx, MaskingOutcome};
use crate::eig::{InfoTree, NodeLabel, ProcessId, ProcessSet, ResolveTree, Value};
use crate::resolve::{self, Mutation, ResolveError, RoundCtx};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("need n > 3t, got n={n}, t={t}")]
    Resilience { n: usize, t: usize },
    #[error("n={0} exceeds the supported maximum")]
    TooManyProcesses(usize),
    #[error("t={0} exceeds the supported maximum depth")]
    TooDeep(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Checks the resilience bound and the label/storage limits.
pub fn check_params(n: usize, t: usize) -> Result<(), ConfigError> {
    if n > crate::eig::MAX_PROCESSES {
        return Err(ConfigError::TooManyProcesses(n));
    }
    if t + 1 > crate::eig::MAX_DEPTH {
        return Err(ConfigError::TooDeep(t));
    }
    if n <= 3 * t {
        return Err(ConfigError::Resilience { n, t });
    }
    Ok(())
}

/// Names one invocation: the monitor sequence that made it and the global
/// round it started in. The top-level instance is `s1@1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId {
    pub seq: u8,
    pub start: u32,
}

impl InstanceId {
    pub const TOP: InstanceId = InstanceId { seq: 1, start: 1 };

    /// Instance-local round for global round `r`.
    pub fn local_round(&self, r: u32) -> u32 {
        r + 1 - self.start
    }

    pub fn global_round(&self, local: u32) -> u32 {
        local + self.start - 1
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}@{}", self.seq, self.start)
    }
}

impl FromStr for InstanceId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad instance id `{s}` (expected s<seq>@<round>)");
        let rest = s.strip_prefix('s').ok_or_else(bad)?;
        let (a, b) = rest.split_once('@').ok_or_else(bad)?;
        Ok(InstanceId { seq: a.parse().map_err(|_| bad())?, start: b.parse().map_err(|_| bad())? })
    }
}

impl Serialize for InstanceId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InstanceId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// `<label, sender, value>`: the sender's IT value for a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EigMessage {
    pub label: NodeLabel,
    pub sender: ProcessId,
    pub value: Value,
}

/// Why a sender's messages were rejected.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum Malformed {
    #[error("value {0} outside the alphabet")]
    Value(Value),
    #[error("label {0} has wrong depth for this round")]
    Depth(NodeLabel),
    #[error("label {0} contains its sender")]
    OwnLabel(NodeLabel),
    #[error("sender field {0} does not match the channel")]
    Sender(ProcessId),
    #[error("duplicate message for {0}")]
    Duplicate(NodeLabel),
    #[error("bad process id {0}")]
    Id(ProcessId),
    #[error("unknown monitor sequence {0}")]
    Sequence(u8),
}

/// What the end-of-round step produced.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundOutcome {
    pub mutations: Vec<Mutation>,
    pub output: Option<Value>,
    pub stopped: bool,
}

#[derive(Clone, Debug)]
pub struct ProtocolInstance {
    pub id: InstanceId,
    pub me: ProcessId,
    pub n: usize,
    pub t: usize,
    pub phi: usize,
    pub input: Value,
    pub alphabet_size: u32,
    pub allow_bad: bool,
    pub it: InfoTree,
    pub rt: ResolveTree,
    pub output: Option<Value>,
    pub output_round: Option<u32>,
    pub stopped: bool,
    pub stop_round: Option<u32>,
    /// Ended from outside (monitor halting) before stopping on its own.
    pub killed: bool,
    /// Local round in which the instance was killed.
    pub kill_round: Option<u32>,
    deferred: Vec<(ProcessId, NodeLabel)>,
}

impl ProtocolInstance {
    pub fn is_live(&self) -> bool {
        !self.stopped && !self.killed
    }

    /// Labels sent in local round `r`: depth `r-1`, active, not containing
    /// this process.
    pub fn outgoing(&self, r: u32) -> Vec<EigMessage> {
        if !self.is_live() || r == 0 || r as usize > self.phi + 1 {
            return Vec::new();
        }
        self.it
            .level(r as usize - 1)
            .iter()
            .filter(|l| !l.contains(self.me) && self.it.is_active(l))
            .map(|l| EigMessage { label: *l, sender: self.me, value: self.it.get(l).unwrap() })
            .collect()
    }

    /// Checks one sender's messages for local round `r` and returns them
    /// keyed by label. Labels under a locally closed branch are dropped.
    pub fn validate(&self, r: u32, sender: ProcessId, msgs: &[EigMessage]) -> Result<HashMap<NodeLabel, Value>, Malformed> {
        let mut out = HashMap::with_capacity(msgs.len());
        for m in msgs {
            if m.sender != sender {
                return Err(Malformed::Sender(m.sender));
            }
            if !m.value.is_valid(self.alphabet_size, self.allow_bad) {
                return Err(Malformed::Value(m.value));
            }
            if m.label.len() + 1 != r as usize || m.label.len() > self.phi {
                return Err(Malformed::Depth(m.label));
            }
            if m.label.ids().iter().any(|&id| id as usize >= self.n) {
                return Err(Malformed::Id(*m.label.ids().iter().max().unwrap()));
            }
            if m.label.contains(sender) {
                return Err(Malformed::OwnLabel(m.label));
            }
            if out.insert(m.label, m.value).is_some() {
                return Err(Malformed::Duplicate(m.label));
            }
        }
        out.retain(|l, _| self.it.is_active(l));
        Ok(out)
    }

    /// Receive rule for local round `r`. `received[x]` holds `x`'s validated
    /// messages, `None` when silent.
    pub fn ingest(&mut self, r: u32, faulty: ProcessSet, received: &[Option<HashMap<NodeLabel, Value>>]) {
        if !self.is_live() || r < 1 || r as usize > self.phi + 1 {
            return;
        }
        let parents: Vec<NodeLabel> =
            self.it.level(r as usize - 1).iter().copied().filter(|l| self.it.is_active(l)).collect();
        for sigma in parents {
            let inherited = self.it.get(&sigma).unwrap();
            for x in sigma.child_ids(self.n).iter() {
                let v = if faulty.contains(x) {
                    Value::Bottom
                } else {
                    received[x as usize].as_ref().and_then(|m| m.get(&sigma).copied()).unwrap_or(inherited)
                };
                self.it.set(sigma.child(x), v);
            }
        }
    }

    /// Not Voter and Not IT-to-RT. The resolved-prefix exemptions look at
    /// the RT this round's resolve pass would produce, so a node that is
    /// about to be fixed is not held against its sender.
    pub fn detect(&self, r: u32, faulty: ProcessSet, prior_remask: bool) -> (ProcessSet, ProcessSet) {
        let ctx = DetectCtx { n: self.n, t: self.t, me: self.me, round: r, faulty };
        let mut it = self.it.clone();
        let mut rt = self.rt.clone();
        let mut rctx = RoundCtx::new(self.n, self.t, self.phi, r, faulty);
        if prior_remask {
            rctx.it_rule_min_depth = 0;
        }
        if resolve::resolve_fixpoint(&mut it, &mut rt, &rctx).is_err() {
            rt = self.rt.clone();
        }
        (detect::detect_not_voter(&self.it, &rt, &ctx), detect::detect_not_it_to_rt(&self.it, &rt, &ctx))
    }

    /// Not Masking; deferred accusations are kept for [`Self::settle_deferred`].
    pub fn detect_masking(&mut self, r: u32, faulty: ProcessSet) -> MaskingOutcome {
        let ctx = DetectCtx { n: self.n, t: self.t, me: self.me, round: r, faulty };
        let out = detect::detect_not_masking(&mut self.it, &ctx);
        self.deferred.extend(out.deferred.iter().copied());
        out
    }

    /// Rewrites entries ending in `x` to bottom at depth `r`, or at every
    /// depth up to `r` when `all_depths` is set.
    pub fn remask(&mut self, r: u32, x: ProcessId, all_depths: bool) -> Vec<NodeLabel> {
        if !self.is_live() {
            return Vec::new();
        }
        let lo = if all_depths { 1 } else { r as usize };
        detect::remask(&mut self.it, x, lo..=r as usize)
    }

    /// Runs the resolve fixpoint, then the output and stopping rules.
    pub fn end_of_round(&mut self, r: u32, faulty: ProcessSet, prior_remask: bool) -> Result<RoundOutcome, ResolveError> {
        let mut ctx = RoundCtx::new(self.n, self.t, self.phi, r, faulty);
        if prior_remask {
            ctx.it_rule_min_depth = 0;
        }
        let mutations = resolve::resolve_fixpoint(&mut self.it, &mut self.rt, &ctx)?;
        let mut out = RoundOutcome { mutations, ..Default::default() };
        if self.output.is_none() {
            let v = if let Some(e) = self.rt.put(&NodeLabel::ROOT) {
                Some(e.value)
            } else if self.rt.frontier_exists(self.n, self.phi) {
                Some(Value::Bottom)
            } else {
                None
            };
            if let Some(v) = v {
                self.output = Some(v);
                self.output_round = Some(r);
                out.output = Some(v);
            }
        }
        let all_closed = self.it.level(r as usize).iter().all(|l| !self.it.is_active(l));
        if r as usize >= self.phi + 1 || all_closed {
            self.stopped = true;
            self.stop_round = Some(r);
            out.stopped = true;
        }
        Ok(out)
    }

    /// Local rounds this instance took part in.
    pub fn last_round(&self) -> Option<u32> {
        self.stop_round.or(self.kill_round)
    }

    /// Deferred Not Masking accusations whose node still has no resolved
    /// prefix. Clears the pending list.
    pub fn settle_deferred(&mut self) -> ProcessSet {
        let mut out = ProcessSet::EMPTY;
        for (u, parent) in std::mem::take(&mut self.deferred) {
            if !self.rt.contains(&parent) {
                out.insert(u);
            }
        }
        out
    }
}

/// Creates an instance with `IT(root) = input`.
#[allow(clippy::too_many_arguments)]
pub fn init_instance(
    id: InstanceId,
    me: ProcessId,
    n: usize,
    t: usize,
    phi: usize,
    input: Value,
    alphabet_size: u32,
    allow_bad: bool,
) -> Result<ProtocolInstance, ConfigError> {
    check_params(n, t)?;
    if phi == 0 || phi > t {
        return Err(ConfigError::Invalid(format!("phi={phi} must be in 1..={t}")));
    }
    let mut it = InfoTree::new();
    it.set(NodeLabel::ROOT, input);
    Ok(ProtocolInstance {
        id,
        me,
        n,
        t,
        phi,
        input,
        alphabet_size,
        allow_bad,
        it,
        rt: ResolveTree::new(),
        output: None,
        output_round: None,
        stopped: false,
        stop_round: None,
        killed: false,
        kill_round: None,
        deferred: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eig::PutRule;

    fn inst(me: ProcessId, n: usize, t: usize, input: Value) -> ProtocolInstance {
        init_instance(InstanceId::TOP, me, n, t, t, input, 10, false).unwrap()
    }

    #[test]
    fn init_examples() {
        assert_eq!(inst(0, 4, 1, Value::Val(7)).it.get(&NodeLabel::ROOT), Some(Value::Val(7)));
        assert_eq!(inst(0, 4, 1, Value::Bottom).it.get(&NodeLabel::ROOT), Some(Value::Bottom));
        assert_eq!(
            init_instance(InstanceId::TOP, 0, 3, 1, 1, Value::Val(0), 2, false).unwrap_err(),
            ConfigError::Resilience { n: 3, t: 1 }
        );
    }

    #[test]
    fn outgoing_round_one_and_two() {
        let mut p = inst(1, 4, 1, Value::Val(3));
        let m = p.outgoing(1);
        assert_eq!(m, vec![EigMessage { label: NodeLabel::ROOT, sender: 1, value: Value::Val(3) }]);
        let received: Vec<_> = (0..4).map(|_| None).collect();
        p.ingest(1, ProcessSet::EMPTY, &received);
        // all silent: every child inherits the root value
        assert!(p.it.level(1).iter().all(|l| p.it.get(l) == Some(Value::Val(3))));
        let m2 = p.outgoing(2);
        assert_eq!(m2.len(), 3);
        assert!(m2.iter().all(|m| !m.label.contains(1)));
    }

    #[test]
    fn receive_rule_branches() {
        let mut p = inst(0, 4, 1, Value::Val(3));
        let mut received: Vec<Option<HashMap<NodeLabel, Value>>> = vec![None; 4];
        received[1] = Some(HashMap::from([(NodeLabel::ROOT, Value::Val(5))]));
        received[2] = Some(HashMap::from([(NodeLabel::ROOT, Value::Val(9))]));
        p.ingest(1, ProcessSet::from_iter([1]), &received);
        let at = |s: &str| p.it.get(&s.parse().unwrap()).unwrap();
        assert_eq!(at("1"), Value::Bottom);
        assert_eq!(at("2"), Value::Val(9));
        assert_eq!(at("3"), Value::Val(3));
    }

    #[test]
    fn validate_rejects_malformed() {
        let p = inst(0, 4, 1, Value::Val(3));
        let ok = [EigMessage { label: NodeLabel::ROOT, sender: 2, value: Value::Val(1) }];
        assert!(p.validate(1, 2, &ok).is_ok());
        let big = [EigMessage { label: NodeLabel::ROOT, sender: 2, value: Value::Val(10) }];
        assert_eq!(p.validate(1, 2, &big), Err(Malformed::Value(Value::Val(10))));
        let bad = [EigMessage { label: NodeLabel::ROOT, sender: 2, value: Value::Bad }];
        assert!(p.validate(1, 2, &bad).is_err());
        let dup = [ok[0], ok[0]];
        assert_eq!(p.validate(1, 2, &dup), Err(Malformed::Duplicate(NodeLabel::ROOT)));
        let own = [EigMessage { label: "2".parse().unwrap(), sender: 2, value: Value::Val(1) }];
        assert!(p.validate(2, 2, &own).is_err());
        let deep = [EigMessage { label: "1".parse().unwrap(), sender: 2, value: Value::Val(1) }];
        assert!(p.validate(1, 2, &deep).is_err());
        let forged = [EigMessage { label: NodeLabel::ROOT, sender: 3, value: Value::Val(1) }];
        assert_eq!(p.validate(1, 2, &forged), Err(Malformed::Sender(3)));
    }

    /// Four honest instances with unanimous input, driven by hand.
    #[test]
    fn unanimous_honest_run_resolves_in_round_one() {
        let n = 4;
        let mut ps: Vec<_> = (0..n as u8).map(|i| inst(i, n, 1, Value::Val(2))).collect();
        let sent: Vec<_> = ps.iter().map(|p| p.outgoing(1)).collect();
        for p in ps.iter_mut() {
            let received: Vec<_> = sent
                .iter()
                .enumerate()
                .map(|(s, m)| Some(p.validate(1, s as u8, m).unwrap()))
                .collect();
            p.ingest(1, ProcessSet::EMPTY, &received);
            let out = p.end_of_round(1, ProcessSet::EMPTY, false).unwrap();
            assert_eq!(out.output, Some(Value::Val(2)));
            assert!(out.stopped);
            assert_eq!(p.rt.put(&NodeLabel::ROOT).unwrap().rule, PutRule::EarlyItRule);
        }
    }

    #[test]
    fn final_round_stops_with_frontier_output() {
        let n = 4;
        let inputs = [Value::Val(0), Value::Val(1), Value::Val(0), Value::Val(1)];
        let mut ps: Vec<_> = (0..n as u8).map(|i| inst(i, n, 1, inputs[i as usize])).collect();
        for r in 1..=2u32 {
            let sent: Vec<_> = ps.iter().map(|p| p.outgoing(r)).collect();
            for p in ps.iter_mut() {
                if !p.is_live() {
                    continue;
                }
                let received: Vec<_> = sent
                    .iter()
                    .enumerate()
                    .map(|(s, m)| Some(p.validate(r, s as u8, m).unwrap()))
                    .collect();
                p.ingest(r, ProcessSet::EMPTY, &received);
                p.end_of_round(r, ProcessSet::EMPTY, false).unwrap();
            }
        }
        let outs: Vec<_> = ps.iter().map(|p| p.output).collect();
        assert!(ps.iter().all(|p| p.stopped));
        assert!(outs.iter().all(|o| *o == outs[0] && o.is_some()));
    }
}
