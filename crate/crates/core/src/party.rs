//! A whole process: shared fault state, every subprotocol instance it runs,
//! and the monitor pipeline, advanced one global round at a time.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{self, ConfigError, EigMessage, InstanceId, Malformed, ProtocolInstance};
use crate::detect::{self, DetectRule, FaultState, GossipReport};
use crate::eig::{NodeLabel, ProcessId, ProcessSet, Value};
use crate::monitor::{self, InstanceStatus, MonitorCtx, MonitorMessage, MonitorPipeline};
use crate::resolve::{Mutation, ResolveError};
use crate::trace::{GlobalEvent, InstanceEvent, MonitorEvent, TraceRecord};

/// Everything one process sends to one recipient in one round.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub gossip: ProcessSet,
    pub eig: BTreeMap<InstanceId, Vec<EigMessage>>,
    pub monitor: Vec<MonitorMessage>,
}

impl Bundle {
    pub fn eig_count(&self) -> usize {
        self.eig.values().map(Vec::len).sum()
    }

    /// Wire-size estimate: a bitmask for gossip, and per EIG message the
    /// label ids, a value symbol and an instance tag.
    pub fn bits(&self, n: usize, alphabet_size: u32) -> u64 {
        let id_bits = usize::BITS - (n.max(2) - 1).leading_zeros();
        let val_bits = u32::BITS - (alphabet_size + 1).leading_zeros();
        let mut bits = n as u64;
        for msgs in self.eig.values() {
            bits += 16;
            for m in msgs {
                bits += (m.label.len() as u64 + 1) * id_bits as u64 + val_bits as u64;
            }
        }
        bits + self.monitor.len() as u64 * (val_bits as u64 + 4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartyConfig {
    pub n: usize,
    pub t: usize,
    pub alphabet_size: u32,
    /// Re-mask every earlier depth, not only the current round's, when a
    /// process newly enters `F`.
    pub remask_prior_rounds: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartyError {
    #[error(transparent)]
    Resolve(#[from] ResolveError),
    #[error(transparent)]
    Monitor(#[from] monitor::MonitorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Collects trace records; a disabled recorder builds nothing.
#[derive(Debug, Default)]
pub struct Recorder {
    enabled: bool,
    pub records: Vec<TraceRecord>,
}

impl Recorder {
    pub fn new(enabled: bool) -> Self {
        Recorder { enabled, records: Vec::new() }
    }

    pub fn emit(&mut self, f: impl FnOnce() -> TraceRecord) {
        if self.enabled {
            self.records.push(f());
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }
}

#[derive(Clone, Debug)]
pub struct Party {
    pub id: ProcessId,
    pub cfg: PartyConfig,
    pub input: Value,
    pub fault: FaultState,
    pub instances: BTreeMap<InstanceId, ProtocolInstance>,
    pub pipeline: MonitorPipeline,
}

impl Party {
    pub fn new(id: ProcessId, input: Value, cfg: PartyConfig) -> Result<Self, ConfigError> {
        agreement::check_params(cfg.n, cfg.t)?;
        if cfg.t == 0 {
            return Err(ConfigError::Invalid("t must be at least 1".into()));
        }
        Ok(Party {
            id,
            cfg,
            input,
            fault: FaultState::new(),
            instances: BTreeMap::new(),
            pipeline: MonitorPipeline::new(cfg.n),
        })
    }

    pub fn halted(&self) -> bool {
        self.pipeline.globally_halted
    }

    pub fn decision(&self) -> Option<Value> {
        self.pipeline.global_decision
    }

    pub fn halt_round(&self) -> Option<u32> {
        self.pipeline.halt_round
    }

    pub fn top(&self) -> Option<&ProtocolInstance> {
        self.instances.get(&InstanceId::TOP)
    }

    /// Start-of-round invocations.
    pub fn begin_round(&mut self, r: u32, log: &mut Recorder) -> Result<(), PartyError> {
        if self.halted() {
            return Ok(());
        }
        let (n, t) = (self.cfg.n, self.cfg.t);
        for s in self.pipeline.sequences.iter_mut() {
            if let Some((phi, input)) = s.invocation(r, t, self.input) {
                let iid = InstanceId { seq: s.index, start: r };
                let inst = agreement::init_instance(iid, self.id, n, t, phi, input, self.cfg.alphabet_size, iid != InstanceId::TOP)?;
                self.instances.insert(iid, inst);
                s.invoked.push(iid);
                let (me, seq) = (self.id, s.index);
                log.emit(|| TraceRecord::Monitor {
                    round: r,
                    process: me,
                    seq,
                    event: MonitorEvent::Invoke { instance: iid, phi, input },
                });
            }
        }
        Ok(())
    }

    /// The broadcast bundle for round `r`; `None` once halted.
    pub fn outgoing(&self, r: u32) -> Option<Bundle> {
        if self.halted() {
            return None;
        }
        let mut b = Bundle { gossip: self.fault.f, ..Default::default() };
        for (iid, inst) in &self.instances {
            if inst.is_live() {
                let msgs = inst.outgoing(iid.local_round(r));
                if !msgs.is_empty() {
                    b.eig.insert(*iid, msgs);
                }
            }
        }
        b.monitor = self.pipeline.sequences.iter().filter_map(|s| s.outgoing(r)).collect();
        Some(b)
    }

    fn check_bundle(&self, r: u32, sender: ProcessId, b: &Bundle) -> Result<HashMap<InstanceId, HashMap<NodeLabel, Value>>, Malformed> {
        let n = self.cfg.n;
        if let Some(bad) = b.gossip.iter().find(|&id| id as usize >= n) {
            return Err(Malformed::Id(bad));
        }
        for m in &b.monitor {
            if !(1..=monitor::SEQUENCES).contains(&m.seq()) {
                return Err(Malformed::Sequence(m.seq()));
            }
            if let MonitorMessage::V { value, .. } = m {
                if !value.is_valid(0, true) {
                    return Err(Malformed::Value(*value));
                }
            }
        }
        let mut out = HashMap::new();
        for (iid, msgs) in &b.eig {
            if !(1..=monitor::SEQUENCES).contains(&iid.seq) || iid.start > r || iid.start == 0 {
                return Err(Malformed::Sequence(iid.seq));
            }
            if let Some(inst) = self.instances.get(iid).filter(|i| i.is_live()) {
                out.insert(*iid, inst.validate(iid.local_round(r), sender, msgs)?);
            }
        }
        Ok(out)
    }

    fn add_fault(&mut self, r: u32, x: ProcessId, rule: DetectRule, log: &mut Recorder) -> bool {
        if self.fault.add(x) {
            let me = self.id;
            log.emit(|| TraceRecord::Detect { round: r, process: me, detected: x, rule });
            true
        } else {
            false
        }
    }

    fn remask_all(&mut self, r: u32, x: ProcessId, log: &mut Recorder) {
        let me = self.id;
        let prior = self.cfg.remask_prior_rounds;
        for (iid, inst) in self.instances.iter_mut() {
            let changed = inst.remask(iid.local_round(r), x, prior);
            for label in changed {
                let iid = *iid;
                log.emit(|| TraceRecord::Mask { round: r, process: me, instance: iid, label });
            }
        }
    }

    fn live_ids(&self) -> Vec<InstanceId> {
        self.instances.iter().filter(|(_, i)| i.is_live()).map(|(k, _)| *k).collect()
    }

    /// Receive and end-of-round processing for round `r`. `inbox[q]` is what
    /// `q` delivered to this process, `None` for silence.
    pub fn deliver(&mut self, r: u32, inbox: &[Option<Bundle>], log: &mut Recorder) -> Result<(), PartyError> {
        if self.halted() {
            return Ok(());
        }
        let n = self.cfg.n;
        let me = self.id;
        let mut present = ProcessSet::EMPTY;
        let mut valid: Vec<Option<&Bundle>> = vec![None; n];
        let mut parsed: Vec<HashMap<InstanceId, HashMap<NodeLabel, Value>>> = vec![HashMap::new(); n];
        for (q, b) in inbox.iter().enumerate().take(n) {
            let Some(b) = b else { continue };
            let q = q as ProcessId;
            present.insert(q);
            match self.check_bundle(r, q, b) {
                Ok(p) => {
                    parsed[q as usize] = p;
                    valid[q as usize] = Some(b);
                }
                Err(_) => {
                    self.add_fault(r, q, DetectRule::Malformed, log);
                }
            }
        }

        let reports: Vec<GossipReport> = valid
            .iter()
            .enumerate()
            .filter_map(|(q, b)| b.map(|b| GossipReport { sender: q as ProcessId, suspects: b.gossip }))
            .collect();
        let (new_f, new_fa) = detect::merge_gossip(&mut self.fault, &reports, self.cfg.t);
        for x in new_f.iter() {
            log.emit(|| TraceRecord::Detect { round: r, process: me, detected: x, rule: DetectRule::Gossip });
        }
        for x in new_fa.iter() {
            log.emit(|| TraceRecord::Detect { round: r, process: me, detected: x, rule: DetectRule::GossipAll });
        }

        let live = self.live_ids();
        for iid in &live {
            let received: Vec<Option<HashMap<NodeLabel, Value>>> = (0..n)
                .map(|q| if valid[q].is_some() { Some(parsed[q].remove(iid).unwrap_or_default()) } else { None })
                .collect();
            let f = self.fault.f;
            self.instances.get_mut(iid).unwrap().ingest(iid.local_round(r), f, &received);
        }

        // Detection to fixpoint, before any resolve rule.
        loop {
            let mut fresh = ProcessSet::EMPTY;
            let mut masked_any = false;
            for iid in &live {
                let rl = iid.local_round(r);
                let f = self.fault.f;
                let (nv, nir) = self.instances[iid].detect(rl, f, self.cfg.remask_prior_rounds);
                for x in nv.iter() {
                    if self.add_fault(r, x, DetectRule::NotVoter, log) {
                        fresh.insert(x);
                    }
                }
                for x in nir.iter() {
                    if self.add_fault(r, x, DetectRule::NotItToRt, log) {
                        fresh.insert(x);
                    }
                }
                let f = self.fault.f;
                let mo = self.instances.get_mut(iid).unwrap().detect_masking(rl, f);
                masked_any |= !mo.masked.is_empty();
                for label in mo.masked {
                    let iid = *iid;
                    log.emit(|| TraceRecord::Mask { round: r, process: me, instance: iid, label });
                }
            }
            for x in fresh.iter() {
                self.remask_all(r, x, log);
            }
            if fresh.is_empty() && !masked_any {
                break;
            }
        }

        for iid in &live {
            let rl = iid.local_round(r);
            let f = self.fault.f;
            let prior = self.cfg.remask_prior_rounds;
            let inst = self.instances.get_mut(iid).unwrap();
            let out = inst.end_of_round(rl, f, prior)?;
            let iid = *iid;
            for m in out.mutations {
                log.emit(|| match m {
                    Mutation::Put { label, value, rule } => {
                        TraceRecord::Put { round: r, process: me, instance: iid, label, value, provenance: rule }
                    }
                    Mutation::Close { label, rule } => TraceRecord::Close { round: r, process: me, instance: iid, label, rule },
                });
            }
            if let Some(value) = out.output {
                log.emit(|| TraceRecord::Instance { round: r, process: me, instance: iid, event: InstanceEvent::Output { value } });
            }
            if out.stopped {
                log.emit(|| TraceRecord::Instance { round: r, process: me, instance: iid, event: InstanceEvent::Stopped });
            }
        }
        for iid in &live {
            let accused = self.instances.get_mut(iid).unwrap().settle_deferred();
            for x in accused.iter() {
                if x != me && self.add_fault(r, x, DetectRule::NotMasking, log) {
                    self.remask_all(r, x, log);
                }
            }
        }
        self.fault.snapshot_fa(r);

        self.run_monitors(r, present, &valid, log)?;

        let it_nodes = self.instances.values().map(|i| i.it.len()).sum();
        let rt_puts = self.instances.values().map(|i| i.rt.put_count()).sum();
        let fa = self.fault.fa.len();
        log.emit(|| TraceRecord::Size { round: r, process: me, it_nodes, rt_puts, fa });
        Ok(())
    }

    fn statuses(&self, seq: usize) -> Vec<InstanceStatus> {
        self.pipeline.sequences[seq]
            .invoked
            .iter()
            .map(|iid| {
                let i = &self.instances[iid];
                InstanceStatus { id: *iid, stopped: i.stopped || i.killed, output: i.output }
            })
            .collect()
    }

    fn kill(&mut self, r: u32, pred: impl Fn(&InstanceId) -> bool, log: &mut Recorder) {
        let me = self.id;
        for (iid, inst) in self.instances.iter_mut() {
            if inst.is_live() && pred(iid) {
                inst.killed = true;
                inst.kill_round = Some(iid.local_round(r));
                let iid = *iid;
                log.emit(|| TraceRecord::Instance { round: r, process: me, instance: iid, event: InstanceEvent::Killed });
            }
        }
    }

    fn run_monitors(&mut self, r: u32, present: ProcessSet, valid: &[Option<&Bundle>], log: &mut Recorder) -> Result<(), PartyError> {
        let me = self.id;
        for k in 0..self.pipeline.sequences.len() {
            let seq = self.pipeline.sequences[k].index;
            if !self.pipeline.sequences[k].active(r) {
                continue;
            }
            let mut ctx = MonitorCtx {
                n: self.cfg.n,
                t: self.cfg.t,
                fa_size: self.fault.fa.len(),
                present,
                v_bad: ProcessSet::EMPTY,
                early_msgs: Vec::new(),
            };
            for (q, b) in valid.iter().enumerate() {
                let Some(b) = b else { continue };
                for m in &b.monitor {
                    match *m {
                        MonitorMessage::V { seq: s, value } if s == seq && value == Value::Bad => {
                            ctx.v_bad.insert(q as ProcessId);
                        }
                        MonitorMessage::Early { seq: s, value } if s == seq => ctx.early_msgs.push((q as ProcessId, value)),
                        _ => {}
                    }
                }
            }
            let statuses = self.statuses(k);
            let mut events = Vec::new();
            let s = &mut self.pipeline.sequences[k];
            s.end_of_round(r, &ctx, &statuses, &mut events);
            let plan = s.evaluate_halting(r, &ctx, &statuses);
            let halted = s.apply(r, plan, &statuses, &mut events)?;
            for event in events {
                log.emit(|| TraceRecord::Monitor { round: r, process: me, seq, event });
            }
            if halted {
                self.kill(r, |iid| iid.seq == seq, log);
            }
        }
        if let Some(value) = self.pipeline.global_decide_and_halt(r) {
            log.emit(|| TraceRecord::Global { round: r, process: me, event: GlobalEvent::Decide { value } });
            log.emit(|| TraceRecord::Global { round: r, process: me, event: GlobalEvent::Halt });
            self.kill(r, |_| true, log);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, t: usize) -> PartyConfig {
        PartyConfig { n, t, alphabet_size: 4, remask_prior_rounds: false }
    }

    /// Runs all-correct parties to completion and returns halt rounds and
    /// decisions.
    fn run_honest(n: usize, t: usize, inputs: &[Value]) -> Vec<(Option<u32>, Option<Value>)> {
        let mut ps: Vec<Party> = (0..n).map(|i| Party::new(i as u8, inputs[i], cfg(n, t)).unwrap()).collect();
        let mut log = Recorder::new(false);
        for r in 1..=t as u32 + 1 {
            for p in ps.iter_mut() {
                p.begin_round(r, &mut log).unwrap();
            }
            let out: Vec<Option<Bundle>> = ps.iter().map(|p| p.outgoing(r)).collect();
            for p in ps.iter_mut() {
                p.deliver(r, &out, &mut log).unwrap();
            }
            if ps.iter().all(Party::halted) {
                break;
            }
        }
        ps.iter().map(|p| (p.halt_round(), p.decision())).collect()
    }

    #[test]
    fn unanimous_halts_in_round_one() {
        let res = run_honest(7, 2, &[Value::Val(3); 7]);
        assert!(res.iter().all(|&(h, d)| h == Some(1) && d == Some(Value::Val(3))));
    }

    #[test]
    fn mixed_inputs_agree() {
        let inputs: Vec<Value> = (0..7).map(|i| Value::Val(i % 2)).collect();
        let res = run_honest(7, 2, &inputs);
        assert!(res.iter().all(|r| r.1 == res[0].1 && r.1.is_some()));
        assert!(res.iter().all(|r| r.0.unwrap() <= 2));
    }

    #[test]
    fn malformed_bundle_detects_sender() {
        let n = 4;
        let mut p = Party::new(0, Value::Val(1), cfg(n, 1)).unwrap();
        let mut log = Recorder::new(true);
        p.begin_round(1, &mut log).unwrap();
        let good = p.outgoing(1).unwrap();
        let mut bad = good.clone();
        bad.eig.get_mut(&InstanceId::TOP).unwrap()[0] = EigMessage { label: NodeLabel::ROOT, sender: 3, value: Value::Val(99) };
        let inbox = vec![Some(good.clone()), Some(good.clone()), Some(good.clone()), Some(bad)];
        p.deliver(1, &inbox, &mut log).unwrap();
        assert!(p.fault.f.contains(3));
        assert!(log.records.iter().any(|r| matches!(r, TraceRecord::Detect { detected: 3, rule: DetectRule::Malformed, .. })));
    }
}
