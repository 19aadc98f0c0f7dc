//! Monitor sequences and the four-way pipeline.
//!
//! Sequence `i` starts in round `i` and runs the four-phase loop with phase
//! `(r + 1 - i) mod 4`. Phase 1 may invoke a fresh subprotocol, phase 2 sets
//! `v` from the size of `FA`, phase 3 exchanges `v` and derives `early`,
//! phase 0 exchanges `early`. Halting rules are evaluated every round.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::InstanceId;
use crate::eig::{ProcessId, ProcessSet, Value};
use crate::trace::MonitorEvent;

pub const SEQUENCES: u8 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MonitorError {
    #[error("sequence 1 must decide but the top-level instance has no output")]
    Undecidable,
}

/// Monitor traffic piggybacked on a round bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorMessage {
    V { seq: u8, value: Value },
    Early { seq: u8, value: bool },
}

impl MonitorMessage {
    pub fn seq(&self) -> u8 {
        match self {
            MonitorMessage::V { seq, .. } | MonitorMessage::Early { seq, .. } => *seq,
        }
    }
}

/// Phase of sequence `seq` in global round `r`; only meaningful for `r >= seq`.
pub fn phase(r: u32, seq: u8) -> u32 {
    (r + 1 - seq as u32) % 4
}

/// What a sequence knows about one of its invocations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceStatus {
    pub id: InstanceId,
    pub stopped: bool,
    pub output: Option<Value>,
}

/// Round facts a sequence needs at end of round.
#[derive(Clone, Debug)]
pub struct MonitorCtx {
    pub n: usize,
    pub t: usize,
    pub fa_size: usize,
    /// Senders that delivered any bundle this round.
    pub present: ProcessSet,
    /// Senders whose `v` for this sequence was `bad`.
    pub v_bad: ProcessSet,
    /// `early` values received for this sequence this round.
    pub early_msgs: Vec<(ProcessId, bool)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HaltPlan {
    HaltNow,
    DecideNow { halt_by: u32 },
}

#[derive(Clone, Debug)]
pub struct MonitorSequence {
    pub index: u8,
    pub v: Value,
    pub early: bool,
    pub last_early: Vec<Option<bool>>,
    pub invoked: Vec<InstanceId>,
    pub decided: Option<Value>,
    pub halted: bool,
    pub halt_round: Option<u32>,
    pub pending_halt: Option<u32>,
    prev_count: usize,
}

impl MonitorSequence {
    pub fn new(index: u8, n: usize) -> Self {
        MonitorSequence {
            index,
            v: Value::Bottom,
            early: false,
            last_early: vec![None; n],
            invoked: Vec::new(),
            decided: None,
            halted: false,
            halt_round: None,
            pending_halt: None,
            prev_count: 0,
        }
    }

    pub fn started(&self, r: u32) -> bool {
        r >= self.index as u32
    }

    pub fn active(&self, r: u32) -> bool {
        self.started(r) && !self.halted
    }

    /// Subprotocol to invoke at the start of round `r`, as `(phi, input)`.
    /// Sequence 1 always invokes the top-level instance in round 1.
    pub fn invocation(&self, r: u32, t: usize, own_input: Value) -> Option<(usize, Value)> {
        if !self.active(r) || phase(r, self.index) != 1 {
            return None;
        }
        if self.index == 1 && r == 1 {
            return Some((t, own_input));
        }
        let r = r as usize;
        (r > 1 && r + 1 < t).then(|| (t + 1 - r, self.v))
    }

    pub fn outgoing(&self, r: u32) -> Option<MonitorMessage> {
        if !self.active(r) {
            return None;
        }
        match phase(r, self.index) {
            3 => Some(MonitorMessage::V { seq: self.index, value: self.v }),
            0 => Some(MonitorMessage::Early { seq: self.index, value: self.early }),
            _ => None,
        }
    }

    fn set_v(&mut self, v: Value, events: &mut Vec<MonitorEvent>) {
        if self.v != v {
            self.v = v;
            events.push(MonitorEvent::SetV { value: v });
        }
    }

    /// Phase work at end of round `r`.
    pub fn end_of_round(&mut self, r: u32, ctx: &MonitorCtx, statuses: &[InstanceStatus], events: &mut Vec<MonitorEvent>) {
        if !self.active(r) {
            return;
        }
        match phase(r, self.index) {
            2 => {
                let v = if ctx.fa_size >= r as usize + 3 { Value::Bad } else { Value::Bottom };
                self.set_v(v, events);
            }
            3 => {
                self.early = ctx.v_bad.len() <= ctx.t;
                events.push(MonitorEvent::SetEarly { value: self.early });
            }
            0 => {
                for &(q, e) in &ctx.early_msgs {
                    self.last_early[q as usize] = Some(e);
                }
                let trues = self.last_early.iter().filter(|e| **e == Some(true)).count();
                if trues >= ctx.t + 1 {
                    self.set_v(Value::Bottom, events);
                }
                if statuses.iter().all(|s| s.output.is_some()) {
                    self.set_v(Value::Bottom, events);
                }
            }
            _ => {}
        }
    }

    fn early_or_halted(&self, ctx: &MonitorCtx) -> usize {
        (0..ctx.n)
            .filter(|&q| self.last_early[q] == Some(true) || !ctx.present.contains(q as ProcessId))
            .count()
    }

    /// Halting rules for end of round `r`. Call after
    /// [`Self::end_of_round`]; updates the remembered count either way.
    pub fn evaluate_halting(&mut self, r: u32, ctx: &MonitorCtx, statuses: &[InstanceStatus]) -> Option<HaltPlan> {
        if !self.active(r) {
            return None;
        }
        let count = self.early_or_halted(ctx);
        let prev = std::mem::replace(&mut self.prev_count, count);
        let (n, t) = (ctx.n, ctx.t);
        let cap = |x: u32| x.min(t as u32 + 1);

        if statuses.iter().any(|s| s.stopped && s.output == Some(Value::Bad)) {
            return Some(HaltPlan::HaltNow);
        }
        let mut plan = None;
        if statuses.iter().any(|s| s.output == Some(Value::Bad)) {
            plan = Some(HaltPlan::DecideNow { halt_by: cap(r + 2) });
        }

        let all_stopped = statuses.iter().all(|s| s.stopped);
        let only_latest = match statuses.split_last() {
            Some((last, rest)) => !last.stopped && last.id != InstanceId::TOP && rest.iter().all(|s| s.stopped),
            None => false,
        };
        let rule = match phase(r, self.index) {
            1 if all_stopped => Some(HaltPlan::HaltNow),
            1 if only_latest && count >= n - t => Some(HaltPlan::HaltNow),
            1 if only_latest && count >= t + 1 => Some(HaltPlan::DecideNow { halt_by: cap(r + 2) }),
            2 if all_stopped => Some(HaltPlan::HaltNow),
            2 if only_latest && prev >= n - t => Some(HaltPlan::HaltNow),
            2 if only_latest && prev >= t + 1 => Some(HaltPlan::DecideNow { halt_by: cap(r + 1) }),
            3 if all_stopped => Some(HaltPlan::HaltNow),
            0 if all_stopped && count >= n - t => Some(HaltPlan::HaltNow),
            _ => None,
        };
        match (plan, rule) {
            (_, Some(HaltPlan::HaltNow)) => Some(HaltPlan::HaltNow),
            (Some(HaltPlan::DecideNow { halt_by: a }), Some(HaltPlan::DecideNow { halt_by: b })) => {
                Some(HaltPlan::DecideNow { halt_by: a.min(b) })
            }
            (a, b) => a.or(b),
        }
    }

    /// Applies a plan. Returns events and whether the sequence halted now.
    pub fn apply(&mut self, r: u32, plan: Option<HaltPlan>, statuses: &[InstanceStatus], events: &mut Vec<MonitorEvent>) -> Result<bool, MonitorError> {
        if !self.active(r) {
            return Ok(false);
        }
        let mut halt = false;
        match plan {
            Some(HaltPlan::HaltNow) => halt = true,
            Some(HaltPlan::DecideNow { halt_by }) => {
                self.decide(statuses, events)?;
                self.pending_halt = Some(self.pending_halt.map_or(halt_by, |p| p.min(halt_by)));
            }
            None => {}
        }
        if self.pending_halt.is_some_and(|p| p <= r) {
            halt = true;
        }
        if halt {
            self.decide(statuses, events)?;
            self.halted = true;
            self.halt_round = Some(r);
            events.push(MonitorEvent::Halt);
        }
        Ok(halt)
    }

    fn decide(&mut self, statuses: &[InstanceStatus], events: &mut Vec<MonitorEvent>) -> Result<(), MonitorError> {
        if self.decided.is_none() {
            let v = monitor_decision(self.index, statuses)?;
            self.decided = Some(v);
            events.push(MonitorEvent::Decide { value: v });
        }
        Ok(())
    }
}

/// `bad` if any invocation output `bad`; otherwise the top-level output for
/// sequence 1 and bottom for the others.
pub fn monitor_decision(seq: u8, statuses: &[InstanceStatus]) -> Result<Value, MonitorError> {
    if statuses.iter().any(|s| s.output == Some(Value::Bad)) {
        return Ok(Value::Bad);
    }
    if seq != 1 {
        return Ok(Value::Bottom);
    }
    statuses
        .iter()
        .find(|s| s.id == InstanceId::TOP)
        .and_then(|s| s.output)
        .ok_or(MonitorError::Undecidable)
}

/// All four sequences plus the global decision.
#[derive(Clone, Debug)]
pub struct MonitorPipeline {
    pub sequences: Vec<MonitorSequence>,
    pub global_decision: Option<Value>,
    pub globally_halted: bool,
    pub halt_round: Option<u32>,
}

impl MonitorPipeline {
    pub fn new(n: usize) -> Self {
        MonitorPipeline {
            sequences: (1..=SEQUENCES).map(|i| MonitorSequence::new(i, n)).collect(),
            global_decision: None,
            globally_halted: false,
            halt_round: None,
        }
    }

    /// Global halting at end of round `r`: some sequence halted on `bad`, or
    /// every sequence that has started is halted. Returns the decision when
    /// the process halts now.
    pub fn global_decide_and_halt(&mut self, r: u32) -> Option<Value> {
        if self.globally_halted {
            return None;
        }
        let bad_halt = self.sequences.iter().any(|s| s.halted && s.decided == Some(Value::Bad));
        let all_halted = self.sequences.iter().filter(|s| s.started(r)).all(|s| s.halted);
        if !(bad_halt || all_halted) {
            return None;
        }
        let any_bad = self.sequences.iter().any(|s| s.decided == Some(Value::Bad));
        let v = if any_bad { Value::Bad } else { self.sequences[0].decided.unwrap_or(Value::Bottom) };
        self.global_decision = Some(v);
        self.globally_halted = true;
        self.halt_round = Some(r);
        Some(v)
    }
}
