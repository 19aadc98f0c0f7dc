//! Lockstep round engine with a rushing, full-information adversary.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::adversary::{AdversaryError, AdversarySpec, RoundView};
use crate::agreement::{self, ConfigError};
use crate::eig::{ProcessId, ProcessSet, Value};
use crate::party::{Bundle, Party, PartyConfig, PartyError, Recorder};
use crate::trace::{ExecutionTrace, InstanceSnapshot, ProcessOutcome, TraceHeader, TraceRecord, TraceSummary, SCHEMA_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub t: usize,
    pub alphabet_size: u32,
    /// One input per process id; entries of corrupt ids seed their honest
    /// shadows.
    pub inputs: Vec<Value>,
    pub corrupt: Vec<ProcessId>,
    pub adversary: AdversarySpec,
    pub seed: u64,
    /// Defaults to `t + 1`. Larger values keep running after a missed halt
    /// so the trace shows what happened.
    pub max_rounds: Option<u32>,
    pub remask_prior_rounds: bool,
    /// Emit per-event trace records. Header, summary and snapshots are
    /// always produced.
    pub record: bool,
    /// Ids placed in every correct process's `F` and `FA` before round 1.
    pub preseed_fa: ProcessSet,
}

impl SimConfig {
    pub fn new(n: usize, t: usize, inputs: Vec<Value>) -> Self {
        SimConfig {
            n,
            t,
            alphabet_size: 4,
            inputs,
            corrupt: Vec::new(),
            adversary: AdversarySpec::Honest,
            seed: 0,
            max_rounds: None,
            remask_prior_rounds: false,
            record: true,
            preseed_fa: ProcessSet::EMPTY,
        }
    }

    pub fn uniform(n: usize, t: usize, v: Value) -> Self {
        Self::new(n, t, vec![v; n])
    }

    pub fn with_adversary(mut self, corrupt: Vec<ProcessId>, adversary: AdversarySpec) -> Self {
        self.corrupt = corrupt;
        self.adversary = adversary;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        agreement::check_params(self.n, self.t)?;
        if self.t == 0 {
            return Err(ConfigError::Invalid("t must be at least 1".into()));
        }
        if self.alphabet_size == 0 {
            return Err(ConfigError::Invalid("alphabet_size must be positive".into()));
        }
        if self.corrupt.len() > self.t {
            return Err(ConfigError::Invalid(format!("{} corrupt ids exceed t={}", self.corrupt.len(), self.t)));
        }
        let mut seen = ProcessSet::EMPTY;
        for &c in &self.corrupt {
            if c as usize >= self.n || !seen.insert(c) {
                return Err(ConfigError::Invalid(format!("corrupt id {c} out of range or repeated")));
            }
        }
        if self.inputs.len() != self.n {
            return Err(ConfigError::Invalid(format!("{} inputs for n={}", self.inputs.len(), self.n)));
        }
        if let Some(v) = self.inputs.iter().find(|v| !v.is_valid(self.alphabet_size, false)) {
            return Err(ConfigError::Invalid(format!("input {v} outside the alphabet")));
        }
        if self.preseed_fa.iter().any(|x| x as usize >= self.n) {
            return Err(ConfigError::Invalid("pre-seeded id out of range".into()));
        }
        Ok(())
    }

    pub fn corrupt_set(&self) -> ProcessSet {
        self.corrupt.iter().copied().collect()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error("process {process} failed in round {round}: {source}")]
    Protocol { round: u32, process: ProcessId, source: PartyError },
    #[error("correct processes still running after round {}", .0.header.t + 1)]
    NonTermination(Box<ExecutionTrace>),
}

/// Runs one execution to completion.
pub fn run_execution(cfg: &SimConfig) -> Result<ExecutionTrace, SimError> {
    run_execution_observed(cfg, |_, _| {})
}

/// Like [`run_execution`], calling `observe` with the correct processes at
/// the end of every round.
pub fn run_execution_observed(
    cfg: &SimConfig,
    mut observe: impl FnMut(u32, &BTreeMap<ProcessId, Party>),
) -> Result<ExecutionTrace, SimError> {
    cfg.validate()?;
    let mut adv = cfg.adversary.build(cfg.n, cfg.alphabet_size, &cfg.corrupt, cfg.seed)?;
    let n = cfg.n;
    let corrupt = cfg.corrupt_set();
    let pcfg = PartyConfig { n, t: cfg.t, alphabet_size: cfg.alphabet_size, remask_prior_rounds: cfg.remask_prior_rounds };

    let mut parties: BTreeMap<ProcessId, Party> = BTreeMap::new();
    let mut shadows: BTreeMap<ProcessId, Party> = BTreeMap::new();
    for id in 0..n as ProcessId {
        let mut p = Party::new(id, cfg.inputs[id as usize], pcfg)?;
        for x in cfg.preseed_fa.iter() {
            p.fault.add(x);
            p.fault.fa.insert(x);
        }
        if corrupt.contains(id) {
            shadows.insert(id, p);
        } else {
            parties.insert(id, p);
        }
    }

    let mut log = Recorder::new(cfg.record);
    let mut quiet = Recorder::new(false);
    let mut deviators = ProcessSet::EMPTY;
    let limit = cfg.max_rounds.unwrap_or(cfg.t as u32 + 1).max(1);
    let mut rounds = 0;

    for r in 1..=limit {
        rounds = r;
        for (id, p) in parties.iter_mut() {
            p.begin_round(r, &mut log).map_err(|source| SimError::Protocol { round: r, process: *id, source })?;
        }
        for p in shadows.values_mut() {
            // Shadow failures only affect what an honest corrupt id would send.
            let _ = p.begin_round(r, &mut quiet);
        }

        let mut correct_out: Vec<Option<Bundle>> = vec![None; n];
        for (id, p) in &parties {
            correct_out[*id as usize] = p.outgoing(r);
        }
        let mut honest: Vec<Option<Bundle>> = vec![None; n];
        for (id, p) in &shadows {
            honest[*id as usize] = p.outgoing(r);
        }
        for (id, b) in correct_out.iter().enumerate() {
            if let Some(b) = b {
                let (eig_messages, bits) = (b.eig_count(), b.bits(n, cfg.alphabet_size));
                log.emit(|| TraceRecord::Traffic { round: r, sender: id as ProcessId, recipient: None, eig_messages, bits });
            }
        }

        let view = RoundView { round: r, n, t: cfg.t, corrupt, correct: &correct_out, honest: &honest, parties: &parties };
        let mut adv_out = adv.act(&view);
        adv_out.retain(|c, _| corrupt.contains(*c));
        for (c, per) in adv_out.iter_mut() {
            per.resize(n, None);
            for (j, b) in per.iter().enumerate() {
                if let Some(b) = b {
                    let (eig_messages, bits) = (b.eig_count(), b.bits(n, cfg.alphabet_size));
                    log.emit(|| TraceRecord::Traffic {
                        round: r,
                        sender: *c,
                        recipient: Some(j as ProcessId),
                        eig_messages,
                        bits,
                    });
                }
            }
        }
        for c in corrupt.iter() {
            let sent = adv_out.get(&c);
            let deviates = parties.iter().filter(|(_, p)| !p.halted()).any(|(j, _)| {
                let got = sent.and_then(|v| v[*j as usize].as_ref());
                got != honest[c as usize].as_ref()
            });
            if deviates {
                deviators.insert(c);
            }
        }

        let inbox_for = |j: ProcessId| -> Vec<Option<Bundle>> {
            (0..n as ProcessId)
                .map(|k| {
                    if corrupt.contains(k) {
                        adv_out.get(&k).and_then(|v| v[j as usize].clone())
                    } else {
                        correct_out[k as usize].clone()
                    }
                })
                .collect()
        };
        for (id, p) in parties.iter_mut() {
            let inbox = inbox_for(*id);
            p.deliver(r, &inbox, &mut log).map_err(|source| SimError::Protocol { round: r, process: *id, source })?;
        }
        for (id, p) in shadows.iter_mut() {
            let inbox = inbox_for(*id);
            let _ = p.deliver(r, &inbox, &mut quiet);
        }

        observe(r, &parties);
        if parties.values().all(Party::halted) {
            break;
        }
    }

    let terminated = parties.values().all(|p| p.halt_round().is_some_and(|h| h <= cfg.t as u32 + 1));
    let header = TraceHeader {
        schema_version: SCHEMA_VERSION,
        n,
        t: cfg.t,
        seed: cfg.seed,
        adversary: cfg.adversary.name(),
        alphabet_size: cfg.alphabet_size,
        corrupt: corrupt.iter().collect(),
        inputs: (0..n as ProcessId).map(|i| (!corrupt.contains(i)).then_some(cfg.inputs[i as usize])).collect(),
    };
    let summary = TraceSummary {
        rounds,
        terminated,
        f_actual: deviators.len(),
        deviators: deviators.iter().collect(),
        outcomes: parties
            .values()
            .map(|p| ProcessOutcome { process: p.id, input: p.input, decision: p.decision(), halt_round: p.halt_round() })
            .collect(),
    };
    let snapshots = parties
        .values()
        .map(|p| {
            let per = p
                .instances
                .iter()
                .map(|(iid, inst)| {
                    let snap = InstanceSnapshot {
                        phi: inst.phi,
                        last_round: inst.last_round().unwrap_or_else(|| iid.local_round(rounds)),
                        killed: inst.killed,
                        it_labels: inst.it.labels().copied().collect(),
                        puts: inst.rt.puts().map(|(l, e)| (*l, e.value, e.rule, e.round)).collect(),
                    };
                    (*iid, snap)
                })
                .collect();
            (p.id, per)
        })
        .collect();
    let trace = ExecutionTrace { header, records: log.records, summary, snapshots };
    if terminated {
        Ok(trace)
    } else {
        Err(SimError::NonTermination(Box::new(trace)))
    }
}
