//! Exhaustive exploration of one corrupt process's choices at small `n`.
//!
//! Every round before the last a full product over recipients is explored.
//! In the last allowed round (`t + 1`) each correct recipient's outcome
//! depends only on its own inbox, so recipients are explored independently
//! and the properties are checked over all combinations of their outcomes.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::agreement::{ConfigError, EigMessage, InstanceId};
use crate::eig::{ProcessId, Value};
use crate::party::{Bundle, Party, PartyConfig, PartyError, Recorder};

/// What the corrupt process sends one recipient in one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Pick {
    Silence,
    /// One value per EIG message, in the order of the honest bundle.
    Values(Vec<Value>),
}

#[derive(Clone, Debug)]
pub struct OracleConfig {
    pub n: usize,
    pub t: usize,
    pub alphabet_size: u32,
    /// One input per id; the corrupt entry seeds the honest template.
    pub inputs: Vec<Value>,
    /// `None` runs every id correctly: a single branch.
    pub corrupt: Option<ProcessId>,
    pub palette: Vec<Value>,
    /// Cap on explored tree nodes (deliveries).
    pub max_nodes: u64,
    /// Explore each non-final product branch with this probability; the
    /// all-honest branch is always kept. `None` explores everything.
    pub sample: Option<(f64, u64)>,
}

impl OracleConfig {
    pub fn new(n: usize, t: usize, inputs: Vec<Value>, corrupt: Option<ProcessId>) -> Self {
        OracleConfig {
            n,
            t,
            alphabet_size: 2,
            inputs,
            corrupt,
            palette: vec![Value::Val(0), Value::Val(1), Value::Bottom],
            max_nodes: 5_000_000,
            sample: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("exploration needs more than {cap} nodes")]
    BudgetExceeded { cap: u64 },
    #[error("process {process} failed in round {round}: {source}")]
    Protocol { round: u32, process: ProcessId, source: PartyError },
}

#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub inputs: Vec<Value>,
    pub corrupt: Option<ProcessId>,
    /// Picks per round, indexed by recipient id; the last entry may be
    /// partial (only the recipients involved).
    pub picks: Vec<BTreeMap<ProcessId, Pick>>,
    pub property: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OracleReport {
    /// Complete adversary branches covered (product of per-recipient picks).
    pub branches: u128,
    /// Deliveries simulated.
    pub nodes: u64,
    /// Every decision reached on some branch (bad reported as bottom).
    pub decisions: BTreeSet<Value>,
    pub counterexamples: Vec<Counterexample>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.counterexamples.is_empty()
    }

    fn absorb(&mut self, other: OracleReport) {
        self.branches += other.branches;
        self.nodes += other.nodes;
        self.decisions.extend(other.decisions);
        self.counterexamples.extend(other.counterexamples);
    }
}

const MAX_COUNTEREXAMPLES: usize = 16;

#[derive(Clone)]
struct State {
    parties: BTreeMap<ProcessId, Party>,
    shadow: Option<Party>,
    honest_so_far: bool,
}

struct Explorer<'a> {
    cfg: &'a OracleConfig,
    correct_inputs: Vec<Value>,
    report: OracleReport,
    rng: Option<ChaCha8Rng>,
    path: Vec<BTreeMap<ProcessId, Pick>>,
}

/// Explores every choice of the corrupt process for one input assignment.
pub fn explore(cfg: &OracleConfig) -> Result<OracleReport, OracleError> {
    if cfg.inputs.len() != cfg.n || cfg.corrupt.is_some_and(|c| c as usize >= cfg.n) {
        return Err(ConfigError::Invalid("inputs must cover n ids and the corrupt id must be one of them".into()).into());
    }
    let pcfg = PartyConfig { n: cfg.n, t: cfg.t, alphabet_size: cfg.alphabet_size, remask_prior_rounds: false };
    let mut parties = BTreeMap::new();
    for id in (0..cfg.n as ProcessId).filter(|&i| Some(i) != cfg.corrupt) {
        parties.insert(id, Party::new(id, cfg.inputs[id as usize], pcfg)?);
    }
    let shadow = cfg.corrupt.map(|c| Party::new(c, cfg.inputs[c as usize], pcfg)).transpose()?;
    let mut ex = Explorer {
        cfg,
        correct_inputs: parties.values().map(|p| p.input).collect(),
        report: OracleReport::default(),
        rng: cfg.sample.map(|(_, s)| ChaCha8Rng::seed_from_u64(s)),
        path: Vec::new(),
    };
    ex.round(1, State { parties, shadow, honest_so_far: true })?;
    Ok(ex.report)
}

fn quiet() -> Recorder {
    Recorder::new(false)
}

impl Explorer<'_> {
    fn last_round(&self) -> u32 {
        self.cfg.t as u32 + 1
    }

    fn tick(&mut self) -> Result<(), OracleError> {
        self.report.nodes += 1;
        if self.report.nodes > self.cfg.max_nodes {
            return Err(OracleError::BudgetExceeded { cap: self.cfg.max_nodes });
        }
        Ok(())
    }

    fn record(&mut self, property: &str, detail: String) {
        if self.report.counterexamples.len() < MAX_COUNTEREXAMPLES {
            self.report.counterexamples.push(Counterexample {
                inputs: self.cfg.inputs.clone(),
                corrupt: self.cfg.corrupt,
                picks: self.path.clone(),
                property: property.into(),
                detail,
            });
        } else if self.report.counterexamples.len() == MAX_COUNTEREXAMPLES {
            // Keep counting failures without storing them.
            self.report.counterexamples.push(Counterexample {
                inputs: vec![],
                corrupt: self.cfg.corrupt,
                picks: vec![],
                property: "more".into(),
                detail: "further counterexamples omitted".into(),
            });
        }
    }

    fn picks_for(&self, template: Option<&Bundle>) -> Vec<Pick> {
        let Some(b) = template else { return vec![Pick::Silence] };
        let m = b.eig_count();
        let k = self.cfg.palette.len();
        let total = k.pow(m as u32);
        let mut out = Vec::with_capacity(total + 1);
        out.push(Pick::Silence);
        for mut code in 0..total {
            let mut vals = Vec::with_capacity(m);
            for _ in 0..m {
                vals.push(self.cfg.palette[code % k]);
                code /= k;
            }
            out.push(Pick::Values(vals));
        }
        out
    }

    /// Top-level relays a corrupt process can still send after its honest
    /// shadow halted.
    fn relay_template(&self, r: u32, st: &State) -> Option<Bundle> {
        let c = self.cfg.corrupt?;
        let it = &st.parties.values().find_map(|p| p.top())?.it;
        let msgs: Vec<EigMessage> = it
            .level(r as usize - 1)
            .iter()
            .filter(|l| !l.contains(c))
            .map(|&label| EigMessage { label, sender: c, value: Value::Bottom })
            .collect();
        (!msgs.is_empty()).then(|| Bundle { eig: BTreeMap::from([(InstanceId::TOP, msgs)]), ..Default::default() })
    }

    fn round(&mut self, r: u32, mut st: State) -> Result<(), OracleError> {
        let mut log = quiet();
        for (id, p) in st.parties.iter_mut() {
            p.begin_round(r, &mut log).map_err(|source| OracleError::Protocol { round: r, process: *id, source })?;
        }
        if let Some(s) = st.shadow.as_mut() {
            let _ = s.begin_round(r, &mut log);
        }
        let n = self.cfg.n;
        let mut correct_out: Vec<Option<Bundle>> = vec![None; n];
        for (id, p) in &st.parties {
            correct_out[*id as usize] = p.outgoing(r);
        }
        let template = st.shadow.as_ref().and_then(|s| s.outgoing(r)).or_else(|| self.relay_template(r, &st));
        let running: Vec<ProcessId> = st.parties.iter().filter(|(_, p)| !p.halted()).map(|(id, _)| *id).collect();
        let picks = self.picks_for(template.as_ref());

        let inbox = |j: ProcessId, pick: &Pick| -> Vec<Option<Bundle>> {
            let mut v = correct_out.clone();
            if let Some(c) = self.cfg.corrupt {
                v[c as usize] = if j == c { template.clone() } else { apply_pick(template.as_ref(), pick) };
            }
            v
        };
        let honest_pick = |pick: &Pick| apply_pick(template.as_ref(), pick) == template;

        if let (Some(s), Some(c)) = (st.shadow.as_mut(), self.cfg.corrupt) {
            let _ = s.deliver(r, &inbox(c, &Pick::Silence), &mut log);
        }

        if r < self.last_round() {
            let mut idx = vec![0usize; running.len()];
            loop {
                let chosen: BTreeMap<ProcessId, Pick> = running.iter().zip(&idx).map(|(j, &i)| (*j, picks[i].clone())).collect();
                let all_honest = chosen.values().all(honest_pick);
                let keep = match (self.cfg.sample, self.rng.as_mut()) {
                    (Some((frac, _)), Some(rng)) => (all_honest && st.honest_so_far) || rng.gen_bool(frac.clamp(0.0, 1.0)),
                    _ => true,
                };
                if keep {
                    let mut next = st.clone();
                    next.honest_so_far &= all_honest;
                    for j in &running {
                        self.tick()?;
                        let p = next.parties.get_mut(j).unwrap();
                        p.deliver(r, &inbox(*j, &chosen[j]), &mut log)
                            .map_err(|source| OracleError::Protocol { round: r, process: *j, source })?;
                    }
                    self.path.push(chosen);
                    let ok = self.check_node(r, &next);
                    if ok && next.parties.values().any(|p| !p.halted()) {
                        self.round(r + 1, next)?;
                    } else {
                        self.report.branches += 1;
                    }
                    self.path.pop();
                }
                let mut pos = 0;
                loop {
                    if pos == idx.len() {
                        return Ok(());
                    }
                    idx[pos] += 1;
                    if idx[pos] < picks.len() {
                        break;
                    }
                    idx[pos] = 0;
                    pos += 1;
                }
            }
        }

        // Final round: explore each recipient on its own.
        let mut outcomes: BTreeMap<ProcessId, Vec<(Pick, Outcome)>> = BTreeMap::new();
        for j in &running {
            for pick in &picks {
                self.tick()?;
                let mut p = st.parties[j].clone();
                p.deliver(r, &inbox(*j, pick), &mut log).map_err(|source| OracleError::Protocol { round: r, process: *j, source })?;
                let f = !(st.honest_so_far && honest_pick(pick));
                outcomes.entry(*j).or_default().push((pick.clone(), Outcome::of(&p, f, &st.parties)));
            }
        }
        self.report.branches += (picks.len() as u128).pow(running.len() as u32);
        self.check_final(r, &st, &outcomes);
        Ok(())
    }

    fn check_node(&mut self, r: u32, st: &State) -> bool {
        let correct: BTreeSet<ProcessId> = st.parties.keys().copied().collect();
        for p in st.parties.values() {
            if let Some(x) = p.fault.f.iter().find(|x| correct.contains(x)) {
                self.record("no_false_detection", format!("round {r}: {} put correct {x} in F", p.id));
                return false;
            }
        }
        let bound = if st.honest_so_far { 2 } else { 3 }.min(self.last_round());
        if r >= bound {
            if let Some(p) = st.parties.values().find(|p| !p.halted()) {
                self.record("early_stopping", format!("{} still running after round {r}, bound {bound}", p.id));
                return false;
            }
        }
        let decisions: BTreeSet<Value> = st.parties.values().filter(|p| p.halted()).filter_map(|p| p.decision()).map(external).collect();
        self.report.decisions.extend(decisions.iter().copied());
        if decisions.len() > 1 {
            self.record("agreement", format!("round {r}: decisions {decisions:?}"));
            return false;
        }
        for p in st.parties.values() {
            if let Some(d) = p.decision() {
                if let Some(msg) = self.validity(external(d)) {
                    self.record("validity", format!("{}: {msg}", p.id));
                    return false;
                }
            }
        }
        true
    }

    fn validity(&self, d: Value) -> Option<String> {
        if d == Value::Bottom {
            return None;
        }
        let support = self.correct_inputs.iter().filter(|&&v| v == d).count();
        (support < self.cfg.t + 1).then(|| format!("decided {d} with {support} correct inputs"))
    }

    fn check_final(&mut self, r: u32, st: &State, outcomes: &BTreeMap<ProcessId, Vec<(Pick, Outcome)>>) {
        let mut seen: BTreeMap<Value, (ProcessId, Option<Pick>)> = BTreeMap::new();
        for p in st.parties.values().filter(|p| p.halted()) {
            if let Some(d) = p.decision() {
                seen.entry(external(d)).or_insert((p.id, None));
            }
        }
        for (j, list) in outcomes {
            for (pick, o) in list {
                let culprit = |ex: &mut Self, prop: &str, detail: String| {
                    ex.path.push(BTreeMap::from([(*j, pick.clone())]));
                    ex.record(prop, detail);
                    ex.path.pop();
                };
                if let Some(x) = o.false_detection {
                    culprit(self, "no_false_detection", format!("round {r}: {j} put correct {x} in F"));
                }
                let bound = if o.deviated { 3 } else { 2 }.min(self.last_round());
                match o.halt_round {
                    Some(h) if h <= bound => {}
                    h => culprit(self, "early_stopping", format!("{j} halted at {h:?}, bound {bound}")),
                }
                match o.decision.map(external) {
                    Some(d) => {
                        if let Some(msg) = self.validity(d) {
                            culprit(self, "validity", format!("{j}: {msg}"));
                        }
                        seen.entry(d).or_insert((*j, Some(pick.clone())));
                    }
                    None => culprit(self, "termination", format!("{j} has no decision after round {r}")),
                }
            }
        }
        self.report.decisions.extend(seen.keys().copied());
        if seen.len() > 1 {
            let mut last = BTreeMap::new();
            for (_, (j, pick)) in seen.iter().take(2) {
                if let Some(p) = pick {
                    last.insert(*j, p.clone());
                }
            }
            self.path.push(last);
            self.record("agreement", format!("round {r}: reachable decisions {:?}", seen.keys().collect::<Vec<_>>()));
            self.path.pop();
        }
    }
}

struct Outcome {
    decision: Option<Value>,
    halt_round: Option<u32>,
    deviated: bool,
    false_detection: Option<ProcessId>,
}

impl Outcome {
    fn of(p: &Party, deviated: bool, correct: &BTreeMap<ProcessId, Party>) -> Self {
        Outcome {
            decision: p.decision(),
            halt_round: p.halt_round(),
            deviated,
            false_detection: p.fault.f.iter().find(|x| correct.contains_key(x)),
        }
    }
}

fn external(v: Value) -> Value {
    if v == Value::Bad {
        Value::Bottom
    } else {
        v
    }
}

fn apply_pick(template: Option<&Bundle>, pick: &Pick) -> Option<Bundle> {
    match (template, pick) {
        (_, Pick::Silence) | (None, _) => None,
        (Some(b), Pick::Values(vals)) => {
            let mut out = b.clone();
            let mut it = vals.iter();
            for msgs in out.eig.values_mut() {
                for m in msgs.iter_mut() {
                    m.value = *it.next().expect("pick sized to the template");
                }
            }
            Some(out)
        }
    }
}

/// Correct-input assignments over `palette` for ids `0..n` except `corrupt`,
/// one per orbit under id permutations and swapping the first two palette
/// values.
pub fn canonical_assignments(n: usize, palette: &[Value]) -> Vec<Vec<Value>> {
    let k = n - 1;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let swap = |v: Value| match v {
        x if x == palette[0] => palette[1],
        x if x == palette[1] => palette[0],
        x => x,
    };
    for code in 0..palette.len().pow(k as u32) {
        let mut c = code;
        let mut a: Vec<usize> = (0..k)
            .map(|_| {
                let d = c % palette.len();
                c /= palette.len();
                d
            })
            .collect();
        a.sort_unstable();
        let vals: Vec<Value> = a.iter().map(|&i| palette[i]).collect();
        let mut swapped: Vec<usize> = vals.iter().map(|&v| palette.iter().position(|&p| p == swap(v)).unwrap()).collect();
        swapped.sort_unstable();
        let key = a.clone().min(swapped);
        if seen.insert(key) {
            out.push(vals);
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub canonical: OracleReport,
    pub spot_check: OracleReport,
    pub assignments: usize,
}

/// Explores the `n = 4, t = 1` space: every canonical correct-input
/// assignment with the last id corrupt and with no corrupt id, then an
/// unpruned sampled pass over every assignment and corrupt id.
pub fn explore_small(spot_fraction: f64, seed: u64) -> Result<SuiteReport, OracleError> {
    let (n, t) = (4, 1);
    let palette = vec![Value::Val(0), Value::Val(1), Value::Bottom];
    let last = (n - 1) as ProcessId;
    let assignments = canonical_assignments(n, &palette);
    let mut jobs = Vec::new();
    for correct in &assignments {
        let mut inputs = correct.clone();
        inputs.push(Value::Bottom);
        jobs.push(OracleConfig::new(n, t, inputs.clone(), Some(last)));
        jobs.push(OracleConfig::new(n, t, inputs, None));
    }
    let canonical = explore_all(&jobs)?;

    let mut spot_jobs = Vec::new();
    if spot_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in 0..n as ProcessId {
            for code in 0..palette.len().pow(n as u32 - 1) {
                let mut rest = code;
                let mut inputs = Vec::with_capacity(n);
                for id in 0..n as ProcessId {
                    if id == c {
                        inputs.push(palette[rng.gen_range(0..palette.len())]);
                    } else {
                        inputs.push(palette[rest % palette.len()]);
                        rest /= palette.len();
                    }
                }
                let mut cfg = OracleConfig::new(n, t, inputs, Some(c));
                cfg.sample = Some((spot_fraction, rng.gen()));
                spot_jobs.push(cfg);
            }
        }
    }
    let spot_check = explore_all(&spot_jobs)?;
    Ok(SuiteReport { canonical, spot_check, assignments: assignments.len() })
}

/// Runs [`explore`] over `jobs` on worker threads and merges in job order.
pub fn explore_all(jobs: &[OracleConfig]) -> Result<OracleReport, OracleError> {
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<OracleReport>, OracleError>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs.chunks(chunk).map(|c| s.spawn(move || c.iter().map(explore).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("oracle worker panicked")).collect()
    });
    let mut out = OracleReport::default();
    for part in parts {
        for r in part? {
            out.absorb(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_orbits_of_three_inputs() {
        let p = [Value::Val(0), Value::Val(1), Value::Bottom];
        // multisets of size 3 over 3 values, identified under swapping 0/1
        assert_eq!(canonical_assignments(4, &p).len(), 6);
    }

    #[test]
    fn mixed_inputs_cover_the_full_product() {
        // Nobody can halt in round 1 with mixed inputs, so every branch
        // reaches round 2: 4 picks per recipient in round 1, and 3^3 + 1
        // per recipient in round 2 (three relays or silence).
        let cfg = OracleConfig::new(4, 1, vec![Value::Val(0), Value::Val(1), Value::Bottom, Value::Val(0)], Some(3));
        let r = explore(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.counterexamples);
        assert_eq!(r.branches, 64 * 28u128.pow(3));
    }

    #[test]
    fn unanimous_inputs_pass() {
        let r = explore(&OracleConfig::new(4, 1, vec![Value::Val(0); 4], Some(3))).unwrap();
        assert!(r.passed(), "{:?}", r.counterexamples);
        assert!(r.branches > 64);
    }

    #[test]
    fn no_corrupt_is_a_single_branch() {
        let r = explore(&OracleConfig::new(4, 1, vec![Value::Val(1), Value::Val(0), Value::Bottom, Value::Val(1)], None)).unwrap();
        assert!(r.passed(), "{:?}", r.counterexamples);
        assert_eq!(r.branches, 1);
    }

    #[test]
    fn unanimous_ones_decide_one_on_every_branch() {
        let mut cfg = OracleConfig::new(4, 1, vec![Value::Val(1); 4], Some(0));
        cfg.palette = vec![Value::Val(0), Value::Val(1), Value::Bottom];
        let r = explore(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.counterexamples);
        assert_eq!(r.decisions, BTreeSet::from([Value::Val(1)]));
    }

    #[test]
    fn budget_is_enforced() {
        let mut cfg = OracleConfig::new(4, 1, vec![Value::Val(0); 4], Some(3));
        cfg.max_nodes = 10;
        assert!(matches!(explore(&cfg), Err(OracleError::BudgetExceeded { cap: 10 })));
    }
}
