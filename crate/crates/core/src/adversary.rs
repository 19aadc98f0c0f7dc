//! Corrupt-process strategies. Every strategy sees the round's correct
//! bundles and each corrupt id's honest bundle (from a shadow process) before
//! choosing what to send to each recipient.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::agreement::{EigMessage, InstanceId};
use crate::eig::{NodeLabel, ProcessId, ProcessSet, Value};
use crate::monitor::MonitorMessage;
use crate::party::{Bundle, Party};

/// What the adversary may inspect in round `round`.
pub struct RoundView<'a> {
    pub round: u32,
    pub n: usize,
    pub t: usize,
    pub corrupt: ProcessSet,
    /// Bundles broadcast by correct processes, indexed by id.
    pub correct: &'a [Option<Bundle>],
    /// What each corrupt id would send if it followed the protocol.
    pub honest: &'a [Option<Bundle>],
    pub parties: &'a BTreeMap<ProcessId, Party>,
}

impl RoundView<'_> {
    pub fn correct_ids(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.parties.keys().copied()
    }
}

/// Corrupt id to per-recipient bundle (`None` is silence). A missing id is
/// silent towards everyone.
pub type CorruptOutput = BTreeMap<ProcessId, Vec<Option<Bundle>>>;

pub trait Adversary {
    fn act(&mut self, view: &RoundView<'_>) -> CorruptOutput;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AdversaryError {
    #[error("pattern needs {requested} corrupt processes but only {available} are corrupt")]
    InfeasiblePattern { requested: usize, available: usize },
    #[error("adversary script: {0}")]
    Script(String),
    #[error("unknown adversary {0:?}")]
    Unknown(String),
}

/// A value a random or scripted sender may use, or silence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    Send(Value),
    Silence,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Send(v) => v.fmt(f),
            Choice::Silence => f.write_str("silence"),
        }
    }
}

impl FromStr for Choice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "silence" {
            Ok(Choice::Silence)
        } else {
            s.parse().map(Choice::Send).map_err(|e: crate::eig::ValueParseError| e.0)
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IntOrStr {
    Int(u64),
    Str(String),
}

impl Serialize for Choice {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Choice::Send(v) => v.serialize(s),
            Choice::Silence => s.serialize_str("silence"),
        }
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match IntOrStr::deserialize(d)? {
            IntOrStr::Int(x) => u32::try_from(x).map(|x| Choice::Send(Value::Val(x))).map_err(serde::de::Error::custom),
            IntOrStr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Script recipient: one id or every process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipient {
    One(ProcessId),
    All,
}

impl Recipient {
    fn matches(self, j: usize) -> bool {
        match self {
            Recipient::All => true,
            Recipient::One(x) => x as usize == j,
        }
    }
}

impl Serialize for Recipient {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Recipient::One(x) => s.serialize_u8(*x),
            Recipient::All => s.serialize_str("*"),
        }
    }
}

impl<'de> Deserialize<'de> for Recipient {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match IntOrStr::deserialize(d)? {
            IntOrStr::Int(x) => u8::try_from(x).map(Recipient::One).map_err(serde::de::Error::custom),
            IntOrStr::Str(s) if s == "*" => Ok(Recipient::All),
            IntOrStr::Str(s) => s.parse().map(Recipient::One).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptBase {
    #[default]
    Honest,
    Silent,
}

/// One override. Without a label the whole bundle is replaced: silence drops
/// it, a value rewrites every EIG message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub round: u32,
    pub corrupt: ProcessId,
    pub recipient: Recipient,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<InstanceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<NodeLabel>,
    pub value: Choice,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub base: ScriptBase,
    #[serde(default, rename = "entry")]
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Self, AdversaryError> {
        toml::from_str(text).map_err(|e| AdversaryError::Script(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AdversaryError> {
        let text = std::fs::read_to_string(path).map_err(|e| AdversaryError::Script(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdversarySpec {
    /// Corrupt ids follow the protocol.
    Honest,
    /// Bottom for every expected label, every round.
    Silent,
    /// Honest before `round`, then no messages. With `partial`, the crash
    /// round still reaches the lower half of the ids.
    Crash { round: u32, partial: bool },
    /// From `from_round` on, odd recipients get a different value for every
    /// EIG message.
    Equivocate { from_round: u32 },
    /// Honest EIG traffic, gossip accusing every correct process.
    GossipLiar,
    /// Per message, the honest value or a uniform draw from the palette.
    Random { palette: Vec<Choice> },
    Scripted { name: String, script: Script },
    /// `pattern[k]` corrupt ids equivocate on depth `k + 1` labels and the
    /// level below; the remaining corrupt ids contradict the echoes under
    /// those nodes one round later.
    CrossCorruption { pattern: Vec<usize> },
}

impl AdversarySpec {
    /// Random Byzantine with every alphabet value, bottom and silence.
    pub fn random_default(alphabet_size: u32) -> Self {
        let mut palette: Vec<Choice> = (0..alphabet_size).map(|v| Choice::Send(Value::Val(v))).collect();
        palette.push(Choice::Send(Value::Bottom));
        palette.push(Choice::Silence);
        AdversarySpec::Random { palette }
    }

    pub fn name(&self) -> String {
        match self {
            AdversarySpec::Honest => "honest".into(),
            AdversarySpec::Silent => "silent".into(),
            AdversarySpec::Crash { round, partial: false } => format!("crash:{round}"),
            AdversarySpec::Crash { round, partial: true } => format!("crash-partial:{round}"),
            AdversarySpec::Equivocate { from_round } => format!("equivocate:{from_round}"),
            AdversarySpec::GossipLiar => "gossip-liar".into(),
            AdversarySpec::Random { palette } => {
                let p: Vec<String> = palette.iter().map(Choice::to_string).collect();
                format!("random:{}", p.join(","))
            }
            AdversarySpec::Scripted { name, .. } => format!("script:{name}"),
            AdversarySpec::CrossCorruption { pattern } => {
                let p: Vec<String> = pattern.iter().map(usize::to_string).collect();
                format!("cross:{}", p.join(","))
            }
        }
    }

    /// Parses a strategy name, or loads a TOML script when the name is a
    /// path to an existing file.
    pub fn resolve(name: &str, alphabet_size: u32) -> Result<Self, AdversaryError> {
        let path = Path::new(name);
        if path.is_file() {
            let script = Script::load(path)?;
            return Ok(AdversarySpec::Scripted { name: name.to_string(), script });
        }
        let (head, arg) = name.split_once(':').map_or((name, None), |(h, a)| (h, Some(a)));
        let num = |a: Option<&str>, default: u32| -> Result<u32, AdversaryError> {
            a.map_or(Ok(default), |s| s.parse().map_err(|_| AdversaryError::Unknown(name.to_string())))
        };
        Ok(match head {
            "honest" => AdversarySpec::Honest,
            "silent" => AdversarySpec::Silent,
            "crash" => AdversarySpec::Crash { round: num(arg, 1)?, partial: false },
            "crash-partial" => AdversarySpec::Crash { round: num(arg, 1)?, partial: true },
            "equivocate" => AdversarySpec::Equivocate { from_round: num(arg, 1)? },
            "gossip-liar" => AdversarySpec::GossipLiar,
            "random" => match arg {
                None => Self::random_default(alphabet_size),
                Some(a) => AdversarySpec::Random {
                    palette: a.split(',').map(str::parse).collect::<Result<_, _>>().map_err(AdversaryError::Unknown)?,
                },
            },
            "cross" => AdversarySpec::CrossCorruption {
                pattern: arg
                    .unwrap_or("2,0")
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| AdversaryError::Unknown(name.to_string())))
                    .collect::<Result<_, _>>()?,
            },
            _ => return Err(AdversaryError::Unknown(name.to_string())),
        })
    }

    pub fn build(
        &self,
        n: usize,
        alphabet_size: u32,
        corrupt: &[ProcessId],
        seed: u64,
    ) -> Result<Box<dyn Adversary>, AdversaryError> {
        let corrupt: Vec<ProcessId> = corrupt.to_vec();
        Ok(match self {
            AdversarySpec::Honest => Box::new(Rewrite::new(n, |_, _, _, b| Some(b.clone()))),
            AdversarySpec::Silent => Box::new(Rewrite::new(n, |_, _, _, b| Some(silent_bundle(b)))),
            &AdversarySpec::Crash { round, partial } => Box::new(Rewrite::new(n, move |r, _, j, b| {
                if r < round || (r == round && partial && j < n / 2) {
                    Some(b.clone())
                } else {
                    None
                }
            })),
            &AdversarySpec::Equivocate { from_round } => Box::new(Rewrite::new(n, move |r, _, j, b| {
                if r < from_round || j % 2 == 0 {
                    Some(b.clone())
                } else {
                    Some(map_eig(b, |_, m| Some(flip(m.value, alphabet_size))))
                }
            })),
            AdversarySpec::GossipLiar => Box::new(GossipLiar),
            AdversarySpec::Random { palette } => {
                if palette.is_empty() {
                    return Err(AdversaryError::Unknown("random with empty palette".into()));
                }
                Box::new(RandomByzantine { palette: palette.clone(), rng: ChaCha8Rng::seed_from_u64(seed) })
            }
            AdversarySpec::Scripted { script, .. } => {
                if let Some(e) = script.entries.iter().find(|e| !corrupt.contains(&e.corrupt)) {
                    return Err(AdversaryError::Script(format!("entry for {} which is not corrupt", e.corrupt)));
                }
                Box::new(Scripted { script: script.clone() })
            }
            AdversarySpec::CrossCorruption { pattern } => Box::new(cross_corruption_strategy(pattern, &corrupt, alphabet_size)?),
        })
    }
}

/// A different value in the same alphabet.
pub fn flip(v: Value, alphabet_size: u32) -> Value {
    match v {
        Value::Val(x) if alphabet_size > 1 => Value::Val((x + 1) % alphabet_size),
        Value::Val(_) => Value::Bottom,
        _ => Value::Val(0),
    }
}

/// Rewrites every EIG message; `None` drops it.
pub fn map_eig(b: &Bundle, mut f: impl FnMut(&InstanceId, &EigMessage) -> Option<Value>) -> Bundle {
    let eig = b
        .eig
        .iter()
        .map(|(iid, msgs)| {
            let msgs = msgs.iter().filter_map(|m| f(iid, m).map(|value| EigMessage { value, ..*m })).collect();
            (*iid, msgs)
        })
        .collect();
    Bundle { gossip: b.gossip, eig, monitor: b.monitor.clone() }
}

fn silent_bundle(b: &Bundle) -> Bundle {
    let mut out = map_eig(b, |_, _| Some(Value::Bottom));
    out.gossip = ProcessSet::EMPTY;
    out.monitor = b
        .monitor
        .iter()
        .map(|m| match *m {
            MonitorMessage::V { seq, .. } => MonitorMessage::V { seq, value: Value::Bottom },
            MonitorMessage::Early { seq, .. } => MonitorMessage::Early { seq, value: false },
        })
        .collect();
    out
}

type RewriteFn = dyn FnMut(u32, ProcessId, usize, &Bundle) -> Option<Bundle>;

/// A stateless per-recipient transformation of each corrupt id's honest
/// bundle. Nothing is sent once the honest shadow has halted.
struct Rewrite {
    n: usize,
    f: Box<RewriteFn>,
}

impl Rewrite {
    fn new(n: usize, f: impl FnMut(u32, ProcessId, usize, &Bundle) -> Option<Bundle> + 'static) -> Self {
        Rewrite { n, f: Box::new(f) }
    }
}

impl Adversary for Rewrite {
    fn act(&mut self, view: &RoundView<'_>) -> CorruptOutput {
        let mut out = CorruptOutput::new();
        for c in view.corrupt.iter() {
            let Some(h) = &view.honest[c as usize] else { continue };
            let per = (0..self.n).map(|j| (self.f)(view.round, c, j, h)).collect();
            out.insert(c, per);
        }
        out
    }
}

struct GossipLiar;

impl Adversary for GossipLiar {
    fn act(&mut self, view: &RoundView<'_>) -> CorruptOutput {
        let lies: ProcessSet = view.correct_ids().collect();
        let mut out = CorruptOutput::new();
        for c in view.corrupt.iter() {
            let Some(h) = &view.honest[c as usize] else { continue };
            let mut b = h.clone();
            b.gossip = b.gossip.union(lies);
            out.insert(c, vec![Some(b); view.n]);
        }
        out
    }
}

struct RandomByzantine {
    palette: Vec<Choice>,
    rng: ChaCha8Rng,
}

impl RandomByzantine {
    fn draw(&mut self, honest: Value) -> Option<Value> {
        if self.rng.gen_bool(0.5) {
            return Some(honest);
        }
        match self.palette[self.rng.gen_range(0..self.palette.len())] {
            Choice::Send(v) => Some(v),
            Choice::Silence => None,
        }
    }
}

impl Adversary for RandomByzantine {
    fn act(&mut self, view: &RoundView<'_>) -> CorruptOutput {
        let mut out = CorruptOutput::new();
        for c in view.corrupt.iter() {
            let Some(h) = &view.honest[c as usize] else { continue };
            if self.rng.gen_bool(0.1) {
                continue;
            }
            let mut per = Vec::with_capacity(view.n);
            for _ in 0..view.n {
                if self.rng.gen_bool(0.1) {
                    per.push(None);
                    continue;
                }
                let mut b = map_eig(h, |_, m| self.draw(m.value));
                if self.rng.gen_bool(0.1) {
                    b.gossip.insert(self.rng.gen_range(0..view.n) as ProcessId);
                }
                for m in b.monitor.iter_mut() {
                    match m {
                        MonitorMessage::V { value, .. } if self.rng.gen_bool(0.2) => *value = Value::Bad,
                        MonitorMessage::Early { value, .. } if self.rng.gen_bool(0.2) => *value = !*value,
                        _ => {}
                    }
                }
                per.push(Some(b));
            }
            out.insert(c, per);
        }
        out
    }
}

struct Scripted {
    script: Script,
}

impl Adversary for Scripted {
    fn act(&mut self, view: &RoundView<'_>) -> CorruptOutput {
        let mut out = CorruptOutput::new();
        for c in view.corrupt.iter() {
            let mut per: Vec<Option<Bundle>> = match (&view.honest[c as usize], self.script.base) {
                (Some(h), ScriptBase::Honest) => vec![Some(h.clone()); view.n],
                (Some(h), ScriptBase::Silent) => vec![Some(silent_bundle(h)); view.n],
                (None, _) => vec![None; view.n],
            };
            for e in self.script.entries.iter().filter(|e| e.round == view.round && e.corrupt == c) {
                for (_, slot) in per.iter_mut().enumerate().filter(|(j, _)| e.recipient.matches(*j)) {
                    apply_entry(slot, e, c);
                }
            }
            out.insert(c, per);
        }
        out
    }
}

fn apply_entry(slot: &mut Option<Bundle>, e: &ScriptEntry, sender: ProcessId) {
    match (e.label, e.value) {
        (None, Choice::Silence) => *slot = None,
        (None, Choice::Send(v)) => {
            if let Some(b) = slot.as_mut() {
                *b = map_eig(b, |iid, m| if e.instance.is_none_or(|i| i == *iid) { Some(v) } else { Some(m.value) });
            }
        }
        (Some(label), choice) => {
            let b = slot.get_or_insert_with(Bundle::default);
            let msgs = b.eig.entry(e.instance.unwrap_or(InstanceId::TOP)).or_default();
            let pos = msgs.iter().position(|m| m.label == label);
            match (pos, choice) {
                (Some(i), Choice::Send(v)) => msgs[i].value = v,
                (Some(i), Choice::Silence) => {
                    msgs.remove(i);
                }
                (None, Choice::Send(v)) => msgs.push(EigMessage { label, sender, value: v }),
                (None, Choice::Silence) => {}
            }
        }
    }
}

/// Equivocation schedule for cross corruption. Each designated id splits the
/// correct processes on every top-instance label during its two rounds, and
/// in the round after that every other corrupt id flips its echoes below the
/// designated id's nodes, so no correct process can fix them in time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossCorruption {
    /// (id, depth at which it should become fully corrupt)
    pub designated: Vec<(ProcessId, u32)>,
    pub alphabet_size: u32,
}

/// Assigns `pattern[k]` corrupt ids, in id order, to depth `k + 1`. The other
/// corrupt ids stay honest.
pub fn cross_corruption_strategy(pattern: &[usize], corrupt: &[ProcessId], alphabet_size: u32) -> Result<CrossCorruption, AdversaryError> {
    let requested: usize = pattern.iter().sum();
    if requested > corrupt.len() {
        return Err(AdversaryError::InfeasiblePattern { requested, available: corrupt.len() });
    }
    let mut ids = corrupt.to_vec();
    ids.sort_unstable();
    let mut it = ids.into_iter();
    let mut designated = Vec::new();
    for (k, &count) in pattern.iter().enumerate() {
        for _ in 0..count {
            designated.push((it.next().unwrap(), k as u32 + 1));
        }
    }
    Ok(CrossCorruption { designated, alphabet_size })
}

impl CrossCorruption {
    /// Requested α series, starting at depth 1.
    pub fn requested(&self) -> Vec<usize> {
        let max = self.designated.iter().map(|d| d.1).max().unwrap_or(0);
        (1..=max).map(|i| self.designated.iter().filter(|d| d.1 == i).count()).collect()
    }
}

fn label_hash(label: &NodeLabel) -> usize {
    label.ids().iter().fold(17usize, |h, &x| h.wrapping_mul(31).wrapping_add(x as usize + 1))
}

impl Adversary for CrossCorruption {
    fn act(&mut self, view: &RoundView<'_>) -> CorruptOutput {
        let correct: Vec<ProcessId> = view.correct_ids().collect();
        let split = view.t.min(correct.len());
        let mut out = CorruptOutput::new();
        for c in view.corrupt.iter() {
            let Some(h) = &view.honest[c as usize] else { continue };
            let splitting = self.designated.iter().any(|&(id, d)| id == c && (view.round == d || view.round == d + 1));
            // Two rounds after a designated id split its nodes, every other
            // corrupt id contradicts the echoes under those nodes.
            let targets: Vec<(ProcessId, u32)> =
                self.designated.iter().copied().filter(|&(id, d)| id != c && view.round == d + 2).collect();
            let blocked = |iid: &InstanceId, m: &EigMessage| {
                *iid == InstanceId::TOP
                    && m.label.len() == view.round as usize - 1
                    && targets.iter().any(|&(z, d)| m.label.ids()[d as usize - 1] == z)
            };
            if !splitting && targets.is_empty() {
                out.insert(c, vec![Some(h.clone()); view.n]);
                continue;
            }
            let per = (0..view.n)
                .map(|j| {
                    Some(map_eig(h, |iid, m| {
                        if blocked(iid, m) {
                            return Some(flip(m.value, self.alphabet_size));
                        }
                        if !splitting || *iid != InstanceId::TOP || correct.is_empty() {
                            return Some(m.value);
                        }
                        let start = label_hash(&m.label) % correct.len();
                        let pos = correct.iter().position(|&x| x as usize == j);
                        let flipped = pos.is_some_and(|p| (p + correct.len() - start) % correct.len() < split);
                        Some(if flipped { flip(m.value, self.alphabet_size) } else { m.value })
                    }))
                })
                .collect();
            out.insert(c, per);
        }
        out
    }
}
