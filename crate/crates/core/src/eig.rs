//! EIG tree substrate: node labels, the information tree (IT), the resolve
//! tree (RT) with lazy coloring, and the frontier test.
//!
//! A label is a repetition-free sequence of process ids. Labels order by
//! length first and then lexicographically, so sorting a set of labels gives
//! breadth-first order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Process identifier in `[0, n)`.
pub type ProcessId = u8;

/// Upper bound on `n`; process sets are 64-bit masks.
pub const MAX_PROCESSES: usize = 64;

/// Longest label that can be stored. Bounds `t` at `MAX_DEPTH - 1`.
pub const MAX_DEPTH: usize = 16;

// ---------------------------------------------------------------------------
// Values
// ---------------------------------------------------------------------------

/// A decision value: an alphabet symbol `0..k`, the default `Bottom`, or the
/// monitor-layer `Bad`. The derived order puts every symbol below the two
/// sentinels, which is the tie-break order used by the resolve rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Val(u32),
    Bottom,
    Bad,
}

impl Value {
    pub fn is_bottom(self) -> bool {
        self == Value::Bottom
    }

    /// Whether the value may appear in an instance over alphabet `0..k`.
    pub fn is_valid(self, alphabet_size: u32, allow_bad: bool) -> bool {
        match self {
            Value::Val(k) => k < alphabet_size,
            Value::Bottom => true,
            Value::Bad => allow_bad,
        }
    }

    /// The externally reported form: `Bad` reads as `Bottom`.
    pub fn external(self) -> Value {
        if self == Value::Bad {
            Value::Bottom
        } else {
            self
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Val(k) => write!(f, "{k}"),
            Value::Bottom => f.write_str("bot"),
            Value::Bad => f.write_str("bad"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unrecognised value `{0}`")]
pub struct ValueParseError(pub String);

impl FromStr for Value {
    type Err = ValueParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "bot" | "⊥" | "bottom" => Ok(Value::Bottom),
            "bad" | "BAD" => Ok(Value::Bad),
            other => other
                .parse::<u32>()
                .map(Value::Val)
                .map_err(|_| ValueParseError(other.to_string())),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Val(k) => s.serialize_u32(*k),
            Value::Bottom => s.serialize_str("bot"),
            Value::Bad => s.serialize_str("bad"),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Ok(Value::Val(k)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

// ---------------------------------------------------------------------------
// Process sets
// ---------------------------------------------------------------------------

/// A set of process ids stored as a bitmask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProcessSet(pub u64);

impl ProcessSet {
    pub const EMPTY: ProcessSet = ProcessSet(0);

    pub fn full(n: usize) -> Self {
        if n >= 64 {
            ProcessSet(u64::MAX)
        } else {
            ProcessSet((1u64 << n) - 1)
        }
    }

    pub fn contains(self, id: ProcessId) -> bool {
        (id as usize) < 64 && self.0 & (1u64 << id) != 0
    }

    /// Inserts `id`; returns true if it was not already present.
    pub fn insert(&mut self, id: ProcessId) -> bool {
        let had = self.contains(id);
        self.0 |= 1u64 << id;
        !had
    }

    pub fn remove(&mut self, id: ProcessId) {
        self.0 &= !(1u64 << id);
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: ProcessSet) -> ProcessSet {
        ProcessSet(self.0 | other.0)
    }

    pub fn intersection(self, other: ProcessSet) -> ProcessSet {
        ProcessSet(self.0 & other.0)
    }

    pub fn difference(self, other: ProcessSet) -> ProcessSet {
        ProcessSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: ProcessSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Ids in ascending order.
    pub fn iter(self) -> impl Iterator<Item = ProcessId> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let id = bits.trailing_zeros() as ProcessId;
                bits &= bits - 1;
                Some(id)
            }
        })
    }
}

impl FromIterator<ProcessId> for ProcessSet {
    fn from_iter<I: IntoIterator<Item = ProcessId>>(iter: I) -> Self {
        let mut s = ProcessSet::EMPTY;
        for id in iter {
            s.insert(id);
        }
        s
    }
}

impl fmt::Debug for ProcessSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for ProcessSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ProcessSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ids = Vec::<ProcessId>::deserialize(d)?;
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= MAX_PROCESSES) {
            return Err(serde::de::Error::custom(format!("process id {bad} out of range")));
        }
        Ok(ids.into_iter().collect())
    }
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("process id {0} repeats in label")]
    Repetition(ProcessId),
    #[error("label length {len} exceeds t+1 = {max}")]
    Depth { len: usize, max: usize },
    #[error("cannot parse label `{0}`")]
    Parse(String),
}

/// Address of an EIG tree node. The empty label is the root.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeLabel {
    len: u8,
    ids: [ProcessId; MAX_DEPTH],
}

impl NodeLabel {
    pub const ROOT: NodeLabel = NodeLabel { len: 0, ids: [0; MAX_DEPTH] };

    /// Builds a label, rejecting repeated ids and lengths above `t + 1`.
    pub fn new(ids: &[ProcessId], t: usize) -> Result<Self, LabelError> {
        let max = (t + 1).min(MAX_DEPTH);
        if ids.len() > max {
            return Err(LabelError::Depth { len: ids.len(), max: t + 1 });
        }
        let mut seen = ProcessSet::EMPTY;
        let mut label = NodeLabel::ROOT;
        for &id in ids {
            if !seen.insert(id) {
                return Err(LabelError::Repetition(id));
            }
            label.ids[label.len as usize] = id;
            label.len += 1;
        }
        Ok(label)
    }

    pub fn is_root(&self) -> bool {
        self.len == 0
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn ids(&self) -> &[ProcessId] {
        &self.ids[..self.len as usize]
    }

    pub fn last(&self) -> Option<ProcessId> {
        self.ids().last().copied()
    }

    pub fn contains(&self, id: ProcessId) -> bool {
        self.ids().contains(&id)
    }

    pub fn id_set(&self) -> ProcessSet {
        self.ids().iter().copied().collect()
    }

    /// The label extended by `id`. The caller guarantees `id` is not already
    /// present and the result fits.
    pub fn child(&self, id: ProcessId) -> NodeLabel {
        debug_assert!(!self.contains(id));
        let mut c = *self;
        c.ids[c.len as usize] = id;
        c.len += 1;
        c
    }

    pub fn parent(&self) -> Option<NodeLabel> {
        if self.len == 0 {
            None
        } else {
            Some(self.prefix(self.len as usize - 1))
        }
    }

    /// The first `k` ids.
    pub fn prefix(&self, k: usize) -> NodeLabel {
        let mut p = NodeLabel::ROOT;
        p.len = k as u8;
        p.ids[..k].copy_from_slice(&self.ids[..k]);
        p
    }

    /// Prefix relation, reflexive.
    pub fn is_prefix_of(&self, other: &NodeLabel) -> bool {
        self.len <= other.len && self.ids() == &other.ids[..self.len as usize]
    }

    pub fn is_comparable(&self, other: &NodeLabel) -> bool {
        self.is_prefix_of(other) || other.is_prefix_of(self)
    }

    /// Whether the label ends with `a` followed by `b`.
    pub fn ends_with_pair(&self, a: ProcessId, b: ProcessId) -> bool {
        let l = self.len as usize;
        l >= 2 && self.ids[l - 2] == a && self.ids[l - 1] == b
    }

    /// Children in ascending id order.
    pub fn children(&self, n: usize) -> impl Iterator<Item = NodeLabel> + '_ {
        let used = self.id_set();
        (0..n as ProcessId).filter(move |id| !used.contains(*id)).map(move |id| self.child(id))
    }

    /// Ids that extend this label, ascending.
    pub fn child_ids(&self, n: usize) -> ProcessSet {
        ProcessSet::full(n).difference(self.id_set())
    }
}

/// Children of `label` among processes `0..n`, ascending.
pub fn children(label: &NodeLabel, n: usize) -> Vec<NodeLabel> {
    if label.len() >= MAX_DEPTH {
        return Vec::new();
    }
    label.children(n).collect()
}

/// Validated label construction.
pub fn make_label(ids: &[ProcessId], t: usize) -> Result<NodeLabel, LabelError> {
    NodeLabel::new(ids, t)
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_root() {
            return f.write_str("eps");
        }
        for (i, id) in self.ids().iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{id}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{self}>")
    }
}

impl FromStr for NodeLabel {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "eps" || s.is_empty() {
            return Ok(NodeLabel::ROOT);
        }
        let ids = s
            .split('.')
            .map(|p| p.parse::<ProcessId>().map_err(|_| LabelError::Parse(s.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        NodeLabel::new(&ids, MAX_DEPTH - 1)
    }
}

impl Serialize for NodeLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Information tree
// ---------------------------------------------------------------------------

/// Received and inferred values, plus closed branch roots.
///
/// Labels are kept per depth in insertion order. Each round inserts a whole
/// level by walking the previous level in order, so every level is sorted.
#[derive(Clone, Debug, Default)]
pub struct InfoTree {
    values: HashMap<NodeLabel, Value>,
    levels: Vec<Vec<NodeLabel>>,
    closed: HashSet<NodeLabel>,
}

impl InfoTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, label: &NodeLabel) -> Option<Value> {
        self.values.get(label).copied()
    }

    /// Writes a value, creating the entry if needed. Returns the old value.
    pub fn set(&mut self, label: NodeLabel, value: Value) -> Option<Value> {
        let old = self.values.insert(label, value);
        if old.is_none() {
            let d = label.len();
            if self.levels.len() <= d {
                self.levels.resize_with(d + 1, Vec::new);
            }
            self.levels[d].push(label);
        }
        old
    }

    pub fn contains(&self, label: &NodeLabel) -> bool {
        self.values.contains_key(label)
    }

    /// Labels at depth `d` in breadth-first order.
    pub fn level(&self, d: usize) -> &[NodeLabel] {
        self.levels.get(d).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn depth(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// All labels, breadth-first.
    pub fn labels(&self) -> impl Iterator<Item = &NodeLabel> {
        self.levels.iter().flatten()
    }

    /// Marks `label` as a closed branch root. Returns false if it already was.
    pub fn close(&mut self, label: NodeLabel) -> bool {
        self.closed.insert(label)
    }

    pub fn is_closed_root(&self, label: &NodeLabel) -> bool {
        self.closed.contains(label)
    }

    /// A label is active iff no prefix of it (itself included) is closed.
    pub fn is_active(&self, label: &NodeLabel) -> bool {
        if self.closed.is_empty() {
            return true;
        }
        (0..=label.len()).all(|k| !self.closed.contains(&label.prefix(k)))
    }

    pub fn closed_roots(&self) -> impl Iterator<Item = &NodeLabel> {
        self.closed.iter()
    }
}

// ---------------------------------------------------------------------------
// Resolve tree
// ---------------------------------------------------------------------------

/// The rule that performed a put.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PutRule {
    #[serde(rename = "ITRULE")]
    ItRule,
    #[serde(rename = "LASTROUNDRULE")]
    LastRoundRule,
    #[serde(rename = "GCRULE")]
    GcRule,
    #[serde(rename = "RGCRULE")]
    RgcRule,
    #[serde(rename = "SRULE")]
    SRule,
    #[serde(rename = "SROOTRULE")]
    SRootRule,
    #[serde(rename = "EARLYITRULE")]
    EarlyItRule,
    #[serde(rename = "STRONGITRULE")]
    StrongItRule,
}

impl PutRule {
    pub const ALL: [PutRule; 8] = [
        PutRule::ItRule,
        PutRule::LastRoundRule,
        PutRule::GcRule,
        PutRule::RgcRule,
        PutRule::SRule,
        PutRule::SRootRule,
        PutRule::EarlyItRule,
        PutRule::StrongItRule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PutRule::ItRule => "ITRULE",
            PutRule::LastRoundRule => "LASTROUNDRULE",
            PutRule::GcRule => "GCRULE",
            PutRule::RgcRule => "RGCRULE",
            PutRule::SRule => "SRULE",
            PutRule::SRootRule => "SROOTRULE",
            PutRule::EarlyItRule => "EARLYITRULE",
            PutRule::StrongItRule => "STRONGITRULE",
        }
    }

    /// Whether puts by this rule take part in cross-process safety checks.
    pub fn in_put_tree(self) -> bool {
        self != PutRule::LastRoundRule
    }
}

impl fmt::Display for PutRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RtEntry {
    pub value: Value,
    pub rule: PutRule,
    pub round: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Put(PutRule),
    Colored(NodeLabel),
}

/// Result of an RT read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RtView {
    pub value: Value,
    pub provenance: Provenance,
    /// Round in which the put behind this view happened.
    pub round: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RtError {
    #[error("label {0} already has a resolve-tree value")]
    AlreadyAssigned(NodeLabel),
}

/// Write-once put store. Reads of a label are colored by its shallowest put
/// prefix.
#[derive(Clone, Debug, Default)]
pub struct ResolveTree {
    puts: HashMap<NodeLabel, RtEntry>,
    order: Vec<NodeLabel>,
    /// Strict prefixes of put labels.
    above_puts: HashSet<NodeLabel>,
}

impl ResolveTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(
        &mut self,
        label: NodeLabel,
        value: Value,
        rule: PutRule,
        round: u32,
    ) -> Result<(), RtError> {
        if self.contains(&label) {
            return Err(RtError::AlreadyAssigned(label));
        }
        self.puts.insert(label, RtEntry { value, rule, round });
        self.order.push(label);
        for k in 0..label.len() {
            self.above_puts.insert(label.prefix(k));
        }
        Ok(())
    }

    /// Value from the shallowest put prefix. An ancestor is only ever put
    /// after its descendants, and its coloring overrides their own puts,
    /// which stay visible through [`ResolveTree::put`].
    pub fn lookup(&self, label: &NodeLabel) -> Option<RtView> {
        (0..=label.len()).find_map(|k| {
            let a = label.prefix(k);
            self.puts.get(&a).map(|e| RtView {
                value: e.value,
                provenance: if k == label.len() { Provenance::Put(e.rule) } else { Provenance::Colored(a) },
                round: e.round,
            })
        })
    }

    pub fn value(&self, label: &NodeLabel) -> Option<Value> {
        self.lookup(label).map(|v| v.value)
    }

    pub fn contains(&self, label: &NodeLabel) -> bool {
        (0..=label.len()).any(|k| self.puts.contains_key(&label.prefix(k)))
    }

    /// Own put entry only.
    pub fn put(&self, label: &NodeLabel) -> Option<&RtEntry> {
        self.puts.get(label)
    }

    /// Whether some proper descendant of `label` carries a put.
    pub fn has_put_below(&self, label: &NodeLabel) -> bool {
        self.above_puts.contains(label)
    }

    /// Whether `label` was in RT (put or colored) by the end of `round`.
    pub fn contains_by(&self, label: &NodeLabel, round: u32) -> bool {
        (0..=label.len()).any(|k| self.puts.get(&label.prefix(k)).is_some_and(|e| e.round <= round))
    }

    /// Put labels in assignment order.
    pub fn puts(&self) -> impl Iterator<Item = (&NodeLabel, &RtEntry)> {
        self.order.iter().map(move |l| (l, &self.puts[l]))
    }

    pub fn put_count(&self) -> usize {
        self.order.len()
    }

    /// True iff every label of depth `phi + 1` has a resolved prefix.
    pub fn frontier_exists(&self, n: usize, phi: usize) -> bool {
        self.covers(&NodeLabel::ROOT, n, phi + 1)
    }

    fn covers(&self, label: &NodeLabel, n: usize, leaf_depth: usize) -> bool {
        if self.puts.contains_key(label) {
            return true;
        }
        if label.len() >= leaf_depth || !self.above_puts.contains(label) {
            return false;
        }
        label.children(n).all(|c| self.covers(&c, n, leaf_depth))
    }
}

/// Free-function form of [`ResolveTree::assign`].
pub fn rt_assign(
    rt: &mut ResolveTree,
    label: NodeLabel,
    value: Value,
    rule: PutRule,
    round: u32,
) -> Result<(), RtError> {
    rt.assign(label, value, rule, round)
}

/// Free-function form of [`ResolveTree::lookup`].
pub fn rt_lookup(rt: &ResolveTree, label: &NodeLabel) -> Option<RtView> {
    rt.lookup(label)
}

/// Free-function form of [`ResolveTree::frontier_exists`].
pub fn frontier_exists(rt: &ResolveTree, n: usize, phi: usize) -> bool {
    rt.frontier_exists(n, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l(s: &str) -> NodeLabel {
        s.parse().unwrap()
    }

    #[test]
    fn make_label_examples() {
        assert_eq!(make_label(&[], 2).unwrap(), NodeLabel::ROOT);
        assert_eq!(make_label(&[3, 1], 2).unwrap().to_string(), "3.1");
        assert_eq!(make_label(&[3, 3], 2), Err(LabelError::Repetition(3)));
        assert_eq!(make_label(&[0, 1, 2], 1), Err(LabelError::Depth { len: 3, max: 2 }));
    }

    #[test]
    fn children_examples() {
        let names = |v: Vec<NodeLabel>| v.iter().map(|c| c.to_string()).collect::<Vec<_>>();
        assert_eq!(names(children(&NodeLabel::ROOT, 4)), ["0", "1", "2", "3"]);
        assert_eq!(names(children(&l("2"), 4)), ["2.0", "2.1", "2.3"]);
        assert!(children(&l("0.1.2.3"), 4).is_empty());
    }

    #[test]
    fn root_serializes_as_eps() {
        assert_eq!(NodeLabel::ROOT.to_string(), "eps");
        assert_eq!(l("eps"), NodeLabel::ROOT);
        assert_eq!(serde_json::to_string(&l("4.0.2")).unwrap(), "\"4.0.2\"");
    }

    #[test]
    fn assign_colors_descendants() {
        let mut rt = ResolveTree::new();
        rt.assign(NodeLabel::ROOT, Value::Val(7), PutRule::GcRule, 3).unwrap();
        let v = rt.lookup(&l("3.1")).unwrap();
        assert_eq!(v.value, Value::Val(7));
        assert_eq!(v.provenance, Provenance::Colored(NodeLabel::ROOT));
    }

    #[test]
    fn assign_direct_put_and_write_once() {
        let mut rt = ResolveTree::new();
        rt.assign(l("2"), Value::Bottom, PutRule::SRule, 4).unwrap();
        let v = rt.lookup(&l("2")).unwrap();
        assert_eq!((v.value, v.provenance, v.round), (Value::Bottom, Provenance::Put(PutRule::SRule), 4));
        assert_eq!(
            rt.assign(l("2"), Value::Val(1), PutRule::ItRule, 5),
            Err(RtError::AlreadyAssigned(l("2")))
        );
        // a colored descendant is also already in RT
        assert!(rt.assign(l("2.0"), Value::Val(1), PutRule::ItRule, 5).is_err());
    }

    #[test]
    fn later_ancestor_put_recolors_descendants() {
        let mut rt = ResolveTree::new();
        assert!(rt.lookup(&l("1.2")).is_none());
        rt.assign(l("1"), Value::Val(5), PutRule::ItRule, 2).unwrap();
        assert_eq!(rt.lookup(&l("1.3")).unwrap().provenance, Provenance::Colored(l("1")));
        rt.assign(NodeLabel::ROOT, Value::Bottom, PutRule::GcRule, 3).unwrap();
        let v = rt.lookup(&l("1")).unwrap();
        assert_eq!((v.value, v.provenance, v.round), (Value::Bottom, Provenance::Colored(NodeLabel::ROOT), 3));
        assert_eq!(rt.lookup(&l("1.3")).unwrap().value, Value::Bottom);
        // the put itself is kept
        assert_eq!(rt.put(&l("1")).unwrap().value, Value::Val(5));

        let mut rt = ResolveTree::new();
        rt.assign(l("2"), Value::Bottom, PutRule::SRule, 2).unwrap();
        let v = rt.lookup(&l("2.0.1")).unwrap();
        assert_eq!((v.value, v.provenance), (Value::Bottom, Provenance::Colored(l("2"))));
    }

    #[test]
    fn frontier_examples() {
        let mut rt = ResolveTree::new();
        rt.assign(NodeLabel::ROOT, Value::Val(0), PutRule::ItRule, 1).unwrap();
        assert!(rt.frontier_exists(4, 1));

        let mut rt = ResolveTree::new();
        for s in ["0", "1", "2", "3"] {
            rt.assign(l(s), Value::Val(0), PutRule::ItRule, 2).unwrap();
        }
        assert!(rt.frontier_exists(4, 1));

        let mut rt = ResolveTree::new();
        for s in ["0", "1", "2"] {
            rt.assign(l(s), Value::Val(0), PutRule::ItRule, 2).unwrap();
        }
        assert!(!rt.frontier_exists(4, 1));
        // completing the last branch at leaf depth also makes a cut
        for s in ["3.0", "3.1", "3.2"] {
            rt.assign(l(s), Value::Bottom, PutRule::LastRoundRule, 2).unwrap();
        }
        assert!(rt.frontier_exists(4, 1));
    }

    #[test]
    fn contains_by_uses_round_stamp() {
        let mut rt = ResolveTree::new();
        rt.assign(l("1"), Value::Val(2), PutRule::ItRule, 3).unwrap();
        assert!(!rt.contains_by(&l("1.0"), 2));
        assert!(rt.contains_by(&l("1.0"), 3));
    }

    #[test]
    fn info_tree_active_and_levels() {
        let mut it = InfoTree::new();
        it.set(NodeLabel::ROOT, Value::Val(1));
        for c in NodeLabel::ROOT.children(4) {
            it.set(c, Value::Val(1));
        }
        assert_eq!(it.level(1).len(), 4);
        it.close(l("2"));
        assert!(!it.is_active(&l("2.1")));
        assert!(it.is_active(&l("1.2")));
    }

    #[test]
    fn value_serde_round_trip() {
        for v in [Value::Val(0), Value::Val(9), Value::Bottom, Value::Bad] {
            let s = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Value>(&s).unwrap(), v);
        }
        assert!(Value::Val(u32::MAX) < Value::Bottom);
        assert_eq!(Value::Bad.external(), Value::Bottom);
    }

    fn arb_label(n: u8, max_len: usize) -> impl Strategy<Value = NodeLabel> {
        Just((0..n).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_flat_map(move |ids| (0..=max_len).prop_map(move |k| NodeLabel::new(&ids[..k], 15).unwrap()))
    }

    proptest! {
        #[test]
        fn children_count_and_parent(label in arb_label(9, 6)) {
            let cs = children(&label, 9);
            prop_assert_eq!(cs.len(), 9 - label.len());
            for c in &cs {
                prop_assert_eq!(c.parent(), Some(label));
                prop_assert!(label.is_prefix_of(c));
            }
            prop_assert!(cs.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn label_text_round_trip(label in arb_label(12, 8)) {
            prop_assert_eq!(label.to_string().parse::<NodeLabel>().unwrap(), label);
        }

        #[test]
        fn coloring_coherent(puts in proptest::collection::vec((arb_label(6, 3), 0u32..3), 0..12),
                             probe in arb_label(6, 4)) {
            let mut rt = ResolveTree::new();
            for (i, (lab, v)) in puts.iter().enumerate() {
                let _ = rt.assign(*lab, Value::Val(*v), PutRule::ItRule, i as u32);
            }
            if let Some(view) = rt.lookup(&probe) {
                match view.provenance {
                    Provenance::Colored(a) => {
                        prop_assert!(a.is_prefix_of(&probe) && a != probe);
                        prop_assert_eq!(rt.put(&a).unwrap().value, view.value);
                        for k in 0..a.len() {
                            prop_assert!(rt.put(&probe.prefix(k)).is_none());
                        }
                    }
                    Provenance::Put(_) => {
                        prop_assert!(rt.put(&probe).is_some());
                        prop_assert!((0..probe.len()).all(|k| rt.put(&probe.prefix(k)).is_none()));
                    }
                }
            }
        }
    }
}
