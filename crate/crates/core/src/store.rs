//! Immutable temporal fact store.
//!
//! Raw datasets hold base relations only. [`augment_relations`] extends the
//! relation space with one inverse per base relation (`r + |R|`) and a single
//! identity relation (`2|R|`). Identity facts are never stored; the digraph
//! builder synthesizes them on demand.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;
/// Snapshot index: raw timestamp divided by the dataset granularity.
pub type Snapshot = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub time: Snapshot,
}

impl Quadruple {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId, time: Snapshot) -> Self {
        Self {
            subject,
            relation,
            object,
            time,
        }
    }
}

impl fmt::Display for Quadruple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.subject, self.relation, self.object, self.time
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Id ↔ name vocabulary. Names are optional; without them ids print as numbers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    len: usize,
    names: Option<Vec<String>>,
}

impl Vocab {
    pub fn anonymous(len: usize) -> Self {
        Self { len, names: None }
    }

    pub fn named(names: Vec<String>) -> Self {
        Self {
            len: names.len(),
            names: Some(names),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn has_names(&self) -> bool {
        self.names.is_some()
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn name(&self, id: u32) -> String {
        match &self.names {
            Some(names) => names
                .get(id as usize)
                .cloned()
                .unwrap_or_else(|| id.to_string()),
            None => id.to_string(),
        }
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.names
            .as_ref()?
            .iter()
            .position(|n| n == name)
            .map(|i| i as u32)
    }
}

/// Augmented relation id layout: base `r`, inverse `r + |R|`, identity `2|R|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationScheme {
    pub num_base: u32,
}

impl RelationScheme {
    pub fn new(num_base: u32) -> Self {
        Self { num_base }
    }

    pub fn num_augmented(&self) -> usize {
        2 * self.num_base as usize + 1
    }

    pub fn identity(&self) -> RelationId {
        2 * self.num_base
    }

    pub fn is_identity(&self, r: RelationId) -> bool {
        r == self.identity()
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        r >= self.num_base && r < 2 * self.num_base
    }

    /// Inverse of a base or inverse relation; the identity is its own inverse.
    pub fn inverse(&self, r: RelationId) -> RelationId {
        if r < self.num_base {
            r + self.num_base
        } else if r < 2 * self.num_base {
            r - self.num_base
        } else {
            r
        }
    }

    pub fn base_of(&self, r: RelationId) -> Option<RelationId> {
        if r < 2 * self.num_base {
            Some(r % self.num_base)
        } else {
            None
        }
    }
}

/// One outgoing edge in the per-entity adjacency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub time: Snapshot,
    pub relation: RelationId,
    pub object: EntityId,
}

/// Per-subject adjacency sorted by time descending, then relation, then object.
#[derive(Clone, Debug, Default)]
pub struct FactIndex {
    adjacency: Vec<Vec<Neighbor>>,
    edges: usize,
}

impl FactIndex {
    fn build<'a>(
        num_entities: usize,
        facts: impl Iterator<Item = &'a Quadruple>,
        scheme: Option<RelationScheme>,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); num_entities];
        let mut edges = 0;
        for q in facts {
            adjacency[q.subject as usize].push(Neighbor {
                time: q.time,
                relation: q.relation,
                object: q.object,
            });
            edges += 1;
            if let Some(scheme) = scheme {
                adjacency[q.object as usize].push(Neighbor {
                    time: q.time,
                    relation: scheme.inverse(q.relation),
                    object: q.subject,
                });
                edges += 1;
            }
        }
        for list in &mut adjacency {
            list.sort_by(|a, b| {
                b.time
                    .cmp(&a.time)
                    .then(a.relation.cmp(&b.relation))
                    .then(a.object.cmp(&b.object))
            });
        }
        Self { adjacency, edges }
    }

    /// Facts of one subject with `lo <= time <= hi`, most recent first.
    pub fn neighbors(&self, entity: EntityId, lo: Snapshot, hi: Snapshot) -> &[Neighbor] {
        let Some(list) = self.adjacency.get(entity as usize) else {
            return &[];
        };
        if lo > hi {
            return &[];
        }
        let start = list.partition_point(|n| n.time > hi);
        let end = list.partition_point(|n| n.time >= lo);
        &list[start..end.max(start)]
    }

    pub fn num_edges(&self) -> usize {
        self.edges
    }
}

/// A loaded temporal knowledge graph with a chronological train/valid/test split.
#[derive(Clone, Debug)]
pub struct TkgDataset {
    entities: Vocab,
    relations: Vocab,
    train: Vec<Quadruple>,
    valid: Vec<Quadruple>,
    test: Vec<Quadruple>,
    granularity: u64,
    augmented: bool,
    /// train ++ valid ++ test, sorted by time.
    facts: Vec<Quadruple>,
    snapshots: Vec<Range<usize>>,
    index: FactIndex,
}

impl TkgDataset {
    /// Builds a dataset from in-memory parts, validating ids and chronology.
    pub fn from_parts(
        entities: Vocab,
        relations: Vocab,
        mut train: Vec<Quadruple>,
        mut valid: Vec<Quadruple>,
        mut test: Vec<Quadruple>,
        granularity: u64,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::MissingData("training split is empty".into()));
        }
        for split in [&train, &valid, &test] {
            for q in split.iter() {
                if q.subject as usize >= entities.len() || q.object as usize >= entities.len() {
                    return Err(Error::OutOfRange {
                        what: "entity id",
                        value: q.subject.max(q.object) as usize,
                        limit: entities.len(),
                    });
                }
                if q.relation as usize >= relations.len() {
                    return Err(Error::OutOfRange {
                        what: "relation id",
                        value: q.relation as usize,
                        limit: relations.len(),
                    });
                }
            }
        }
        for split in [&mut train, &mut valid, &mut test] {
            split.sort_by_key(|q| q.time);
        }
        check_chronology(&train, &valid, &test)?;

        let facts: Vec<Quadruple> = train
            .iter()
            .chain(valid.iter())
            .chain(test.iter())
            .copied()
            .collect();
        let num_snapshots = facts.last().map_or(0, |q| q.time as usize + 1);
        let mut snapshots = vec![0..0; num_snapshots];
        let mut start = 0;
        while start < facts.len() {
            let t = facts[start].time;
            let end = start + facts[start..].partition_point(|q| q.time == t);
            snapshots[t as usize] = start..end;
            start = end;
        }
        let index = FactIndex::build(entities.len(), facts.iter(), None);
        Ok(Self {
            entities,
            relations,
            train,
            valid,
            test,
            granularity: granularity.max(1),
            augmented: false,
            facts,
            snapshots,
            index,
        })
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    /// Base relation vocabulary.
    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn scheme(&self) -> RelationScheme {
        RelationScheme::new(self.relations.len() as u32)
    }

    /// Size of the relation id space currently answered by the store.
    pub fn num_relations(&self) -> usize {
        if self.augmented {
            self.scheme().num_augmented()
        } else {
            self.relations.len()
        }
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn granularity(&self) -> u64 {
        self.granularity
    }

    pub fn split(&self, split: Split) -> &[Quadruple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[Quadruple] {
        &self.train
    }

    pub fn valid(&self) -> &[Quadruple] {
        &self.valid
    }

    pub fn test(&self) -> &[Quadruple] {
        &self.test
    }

    /// Number of snapshot slots (largest time + 1).
    pub fn num_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    /// Base facts observed at snapshot `t` across all splits.
    pub fn snapshot(&self, t: Snapshot) -> &[Quadruple] {
        self.snapshots
            .get(t as usize)
            .map_or(&[][..], |r| &self.facts[r.clone()])
    }

    /// Every base fact, chronologically.
    pub fn all_facts(&self) -> &[Quadruple] {
        &self.facts
    }

    pub fn index(&self) -> &FactIndex {
        &self.index
    }

    /// Human-readable relation name in the augmented space.
    pub fn relation_name(&self, r: RelationId) -> String {
        let scheme = self.scheme();
        if scheme.is_identity(r) {
            "self".to_string()
        } else if scheme.is_inverse(r) {
            format!("{}_reverse", self.relations.name(r - scheme.num_base))
        } else {
            self.relations.name(r)
        }
    }

    pub fn entity_name(&self, e: EntityId) -> String {
        self.entities.name(e)
    }

    /// Stable content hash over vocab sizes and all splits.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.entities.len() as u64).to_le_bytes());
        hasher.update((self.relations.len() as u64).to_le_bytes());
        for (tag, split) in [(0u8, &self.train), (1, &self.valid), (2, &self.test)] {
            hasher.update([tag]);
            for q in split.iter() {
                for v in [q.subject, q.relation, q.object, q.time] {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Facts of the first `n` snapshots, re-split 80/10/10 by snapshot.
    pub fn head_snapshots(&self, n: usize) -> Result<Self> {
        let n = n.min(self.num_snapshots());
        let train_end = (n * 8 / 10) as Snapshot;
        let valid_end = (n * 9 / 10) as Snapshot;
        let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for q in self.facts.iter().filter(|q| (q.time as usize) < n) {
            if q.time < train_end {
                train.push(*q);
            } else if q.time < valid_end {
                valid.push(*q);
            } else {
                test.push(*q);
            }
        }
        let ds = Self::from_parts(
            self.entities.clone(),
            self.relations.clone(),
            train,
            valid,
            test,
            self.granularity,
        )?;
        if self.augmented {
            augment_relations(ds)
        } else {
            Ok(ds)
        }
    }

    /// Facts whose subject is in `entities` and whose time lies in `[lo, hi]`.
    ///
    /// Ordered by time descending, then relation, then object, then subject.
    pub fn facts_from(&self, entities: &[EntityId], lo: Snapshot, hi: Snapshot) -> Vec<Quadruple> {
        let mut out: Vec<Quadruple> = entities
            .iter()
            .flat_map(|&e| {
                self.index
                    .neighbors(e, lo, hi)
                    .iter()
                    .map(move |n| Quadruple::new(e, n.relation, n.object, n.time))
            })
            .collect();
        out.sort_by(|a, b| {
            b.time
                .cmp(&a.time)
                .then(a.relation.cmp(&b.relation))
                .then(a.object.cmp(&b.object))
                .then(a.subject.cmp(&b.subject))
        });
        out
    }

    /// Maps every `(subject, relation, time)` to the objects true at that time,
    /// over all splits and (when augmented) inverse facts.
    pub fn answers_by_query(&self) -> HashMap<(EntityId, RelationId, Snapshot), Vec<EntityId>> {
        let scheme = self.scheme();
        let mut map: HashMap<_, Vec<EntityId>> = HashMap::new();
        for q in &self.facts {
            map.entry((q.subject, q.relation, q.time))
                .or_default()
                .push(q.object);
            if self.augmented {
                map.entry((q.object, scheme.inverse(q.relation), q.time))
                    .or_default()
                    .push(q.subject);
            }
        }
        for v in map.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        map
    }
}

fn check_chronology(train: &[Quadruple], valid: &[Quadruple], test: &[Quadruple]) -> Result<()> {
    let span = |s: &[Quadruple]| s.first().map(|f| (f.time, s.last().unwrap().time));
    let spans: Vec<(&str, (Snapshot, Snapshot))> = [("train", train), ("valid", valid), ("test", test)]
        .into_iter()
        .filter_map(|(n, s)| span(s).map(|sp| (n, sp)))
        .collect();
    for pair in spans.windows(2) {
        let (a, (_, a_max)) = pair[0];
        let (b, (b_min, _)) = pair[1];
        if a_max >= b_min {
            return Err(Error::InvalidSplit(format!(
                "{a} ends at snapshot {a_max} but {b} starts at snapshot {b_min}"
            )));
        }
    }
    Ok(())
}

/// Adds inverse facts to the store and extends the relation space to `2|R|+1`.
pub fn augment_relations(mut ds: TkgDataset) -> Result<TkgDataset> {
    if ds.augmented {
        return Err(Error::AlreadyAugmented);
    }
    let scheme = ds.scheme();
    ds.index = FactIndex::build(ds.entities.len(), ds.facts.iter(), Some(scheme));
    ds.augmented = true;
    Ok(ds)
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Raw time units per snapshot. Inferred as the gcd of raw times when absent.
    pub granularity: Option<u64>,
}

/// Loads `train.txt`, `valid.txt`, `test.txt` and `stat.txt` from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<TkgDataset> {
    load_dataset_with(dir, &LoadOptions::default())
}

pub fn load_dataset_with(dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<TkgDataset> {
    let dir = dir.as_ref();
    let (num_entities, num_relations) = read_stat(&dir.join("stat.txt"))?;
    let mut raw = Vec::with_capacity(3);
    for name in ["train.txt", "valid.txt", "test.txt"] {
        raw.push(read_quadruples(&dir.join(name), num_entities, num_relations)?);
    }
    if raw[0].is_empty() {
        return Err(Error::MissingData(format!(
            "{} has no quadruples",
            dir.join("train.txt").display()
        )));
    }
    let granularity = match opts.granularity {
        Some(g) if g > 0 => g,
        Some(_) => return Err(Error::Config("granularity must be positive".into())),
        None => infer_granularity(raw.iter().flatten().map(|(_, t)| *t)),
    };
    let mut splits = raw.into_iter().map(|split| {
        split
            .into_iter()
            .map(|((s, r, o), t)| Quadruple::new(s, r, o, (t / granularity) as Snapshot))
            .collect::<Vec<_>>()
    });
    let (train, valid, test) = (
        splits.next().unwrap(),
        splits.next().unwrap(),
        splits.next().unwrap(),
    );
    let entities = read_names(&dir.join("entity2id.txt"), num_entities)?;
    let relations = read_names(&dir.join("relation2id.txt"), num_relations)?;
    TkgDataset::from_parts(entities, relations, train, valid, test, granularity)
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingData(format!("{} not found", path.display())),
        _ => Error::Io(e),
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        message: message.into(),
    }
}

fn read_stat(path: &Path) -> Result<(usize, usize)> {
    let text = read_file(path)?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::MissingData(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = line.split_whitespace().collect();
    if cols.len() < 2 {
        return Err(parse_err(path, 1, "expected `num_entities num_relations`"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| parse_err(path, 1, format!("`{s}`: {e}")))
    };
    Ok((parse(cols[0])?, parse(cols[1])?))
}

type RawFact = ((EntityId, RelationId, EntityId), u64);

fn read_quadruples(path: &Path, num_entities: usize, num_relations: usize) -> Result<Vec<RawFact>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 4 {
            return Err(parse_err(path, lineno, "expected `subject relation object time`"));
        }
        let mut vals = [0u64; 4];
        for (v, c) in vals.iter_mut().zip(&cols[..4]) {
            *v = c
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("`{c}`: {e}")))?;
        }
        let [s, r, o, t] = vals;
        if s as usize >= num_entities || o as usize >= num_entities {
            return Err(parse_err(
                path,
                lineno,
                format!("entity id out of range (|E| = {num_entities})"),
            ));
        }
        if r as usize >= num_relations {
            return Err(parse_err(
                path,
                lineno,
                format!("relation id {r} out of range (|R| = {num_relations})"),
            ));
        }
        out.push(((s as EntityId, r as RelationId, o as EntityId), t));
    }
    Ok(out)
}

fn read_names(path: &Path, len: usize) -> Result<Vocab> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vocab::anonymous(len)),
        Err(e) => return Err(e.into()),
    };
    let mut names: Vec<Option<String>> = vec![None; len];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        // `name<TAB>id`; fall back to the last whitespace token as id.
        let (name, id) = match line.rsplit_once('\t') {
            Some((n, id)) => (n.trim(), id.trim()),
            None => line
                .trim()
                .rsplit_once(char::is_whitespace)
                .map(|(n, id)| (n.trim(), id.trim()))
                .ok_or_else(|| parse_err(path, i + 1, "expected `name<TAB>id`"))?,
        };
        let id: usize = id
            .parse()
            .map_err(|e| parse_err(path, i + 1, format!("`{id}`: {e}")))?;
        if id >= len {
            return Err(parse_err(path, i + 1, format!("id {id} out of range ({len})")));
        }
        names[id] = Some(name.to_string());
    }
    Ok(Vocab::named(
        names
            .into_iter()
            .enumerate()
            .map(|(i, n)| n.unwrap_or_else(|| i.to_string()))
            .collect(),
    ))
}

fn infer_granularity(times: impl Iterator<Item = u64>) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    match times.fold(0, gcd) {
        0 => 1,
        g => g,
    }
}
