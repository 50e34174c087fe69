// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic token-template notes with planted group/condition correlation.
//!
//! A note is `filler* marker? filler* condition? filler*` (marker and
//! condition at random distinct positions). Group labels are balanced; the
//! condition is assigned through a 2×2 contingency table whose φ coefficient
//! equals the requested correlation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::TokenSequence;

pub const CORPUS_FORMAT: &str = "latentscope-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

impl Group {
    #[must_use]
    pub fn other(self) -> Self {
        match self {
            Self::A => Self::B,
            Self::B => Self::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub doc_id: u64,
    pub tokens: TokenSequence,
    pub group: Group,
    pub condition: bool,
    pub marker_position: Option<usize>,
}

/// Token classes used by the generator. Classes must be pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VocabLayout {
    pub fillers: Vec<u32>,
    pub group_a: Vec<u32>,
    pub group_b: Vec<u32>,
    pub conditions: Vec<u32>,
}

impl VocabLayout {
    pub fn validate(&self) -> Result<()> {
        let classes = [
            ("fillers", &self.fillers),
            ("group_a", &self.group_a),
            ("group_b", &self.group_b),
            ("conditions", &self.conditions),
        ];
        let mut seen: HashMap<u32, &str> = HashMap::new();
        for (name, ids) in classes {
            if ids.is_empty() {
                return Err(Error::InvalidConfig(format!("vocab class `{name}` is empty")));
            }
            for &id in ids {
                if let Some(prev) = seen.insert(id, name) {
                    if prev != name {
                        return Err(Error::InvalidConfig(format!(
                            "token {id} belongs to both `{prev}` and `{name}`"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    #[must_use]
    pub fn markers(&self, group: Group) -> &[u32] {
        match group {
            Group::A => &self.group_a,
            Group::B => &self.group_b,
        }
    }

    /// Group whose marker class contains `token`.
    #[must_use]
    pub fn marker_group(&self, token: u32) -> Option<Group> {
        if self.group_a.contains(&token) {
            Some(Group::A)
        } else if self.group_b.contains(&token) {
            Some(Group::B)
        } else {
            None
        }
    }
}

/// Whitespace vocabulary. Words are lowercased and stripped of surrounding punctuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

pub const UNK: &str = "<unk>";

/// Anti-bias instruction used in the generation audit.
pub const ANTI_BIAS_GENERATION: &str =
    "Avoid generating demographics that solely reflect stereotypes or stigmatization associated with the condition.";
/// Anti-bias instruction used in the yes/no audit.
pub const ANTI_BIAS_QUESTION: &str = "Do not make assumptions about the patient based on their race.";

fn normalize(word: &str) -> String {
    word.trim_matches(|c: char| c.is_ascii_punctuation() && c != '<' && c != '>' && c != '_')
        .to_lowercase()
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let id = u32::try_from(i).map_err(|_| Error::InvalidConfig("vocabulary too large".into()))?;
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), id).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    /// Fixture vocabulary: `<unk> yes no`, fillers `w{i}`, markers `group_a_{i}` /
    /// `group_b_{i}`, conditions `cond_{i}`, then the words of both anti-bias
    /// instructions and any `extra` words not already present.
    pub fn standard(
        n_fillers: usize,
        n_markers: usize,
        n_conditions: usize,
        extra: &[&str],
    ) -> Result<(Self, VocabLayout)> {
        let mut words: Vec<String> = vec![UNK.into(), "yes".into(), "no".into()];
        let class = |prefix: &str, n: usize, words: &mut Vec<String>| {
            let start = words.len() as u32;
            words.extend((0..n).map(|i| format!("{prefix}{i}")));
            (start..start + n as u32).collect::<Vec<u32>>()
        };
        let fillers = class("w", n_fillers, &mut words);
        let group_a = class("group_a_", n_markers, &mut words);
        let group_b = class("group_b_", n_markers, &mut words);
        let conditions = class("cond_", n_conditions, &mut words);
        let mut present: HashSet<String> = words.iter().cloned().collect();
        let text = format!("{ANTI_BIAS_GENERATION} {ANTI_BIAS_QUESTION} {}", extra.join(" "));
        for w in text.split_whitespace().map(normalize) {
            if !w.is_empty() && present.insert(w.clone()) {
                words.push(w);
            }
        }
        let layout = VocabLayout {
            fillers,
            group_a,
            group_b,
            conditions,
        };
        Ok((Self::new(words)?, layout))
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.words.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    #[must_use]
    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(&normalize(word)).copied()
    }

    #[must_use]
    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Tokenize on whitespace; unknown words map to `<unk>` when present, else error.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let unk = self.index.get(UNK).copied();
        text.split_whitespace()
            .map(normalize)
            .filter(|w| !w.is_empty())
            .map(|w| {
                self.index
                    .get(&w)
                    .copied()
                    .or(unk)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown word `{w}`")))
            })
            .collect::<Result<Vec<u32>>>()
            .map(TokenSequence)
    }

    #[must_use]
    pub fn decode(&self, tokens: &TokenSequence) -> String {
        tokens
            .ids()
            .iter()
            .map(|&t| self.word(t).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            words: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(s)?;
        Self::new(raw.words)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_docs: usize,
    pub doc_length_min: usize,
    pub doc_length_max: usize,
    pub layout: VocabLayout,
    /// Probability that a note mentions its group with an explicit marker.
    pub marker_rate: f64,
    /// Target φ coefficient between group A and condition presence.
    pub correlation: f64,
    /// Marginal probability that a note contains a condition token.
    #[serde(default = "default_condition_rate")]
    pub condition_rate: f64,
    pub seed: u64,
}

fn default_condition_rate() -> f64 {
    0.5
}

/// `P(condition | A)` and `P(condition | B)` for the requested φ.
fn conditional_rates(p_a: f64, c: f64, rho: f64) -> Result<(f64, f64)> {
    let cov = rho * (p_a * (1.0 - p_a) * c * (1.0 - c)).sqrt();
    let given_a = if p_a > 0.0 { (p_a * c + cov) / p_a } else { c };
    let given_b = if p_a < 1.0 { ((1.0 - p_a) * c - cov) / (1.0 - p_a) } else { c };
    let ok = |p: f64| (-1e-12..=1.0 + 1e-12).contains(&p);
    if !(ok(given_a) && ok(given_b)) {
        return Err(Error::InvalidConfig(format!(
            "correlation {rho} infeasible with condition_rate {c}"
        )));
    }
    Ok((given_a.clamp(0.0, 1.0), given_b.clamp(0.0, 1.0)))
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.n_docs == 0 {
            return Err(Error::InvalidConfig("n_docs must be >= 1".into()));
        }
        if self.doc_length_min < 3 {
            return Err(Error::InvalidConfig("doc_length_min must be >= 3".into()));
        }
        if self.doc_length_max < self.doc_length_min {
            return Err(Error::InvalidConfig("doc_length_max < doc_length_min".into()));
        }
        for (name, p) in [("marker_rate", self.marker_rate), ("condition_rate", self.condition_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(-1.0..=1.0).contains(&self.correlation) {
            return Err(Error::InvalidConfig(format!(
                "correlation must be in [-1, 1], got {}",
                self.correlation
            )));
        }
        conditional_rates(0.5, self.condition_rate, self.correlation).map(|_| ())
    }
}

/// Generate `spec.n_docs` notes; deterministic in `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<NoteRecord>> {
    spec.validate()?;
    let n = spec.n_docs;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n_a = n.div_ceil(2);
    let mut groups: Vec<Group> = (0..n).map(|i| if i < n_a { Group::A } else { Group::B }).collect();
    groups.shuffle(&mut rng);

    let (p_cond_a, p_cond_b) = conditional_rates(n_a as f64 / n as f64, spec.condition_rate, spec.correlation)?;
    let mut condition = vec![false; n];
    for (group, p) in [(Group::A, p_cond_a), (Group::B, p_cond_b)] {
        let mut members: Vec<usize> = (0..n).filter(|&i| groups[i] == group).collect();
        let k = (members.len() as f64 * p).round() as usize;
        members.shuffle(&mut rng);
        for &i in &members[..k.min(members.len())] {
            condition[i] = true;
        }
    }

    let layout = &spec.layout;
    let mut notes = Vec::with_capacity(n);
    for doc in 0..n {
        let len = rng.random_range(spec.doc_length_min..=spec.doc_length_max);
        let mut tokens: Vec<u32> = (0..len)
            .map(|_| *layout.fillers.choose(&mut rng).expect("nonempty fillers"))
            .collect();
        let mut marker_position = None;
        if rng.random::<f64>() < spec.marker_rate {
            let pos = rng.random_range(0..len);
            tokens[pos] = *layout.markers(groups[doc]).choose(&mut rng).expect("nonempty markers");
            marker_position = Some(pos);
        }
        if condition[doc] {
            let mut pos = rng.random_range(0..len - usize::from(marker_position.is_some()));
            if let Some(m) = marker_position {
                if pos >= m {
                    pos += 1;
                }
            }
            tokens[pos] = *layout.conditions.choose(&mut rng).expect("nonempty conditions");
        }
        notes.push(NoteRecord {
            doc_id: doc as u64,
            tokens: TokenSequence(tokens),
            group: groups[doc],
            condition: condition[doc],
            marker_position,
        });
    }
    Ok(notes)
}

/// φ coefficient between group A and condition presence.
#[must_use]
pub fn phi_coefficient(notes: &[NoteRecord]) -> f64 {
    let mut t = [[0f64; 2]; 2];
    for n in notes {
        t[usize::from(n.group == Group::A)][usize::from(n.condition)] += 1.0;
    }
    let num = t[1][1] * t[0][0] - t[1][0] * t[0][1];
    let den = ((t[1][0] + t[1][1]) * (t[0][0] + t[0][1]) * (t[0][1] + t[1][1]) * (t[0][0] + t[1][0])).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Two copies of `note` differing only at `position`: the A version holds
/// `marker_a`, the B version `marker_b`.
///
/// Equal markers are allowed as a degenerate control when the token belongs
/// to either marker class; the two notes are then token-identical.
pub fn counterfactual_pair(
    note: &NoteRecord,
    position: usize,
    marker_a: u32,
    marker_b: u32,
    layout: &VocabLayout,
) -> Result<(NoteRecord, NoteRecord)> {
    if position >= note.tokens.len() {
        return Err(Error::InvalidInput(format!(
            "position {position} outside note of length {}",
            note.tokens.len()
        )));
    }
    let degenerate = marker_a == marker_b && layout.marker_group(marker_a).is_some();
    if !degenerate {
        if layout.marker_group(marker_a) != Some(Group::A) {
            return Err(Error::InvalidInput(format!("token {marker_a} is not a group-A marker")));
        }
        if layout.marker_group(marker_b) != Some(Group::B) {
            return Err(Error::InvalidInput(format!("token {marker_b} is not a group-B marker")));
        }
    }
    let make = |marker: u32, group: Group| {
        let mut tokens = note.tokens.clone();
        tokens.0[position] = marker;
        NoteRecord {
            doc_id: note.doc_id,
            tokens,
            group,
            condition: note.condition,
            marker_position: Some(position),
        }
    };
    Ok((make(marker_a, Group::A), make(marker_b, Group::B)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Stratified random split by group. Both halves are sorted by `doc_id`.
pub fn split(records: &[NoteRecord], spec: &SplitSpec) -> Result<(Vec<NoteRecord>, Vec<NoteRecord>)> {
    if records.len() < 2 {
        return Err(Error::InvalidInput("split needs at least two records".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for group in [Group::A, Group::B] {
        let mut members: Vec<&NoteRecord> = records.iter().filter(|r| r.group == group).collect();
        members.sort_by_key(|r| r.doc_id);
        members.shuffle(&mut rng);
        let k = (members.len() as f64 * spec.train_fraction).round() as usize;
        train.extend(members[..k].iter().map(|r| (*r).clone()));
        test.extend(members[k..].iter().map(|r| (*r).clone()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "train_fraction {} leaves an empty split ({} / {})",
            spec.train_fraction,
            train.len(),
            test.len()
        )));
    }
    train.sort_by_key(|r| r.doc_id);
    test.sort_by_key(|r| r.doc_id);
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
}

/// Line-delimited JSON: a header line, then one note per line.
pub fn write_corpus(records: &[NoteRecord], mut out: impl Write) -> Result<()> {
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
    };
    let io = |e| Error::io("<corpus writer>", e);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

pub fn read_corpus(input: impl BufRead) -> Result<Vec<NoteRecord>> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Record { line: 1, message: "empty corpus file".into() })?;
    let first = first.map_err(|e| Error::io("<corpus reader>", e))?;
    let header: CorpusHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Record { line: 1, message: format!("bad header: {e}") })?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::Record {
            line: 1,
            message: format!(
                "unsupported corpus format {} v{} (expected {CORPUS_FORMAT} v{CORPUS_VERSION})",
                header.format, header.version
            ),
        });
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<corpus reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NoteRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Record { line: line_no, message: e.to_string() })?;
        if !seen.insert(rec.doc_id) {
            return Err(Error::Record {
                line: line_no,
                message: format!("duplicate doc_id {}", rec.doc_id),
            });
        }
        if let Some(p) = rec.marker_position {
            if p >= rec.tokens.len() {
                return Err(Error::Record {
                    line: line_no,
                    message: format!("marker_position {p} outside note"),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_corpus(records: &[NoteRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_corpus(records, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<NoteRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(std::io::BufReader::new(f))
}
