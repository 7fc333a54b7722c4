//! Synthetic languages and datasets.
//!
//! All languages share one base grammar: a first-order Markov chain over the
//! base content range `2..2+B`, where `B = (vocab − 2) / 2`. A language is a
//! bijection over the content ids `2..vocab`; text in that language is base
//! text pushed through its permutation. Related languages agree on a chosen
//! fraction of the base range.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::model::FIRST_CONTENT;
use crate::ckpt;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

const GRAMMAR_SEED: u64 = 0x5EED_0F_BA5E;
const SUCCESSORS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

pub const UNLABELED_LEN: usize = 24;
pub const DOCUMENT_LEN: usize = 12;
pub const SUMMARY_LEN: usize = 4;

pub fn base_range_len(vocab_size: usize) -> usize {
    (vocab_size - FIRST_CONTENT as usize) / 2
}

/// Markov chain shared by every synthetic language of a vocabulary size.
#[derive(Debug, Clone)]
struct BaseGrammar {
    successors: Vec<[u32; 4]>,
}

impl BaseGrammar {
    fn new(vocab_size: usize) -> Self {
        let b = base_range_len(vocab_size);
        let mut rng = SplitMix64::new(GRAMMAR_SEED);
        let successors = (0..b)
            .map(|_| {
                let mut ids: Vec<u32> = (0..b as u32).collect();
                rng.shuffle(&mut ids);
                [ids[0], ids[1], ids[2], ids[3]].map(|i| i + FIRST_CONTENT)
            })
            .collect();
        Self { successors }
    }

    fn sample(&self, len: usize, rng: &mut SplitMix64) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = FIRST_CONTENT + rng.below(self.successors.len()) as u32;
        out.push(cur);
        while out.len() < len {
            let u = rng.next_open01();
            let mut acc = 0.0;
            let next = &self.successors[(cur - FIRST_CONTENT) as usize];
            cur = next[3];
            for (i, p) in SUCCESSORS.iter().enumerate() {
                acc += p;
                if u < acc {
                    cur = next[i];
                    break;
                }
            }
            out.push(cur);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticLanguage {
    pub code: String,
    /// `permutation[id]` is the surface id of base id `id`; reserved ids map to themselves.
    permutation: Vec<u32>,
    /// Seed of the family root this language descends from.
    pub family_seed: u64,
}

impl SyntheticLanguage {
    pub fn identity(code: &str, vocab_size: usize) -> Self {
        Self {
            code: code.into(),
            permutation: (0..vocab_size as u32).collect(),
            family_seed: 0,
        }
    }

    /// A family root: a uniformly random permutation of the content ids.
    pub fn root(code: &str, vocab_size: usize, family_seed: u64) -> Self {
        let mut content: Vec<u32> = (FIRST_CONTENT..vocab_size as u32).collect();
        SplitMix64::derive(family_seed, 0x1A46).shuffle(&mut content);
        let mut permutation: Vec<u32> = (0..FIRST_CONTENT).collect();
        permutation.extend(content);
        Self {
            code: code.into(),
            permutation,
            family_seed,
        }
    }

    /// A relative of `parent` agreeing with it on `round(shared · B)` base ids.
    /// The remaining base ids move to surface ids the parent does not use for
    /// base text where possible.
    pub fn related(code: &str, parent: &SyntheticLanguage, shared: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&shared) {
            return Err(Error::InvalidArgument(format!("shared fraction {shared} outside [0, 1]")));
        }
        let vocab = parent.permutation.len();
        let first = FIRST_CONTENT as usize;
        let b = base_range_len(vocab);
        let mut rng = SplitMix64::derive(seed, 0x2E1A);
        let mut base_ids: Vec<usize> = (first..first + b).collect();
        rng.shuffle(&mut base_ids);
        let n_keep = (shared * b as f64).round() as usize;
        let (keep, moved) = base_ids.split_at(n_keep);

        let mut permutation = vec![u32::MAX; vocab];
        permutation[..first].copy_from_slice(&parent.permutation[..first]);
        let mut used = vec![false; vocab];
        for &x in keep {
            permutation[x] = parent.permutation[x];
            used[parent.permutation[x] as usize] = true;
        }
        let parent_base: Vec<bool> = {
            let mut v = vec![false; vocab];
            for x in first..first + b {
                v[parent.permutation[x] as usize] = true;
            }
            v
        };
        let mut novel: Vec<u32> = (first..vocab).filter(|&y| !used[y] && !parent_base[y]).map(|y| y as u32).collect();
        let mut recycled: Vec<u32> = (first..vocab).filter(|&y| !used[y] && parent_base[y]).map(|y| y as u32).collect();
        rng.shuffle(&mut novel);
        rng.shuffle(&mut recycled);
        // Moved base ids take novel surface ids first; a moved id never keeps
        // its parent's image.
        let mut pool: Vec<u32> = novel.into_iter().chain(recycled).collect();
        for &x in moved {
            let pos = pool
                .iter()
                .position(|&y| y != parent.permutation[x])
                .unwrap_or(0);
            permutation[x] = pool.remove(pos);
        }
        for slot in permutation.iter_mut().skip(first + b) {
            *slot = pool.remove(0);
        }
        Ok(Self {
            code: code.into(),
            permutation,
            family_seed: parent.family_seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.permutation.len()
    }

    pub fn permutation(&self) -> &[u32] {
        &self.permutation
    }

    pub fn map(&self, base_id: u32) -> u32 {
        self.permutation[base_id as usize]
    }

    /// Membership mask of the surface ids this language uses for base text.
    pub fn base_image(&self) -> Vec<bool> {
        let mut mask = vec![false; self.vocab_size()];
        let first = FIRST_CONTENT as usize;
        for x in first..first + base_range_len(self.vocab_size()) {
            mask[self.permutation[x] as usize] = true;
        }
        mask
    }

    /// Fraction of base ids on which the two languages agree.
    pub fn shared_fraction(&self, other: &SyntheticLanguage) -> f64 {
        let first = FIRST_CONTENT as usize;
        let b = base_range_len(self.vocab_size());
        let same = (first..first + b)
            .filter(|&x| other.permutation.get(x) == Some(&self.permutation[x]))
            .count();
        same as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Unlabeled,
    Task,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Unlabeled => "unlabeled",
            DatasetKind::Task => "task",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unlabeled" => Ok(DatasetKind::Unlabeled),
            "task" => Ok(DatasetKind::Task),
            _ => Err(Error::InvalidArgument(format!("unknown dataset kind {s:?}"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Example {
    Text(Vec<u32>),
    Task { document: Vec<u32>, summary: Vec<u32> },
}

impl Example {
    /// The sequence the model sees and the first position whose token is
    /// scored. Task examples are `document SEP summary`.
    pub fn sequence(&self) -> (Vec<u32>, usize) {
        match self {
            Example::Text(t) => (t.clone(), 1),
            Example::Task { document, summary } => {
                let mut s = document.clone();
                s.push(super::model::SEP);
                let from = s.len();
                s.extend_from_slice(summary);
                (s, from)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    kind: DatasetKind,
    examples: Vec<Example>,
}

fn ids_text(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<u32>> {
    s.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Parse(format!("line {line}: bad token id {t:?}")))
        })
        .collect()
}

impl Dataset {
    pub fn new(kind: DatasetKind, examples: Vec<Example>) -> Result<Self> {
        let ok = examples.iter().all(|e| {
            matches!(
                (kind, e),
                (DatasetKind::Unlabeled, Example::Text(_)) | (DatasetKind::Task, Example::Task { .. })
            )
        });
        if !ok {
            return Err(Error::InvalidArgument(format!("{kind} dataset holds examples of another kind")));
        }
        Ok(Self { kind, examples })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            match e {
                Example::Text(t) => out.push_str(&ids_text(t)),
                Example::Task { document, summary } => {
                    out.push_str(&ids_text(document));
                    out.push('\t');
                    out.push_str(&ids_text(summary));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses the line format. The kind follows from the first line: a tab
    /// makes it a task file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let this = if line.contains('\t') { DatasetKind::Task } else { DatasetKind::Unlabeled };
            if *kind.get_or_insert(this) != this {
                return Err(Error::Parse(format!("line {n}: mixes task and unlabeled examples")));
            }
            examples.push(match line.split_once('\t') {
                Some((doc, summary)) => {
                    if summary.contains('\t') {
                        return Err(Error::Parse(format!("line {n}: more than one tab")));
                    }
                    Example::Task {
                        document: parse_ids(doc, n)?,
                        summary: parse_ids(summary, n)?,
                    }
                }
                None => Example::Text(parse_ids(line, n)?),
            });
        }
        let kind = kind.ok_or_else(|| Error::Parse("dataset is empty".into()))?;
        Self::new(kind, examples)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ckpt::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn fingerprint(&self) -> String {
        ckpt::fingerprint(self.to_text().as_bytes())
    }

    /// Splits off the first `n` examples.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.examples.len());
        (
            Dataset {
                kind: self.kind,
                examples: self.examples[..n].to_vec(),
            },
            Dataset {
                kind: self.kind,
                examples: self.examples[n..].to_vec(),
            },
        )
    }
}

pub fn generate_corpus(language: &SyntheticLanguage, kind: DatasetKind, n_examples: usize, seed: u64) -> Result<Dataset> {
    if n_examples == 0 {
        return Err(Error::InvalidArgument("n_examples must be positive".into()));
    }
    let grammar = BaseGrammar::new(language.vocab_size());
    let mut rng = SplitMix64::derive(seed, 0xC0_4B05);
    let surface = |ids: Vec<u32>| ids.into_iter().map(|x| language.map(x)).collect::<Vec<_>>();
    let examples = (0..n_examples)
        .map(|_| match kind {
            DatasetKind::Unlabeled => Example::Text(surface(grammar.sample(UNLABELED_LEN, &mut rng))),
            DatasetKind::Task => {
                let document = surface(grammar.sample(DOCUMENT_LEN, &mut rng));
                let summary = document[..SUMMARY_LEN].to_vec();
                Example::Task { document, summary }
            }
        })
        .collect();
    Dataset::new(kind, examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_bijection(l: &SyntheticLanguage) -> bool {
        let mut seen = vec![false; l.vocab_size()];
        for &y in l.permutation() {
            if seen[y as usize] {
                return false;
            }
            seen[y as usize] = true;
        }
        l.permutation()[..2] == [0, 1]
    }

    #[test]
    fn identity_leaves_grammar_text_unchanged() {
        let id = SyntheticLanguage::identity("id", 64);
        let d = generate_corpus(&id, DatasetKind::Unlabeled, 1, 4).unwrap();
        let grammar = BaseGrammar::new(64);
        let expected = grammar.sample(UNLABELED_LEN, &mut SplitMix64::derive(4, 0xC0_4B05));
        assert_eq!(d.examples()[0], Example::Text(expected));
    }

    #[test]
    fn generation_is_deterministic() {
        let l = SyntheticLanguage::root("a", 64, 3);
        for kind in [DatasetKind::Unlabeled, DatasetKind::Task] {
            assert_eq!(generate_corpus(&l, kind, 10, 8).unwrap(), generate_corpus(&l, kind, 10, 8).unwrap());
        }
    }

    #[test]
    fn summary_is_document_prefix() {
        let l = SyntheticLanguage::root("a", 64, 3);
        let d = generate_corpus(&l, DatasetKind::Task, 5, 1).unwrap();
        for e in d.examples() {
            let Example::Task { document, summary } = e else { panic!() };
            assert_eq!(document.len(), DOCUMENT_LEN);
            assert_eq!(summary[..], document[..SUMMARY_LEN]);
        }
    }

    #[test]
    fn related_shares_requested_fraction() {
        let root = SyntheticLanguage::root("t", 64, 11);
        assert!(is_bijection(&root));
        for (i, &f) in [0.0, 0.3, 0.6, 1.0].iter().enumerate() {
            let r = SyntheticLanguage::related("r", &root, f, i as u64).unwrap();
            assert!(is_bijection(&r));
            let b = base_range_len(64) as f64;
            assert_eq!(r.shared_fraction(&root), (f * b).round() / b);
        }
        assert!(SyntheticLanguage::related("r", &root, 1.5, 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let l = SyntheticLanguage::root("a", 64, 3);
        for kind in [DatasetKind::Unlabeled, DatasetKind::Task] {
            let d = generate_corpus(&l, kind, 7, 2).unwrap();
            assert_eq!(Dataset::parse(&d.to_text()).unwrap(), d);
        }
        assert!(Dataset::parse("").is_err());
        assert!(Dataset::parse("1 2\n3\t4\n").is_err());
        assert!(Dataset::parse("1 x\n").is_err());
        let empty_summary = Dataset::parse("2 3 4\t\n").unwrap();
        assert_eq!(empty_summary.kind(), DatasetKind::Task);
    }
}
