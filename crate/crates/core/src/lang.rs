//! Related-language selection from typological distances.
//!
//! Distances come from a comma-separated table with one row per ordered
//! language pair:
//!
//! ```text
//! src,dst,syntactic,geographic
//! gu,bn,0.461538,0.011765
//! ```
//!
//! A source language is related to a target when both its syntactic and its
//! geographic distance fall strictly below the rule's thresholds (0.7 and 0.3
//! by default). Selections are ordered by (syntactic, geographic, code).

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Source languages with labeled task data.
pub const XLSUM_SEEN: [&str; 11] = ["ar", "bn", "en", "id", "ja", "ko", "ru", "sw", "te", "th", "tr"];
/// Evaluation languages without task data.
pub const XLSUM_UNSEEN: [&str; 11] = ["mr", "gu", "zh", "ne", "pt", "si", "so", "vi", "yo", "uk", "fa"];

const PACKAGED_TABLE: &str = include_str!("../data/lang_distances.csv");
pub const TABLE_HEADER: &str = "src,dst,syntactic,geographic";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distance {
    pub syntactic: f64,
    pub geographic: f64,
}

/// One language's distance rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageProfile {
    pub code: String,
    pub syntactic_distance: BTreeMap<String, f64>,
    pub geographic_distance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistanceTable {
    pairs: BTreeMap<(String, String), Distance>,
}

fn normalize(code: &str) -> String {
    code.trim().to_ascii_lowercase()
}

fn parse_unit(raw: &str, line_no: usize) -> Result<f64> {
    let bad = |why: &str| Error::Parse(format!("line {line_no}: {why}: {raw:?}"));
    if raw.split_once('.').is_some_and(|(_, frac)| frac.len() > 6) {
        return Err(bad("more than 6 decimal places"));
    }
    let v: f64 = raw.parse().map_err(|_| bad("not a number"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(bad("distance outside [0, 1]"));
    }
    Ok(v)
}

fn format_unit(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0');
    let s = s.strip_suffix('.').unwrap_or(s);
    s.to_string()
}

impl DistanceTable {
    /// The table shipped with the crate, covering the 22 summarization languages.
    pub fn packaged() -> Self {
        Self::parse_csv(PACKAGED_TABLE).expect("packaged distance table is valid")
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, header)) if header.trim() == TABLE_HEADER => {}
            _ => return Err(Error::Parse(format!("distance table must start with header {TABLE_HEADER:?}"))),
        }
        let mut table = DistanceTable::default();
        for (i, line) in lines {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [src, dst, syn, geo] = fields.as_slice() else {
                return Err(Error::Parse(format!("line {line_no}: expected 4 fields, got {}", fields.len())));
            };
            let (src, dst) = (normalize(src), normalize(dst));
            if src.is_empty() || dst.is_empty() {
                return Err(Error::Parse(format!("line {line_no}: empty language code")));
            }
            let d = Distance {
                syntactic: parse_unit(syn, line_no)?,
                geographic: parse_unit(geo, line_no)?,
            };
            if src == dst && (d.syntactic != 0.0 || d.geographic != 0.0) {
                return Err(Error::Parse(format!("line {line_no}: nonzero self-distance for {src}")));
            }
            if table.pairs.insert((src.clone(), dst.clone()), d).is_some() {
                return Err(Error::Parse(format!("line {line_no}: duplicate pair {src},{dst}")));
            }
        }
        Ok(table)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{TABLE_HEADER}\n");
        for ((s, d), dist) in &self.pairs {
            out.push_str(&format!(
                "{s},{d},{},{}\n",
                format_unit(dist.syntactic),
                format_unit(dist.geographic)
            ));
        }
        out
    }

    pub fn insert(&mut self, src: &str, dst: &str, distance: Distance) {
        self.pairs.insert((normalize(src), normalize(dst)), distance);
    }

    pub fn languages(&self) -> BTreeSet<String> {
        self.pairs
            .keys()
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect()
    }

    pub fn contains(&self, code: &str) -> bool {
        let code = normalize(code);
        self.pairs.keys().any(|(a, b)| *a == code || *b == code)
    }

    /// Distance from `src` to `dst`; falls back to the reverse row, and to 0
    /// for a language against itself.
    pub fn distance(&self, src: &str, dst: &str) -> Result<Distance> {
        let (s, d) = (normalize(src), normalize(dst));
        for code in [&s, &d] {
            if !self.contains(code) {
                return Err(Error::UnknownLanguage(code.clone()));
            }
        }
        if s == d {
            return Ok(Distance {
                syntactic: 0.0,
                geographic: 0.0,
            });
        }
        self.pairs
            .get(&(s.clone(), d.clone()))
            .or_else(|| self.pairs.get(&(d.clone(), s.clone())))
            .copied()
            .ok_or_else(|| Error::UnknownLanguage(format!("no distance row for {s},{d}")))
    }

    pub fn profile(&self, code: &str, others: &[&str]) -> Result<LanguageProfile> {
        let mut p = LanguageProfile {
            code: normalize(code),
            syntactic_distance: BTreeMap::new(),
            geographic_distance: BTreeMap::new(),
        };
        for o in others {
            let d = self.distance(code, o)?;
            p.syntactic_distance.insert(normalize(o), d.syntactic);
            p.geographic_distance.insert(normalize(o), d.geographic);
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionRule {
    pub max_syntactic: f64,
    pub max_geographic: f64,
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self {
            max_syntactic: 0.7,
            max_geographic: 0.3,
        }
    }
}

impl SelectionRule {
    pub fn new(max_syntactic: f64, max_geographic: f64) -> Result<Self> {
        for t in [max_syntactic, max_geographic] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("threshold {t} outside [0, 1]")));
            }
        }
        Ok(Self {
            max_syntactic,
            max_geographic,
        })
    }

    pub fn admits(&self, d: Distance) -> bool {
        d.syntactic < self.max_syntactic && d.geographic < self.max_geographic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub languages: Vec<String>,
    /// Set when no pool language met both thresholds and the single
    /// syntactically nearest language was returned instead.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub code: String,
    pub syntactic: f64,
    pub geographic: f64,
    pub selected: bool,
}

/// Pool rows sorted by (syntactic, geographic, code); the target itself is dropped.
fn ranked(target: &str, pool: &[&str], table: &DistanceTable) -> Result<Vec<(String, Distance)>> {
    let target = normalize(target);
    if !table.contains(&target) {
        return Err(Error::UnknownLanguage(target));
    }
    let codes: BTreeSet<String> = pool.iter().map(|c| normalize(c)).filter(|c| *c != target).collect();
    let mut rows = codes
        .into_iter()
        .map(|c| Ok((c.clone(), table.distance(&target, &c)?)))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|(ca, a), (cb, b)| {
        a.syntactic
            .total_cmp(&b.syntactic)
            .then(a.geographic.total_cmp(&b.geographic))
            .then(ca.cmp(cb))
    });
    Ok(rows)
}

pub fn select_related(target: &str, pool: &[&str], rule: &SelectionRule, table: &DistanceTable) -> Result<Selection> {
    let rows = ranked(target, pool, table)?;
    let languages: Vec<String> = rows
        .iter()
        .filter(|(_, d)| rule.admits(*d))
        .map(|(c, _)| c.clone())
        .collect();
    if !languages.is_empty() {
        return Ok(Selection {
            languages,
            fallback: false,
        });
    }
    let nearest = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("candidate pool is empty".into()))?;
    Ok(Selection {
        languages: vec![nearest.0.clone()],
        fallback: true,
    })
}

pub fn distance_report(target: &str, pool: &[&str], rule: &SelectionRule, table: &DistanceTable) -> Result<Vec<ReportRow>> {
    let selection = select_related(target, pool, rule, table)?;
    Ok(ranked(target, pool, table)?
        .into_iter()
        .map(|(code, d)| ReportRow {
            selected: selection.languages.contains(&code),
            code,
            syntactic: d.syntactic,
            geographic: d.geographic,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DistanceTable {
        DistanceTable::parse_csv(
            "src,dst,syntactic,geographic\n\
             t,a,0.2,0.1\n\
             t,b,0.5,0.5\n\
             t,c,0.2,0.05\n\
             t,d,0.9,0.1\n\
             t,e,0.2,0.05\n",
        )
        .unwrap()
    }

    #[test]
    fn ordering_and_threshold() {
        let s = select_related("t", &["a", "b", "c", "d", "e"], &SelectionRule::default(), &small()).unwrap();
        assert_eq!(s.languages, vec!["c", "e", "a"]);
        assert!(!s.fallback);
    }

    #[test]
    fn fallback_on_empty_filter() {
        let rule = SelectionRule::new(0.0, 0.0).unwrap();
        let s = select_related("t", &["b", "d", "a"], &rule, &small()).unwrap();
        assert_eq!(s.languages, vec!["a"]);
        assert!(s.fallback);
    }

    #[test]
    fn unknown_codes() {
        let t = small();
        assert!(matches!(
            select_related("zz", &["a"], &SelectionRule::default(), &t),
            Err(Error::UnknownLanguage(_))
        ));
        assert!(matches!(
            select_related("t", &["zz"], &SelectionRule::default(), &t),
            Err(Error::UnknownLanguage(_))
        ));
    }

    #[test]
    fn report_rows() {
        let t = small();
        let rows = distance_report("t", &["b"], &SelectionRule::default(), &t).unwrap();
        assert_eq!(rows.len(), 1);
        let rows = distance_report("t", &["t", "a", "d"], &SelectionRule::default(), &t).unwrap();
        assert_eq!(rows.iter().map(|r| r.code.as_str()).collect::<Vec<_>>(), ["a", "d"]);
        assert!(rows[0].selected && !rows[1].selected);
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(DistanceTable::parse_csv("a,b,c,d\n").is_err());
        assert!(DistanceTable::parse_csv("src,dst,syntactic,geographic\nx,y,0.1\n").is_err());
        assert!(DistanceTable::parse_csv("src,dst,syntactic,geographic\nx,y,1.5,0.1\n").is_err());
        assert!(DistanceTable::parse_csv("src,dst,syntactic,geographic\nx,y,0.1234567,0.1\n").is_err());
        assert!(DistanceTable::parse_csv("src,dst,syntactic,geographic\nx,x,0.1,0\n").is_err());
        assert!(DistanceTable::parse_csv("src,dst,syntactic,geographic\nx,y,0.1,0\nx,y,0.2,0\n").is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let t = small();
        assert_eq!(DistanceTable::parse_csv(&t.to_csv()).unwrap(), t);
        assert_eq!(DistanceTable::packaged().to_csv(), DistanceTable::parse_csv(&DistanceTable::packaged().to_csv()).unwrap().to_csv());
    }

    #[test]
    fn packaged_covers_all_pairs() {
        let t = DistanceTable::packaged();
        for a in XLSUM_SEEN.iter().chain(&XLSUM_UNSEEN) {
            for b in XLSUM_SEEN.iter().chain(&XLSUM_UNSEEN) {
                let d = t.distance(a, b).unwrap();
                assert!((0.0..=1.0).contains(&d.syntactic) && (0.0..=1.0).contains(&d.geographic));
                if a == b {
                    assert_eq!((d.syntactic, d.geographic), (0.0, 0.0));
                }
            }
        }
    }
}
