//! Pathologist vote resolution.
//!
//! Rules, in order:
//! 1. Non-diagnostic votes forming a strict majority of all votes exclude
//!    the core.
//! 2. A unique most-frequent score with at least two votes labels the core.
//! 3. Otherwise the adjudicator decides. With a tie between leading scores
//!    (count ≥ 2) it must pick one of the tied scores; when no score has two
//!    votes it must pick any cast score. A matching pick labels the core
//!    (flagged as adjudicated), anything else, including a non-diagnostic
//!    adjudicator, excludes it.
//! 4. Adjudication needed but missing excludes the core as unresolved.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{Her2Score, Vote, NUM_CLASSES};

/// Pathologist id reserved for the adjudicator in vote CSVs.
pub const ADJUDICATOR_ID: &str = "ADJ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteRecord {
    pub core_id: String,
    /// `(pathologist_id, vote)` in input order.
    pub votes: Vec<(String, Vote)>,
    pub adjudicator: Option<Vote>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    NonDiagnosticMajority,
    UnresolvedDiscordance,
    AdjudicatorMismatch,
}

impl ExclusionReason {
    pub fn name(self) -> &'static str {
        match self {
            ExclusionReason::NonDiagnosticMajority => "non_diagnostic_majority",
            ExclusionReason::UnresolvedDiscordance => "unresolved_discordance",
            ExclusionReason::AdjudicatorMismatch => "adjudicator_mismatch",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Labeled { score: Her2Score, adjudicated: bool },
    Excluded(ExclusionReason),
}

impl Outcome {
    pub fn score(self) -> Option<Her2Score> {
        match self {
            Outcome::Labeled { score, .. } => Some(score),
            Outcome::Excluded(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusResult {
    pub core_id: String,
    pub outcome: Outcome,
}

fn validate(rec: &VoteRecord) -> Result<()> {
    if rec.votes.is_empty() {
        return Err(Error::Malformed(format!("core {:?} has no votes", rec.core_id)));
    }
    let mut seen = HashSet::new();
    for (id, _) in &rec.votes {
        if id == ADJUDICATOR_ID {
            return Err(Error::Malformed(format!("core {:?}: {ADJUDICATOR_ID} listed as a regular vote", rec.core_id)));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::Malformed(format!("core {:?}: pathologist {id:?} voted twice", rec.core_id)));
        }
    }
    Ok(())
}

pub fn resolve(rec: &VoteRecord) -> Result<ConsensusResult> {
    validate(rec)?;
    let outcome = resolve_votes(rec.votes.iter().map(|(_, v)| *v), rec.adjudicator);
    Ok(ConsensusResult {
        core_id: rec.core_id.clone(),
        outcome,
    })
}

fn resolve_votes(votes: impl Iterator<Item = Vote>, adjudicator: Option<Vote>) -> Outcome {
    let mut counts = [0usize; NUM_CLASSES];
    let mut nd = 0;
    let mut total = 0;
    for v in votes {
        total += 1;
        match v {
            Vote::Score(s) => counts[s.index()] += 1,
            Vote::NonDiagnostic => nd += 1,
        }
    }
    if 2 * nd > total {
        return Outcome::Excluded(ExclusionReason::NonDiagnosticMajority);
    }
    let top = *counts.iter().max().unwrap();
    let leaders: Vec<Her2Score> = Her2Score::ALL.into_iter().filter(|s| counts[s.index()] == top).collect();
    if top >= 2 && leaders.len() == 1 {
        return Outcome::Labeled {
            score: leaders[0],
            adjudicated: false,
        };
    }
    let acceptable = |s: Her2Score| {
        if top >= 2 {
            leaders.contains(&s)
        } else {
            counts[s.index()] > 0
        }
    };
    match adjudicator {
        None => Outcome::Excluded(ExclusionReason::UnresolvedDiscordance),
        Some(Vote::Score(s)) if acceptable(s) => Outcome::Labeled {
            score: s,
            adjudicated: true,
        },
        Some(_) => Outcome::Excluded(ExclusionReason::AdjudicatorMismatch),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsensusSummary {
    pub total: usize,
    pub labeled: usize,
    /// Subset of `labeled` decided by the adjudicator.
    pub labeled_adjudicated: usize,
    pub labeled_by_score: [usize; NUM_CLASSES],
    pub excluded_non_diagnostic_majority: usize,
    pub excluded_unresolved_discordance: usize,
    pub excluded_adjudicator_mismatch: usize,
}

impl ConsensusSummary {
    pub fn excluded(&self) -> usize {
        self.excluded_non_diagnostic_majority + self.excluded_unresolved_discordance + self.excluded_adjudicator_mismatch
    }

    fn add(&mut self, o: Outcome) {
        self.total += 1;
        match o {
            Outcome::Labeled { score, adjudicated } => {
                self.labeled += 1;
                self.labeled_adjudicated += usize::from(adjudicated);
                self.labeled_by_score[score.index()] += 1;
            }
            Outcome::Excluded(ExclusionReason::NonDiagnosticMajority) => self.excluded_non_diagnostic_majority += 1,
            Outcome::Excluded(ExclusionReason::UnresolvedDiscordance) => self.excluded_unresolved_discordance += 1,
            Outcome::Excluded(ExclusionReason::AdjudicatorMismatch) => self.excluded_adjudicator_mismatch += 1,
        }
    }
}

/// Resolves every record in order. Duplicate core ids are rejected.
pub fn resolve_batch(records: &[VoteRecord]) -> Result<(Vec<ConsensusResult>, ConsensusSummary)> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.core_id.as_str()) {
            return Err(Error::Malformed(format!("duplicate core id {:?}", r.core_id)));
        }
    }
    let results: Vec<ConsensusResult> = records.par_iter().map(resolve).collect::<Result<_>>()?;
    let mut summary = ConsensusSummary::default();
    for r in &results {
        summary.add(r.outcome);
    }
    Ok((results, summary))
}

#[derive(Debug, Serialize, Deserialize)]
struct VoteRow {
    core_id: String,
    pathologist_id: String,
    score: String,
}

/// Reads `core_id,pathologist_id,score` rows, grouping by core in order of
/// first appearance. Rows with pathologist `ADJ` set the adjudicator.
pub fn read_votes_csv(reader: impl Read, path: impl AsRef<Path>) -> Result<Vec<VoteRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let mut records: Vec<VoteRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: VoteRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        let vote: Vote = row
            .score
            .parse()
            .map_err(|e: Error| Error::parse(path, line, e.to_string()))?;
        let slot = *index.entry(row.core_id.clone()).or_insert_with(|| {
            records.push(VoteRecord {
                core_id: row.core_id.clone(),
                votes: Vec::new(),
                adjudicator: None,
            });
            records.len() - 1
        });
        let r = &mut records[slot];
        if row.pathologist_id == ADJUDICATOR_ID {
            if r.adjudicator.replace(vote).is_some() {
                return Err(Error::parse(path, line, format!("second adjudicator row for {:?}", row.core_id)));
            }
        } else {
            if r.votes.iter().any(|(id, _)| *id == row.pathologist_id) {
                return Err(Error::parse(
                    path,
                    line,
                    format!("pathologist {:?} voted twice on {:?}", row.pathologist_id, row.core_id),
                ));
            }
            r.votes.push((row.pathologist_id, vote));
        }
    }
    Ok(records)
}

pub fn load_votes_csv(path: impl AsRef<Path>) -> Result<Vec<VoteRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_votes_csv(file, path)
}

/// Writes records in order, each core's votes followed by its adjudicator.
pub fn write_votes_csv(records: &[VoteRecord], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut put = |core: &str, id: &str, v: Vote| {
        wtr.serialize(VoteRow {
            core_id: core.to_string(),
            pathologist_id: id.to_string(),
            score: v.code().to_string(),
        })
        .map_err(|e| Error::csv("<votes>", e))
    };
    for r in records {
        for (id, v) in &r.votes {
            put(&r.core_id, id, *v)?;
        }
        if let Some(v) = r.adjudicator {
            put(&r.core_id, ADJUDICATOR_ID, v)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<votes>", e))
}

/// `core_id,outcome,score_or_reason` where outcome is `labeled`,
/// `labeled_adjudicated` or `excluded`.
pub fn write_results_csv(results: &[ConsensusResult], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["core_id", "outcome", "score_or_reason"])
        .map_err(|e| Error::csv("<consensus>", e))?;
    for r in results {
        let (outcome, detail) = match r.outcome {
            Outcome::Labeled { score, adjudicated: false } => ("labeled", score.label()),
            Outcome::Labeled { score, adjudicated: true } => ("labeled_adjudicated", score.label()),
            Outcome::Excluded(reason) => ("excluded", reason.name()),
        };
        wtr.write_record([r.core_id.as_str(), outcome, detail])
            .map_err(|e| Error::csv("<consensus>", e))?;
    }
    wtr.flush().map_err(|e| Error::io("<consensus>", e))
}
