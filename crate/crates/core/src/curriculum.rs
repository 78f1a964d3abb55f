//! Concept tagging, phase partitioning, curriculum statistics and the
//! prior-snapshot refresh policy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::alignment::LossMode;
use crate::data::{sample_concepts, Dataset};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamSnapshot};

/// Concept tokens, matched case-insensitively. Ids are line positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConceptLexicon {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl ConceptLexicon {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let key = t.trim().to_lowercase();
            if key.is_empty() {
                return Err(Error::InvalidConfig(format!("lexicon entry {i} is empty")));
            }
            if index.insert(key, i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate lexicon entry {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(&token.to_lowercase()).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if let Some(pos) = tokens.iter().position(String::is_empty) {
            return Err(Error::parse(path, pos + 1, "empty lexicon line"));
        }
        Self::new(tokens).map_err(|e| Error::parse(path, 1, e.to_string()))
    }
}

/// Deduplicated lexicon ids matched by the caption tokens.
pub fn tag_concepts<S: AsRef<str>>(
    caption_tokens: &[S],
    lexicon: &ConceptLexicon,
) -> BTreeSet<usize> {
    caption_tokens
        .iter()
        .filter_map(|t| lexicon.id(t.as_ref()))
        .collect()
}

/// What happens to captions with more concepts than there are phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverflowPolicy {
    #[default]
    Drop,
    Clamp,
}

impl FromStr for OverflowPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "drop" => Ok(Self::Drop),
            "clamp" => Ok(Self::Clamp),
            other => Err(Error::InvalidConfig(format!(
                "unknown overflow policy {other:?} (expected drop or clamp)"
            ))),
        }
    }
}

impl std::fmt::Display for OverflowPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Drop => "drop",
            Self::Clamp => "clamp",
        })
    }
}

/// Assignment of samples to curriculum phases `1..=k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhasePartition {
    k: usize,
    /// Entry `p - 1` holds the sorted ids of phase `p`.
    phases: Vec<Vec<String>>,
    /// Concept id → earliest phase whose captions mention it.
    introduced_at: BTreeMap<usize, usize>,
    excluded: Vec<String>,
    concepts: BTreeMap<String, BTreeSet<usize>>,
}

impl PhasePartition {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Sample ids of phase `p` (1-based).
    pub fn phase(&self, p: usize) -> &[String] {
        &self.phases[p - 1]
    }

    pub fn phases(&self) -> impl Iterator<Item = (usize, &[String])> {
        self.phases
            .iter()
            .enumerate()
            .map(|(i, ids)| (i + 1, ids.as_slice()))
    }

    pub fn introduced_at(&self) -> &BTreeMap<usize, usize> {
        &self.introduced_at
    }

    pub fn excluded(&self) -> &[String] {
        &self.excluded
    }

    pub fn included_len(&self) -> usize {
        self.phases.iter().map(Vec::len).sum()
    }

    /// Concepts of an included sample.
    pub fn concepts_of(&self, id: &str) -> Option<&BTreeSet<usize>> {
        self.concepts.get(id)
    }

    /// Number of a sample's concepts not mentioned in any earlier phase.
    pub fn new_concept_count(&self, id: &str, phase: usize) -> usize {
        self.concepts.get(id).map_or(0, |cs| {
            cs.iter()
                .filter(|c| self.introduced_at.get(c).is_none_or(|&p| p >= phase))
                .count()
        })
    }

    /// `sample_id,phase,new_concept_count` rows for every included sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,phase,new_concept_count\n");
        for (p, ids) in self.phases() {
            for id in ids {
                let _ = writeln!(out, "{id},{p},{}", self.new_concept_count(id, p));
            }
        }
        out
    }
}

/// Places each sample in the phase equal to its distinct concept count.
pub fn partition_dataset(
    dataset: &Dataset,
    lexicon: &ConceptLexicon,
    k: usize,
    overflow: OverflowPolicy,
) -> Result<PhasePartition> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "number of phases must be at least 1".into(),
        ));
    }
    let mut phases = vec![Vec::new(); k];
    let mut excluded = Vec::new();
    let mut concepts = BTreeMap::new();
    for sample in dataset.samples() {
        let tagged = sample_concepts(sample, lexicon);
        let c = tagged.len();
        let phase = match c {
            0 => None,
            c if c <= k => Some(c),
            _ => match overflow {
                OverflowPolicy::Drop => None,
                OverflowPolicy::Clamp => Some(k),
            },
        };
        match phase {
            Some(p) => {
                phases[p - 1].push(sample.id.clone());
                concepts.insert(sample.id.clone(), tagged);
            }
            None => excluded.push(sample.id.clone()),
        }
    }
    let mut introduced_at = BTreeMap::new();
    for (i, ids) in phases.iter().enumerate() {
        for id in ids {
            for &c in &concepts[id] {
                introduced_at.entry(c).or_insert(i + 1);
            }
        }
    }
    Ok(PhasePartition {
        k,
        phases,
        introduced_at,
        excluded,
        concepts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStats {
    pub phase: usize,
    pub captions: usize,
    /// Fraction of captions with at most one concept unseen in earlier phases.
    pub previously_seen_fraction: f64,
    /// Fraction of captions with exactly one concept unseen in earlier phases.
    pub one_new_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumStats {
    pub phases: Vec<PhaseStats>,
    pub excluded: usize,
}

impl CurriculumStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,captions,prev_seen_fraction,one_new_fraction\n");
        for s in &self.phases {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.phase, s.captions, s.previously_seen_fraction, s.one_new_fraction
            );
        }
        out
    }
}

/// Per-phase caption counts and "previously seen" statistics.
///
/// A concept counts as previously seen in phase `p` if it occurs in a
/// caption of some phase `< p`.
pub fn curriculum_stats(
    partition: &PhasePartition,
    dataset: &Dataset,
    lexicon: &ConceptLexicon,
) -> Result<CurriculumStats> {
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut phases = Vec::with_capacity(partition.k);
    for (p, ids) in partition.phases() {
        let mut prev_ok = 0usize;
        let mut one_new = 0usize;
        let mut phase_concepts = BTreeSet::new();
        for id in ids {
            let sample = dataset.get(id).ok_or_else(|| {
                Error::InconsistentPartition(format!("sample {id:?} not in dataset"))
            })?;
            let concepts = sample_concepts(sample, lexicon);
            if partition.concepts.get(id) != Some(&concepts) {
                return Err(Error::InconsistentPartition(format!(
                    "concepts of sample {id:?} differ from the partition record"
                )));
            }
            let c = concepts.len();
            if c == 0 || (c <= partition.k && c != p) || (c > partition.k && p != partition.k) {
                return Err(Error::InconsistentPartition(format!(
                    "sample {id:?} with {c} concepts placed in phase {p}"
                )));
            }
            let unseen = concepts.iter().filter(|x| !seen.contains(x)).count();
            if unseen <= 1 {
                prev_ok += 1;
            }
            if unseen == 1 {
                one_new += 1;
            }
            phase_concepts.extend(concepts);
        }
        let frac = |n: usize| {
            if ids.is_empty() {
                0.0
            } else {
                n as f64 / ids.len() as f64
            }
        };
        phases.push(PhaseStats {
            phase: p,
            captions: ids.len(),
            previously_seen_fraction: frac(prev_ok),
            one_new_fraction: frac(one_new),
        });
        seen.extend(phase_concepts);
    }
    let excluded = partition.excluded.len();
    if partition.included_len() + excluded != dataset.len() {
        return Err(Error::InconsistentPartition(format!(
            "partition covers {} samples, dataset has {}",
            partition.included_len() + excluded,
            dataset.len()
        )));
    }
    Ok(CurriculumStats { phases, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyEvent {
    /// An optimizer step finished; `iteration` counts completed steps.
    StepCompleted {
        iteration: usize,
        phase: usize,
    },
    PhaseCompleted {
        iteration: usize,
        phase: usize,
    },
}

/// Holds the frozen prior model used for damping.
#[derive(Debug, Clone)]
pub struct PriorPolicyState {
    mode: LossMode,
    snapshot: Option<ParamSnapshot>,
    last_refresh: Option<PolicyEvent>,
}

impl PriorPolicyState {
    pub fn new(mode: LossMode) -> Self {
        Self {
            mode,
            snapshot: None,
            last_refresh: None,
        }
    }

    pub fn mode(&self) -> LossMode {
        self.mode
    }

    pub fn snapshot(&self) -> Option<&ParamSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn last_refresh(&self) -> Option<PolicyEvent> {
        self.last_refresh
    }

    /// `Cr` refreshes on every step, `Cp` at phase ends, `Plain` never.
    pub fn update(&mut self, event: PolicyEvent, params: &ModelParams) {
        let refresh = matches!(
            (self.mode, event),
            (LossMode::Cr, PolicyEvent::StepCompleted { .. })
                | (LossMode::Cp, PolicyEvent::PhaseCompleted { .. })
        );
        if refresh {
            let (iteration, phase) = match event {
                PolicyEvent::StepCompleted { iteration, phase }
                | PolicyEvent::PhaseCompleted { iteration, phase } => (iteration, phase),
            };
            self.snapshot = Some(ParamSnapshot::new(params, iteration, phase));
            self.last_refresh = Some(event);
        }
    }
}
