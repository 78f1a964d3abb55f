//! Zero-shot object classification by nearest concept embedding.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::curriculum::ConceptLexicon;
use crate::data::{Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{encode_objects, ModelParams};
use crate::numerics::dot;

/// Candidate labels: concept ids and the vocabulary rows that embed them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    concepts: Vec<usize>,
    token_ids: Vec<usize>,
}

impl LabelSet {
    /// Every lexicon concept, resolved through `vocab`.
    pub fn from_lexicon(lexicon: &ConceptLexicon, vocab: &Vocabulary) -> Result<Self> {
        Self::for_concepts(lexicon, vocab, 0..lexicon.len())
    }

    pub fn for_concepts(
        lexicon: &ConceptLexicon,
        vocab: &Vocabulary,
        concepts: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let mut ids: Vec<usize> = concepts.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::EmptyInput("label set"));
        }
        let token_ids = ids
            .iter()
            .map(|&c| {
                let token = lexicon.token(c).ok_or(Error::MissingConcept(c))?;
                vocab
                    .id(token)
                    .or_else(|| vocab.id(&token.to_lowercase()))
                    .ok_or_else(|| Error::UnknownToken(token.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            concepts: ids,
            token_ids,
        })
    }

    pub fn concepts(&self) -> &[usize] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub object_index: usize,
    /// Concept ids by descending score; ties by ascending id.
    pub ranking: Vec<usize>,
    pub label: usize,
}

impl Prediction {
    pub fn correct_at(&self, k: usize) -> bool {
        self.ranking.iter().take(k).any(|&c| c == self.label)
    }
}

/// Ranks every labeled object of `eval` against the label embeddings.
pub fn classify_objects(
    eval: &Dataset,
    params: &ModelParams,
    labels: &LabelSet,
) -> Result<Vec<Prediction>> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("label set"));
    }
    let table = &params.text_embeddings;
    for &id in &labels.token_ids {
        if id >= table.rows() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: table.rows(),
            });
        }
    }
    let mut out = Vec::new();
    for sample in eval.samples() {
        let emb = encode_objects(&sample.feature_matrix()?, params)?;
        for (o, object) in sample.objects.iter().enumerate() {
            let label = object.label.ok_or_else(|| Error::UnlabeledObject {
                sample: sample.id.clone(),
                object: o,
            })?;
            let scores = labels
                .token_ids
                .iter()
                .map(|&t| dot(emb.row(o), table.row(t)))
                .collect::<Result<Vec<_>>>()?;
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap_or(Ordering::Equal)
                    .then(labels.concepts[a].cmp(&labels.concepts[b]))
            });
            out.push(Prediction {
                sample_id: sample.id.clone(),
                object_index: o,
                ranking: order.into_iter().map(|i| labels.concepts[i]).collect(),
                label,
            });
        }
    }
    Ok(out)
}

/// Fraction of predictions whose label is within the top `k`. Zero when empty.
pub fn accuracy(predictions: &[Prediction], k: usize) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().filter(|p| p.correct_at(k)).count();
    hits as f64 / predictions.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupAccuracy {
    pub count: usize,
    pub top1: f64,
    pub top5: f64,
}

impl GroupAccuracy {
    fn of(predictions: &[Prediction]) -> Self {
        Self {
            count: predictions.len(),
            top1: accuracy(predictions, 1),
            top5: accuracy(predictions, 5),
        }
    }
}

/// Accuracy grouped by the phase in which each object's concept was introduced.
pub fn phase_breakdown(
    predictions: &[Prediction],
    introduced_at: &BTreeMap<usize, usize>,
) -> Result<BTreeMap<usize, GroupAccuracy>> {
    let mut groups: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
    for p in predictions {
        let phase = *introduced_at
            .get(&p.label)
            .ok_or(Error::MissingConcept(p.label))?;
        groups.entry(phase).or_default().push(p.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(phase, preds)| (phase, GroupAccuracy::of(&preds)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: GroupAccuracy,
    /// Keyed by concept id.
    pub per_concept: BTreeMap<usize, GroupAccuracy>,
    /// Keyed by phase of introduction.
    pub per_phase: BTreeMap<usize, GroupAccuracy>,
}

impl EvalReport {
    pub fn build(
        predictions: &[Prediction],
        introduced_at: &BTreeMap<usize, usize>,
    ) -> Result<Self> {
        let mut by_concept: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
        for p in predictions {
            by_concept.entry(p.label).or_default().push(p.clone());
        }
        Ok(Self {
            overall: GroupAccuracy::of(predictions),
            per_concept: by_concept
                .into_iter()
                .map(|(c, preds)| (c, GroupAccuracy::of(&preds)))
                .collect(),
            per_phase: phase_breakdown(predictions, introduced_at)?,
        })
    }

    /// Top-1 accuracy over objects whose concept was introduced in `phase` or later.
    pub fn top1_from_phase(&self, phase: usize) -> f64 {
        let (hits, total) = self
            .per_phase
            .range(phase..)
            .fold((0.0, 0usize), |(h, n), (_, g)| {
                (h + g.top1 * g.count as f64, n + g.count)
            });
        if total == 0 {
            0.0
        } else {
            hits / total as f64
        }
    }

    /// `key=value` lines in a fixed order.
    pub fn to_text(&self, lexicon: &ConceptLexicon) -> String {
        let mut out = String::new();
        let o = &self.overall;
        let _ = writeln!(out, "objects={}", o.count);
        let _ = writeln!(out, "top1={}", o.top1);
        let _ = writeln!(out, "top5={}", o.top5);
        for (phase, g) in &self.per_phase {
            let _ = writeln!(out, "phase.{phase}.objects={}", g.count);
            let _ = writeln!(out, "phase.{phase}.top1={}", g.top1);
            let _ = writeln!(out, "phase.{phase}.top5={}", g.top5);
        }
        for (c, g) in &self.per_concept {
            let name = lexicon.token(*c).unwrap_or("?");
            let _ = writeln!(out, "concept.{c}.token={name}");
            let _ = writeln!(out, "concept.{c}.objects={}", g.count);
            let _ = writeln!(out, "concept.{c}.top1={}", g.top1);
            let _ = writeln!(out, "concept.{c}.top5={}", g.top5);
        }
        out
    }
}
