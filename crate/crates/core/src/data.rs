//! Samples, datasets, the line-delimited dataset file format, the synthetic
//! scene generator and seeded minibatching.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curriculum::ConceptLexicon;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// RNG stream used for per-epoch batch shuffles.
const BATCH_STREAM_BASE: u64 = 1 << 32;

/// A ChaCha generator for `seed` on a dedicated stream, so independent
/// consumers of one seed never share draws.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Ordered token list with reverse lookup.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidDataset(format!(
                    "vocabulary token {t:?} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "duplicate vocabulary token {t:?}"
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
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// One image (as object feature vectors) with its caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub objects: Vec<ObjectRecord>,
    #[serde(rename = "caption")]
    pub caption_tokens: Vec<String>,
}

impl Sample {
    pub fn feature_matrix(&self) -> Result<DenseMatrix> {
        let rows: Vec<&[f64]> = self.objects.iter().map(|o| o.feature.as_slice()).collect();
        DenseMatrix::from_rows(&rows)
    }
}

/// A sample with features stacked and tokens resolved to vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub features: DenseMatrix,
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_dim: usize,
    vocabulary: Vocabulary,
    samples: BTreeMap<String, Sample>,
}

impl Dataset {
    /// Validates every sample against the feature width and vocabulary.
    pub fn new(feature_dim: usize, vocabulary: Vocabulary, samples: Vec<Sample>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidDataset(
                "feature dimension must be positive".into(),
            ));
        }
        let mut map = BTreeMap::new();
        for s in samples {
            validate_sample(&s, feature_dim, &vocabulary)?;
            let id = s.id.clone();
            if map.insert(id.clone(), s).is_some() {
                return Err(Error::InvalidDataset(format!("duplicate sample id {id:?}")));
            }
        }
        Ok(Self {
            feature_dim,
            vocabulary,
            samples: map,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.get(id)
    }

    /// Samples in ascending id order.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.keys().map(String::as_str)
    }

    pub fn encode(&self, sample: &Sample) -> Result<EncodedSample> {
        let token_ids = sample
            .caption_tokens
            .iter()
            .map(|t| {
                self.vocabulary
                    .id(t)
                    .ok_or_else(|| Error::UnknownToken(t.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedSample {
            id: sample.id.clone(),
            features: sample.feature_matrix()?,
            token_ids,
        })
    }

    /// All samples encoded, in ascending id order.
    pub fn encode_all(&self) -> Result<Vec<EncodedSample>> {
        self.samples().map(|s| self.encode(s)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_text().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Header line, then one JSON record per sample in id order.
    pub fn to_text(&self) -> String {
        let header = DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            feature_dim: self.feature_dim,
            vocabulary: self.vocabulary.tokens.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in self.samples.values() {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing header line"))?;
        let header: DatasetHeader = serde_json::from_str(first)
            .map_err(|e| Error::parse(path, 1, format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::parse(
                path,
                1,
                format!("unsupported dataset format {:?}", header.format),
            ));
        }
        let vocabulary =
            Vocabulary::new(header.vocabulary).map_err(|e| Error::parse(path, 1, e.to_string()))?;
        if header.feature_dim == 0 {
            return Err(Error::parse(path, 1, "feature_dim must be positive"));
        }
        let mut samples = BTreeMap::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let sample: Sample = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, line_no, format!("bad record: {e}")))?;
            validate_sample(&sample, header.feature_dim, &vocabulary)
                .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
            let id = sample.id.clone();
            if samples.insert(id.clone(), sample).is_some() {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("duplicate sample id {id:?}"),
                ));
            }
        }
        Ok(Self {
            feature_dim: header.feature_dim,
            vocabulary,
            samples,
        })
    }
}

const DATASET_FORMAT: &str = "curvl-dataset/1";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    feature_dim: usize,
    vocabulary: Vec<String>,
}

fn validate_sample(s: &Sample, feature_dim: usize, vocab: &Vocabulary) -> Result<()> {
    if s.id.is_empty() {
        return Err(Error::InvalidDataset("sample id must be non-empty".into()));
    }
    if s.objects.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "sample {:?} has no objects",
            s.id
        )));
    }
    if s.caption_tokens.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "sample {:?} has an empty caption",
            s.id
        )));
    }
    for (i, o) in s.objects.iter().enumerate() {
        if o.feature.len() != feature_dim {
            return Err(Error::InvalidDataset(format!(
                "sample {:?} object {i}: feature length {} != {feature_dim}",
                s.id,
                o.feature.len()
            )));
        }
        if o.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "sample {:?} object {i}: non-finite feature",
                s.id
            )));
        }
    }
    for t in &s.caption_tokens {
        if vocab.id(t).is_none() {
            return Err(Error::InvalidDataset(format!(
                "sample {:?}: token {t:?} missing from vocabulary",
                s.id
            )));
        }
    }
    Ok(())
}

/// Seeded shuffle of `ids` (sorted first, so input order is irrelevant),
/// cut into batches of `batch_size`; the final short batch is kept.
pub fn make_batches<T: Clone + Ord>(
    ids: &[T],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if ids.is_empty() {
        return Err(Error::EmptyInput("sample ids for batching"));
    }
    let mut order = ids.to_vec();
    order.sort();
    order.shuffle(&mut seeded_rng(seed, BATCH_STREAM_BASE + epoch));
    Ok(order.chunks(batch_size).map(<[T]>::to_vec).collect())
}

/// Parameters of the synthetic scene/caption generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Entry `p - 1` is the number of training scenes with `p` concepts.
    pub scenes_per_phase: Vec<usize>,
    pub filler_vocab_size: usize,
    pub eval_scenes: usize,
    pub seed: u64,
}

/// Upper bound on filler tokens mixed into each caption.
pub const MAX_FILLERS: usize = 3;

const CONCEPT_NAMES: &[&str] = &[
    "dog", "cat", "horse", "bird", "car", "bus", "train", "boat", "chair", "table", "bottle",
    "cup", "pizza", "banana", "apple", "clock", "laptop", "phone", "book", "kite", "umbrella",
    "bench", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "truck", "bicycle",
];

const FILLER_NAMES: &[&str] = &[
    "a", "the", "on", "with", "near", "of", "is", "in", "and", "two", "small", "large", "next",
    "to", "some", "at", "by", "sitting", "standing", "under",
];

fn concept_name(i: usize) -> String {
    CONCEPT_NAMES
        .get(i)
        .map_or_else(|| format!("concept{i}"), |s| s.to_string())
}

fn filler_name(i: usize) -> String {
    FILLER_NAMES
        .get(i)
        .map_or_else(|| format!("filler{i}"), |s| s.to_string())
}

impl SyntheticSpec {
    pub fn phases(&self) -> usize {
        self.scenes_per_phase.len()
    }

    /// Concept ids first introduced in each phase. Phases `p >= 2` each
    /// introduce `max(1, K / (k + 1))` concepts; phase 1 takes the rest.
    pub fn concepts_by_phase(&self) -> Vec<Vec<usize>> {
        let k = self.phases();
        let per_later = (self.num_concepts / (k + 1)).max(1);
        let first = self.num_concepts.saturating_sub((k - 1) * per_later);
        let mut out = vec![(0..first).collect::<Vec<_>>()];
        let mut next = first;
        for _ in 1..k {
            out.push((next..next + per_later).collect());
            next += per_later;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.phases();
        if k == 0 {
            return Err(Error::InvalidConfig(
                "scenes_per_phase must list at least one phase".into(),
            ));
        }
        if self.num_concepts < k {
            return Err(Error::InvalidConfig(format!(
                "need at least {k} concepts for {k} phases, got {}",
                self.num_concepts
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(
                "noise_sigma must be finite and >= 0".into(),
            ));
        }
        for (p, (count, intro)) in self
            .scenes_per_phase
            .iter()
            .zip(self.concepts_by_phase())
            .enumerate()
        {
            if *count < intro.len() {
                return Err(Error::InvalidConfig(format!(
                    "phase {} needs at least {} scenes to introduce its concepts, got {count}",
                    p + 1,
                    intro.len()
                )));
            }
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub eval: Dataset,
    pub lexicon: ConceptLexicon,
    /// Unit-length prototype feature per concept.
    pub prototypes: Vec<Vec<f64>>,
}

/// Generates phase-structured training scenes and labeled evaluation scenes.
///
/// A phase-`p` caption names exactly `p` concepts: one introduced in phase
/// `p` and `p - 1` drawn from those introduced earlier. Each named concept
/// contributes one object whose feature is its prototype plus Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;

    let prototypes: Vec<Vec<f64>> = (0..spec.num_concepts)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let concept_tokens: Vec<String> = (0..spec.num_concepts).map(concept_name).collect();
    let filler_tokens: Vec<String> = (0..spec.filler_vocab_size).map(filler_name).collect();
    let mut vocab_tokens = concept_tokens.clone();
    vocab_tokens.extend(filler_tokens.iter().cloned());
    let vocabulary = Vocabulary::new(vocab_tokens)?;
    let lexicon = ConceptLexicon::new(concept_tokens.clone())?;

    let make_object = |rng: &mut ChaCha8Rng, concept: usize, labeled: bool| ObjectRecord {
        feature: prototypes[concept]
            .iter()
            .map(|x| {
                if spec.noise_sigma == 0.0 {
                    *x
                } else {
                    x + noise.sample(rng)
                }
            })
            .collect(),
        label: labeled.then_some(concept),
    };

    let intro = spec.concepts_by_phase();
    let mut train = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    for (p_idx, &count) in spec.scenes_per_phase.iter().enumerate() {
        let new_concepts = &intro[p_idx];
        for i in 0..count {
            let mut concepts = vec![new_concepts[i % new_concepts.len()]];
            concepts.extend(seen.choose_multiple(&mut rng, p_idx).copied());
            let mut objects: Vec<ObjectRecord> = concepts
                .iter()
                .map(|&c| make_object(&mut rng, c, false))
                .collect();
            objects.shuffle(&mut rng);
            let mut caption: Vec<String> = concepts
                .iter()
                .map(|&c| concept_tokens[c].clone())
                .collect();
            if !filler_tokens.is_empty() {
                let n_fill = rng.random_range(0..=MAX_FILLERS);
                for _ in 0..n_fill {
                    caption.push(filler_tokens.choose(&mut rng).expect("non-empty").clone());
                }
            }
            caption.shuffle(&mut rng);
            train.push(Sample {
                id: format!("train-{:06}", train.len()),
                objects,
                caption_tokens: caption,
            });
        }
        seen.extend(new_concepts.iter().copied());
    }

    let all: Vec<usize> = (0..spec.num_concepts).collect();
    let max_eval_objects = spec.phases().min(spec.num_concepts);
    let mut eval = Vec::with_capacity(spec.eval_scenes);
    for i in 0..spec.eval_scenes {
        let n = rng.random_range(1..=max_eval_objects);
        let concepts: Vec<usize> = all.choose_multiple(&mut rng, n).copied().collect();
        let objects = concepts
            .iter()
            .map(|&c| make_object(&mut rng, c, true))
            .collect();
        let caption = concepts
            .iter()
            .map(|&c| concept_tokens[c].clone())
            .collect();
        eval.push(Sample {
            id: format!("eval-{i:06}"),
            objects,
            caption_tokens: caption,
        });
    }

    Ok(SyntheticData {
        train: Dataset::new(spec.feature_dim, vocabulary.clone(), train)?,
        eval: Dataset::new(spec.feature_dim, vocabulary, eval)?,
        lexicon,
        prototypes,
    })
}

/// Concept ids appearing in a sample's caption under `lexicon`.
pub fn sample_concepts(sample: &Sample, lexicon: &ConceptLexicon) -> BTreeSet<usize> {
    crate::curriculum::tag_concepts(&sample.caption_tokens, lexicon)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_concepts: 6,
            feature_dim: 5,
            noise_sigma: 0.1,
            scenes_per_phase: vec![8, 6, 4],
            filler_vocab_size: 4,
            eval_scenes: 10,
            seed,
        }
    }

    #[test]
    fn batches_keep_short_tail() {
        let ids: Vec<usize> = (0..10).collect();
        let b = make_batches(&ids, 3, 1, 0).unwrap();
        let sizes: Vec<usize> = b.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut flat: Vec<usize> = b.concat();
        flat.sort();
        assert_eq!(flat, ids);
    }

    #[test]
    fn batches_are_deterministic_and_epoch_dependent() {
        let ids: Vec<String> = (0..12).map(|i| format!("s{i:02}")).collect();
        let a = make_batches(&ids, 4, 9, 0).unwrap();
        assert_eq!(a, make_batches(&ids, 4, 9, 0).unwrap());
        assert_ne!(a.concat(), make_batches(&ids, 4, 9, 1).unwrap().concat());
        let mut reversed = ids.clone();
        reversed.reverse();
        assert_eq!(a, make_batches(&reversed, 4, 9, 0).unwrap());
        assert!(make_batches::<usize>(&[], 4, 0, 0).is_err());
        assert!(make_batches(&ids, 0, 0, 0).is_err());
    }

    #[test]
    fn noiseless_features_equal_prototypes() {
        let mut spec = small_spec(3);
        spec.noise_sigma = 0.0;
        let data = generate_synthetic(&spec).unwrap();
        for ds in [&data.train, &data.eval] {
            for s in ds.samples() {
                let concepts: Vec<usize> = sample_concepts(s, &data.lexicon).into_iter().collect();
                for o in &s.objects {
                    assert!(concepts.iter().any(|&c| o.feature == data.prototypes[c]));
                }
            }
        }
        for o in data.eval.samples().flat_map(|s| &s.objects) {
            assert_eq!(o.feature, data.prototypes[o.label.unwrap()]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec(5)).unwrap();
        let b = generate_synthetic(&small_spec(5)).unwrap();
        assert_eq!(a.train.to_text(), b.train.to_text());
        assert_eq!(a.eval.to_text(), b.eval.to_text());
        let c = generate_synthetic(&small_spec(6)).unwrap();
        assert_ne!(a.train.to_text(), c.train.to_text());
    }

    #[test]
    fn phase_scenes_have_exact_concept_counts() {
        let spec = small_spec(8);
        let data = generate_synthetic(&spec).unwrap();
        let mut counts = vec![0usize; spec.phases()];
        for s in data.train.samples() {
            let c = sample_concepts(s, &data.lexicon).len();
            assert_eq!(c, s.objects.len());
            counts[c - 1] += 1;
        }
        assert_eq!(counts, spec.scenes_per_phase);
        assert!(data
            .train
            .samples()
            .all(|s| s.caption_tokens.len() <= s.objects.len() + MAX_FILLERS));
    }

    #[test]
    fn concept_allocation() {
        let spec = SyntheticSpec {
            num_concepts: 12,
            scenes_per_phase: vec![10, 10, 10],
            ..small_spec(0)
        };
        assert_eq!(
            spec.concepts_by_phase(),
            vec![(0..6).collect::<Vec<_>>(), vec![6, 7, 8], vec![9, 10, 11]]
        );
        let tight = SyntheticSpec {
            num_concepts: 3,
            scenes_per_phase: vec![1, 1, 1],
            ..small_spec(0)
        };
        assert_eq!(tight.concepts_by_phase(), vec![vec![0], vec![1], vec![2]]);
        tight.validate().unwrap();
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small_spec(0);
        spec.num_concepts = 2;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = small_spec(0);
        spec.noise_sigma = -1.0;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = small_spec(0);
        spec.scenes_per_phase = vec![1, 1, 1];
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = small_spec(0);
        spec.scenes_per_phase.clear();
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn file_round_trip() {
        let data = generate_synthetic(&small_spec(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        data.train.write(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, data.train);
        let path = dir.path().join("eval.jsonl");
        data.eval.write(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), data.eval);
    }

    fn expect_parse_error(text: &str, line: usize) {
        match Dataset::parse(text, Path::new("mem")) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
            other => panic!("expected parse error on line {line}, got {other:?}"),
        }
    }

    #[test]
    fn loader_rejects_malformed_input() {
        let header = r#"{"format":"curvl-dataset/1","feature_dim":2,"vocabulary":["dog","a"]}"#;
        let good =
            r#"{"id":"s1","objects":[{"feature":[0.5,1.0],"label":0}],"caption":["a","dog"]}"#;
        let ok = format!("{header}\n{good}\n");
        assert_eq!(Dataset::parse(&ok, Path::new("mem")).unwrap().len(), 1);

        expect_parse_error(
            &format!("{header}\n{good}\n{{\"id\":\"s2\",\"objects\":[{{\"feat"),
            3,
        );
        expect_parse_error(
            &format!("{header}\n{{\"id\":\"s2\",\"objects\":[{{\"feature\":[1.0]}}],\"caption\":[\"dog\"]}}\n"),
            2,
        );
        expect_parse_error(
            &format!("{header}\n{{\"id\":\"s2\",\"objects\":[{{\"feature\":[1.0,2.0]}}],\"caption\":[\"cat\"]}}\n"),
            2,
        );
        expect_parse_error(&format!("{header}\n{good}\n{good}\n"), 3);
        expect_parse_error("", 1);
        expect_parse_error(
            "{\"format\":\"other\",\"feature_dim\":2,\"vocabulary\":[]}\n",
            1,
        );
    }
}
