//! End-to-end acceptance checks, one test per criterion.
//!
//! Every test prints a single `criterion N: PASS|FAIL ...` line (visible with
//! `--nocapture`) before asserting, so a full run doubles as a report.

// The reference formulas below are deliberately written as index loops.
#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use curvl::alignment::{
    align, batch_contrastive_loss, batch_loss_gradients, prior_max_alignment_pair, LossMode,
    Schedule,
};
use curvl::curriculum::{
    curriculum_stats, partition_dataset, ConceptLexicon, CurriculumStats, OverflowPolicy,
    PhaseStats,
};
use curvl::data::{
    generate_synthetic, Dataset, EncodedSample, ObjectRecord, Sample, SyntheticData, SyntheticSpec,
    Vocabulary,
};
use curvl::model::{encode_caption, encode_objects, ModelDims, ModelParams, ParamSnapshot};
use curvl::numerics::DenseMatrix;
use curvl::training::{metrics_csv, run_ablation, run_ablation_cells, Arm, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, ok: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {n}: {} {}",
        if ok { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
}

// ---------------------------------------------------------------------------
// Random small instances.

struct Instance {
    samples: Vec<EncodedSample>,
    params: ModelParams,
    prior: ParamSnapshot,
    sched: Schedule,
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::new(
        r,
        c,
        (0..r * c)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, dims: ModelDims, scale: f64) -> ModelParams {
    ModelParams {
        text_embeddings: random_matrix(rng, dims.vocab_size, dims.embed_dim, scale),
        visual_projection: random_matrix(rng, dims.visual_feat_dim, dims.embed_dim, scale),
        visual_bias: (0..dims.embed_dim)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    }
}

fn random_instance(seed: u64, max_b: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=max_b);
    let d = rng.random_range(1..=8);
    let dv = rng.random_range(1..=6);
    let vocab = rng.random_range(1..=7);
    let dims = ModelDims::new(vocab, d, dv).unwrap();
    let samples = (0..b)
        .map(|i| {
            let n_o = rng.random_range(1..=4);
            let n_c = rng.random_range(1..=5);
            EncodedSample {
                id: format!("s{i}"),
                features: random_matrix(&mut rng, n_o, dv, 1.0),
                token_ids: (0..n_c).map(|_| rng.random_range(0..vocab)).collect(),
            }
        })
        .collect();
    let params = random_params(&mut rng, dims, 0.8);
    let prior = ParamSnapshot::new(&random_params(&mut rng, dims, 0.8), 0, 1);
    let total = rng.random_range(1..=20);
    let t = rng.random_range(0..=total);
    Instance {
        samples,
        params,
        prior,
        sched: Schedule::new(t, total).unwrap(),
    }
}

// ---------------------------------------------------------------------------
// Naive, unstabilized reference formulas.

fn naive_embed_objects(features: &DenseMatrix, p: &ModelParams) -> Vec<Vec<f64>> {
    let (n_o, dv) = features.shape();
    let d = p.visual_bias.len();
    let mut out = vec![vec![0.0; d]; n_o];
    for o in 0..n_o {
        for k in 0..d {
            let mut acc = p.visual_bias[k];
            for f in 0..dv {
                acc += features.get(o, f) * p.visual_projection.get(f, k);
            }
            out[o][k] = acc;
        }
    }
    out
}

fn naive_embed_tokens(ids: &[usize], p: &ModelParams) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&t| p.text_embeddings.row(t).to_vec())
        .collect()
}

fn naive_scores(obj: &[Vec<f64>], tok: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut s = vec![vec![0.0; tok.len()]; obj.len()];
    for o in 0..obj.len() {
        for j in 0..tok.len() {
            for k in 0..obj[o].len() {
                s[o][j] += obj[o][k] * tok[j][k];
            }
        }
    }
    s
}

/// Plain `exp(x) / Σ exp(x)` per column, no max shift.
fn naive_attention(s: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n_o = s.len();
    let n_c = s[0].len();
    let mut a = vec![vec![0.0; n_c]; n_o];
    for j in 0..n_c {
        let mut z = 0.0;
        for row in s {
            z += row[j].exp();
        }
        for o in 0..n_o {
            a[o][j] = s[o][j].exp() / z;
        }
    }
    a
}

/// Global score of one pair, with damping computed from `prior` when given.
fn naive_global(
    image: &EncodedSample,
    caption: &EncodedSample,
    p: &ModelParams,
    damping: Option<(&ModelParams, f64)>,
) -> f64 {
    let s = naive_scores(
        &naive_embed_objects(&image.features, p),
        &naive_embed_tokens(&caption.token_ids, p),
    );
    let a = naive_attention(&s);
    let n_c = caption.token_ids.len();
    let factors: Vec<f64> = match damping {
        None => vec![1.0; n_c],
        Some((prior, frac)) => {
            let ps = naive_scores(
                &naive_embed_objects(&image.features, prior),
                &naive_embed_tokens(&caption.token_ids, prior),
            );
            let pa = naive_attention(&ps);
            (0..n_c)
                .map(|j| {
                    let m = pa.iter().map(|row| row[j]).fold(f64::MIN, f64::max);
                    (-m * frac).exp()
                })
                .collect()
        }
    };
    let mut g = 0.0;
    for j in 0..n_c {
        for o in 0..s.len() {
            g += a[o][j] * factors[j] * s[o][j];
        }
    }
    g / n_c as f64
}

fn naive_loss(inst: &Instance, mode: LossMode) -> f64 {
    let b = inst.samples.len();
    let damping = match mode {
        LossMode::Plain => None,
        _ => Some((inst.prior.params(), inst.sched.fraction())),
    };
    let mut g = vec![vec![0.0; b]; b];
    for i in 0..b {
        for c in 0..b {
            g[i][c] = naive_global(&inst.samples[i], &inst.samples[c], &inst.params, damping);
        }
    }
    let mut total = 0.0;
    for k in 0..b {
        let mut z = 0.0;
        for c in 0..b {
            z += g[k][c].exp();
        }
        for i in 0..b {
            if i != k {
                z += g[i][k].exp();
            }
        }
        total += -g[k][k] + z.ln();
    }
    total / b as f64
}

fn batch_refs(inst: &Instance) -> Vec<&EncodedSample> {
    inst.samples.iter().collect()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_check() {
    const H: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;
    const ABS_FLOOR: f64 = 1e-8;
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..120u64 {
        let inst = random_instance(1_000 + seed, 3);
        let batch = batch_refs(&inst);
        for mode in LossMode::ALL {
            let (_, grads) =
                batch_loss_gradients(&batch, &inst.params, Some(&inst.prior), inst.sched, mode)
                    .unwrap();
            let analytic = grads.flatten();
            for (idx, &g) in analytic.iter().enumerate() {
                let mut plus = inst.params.clone();
                *plus.entry_mut(idx) += H;
                let mut minus = inst.params.clone();
                *minus.entry_mut(idx) -= H;
                let lp = batch_contrastive_loss(&batch, &plus, Some(&inst.prior), inst.sched, mode)
                    .unwrap();
                let lm =
                    batch_contrastive_loss(&batch, &minus, Some(&inst.prior), inst.sched, mode)
                        .unwrap();
                let numeric = (lp - lm) / (2.0 * H);
                let scale = g.abs().max(numeric.abs());
                // Near-zero entries are held to |diff| < ABS_FLOOR instead (the
                // difference quotient carries ~1e-11 of rounding noise there),
                // rescaled so one threshold covers both cases.
                let err = if scale < ABS_FLOOR {
                    (g - numeric).abs() / ABS_FLOOR * REL_TOL
                } else {
                    (g - numeric).abs() / scale
                };
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = worst < REL_TOL && elapsed < Duration::from_secs(10);
    report(
        1,
        ok,
        format!("120 instances x 3 modes, {checked} entries, max rel err {worst:.2e} (< 1e-4), {elapsed:.2?} (< 10s)"),
    );
    assert!(ok);
}

#[test]
fn criterion_2_oracle_equivalence() {
    const TOL: f64 = 1e-9;
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..1000u64 {
        let inst = random_instance(50_000 + seed, 3);
        let p = &inst.params;
        let first = &inst.samples[0];

        // Scores and attention for one pair.
        let obj = encode_objects(&first.features, p).unwrap();
        let tok = encode_caption(&first.token_ids, p).unwrap();
        let m = prior_max_alignment_pair(&inst.prior, &first.features, &first.token_ids).unwrap();
        let t = align(&obj, &tok, Some((&m, inst.sched))).unwrap();
        let ns = naive_scores(
            &naive_embed_objects(&first.features, p),
            &naive_embed_tokens(&first.token_ids, p),
        );
        let na = naive_attention(&ns);
        for o in 0..ns.len() {
            for j in 0..ns[0].len() {
                worst = worst.max((t.scores.get(o, j) - ns[o][j]).abs());
                worst = worst.max((t.attention.get(o, j) - na[o][j]).abs());
            }
        }
        let ng = naive_global(
            first,
            first,
            p,
            Some((inst.prior.params(), inst.sched.fraction())),
        );
        worst = worst.max((t.global - ng).abs());
        let plain = align(&obj, &tok, None).unwrap();
        worst = worst.max((plain.global - naive_global(first, first, p, None)).abs());

        // Batch loss in every mode.
        let batch = batch_refs(&inst);
        for mode in LossMode::ALL {
            let fast =
                batch_contrastive_loss(&batch, p, Some(&inst.prior), inst.sched, mode).unwrap();
            worst = worst.max((fast - naive_loss(&inst, mode)).abs());
        }
    }
    let elapsed = start.elapsed();
    let ok = worst <= TOL && elapsed < Duration::from_secs(5);
    report(
        2,
        ok,
        format!("1000 instances, max abs diff {worst:.2e} (<= 1e-9), {elapsed:.2?} (< 5s)"),
    );
    assert!(ok);
}

#[test]
fn criterion_3_analytic_loss_values() {
    let mut worst_single = 0.0f64;
    for seed in 0..50u64 {
        let mut inst = random_instance(90_000 + seed, 1);
        inst.samples.truncate(1);
        let batch = batch_refs(&inst);
        for mode in LossMode::ALL {
            let l =
                batch_contrastive_loss(&batch, &inst.params, Some(&inst.prior), inst.sched, mode)
                    .unwrap();
            worst_single = worst_single.max(l.abs());
        }
    }

    // Two identical pairs make all four global scores equal.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = ModelDims::new(4, 5, 3).unwrap();
    let params = random_params(&mut rng, dims, 0.7);
    let s = EncodedSample {
        id: "a".into(),
        features: random_matrix(&mut rng, 3, 3, 1.0),
        token_ids: vec![0, 2, 3],
    };
    let twin = EncodedSample {
        id: "b".into(),
        ..s.clone()
    };
    let sched = Schedule::new(0, 1).unwrap();
    let l2 = batch_contrastive_loss(&[&s, &twin], &params, None, sched, LossMode::Plain).unwrap();
    let err_ln3 = (l2 - 3f64.ln()).abs();

    let ok = worst_single <= 1e-12 && err_ln3 <= 1e-9;
    report(
        3,
        ok,
        format!("B=1 max |loss| {worst_single:.1e} (<= 1e-12); equal-score B=2 |loss - ln 3| {err_ln3:.1e} (<= 1e-9)"),
    );
    assert!(ok);
}

#[test]
fn criterion_4_damping_neutrality() {
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let inst = random_instance(120_000 + seed, 3);
        let batch = batch_refs(&inst);
        let zero = Schedule::new(0, inst.sched.total()).unwrap();
        let plain = batch_contrastive_loss(&batch, &inst.params, None, inst.sched, LossMode::Plain)
            .unwrap();
        for mode in [LossMode::Cr, LossMode::Cp] {
            let at_zero =
                batch_contrastive_loss(&batch, &inst.params, Some(&inst.prior), zero, mode)
                    .unwrap();
            let no_prior =
                batch_contrastive_loss(&batch, &inst.params, None, inst.sched, mode).unwrap();
            worst = worst
                .max((at_zero - plain).abs())
                .max((no_prior - plain).abs());
        }
    }
    let ok = worst <= 1e-12;
    report(
        4,
        ok,
        format!("200 batches, max |L_damped - L| {worst:.1e} (<= 1e-12)"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------

/// Ten hand-written captions over the concepts dog, cat, ball, tree, car.
fn fixture() -> (Dataset, ConceptLexicon) {
    let captions = [
        ("s01", "a dog runs"),
        ("s02", "the cat sleeps"),
        ("s03", "a dog and a cat"),
        ("s04", "dog with ball"),
        ("s05", "cat under a tree near a dog"),
        ("s06", "grass and sky"),
        ("s07", "dog dog dog"),
        ("s08", "car tree ball dog"),
        ("s09", "a Ball and a Car"),
        ("s10", "car ball tree"),
    ];
    let mut tokens: Vec<String> = Vec::new();
    for (_, c) in captions {
        for w in c.split(' ') {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
    }
    let samples = captions
        .iter()
        .map(|(id, c)| Sample {
            id: id.to_string(),
            objects: vec![ObjectRecord {
                feature: vec![0.0],
                label: None,
            }],
            caption_tokens: c.split(' ').map(String::from).collect(),
        })
        .collect();
    let dataset = Dataset::new(1, Vocabulary::new(tokens).unwrap(), samples).unwrap();
    let lexicon = ConceptLexicon::new(
        ["dog", "cat", "ball", "tree", "car"]
            .map(String::from)
            .to_vec(),
    )
    .unwrap();
    (dataset, lexicon)
}

fn ids(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn stats(rows: &[(usize, usize, f64, f64)], excluded: usize) -> CurriculumStats {
    CurriculumStats {
        phases: rows
            .iter()
            .map(|&(phase, captions, prev, one)| PhaseStats {
                phase,
                captions,
                previously_seen_fraction: prev,
                one_new_fraction: one,
            })
            .collect(),
        excluded,
    }
}

#[test]
fn criterion_5_partition_fixture() {
    let (dataset, lexicon) = fixture();
    let mut failures = Vec::new();

    // Drop: the four-concept caption s08 is excluded along with s06.
    let part = partition_dataset(&dataset, &lexicon, 3, OverflowPolicy::Drop).unwrap();
    let got: Vec<Vec<String>> = part.phases().map(|(_, v)| v.to_vec()).collect();
    let want = vec![
        ids(&["s01", "s02", "s07"]),
        ids(&["s03", "s04", "s09"]),
        ids(&["s05", "s10"]),
    ];
    if got != want {
        failures.push(format!("drop phases {got:?}"));
    }
    if part.excluded() != ids(&["s06", "s08"]).as_slice() {
        failures.push(format!("drop excluded {:?}", part.excluded()));
    }
    // dog=0 cat=1 ball=2 tree=3 car=4
    let intro: BTreeMap<usize, usize> = [(0, 1), (1, 1), (2, 2), (3, 3), (4, 2)].into();
    if part.introduced_at() != &intro {
        failures.push(format!("introduced_at {:?}", part.introduced_at()));
    }
    let csv = "sample_id,phase,new_concept_count\n\
               s01,1,1\ns02,1,1\ns07,1,1\n\
               s03,2,0\ns04,2,1\ns09,2,2\n\
               s05,3,1\ns10,3,1\n";
    if part.to_csv() != csv {
        failures.push(format!("partition csv {:?}", part.to_csv()));
    }
    let st = curriculum_stats(&part, &dataset, &lexicon).unwrap();
    let want_stats = stats(
        &[
            (1, 3, 1.0, 1.0),
            (2, 3, 2.0 / 3.0, 1.0 / 3.0),
            (3, 2, 1.0, 1.0),
        ],
        2,
    );
    if st != want_stats {
        failures.push(format!("drop stats {st:?}"));
    }

    // Clamp: s08 joins the last phase; its only unseen concept is tree.
    let part = partition_dataset(&dataset, &lexicon, 3, OverflowPolicy::Clamp).unwrap();
    if part.phase(3) != ids(&["s05", "s08", "s10"]).as_slice()
        || part.excluded() != ids(&["s06"]).as_slice()
    {
        failures.push(format!(
            "clamp phase 3 {:?} excluded {:?}",
            part.phase(3),
            part.excluded()
        ));
    }
    let st = curriculum_stats(&part, &dataset, &lexicon).unwrap();
    let want_stats = stats(
        &[
            (1, 3, 1.0, 1.0),
            (2, 3, 2.0 / 3.0, 1.0 / 3.0),
            (3, 3, 1.0, 1.0),
        ],
        1,
    );
    if st != want_stats {
        failures.push(format!("clamp stats {st:?}"));
    }

    let ok = failures.is_empty();
    report(
        5,
        ok,
        if ok {
            "10-caption fixture matches (drop and clamp)".to_string()
        } else {
            failures.join("; ")
        },
    );
    assert!(ok, "{failures:?}");
}

// ---------------------------------------------------------------------------
// Directional experiments on the synthetic acceptance set.

const SEEDS: [u64; 3] = [0, 1, 2];
const CHANCE: f64 = 1.0 / 12.0;

fn acceptance_data() -> SyntheticData {
    generate_synthetic(&SyntheticSpec {
        num_concepts: 12,
        feature_dim: 32,
        noise_sigma: 0.1,
        scenes_per_phase: vec![800, 700, 500],
        filler_vocab_size: 20,
        eval_scenes: 500,
        seed: 2024,
    })
    .unwrap()
}

fn acceptance_config() -> TrainConfig {
    TrainConfig {
        phases: 3,
        epochs_per_phase: 4,
        batch_size: 32,
        learning_rate: 0.05,
        embed_dim: 16,
        ..TrainConfig::default()
    }
}

const PAIR: [(Arm, LossMode); 2] = [
    (Arm::Baseline, LossMode::Plain),
    (Arm::Curriculum, LossMode::Cp),
];

#[test]
fn criterion_6_directional_reproduction() {
    let data = acceptance_data();
    let start = Instant::now();
    let rep = run_ablation(
        &data.train,
        &data.eval,
        &data.lexicon,
        &acceptance_config(),
        &SEEDS,
    )
    .unwrap();
    let elapsed = start.elapsed();

    let top1 = |r: &curvl::eval::EvalReport| r.overall.top1;
    let later = |r: &curvl::eval::EvalReport| r.top1_from_phase(2);
    let base = rep.mean(Arm::Baseline, LossMode::Plain, top1);
    let ours = rep.mean(Arm::Curriculum, LossMode::Cp, top1);
    let base_later = rep.mean(Arm::Baseline, LossMode::Plain, later);
    let ours_later = rep.mean(Arm::Curriculum, LossMode::Cp, later);

    let a = ours >= base;
    let b = ours_later >= base_later;
    let c = ours >= 5.0 * CHANCE;
    let fast = elapsed < Duration::from_secs(120);
    print!("{}", rep.summary_csv());
    report(
        6,
        a && b && c && fast,
        format!(
            "(a) {} top1 {ours:.4} vs {base:.4}; (b) {} phase>=2 top1 {ours_later:.4} vs {base_later:.4}; \
             (c) {} {ours:.4} >= {:.4}; {elapsed:.2?} (< 120s)",
            verdict(a),
            verdict(b),
            verdict(c),
            5.0 * CHANCE
        ),
    );
    assert!(a, "6(a) curriculum+cp {ours} < baseline+plain {base}");
    assert!(
        b,
        "6(b) curriculum+cp {ours_later} < baseline+plain {base_later} on phase >= 2 concepts"
    );
    assert!(c, "6(c) curriculum+cp {ours} below 5x chance");
    assert!(fast, "ran for {elapsed:?}");
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

#[test]
fn criterion_7_low_data() {
    let data = acceptance_data();
    let mut ok = true;
    let mut details = Vec::new();
    for fraction in [0.5, 0.25] {
        let config = TrainConfig {
            data_fraction: fraction,
            ..acceptance_config()
        };
        let rep = run_ablation_cells(
            &data.train,
            &data.eval,
            &data.lexicon,
            &config,
            &SEEDS,
            &PAIR,
        )
        .unwrap();
        let wins = SEEDS
            .iter()
            .filter(|&&s| {
                let base = rep
                    .cell(s, Arm::Baseline, LossMode::Plain)
                    .unwrap()
                    .report
                    .overall
                    .top1;
                let ours = rep
                    .cell(s, Arm::Curriculum, LossMode::Cp)
                    .unwrap()
                    .report
                    .overall
                    .top1;
                ours >= base
            })
            .count();
        ok &= wins >= 2;
        details.push(format!("fraction {fraction}: {wins}/3 seeds"));
    }
    report(7, ok, format!("{} (need >= 2/3 each)", details.join(", ")));
    assert!(ok);
}

#[test]
fn criterion_8_determinism() {
    // A reduced copy of the acceptance set keeps this quick; every artifact
    // of the full grid is compared byte for byte.
    let data = generate_synthetic(&SyntheticSpec {
        num_concepts: 12,
        feature_dim: 32,
        noise_sigma: 0.1,
        scenes_per_phase: vec![160, 140, 100],
        filler_vocab_size: 20,
        eval_scenes: 100,
        seed: 2024,
    })
    .unwrap();
    let config = acceptance_config();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let rep = run_ablation(&data.train, &data.eval, &data.lexicon, &config, &SEEDS).unwrap();
        rep.write(dir.path(), &data.train).unwrap();
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let path = entry.unwrap().path();
            files.insert(
                path.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&path).unwrap(),
            );
        }
        let csvs: Vec<String> = rep
            .cells
            .iter()
            .map(|c| metrics_csv(&c.run.metrics))
            .collect();
        (files, csvs)
    };
    let (first, csv1) = run();
    let (second, csv2) = run();
    let metrics = first.keys().filter(|k| k.starts_with("metrics_")).count();
    let checkpoints = first
        .keys()
        .filter(|k| k.starts_with("checkpoint_"))
        .count();
    let ok = first == second && csv1 == csv2 && metrics == 15 && checkpoints == 15;
    report(
        8,
        ok,
        format!("{} files ({metrics} metrics CSVs, {checkpoints} checkpoints) byte-identical across two runs", first.len()),
    );
    assert!(ok);
}
