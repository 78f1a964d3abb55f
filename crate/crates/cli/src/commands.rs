use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use curvl::curriculum::{
    curriculum_stats, partition_dataset, ConceptLexicon, CurriculumStats, PhasePartition,
};
use curvl::data::{generate_synthetic, Dataset, Vocabulary};
use curvl::eval::{classify_objects, EvalReport, LabelSet};
use curvl::model::Checkpoint;
use curvl::training::{metrics_csv, run_ablation, train};
use tempfile::TempDir;

use crate::config::RunConfig;

/// Output files are written into a hidden directory next to their final
/// location and moved into place only once every one of them exists, so a
/// failing command leaves nothing behind.
struct Staging {
    dest: PathBuf,
    dir: TempDir,
}

impl Staging {
    fn new(dest: &Path) -> Result<Self> {
        if !dest.is_dir() {
            bail!("output directory {} does not exist", dest.display());
        }
        let dir = tempfile::Builder::new()
            .prefix(".curvl-staging-")
            .tempdir_in(dest)
            .with_context(|| format!("output directory {} is not writable", dest.display()))?;
        Ok(Self {
            dest: dest.to_path_buf(),
            dir,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }

    /// Moves every staged file into the destination; returns the final paths.
    fn commit(self) -> Result<Vec<PathBuf>> {
        let mut names: Vec<_> = fs::read_dir(self.dir.path())?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            let target = self.dest.join(&name);
            fs::rename(self.dir.path().join(&name), &target)
                .with_context(|| format!("cannot move output into {}", target.display()))?;
            out.push(target);
        }
        Ok(out)
    }
}

fn input(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    let path = cfg.path(key)?;
    if !path.is_file() {
        bail!("{key} file {} does not exist", path.display());
    }
    Ok(path)
}

fn load_lexicon(path: &Path) -> Result<ConceptLexicon> {
    let lexicon = ConceptLexicon::load(path)?;
    if lexicon.is_empty() {
        eprintln!(
            "warning: lexicon {} is empty; every sample will be excluded",
            path.display()
        );
    }
    Ok(lexicon)
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synthetic_spec()?;
    let stage = Staging::new(&cfg.output_dir())?;
    let data = generate_synthetic(&spec)?;
    data.train.write(&stage.path("train.jsonl"))?;
    data.eval.write(&stage.path("eval.jsonl"))?;
    data.lexicon.save(&stage.path("lexicon.txt"))?;

    // Reload what was written before publishing it.
    let train_back = Dataset::load(&stage.path("train.jsonl"))?;
    let eval_back = Dataset::load(&stage.path("eval.jsonl"))?;
    let lexicon_back = ConceptLexicon::load(&stage.path("lexicon.txt"))?;
    if train_back != data.train || eval_back != data.eval || lexicon_back != data.lexicon {
        bail!("generated files did not reload identically");
    }

    let written = stage.commit()?;
    for (p, n) in spec.scenes_per_phase.iter().enumerate() {
        println!("phase {}: {n} scenes", p + 1);
    }
    println!("eval: {} scenes", data.eval.len());
    announce(&written);
    Ok(())
}

fn partition_inputs(
    cfg: &RunConfig,
) -> Result<(Dataset, ConceptLexicon, PhasePartition, CurriculumStats)> {
    let train_path = input(cfg, "train")?;
    let lexicon_path = input(cfg, "lexicon")?;
    let tc = cfg.train_config()?;
    let dataset = Dataset::load(&train_path)?;
    let lexicon = load_lexicon(&lexicon_path)?;
    let partition = partition_dataset(&dataset, &lexicon, tc.phases, tc.overflow)?;
    let stats = curriculum_stats(&partition, &dataset, &lexicon)?;
    Ok((dataset, lexicon, partition, stats))
}

pub fn partition(cfg: &RunConfig) -> Result<()> {
    let stage = Staging::new(&cfg.output_dir())?;
    let (_, _, partition, stats) = partition_inputs(cfg)?;
    stage.write("partition.csv", &partition.to_csv())?;
    stage.write("stats.csv", &stats.to_csv())?;
    let written = stage.commit()?;
    print!("{}", stats.to_csv());
    println!("excluded: {}", stats.excluded);
    announce(&written);
    Ok(())
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let stage = Staging::new(&cfg.output_dir())?;
    let (_, _, _, stats) = partition_inputs(cfg)?;
    stage.write("stats.csv", &stats.to_csv())?;
    let written = stage.commit()?;
    print!("{}", stats.to_csv());
    println!("excluded: {}", stats.excluded);
    announce(&written);
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let train_path = input(cfg, "train")?;
    let lexicon_path = input(cfg, "lexicon")?;
    let tc = cfg.train_config()?;
    let stage = Staging::new(&cfg.output_dir())?;
    let dataset = Dataset::load(&train_path)?;
    let lexicon = load_lexicon(&lexicon_path)?;

    let run = train(&dataset, &lexicon, &tc)?;
    let checkpoint = run.checkpoint(&dataset, tc.seed)?;
    checkpoint.save(&stage.path("checkpoint.json"))?;
    stage.write("metrics.csv", &metrics_csv(&run.metrics))?;
    if Checkpoint::load(&stage.path("checkpoint.json"))? != checkpoint {
        bail!("checkpoint did not reload identically");
    }
    let written = stage.commit()?;
    if let Some(last) = run.metrics.last() {
        println!(
            "iterations: {}  final loss: {}",
            run.metrics.len(),
            last.loss
        );
    }
    announce(&written);
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let checkpoint_path = input(cfg, "checkpoint")?;
    let eval_path = input(cfg, "eval")?;
    let train_path = input(cfg, "train")?;
    let lexicon_path = input(cfg, "lexicon")?;
    let tc = cfg.train_config()?;
    let stage = Staging::new(&cfg.output_dir())?;

    let checkpoint = Checkpoint::load(&checkpoint_path)?;
    let eval_set = Dataset::load(&eval_path)?;
    let train_set = Dataset::load(&train_path)?;
    let lexicon = load_lexicon(&lexicon_path)?;
    if checkpoint.vocabulary != train_set.vocabulary().tokens() {
        bail!(
            "checkpoint {} was not trained on {}",
            checkpoint_path.display(),
            train_path.display()
        );
    }

    let vocab = Vocabulary::new(checkpoint.vocabulary.clone())?;
    let labels = LabelSet::from_lexicon(&lexicon, &vocab)?;
    let predictions = classify_objects(&eval_set, &checkpoint.params, &labels)?;
    let partition = partition_dataset(&train_set, &lexicon, tc.phases, tc.overflow)?;
    let report = EvalReport::build(&predictions, partition.introduced_at())?;
    let text = report.to_text(&lexicon);
    stage.write("eval_report.txt", &text)?;
    let written = stage.commit()?;
    print!("{text}");
    announce(&written);
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let train_path = input(cfg, "train")?;
    let eval_path = input(cfg, "eval")?;
    let lexicon_path = input(cfg, "lexicon")?;
    let tc = cfg.train_config()?;
    let seeds = cfg.seeds()?;
    let stage = Staging::new(&cfg.output_dir())?;

    let train_set = Dataset::load(&train_path)?;
    let eval_set = Dataset::load(&eval_path)?;
    let lexicon = load_lexicon(&lexicon_path)?;
    let report = run_ablation(&train_set, &eval_set, &lexicon, &tc, &seeds)?;
    report.write(stage.dir.path(), &train_set)?;
    let written = stage.commit()?;
    print!("{}", report.summary_csv());
    println!(
        "wrote {} files to {}",
        written.len(),
        cfg.output_dir().display()
    );
    Ok(())
}
