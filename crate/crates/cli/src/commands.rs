use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ossl_core::data::{read_dataset, DatasetManifest, ImageSample, OpenSetSplit};
use ossl_core::eval::{auroc, compare_variants, truth_tag, Metrics, RunRecord, ScoredSample};
use ossl_core::pipeline::{finetune, pretrain, training_accuracy, FinetunedState, PretrainedState, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::args::{Command, CompareArgs, EvalArgs, GenDataArgs, PretrainArgs, ReproduceArgs, RunAllArgs, StageArgs, TrainArgs};
use crate::manifest::{
    DatasetRecord, RunManifest, CONFIG, EVENTS, FINETUNED, JOINT_SPACE, LOSSES, METRICS, PRETRAINED,
};
use crate::source::DataSource;
use crate::{sweep, CliError, CliResult, EXIT_MISMATCH};

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::RunAll(a) => cmd_run_all(&a),
        Command::Reproduce(a) => cmd_reproduce(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

/// One progress line on stdout per fine-tuning epoch.
#[derive(Debug, Serialize)]
struct EpochLine {
    epoch: usize,
    l_s: f64,
    l_c: f64,
    l_cl: f64,
    auroc_val: Option<f64>,
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let source = match &a.cifar {
        Some(dir) => DataSource::cifar(dir.clone(), a.cifar_id.clone(), a.seed),
        None => DataSource::Synthetic(a.synth.config(a.seed)),
    };
    let manifest = source.materialize(&a.out)?;
    info!("dataset written to {} (checksum {})", a.out.display(), manifest.checksum());
    Ok(())
}

fn load_data(dir: &Path) -> CliResult<(OpenSetSplit, DatasetManifest)> {
    Ok(read_dataset(dir)?)
}

/// Dataset of a run, checked against the checksum recorded at pre-training.
fn run_data(run: &Path, manifest: &RunManifest) -> CliResult<OpenSetSplit> {
    let dir = manifest.dataset_dir(run);
    let (split, dm) = load_data(&dir)?;
    if dm.checksum() != manifest.dataset.checksum {
        return Err(CliError::artifact(format!(
            "dataset {} does not match the checksum recorded for this run",
            dir.display()
        )));
    }
    Ok(split)
}

fn append_event(run: &Path, line: &str) -> CliResult<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(run.join(EVENTS))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Dataset path as stored in the manifest: relative when it lives inside the run.
fn stored_dir(run: &Path, data: &Path) -> PathBuf {
    data.strip_prefix(run).map(Path::to_path_buf).unwrap_or_else(|_| data.to_path_buf())
}

fn write_config(run: &Path, cfg: &TrainConfig) -> CliResult<()> {
    fs::write(run.join(CONFIG), serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

pub fn pretrain_stage(data: &Path, run: &Path, cfg: &TrainConfig) -> CliResult<RunManifest> {
    let (split, dm) = load_data(data)?;
    let source = DataSource::of_manifest(&dm)?;
    fs::create_dir_all(run)?;
    write_config(run, cfg)?;
    let _ = fs::remove_file(run.join(EVENTS));

    let start = Instant::now();
    let state = pretrain(&split.labeled, &split.id_classes, cfg)?;
    let secs = start.elapsed().as_secs_f64();
    for e in &state.history {
        info!("pretrain epoch {}: loss {:.4}, accuracy {:.3}", e.epoch, e.loss, e.accuracy);
    }
    state.save(run.join(PRETRAINED))?;
    let acc = training_accuracy(&state, &split.labeled)?;
    append_event(run, &format!("pretrain: {} epochs, labeled accuracy {acc:.4}", state.history.len()))?;

    let mut manifest = RunManifest::new(
        cfg.clone(),
        DatasetRecord {
            dir: stored_dir(run, data),
            checksum: dm.checksum(),
            source,
        },
    );
    manifest.timings.insert("pretrain".into(), secs);
    manifest.record(run, CONFIG)?;
    manifest.record(run, PRETRAINED)?;
    manifest.record(run, EVENTS)?;
    manifest.save(run)?;
    Ok(manifest)
}

fn cmd_pretrain(a: &PretrainArgs) -> CliResult<()> {
    let cfg = a.train.resolve(TrainConfig::default())?;
    pretrain_stage(&a.data, &a.out, &cfg).map(|_| ())
}

/// Fields pre-training consumed; fine-tuning may not change them.
fn pretrain_fields(c: &TrainConfig) -> serde_json::Value {
    json!([c.p, c.frame, c.n_candidates, c.lr, c.momentum, c.epochs_pretrain, c.batch_size, c.feature_dim, c.seed])
}

pub fn scored(state: &FinetunedState, samples: &[ImageSample]) -> CliResult<Vec<ScoredSample>> {
    let predictions = state.predict_all(samples)?;
    Ok(samples
        .iter()
        .zip(predictions)
        .map(|(s, p)| ScoredSample {
            ood_score: p.ood_score,
            truth: truth_tag(s),
            predicted: Some(state.id_classes[p.class()]),
            actual: s.label,
        })
        .collect())
}

fn write_losses(run: &Path, state: &FinetunedState) -> CliResult<()> {
    let mut out = String::from("step,epoch,l_s,l_c,l_cl,total,n_confident\n");
    for r in &state.losses {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.epoch, l.l_s, l.l_c, l.l_cl, l.total, l.n_confident
        ));
    }
    fs::write(run.join(LOSSES), out)?;
    Ok(())
}

pub fn finetune_stage(run: &Path, overrides: &TrainArgs) -> CliResult<RunManifest> {
    let mut manifest = RunManifest::load(run)?;
    let cfg = overrides.resolve(manifest.config.clone())?;
    if pretrain_fields(&cfg) != pretrain_fields(&manifest.config) {
        return Err(CliError::usage(
            "p, frame, n_candidates, lr, momentum, epochs_pretrain, batch_size, feature_dim and seed are fixed at pre-training",
        ));
    }
    let ckpt = manifest.verified(run, PRETRAINED)?;
    let split = run_data(run, &manifest)?;
    let pre = PretrainedState::load(ckpt)?;

    let start = Instant::now();
    let test = &split.test;
    let mut progress = |r: &ossl_core::pipeline::EpochReport, snapshot: &FinetunedState| {
        // Monitoring only; never fed back into training.
        let auroc_val = scored(snapshot, test).ok().and_then(|s| auroc(&s).ok());
        let line = EpochLine {
            epoch: r.epoch,
            l_s: r.l_s,
            l_c: r.l_c,
            l_cl: r.l_cl,
            auroc_val,
        };
        println!("{}", serde_json::to_string(&line).expect("epoch line serializes"));
    };
    let replay = cfg.replay_labeled.then_some(split.labeled.as_slice());
    let state = finetune(&pre, &split.unlabeled, replay, &cfg, &mut progress)?;
    let secs = start.elapsed().as_secs_f64();

    write_config(run, &cfg)?;
    state.save(run.join(FINETUNED))?;
    fs::write(run.join(JOINT_SPACE), serde_json::to_vec_pretty(&state.joint_space())?)?;
    write_losses(run, &state)?;
    for e in &state.events {
        append_event(run, &format!("finetune: {e}"))?;
    }
    manifest.config = cfg;
    manifest.forget(&[METRICS]);
    manifest.timings.insert("finetune".into(), secs);
    for name in [CONFIG, FINETUNED, JOINT_SPACE, LOSSES, EVENTS] {
        manifest.record(run, name)?;
    }
    manifest.save(run)?;
    Ok(manifest)
}

fn cmd_finetune(a: &StageArgs) -> CliResult<()> {
    finetune_stage(&a.out, &a.train).map(|_| ())
}

pub fn eval_stage(run: &Path) -> CliResult<Metrics> {
    let mut manifest = RunManifest::load(run)?;
    let ckpt = manifest.verified(run, FINETUNED)?;
    let split = run_data(run, &manifest)?;
    let state = FinetunedState::load(ckpt)?;
    let start = Instant::now();
    let metrics = Metrics::from_scored(&scored(&state, &split.test)?, manifest.config.seed, manifest.config.hash())?;
    fs::write(run.join(METRICS), serde_json::to_vec_pretty(&metrics)?)?;
    append_event(
        run,
        &format!("eval: auroc {:.4}, accuracy {:.4} ({:?} score)", metrics.auroc, metrics.accuracy, state.score_kind()),
    )?;
    manifest.timings.insert("eval".into(), start.elapsed().as_secs_f64());
    manifest.record(run, METRICS)?;
    manifest.record(run, EVENTS)?;
    manifest.save(run)?;
    info!("{}: auroc {:.4}, accuracy {:.4}", run.display(), metrics.auroc, metrics.accuracy);
    Ok(metrics)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    eval_stage(&a.out).map(|_| ())
}

/// All stages for one config. Without `data`, a dataset is built from
/// `source` into `run/data`.
pub fn run_single(run: &Path, data: Option<&Path>, source: &DataSource, cfg: &TrainConfig) -> CliResult<Metrics> {
    let generated;
    let data = match data {
        Some(d) => d,
        None => {
            generated = run.join("data");
            source.materialize(&generated)?;
            generated.as_path()
        }
    };
    pretrain_stage(data, run, cfg)?;
    finetune_stage(run, &TrainArgs::default())?;
    eval_stage(run)
}

fn cmd_run_all(a: &RunAllArgs) -> CliResult<()> {
    let cfg = a.train.resolve(TrainConfig::default())?;
    if a.ablate.is_empty() {
        let source = DataSource::Synthetic(a.synth.config(cfg.seed));
        run_single(&a.out, a.data.as_deref(), &source, &cfg)?;
        return Ok(());
    }
    let grid = sweep::parse_grid(&a.ablate)?;
    sweep::run_sweep(&a.out, a.data.as_deref(), &a.synth, &cfg, &grid, a.parallel)?;
    Ok(())
}

fn cmd_reproduce(a: &ReproduceArgs) -> CliResult<()> {
    let raw = fs::read(&a.manifest).map_err(|e| CliError::artifact(format!("{}: {e}", a.manifest.display())))?;
    let original: RunManifest =
        serde_json::from_slice(&raw).map_err(|e| CliError::artifact(format!("{}: {e}", a.manifest.display())))?;
    let expected = original
        .artifacts
        .get(METRICS)
        .ok_or_else(|| CliError::artifact("the manifest records no metrics.json to compare against"))?
        .sha256
        .clone();
    fs::create_dir_all(&a.out)?;
    let data = a.out.join("data");
    let dm = original.dataset.source.materialize(&data)?;
    if dm.checksum() != original.dataset.checksum {
        return Err(CliError::new(EXIT_MISMATCH, "rebuilt dataset differs from the recorded checksum"));
    }
    run_single(&a.out, Some(&data), &original.dataset.source, &original.config)?;
    let manifest = RunManifest::load(&a.out)?;
    if manifest.artifacts[METRICS].sha256 != expected {
        return Err(CliError::new(EXIT_MISMATCH, "metrics.json differs from the recorded run"));
    }
    info!("metrics.json reproduced byte for byte");
    Ok(())
}

fn run_record(run: &Path) -> CliResult<RunRecord> {
    let manifest = RunManifest::load(run)?;
    let path = manifest.verified(run, METRICS)?;
    let metrics: Metrics = serde_json::from_slice(&fs::read(path)?)?;
    Ok(RunRecord {
        seed: metrics.seed,
        split_checksum: manifest.dataset.checksum,
        auroc: metrics.auroc,
    })
}

fn cmd_compare(a: &CompareArgs) -> CliResult<()> {
    let runs = |dirs: &[PathBuf]| dirs.iter().map(|d| run_record(d)).collect::<CliResult<Vec<_>>>();
    let report = compare_variants(&a.name_a, &runs(&a.a)?, &a.name_b, &runs(&a.b)?)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(a.out.with_extension("csv"), report.to_csv())?;
    let md = report.to_markdown();
    fs::write(a.out.with_extension("md"), &md)?;
    eprint!("{md}");
    Ok(())
}
