use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use irl_core::eval::{self, DistanceProfile, SuiteResult};
use irl_core::features::FeaturePipeline;
use irl_core::losses::SchemeKind;
use irl_core::seq2seq::{self, CheckpointMeta, Seq2Seq};
use irl_core::synthcorpus::{build_corpus, Corpus, Split};
use irl_core::training::{self, RunOptions, RunSpec, SearchConfig, TrainData};
use serde_json::json;

use crate::config::RunConfig;
use crate::{CliError, Suite};

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn read_corpus(cfg: &RunConfig) -> anyhow::Result<Corpus> {
    let dir = cfg.corpus_path()?;
    log::info!("reading corpus from {}", dir.display());
    Corpus::read(dir).with_context(|| format!("reading corpus {}", dir.display()))
}

fn base_spec(cfg: &RunConfig, data: &TrainData) -> RunSpec {
    RunSpec {
        scheme: cfg.scheme.resolve(cfg.scheme.kind),
        model: cfg.model_config(data.vocab.clone(), data.num_coeffs()),
        train: cfg.train_config(),
        seed: cfg.seeds[0],
    }
}

pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> anyhow::Result<()> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::Path(format!("{}: parent directory does not exist", out.display())).into());
    }
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Path(format!("{}: not a directory", out.display())).into());
        }
        if fs::read_dir(out)?.next().is_some() && !force {
            return Err(CliError::RefusedOverwrite(out.to_path_buf()).into());
        }
    }
    let corpus = build_corpus(&cfg.corpus)?;
    corpus.validate()?;
    corpus.write(out)?;
    let hash = corpus.manifest_hash();
    fs::write(out.join("manifest.sha256"), format!("{hash}\n"))?;
    let mut counts = serde_json::Map::new();
    for s in Split::ALL {
        counts.insert(s.as_str().into(), corpus.split(s).count().into());
    }
    emit(json!({
        "dir": out,
        "manifest_hash": hash,
        "utterances": counts,
        "noise_tracks": corpus.noise.tracks.len(),
    }));
    Ok(())
}

fn run_dir(cfg: &RunConfig, kind: SchemeKind, seed: u64) -> PathBuf {
    cfg.out_root().join("train").join(format!("{kind}-s{seed}"))
}

pub fn train(cfg: &RunConfig, epoch_limit: Option<usize>) -> anyhow::Result<()> {
    let corpus = read_corpus(cfg)?;
    let data = TrainData::from_corpus(&corpus, cfg.features.clone())?;
    let base = base_spec(cfg, &data);
    let dev_other: Vec<_> = data.dev_other.iter().collect();
    let mut failed = Vec::new();
    for &seed in &cfg.seeds {
        let dir = run_dir(cfg, base.scheme.kind, seed);
        let spec = RunSpec { seed, ..base.clone() };
        let opts = RunOptions {
            out_dir: Some(dir.clone()),
            epoch_limit,
        };
        let res = training::train(&data, &spec, &opts).and_then(|o| {
            let c = training::examples_cer(&o.best, &dev_other, cfg.decode())?;
            Ok((o, c))
        });
        match res {
            Ok((o, dev_other_cer)) => {
                let last = o.log.records.last();
                emit(json!({
                    "scheme": spec.scheme.kind,
                    "seed": seed,
                    "dir": dir,
                    "epochs": o.log.records.len(),
                    "finished": o.finished,
                    "best_epoch": o.best_epoch,
                    "val_perplexity": last.map(|r| r.val_perplexity),
                    "dev_other_cer": dev_other_cer,
                    "config_hash": o.config_hash,
                }));
            }
            Err(e) => {
                eprintln!("{}: {e}", dir.display());
                failed.push(format!("{}-s{seed}", spec.scheme.kind));
            }
        }
    }
    partial(failed, cfg.seeds.len())
}

fn partial(failed: Vec<String>, total: usize) -> anyhow::Result<()> {
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial { failed, total }.into())
    }
}

/// Loads a checkpoint and the pipeline it was trained with, refusing a
/// corpus or feature config other than the one it was trained on.
fn load_model(cfg: &RunConfig, path: &Path, corpus: &Corpus) -> anyhow::Result<(CheckpointMeta, Seq2Seq, FeaturePipeline)> {
    if !path.is_file() {
        return Err(CliError::Path(format!("{}: no such checkpoint", path.display())).into());
    }
    let (meta, model) = seq2seq::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let hash = corpus.manifest_hash();
    if meta.corpus_hash != hash {
        return Err(CliError::IncompatibleCheckpoint(format!(
            "{} was trained on corpus {} but {} has hash {hash}",
            path.display(),
            meta.corpus_hash,
            cfg.corpus_path()?.display()
        ))
        .into());
    }
    let (Some(features), Some(stats)) = (meta.features.clone(), meta.feature_stats.clone()) else {
        return Err(CliError::IncompatibleCheckpoint(format!("{} has no feature pipeline", path.display())).into());
    };
    if features != cfg.features {
        return Err(CliError::IncompatibleCheckpoint(format!(
            "{} was trained with a different feature config",
            path.display()
        ))
        .into());
    }
    if model.config().vocab != corpus.vocab {
        return Err(CliError::IncompatibleCheckpoint("vocabulary differs from the corpus".into()).into());
    }
    Ok((meta, model, FeaturePipeline::new(features, stats)))
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, suite: Suite) -> anyhow::Result<()> {
    let corpus = read_corpus(cfg)?;
    let (_, model, pipeline) = load_model(cfg, checkpoint, &corpus)?;
    match suite {
        Suite::Clean => {
            for split in [Split::DevClean, Split::DevOther, Split::TestClean, Split::TestOther] {
                let items = eval::eval_items(&corpus, &[split]);
                let (c, _) = eval::evaluate_condition(
                    &model,
                    &pipeline,
                    &items,
                    &eval::Condition::Clean,
                    &corpus.noise,
                    cfg.eval.eval_seed,
                    cfg.decode(),
                )?;
                emit(json!({ "split": split.as_str(), "utterances": items.len(), "cer": c }));
            }
        }
        Suite::Ood => {
            let r = ood(cfg, &corpus, &model, &pipeline, &checkpoint.display().to_string())?;
            print!("{}", eval::cer_table_tsv(&[r]));
        }
    }
    Ok(())
}

fn test_items(corpus: &Corpus) -> Vec<eval::EvalItem> {
    eval::eval_items(corpus, &[Split::TestClean, Split::TestOther])
}

fn ood(cfg: &RunConfig, corpus: &Corpus, model: &Seq2Seq, pipeline: &FeaturePipeline, name: &str) -> anyhow::Result<SuiteResult> {
    Ok(eval::ood_suite(
        name,
        model,
        pipeline,
        &test_items(corpus),
        &eval::ood_conditions(),
        &corpus.noise,
        cfg.eval.eval_seed,
        cfg.decode(),
    )?)
}

/// Distances on held-out test-other pairs and the mean encoder norm on
/// their clean members.
fn profile(cfg: &RunConfig, corpus: &Corpus, model: &Seq2Seq, pipeline: &FeaturePipeline) -> anyhow::Result<(DistanceProfile, f64)> {
    let ex = training::split_examples(corpus, Split::TestOther, pipeline)?;
    let pairs = training::analysis_pairs(pipeline, &corpus.noise, &ex, cfg.eval.analysis_pairs, cfg.eval.analysis_seed)?;
    let d = eval::distance_profile(model, &pairs)?;
    let clean: Vec<_> = pairs.into_iter().map(|p| p.clean).collect();
    Ok((d, eval::encoder_norm(model, &clean)?))
}

pub fn analyze(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<()> {
    let corpus = read_corpus(cfg)?;
    let (_, model, pipeline) = load_model(cfg, checkpoint, &corpus)?;
    let (d, norm) = profile(cfg, &corpus, &model, &pipeline)?;
    for (i, layer) in d.layers.iter().enumerate() {
        emit(json!({ "layer": layer, "l2": d.l2[i], "cosine": d.cosine[i], "pairs": d.pairs }));
    }
    emit(json!({ "encoder_norm": norm, "pairs": d.pairs }));
    Ok(())
}

pub fn search(cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus = read_corpus(cfg)?;
    let data = TrainData::from_corpus(&corpus, cfg.features.clone())?;
    let base = base_spec(cfg, &data);
    let out = cfg.out_root().join("search").join(base.scheme.kind.as_str());
    let sc = SearchConfig {
        seeds: cfg.seeds.clone(),
        decode: cfg.decode(),
        parallel: 1,
        out_root: Some(out.clone()),
    };
    let r = training::grid_search(&data, &base, &cfg.search.grid, cfg.search.full_cross, &sc)?;
    let mut lines = String::new();
    for c in &r.tried {
        let l = serde_json::to_string(c)?;
        println!("{l}");
        lines.push_str(&l);
        lines.push('\n');
    }
    fs::write(out.join("search.jsonl"), lines)?;
    emit(json!({ "best": r.best }));
    Ok(())
}

/// Rows are tapped layers, columns are schemes.
fn distance_tsv(names: &[String], profiles: &[DistanceProfile]) -> String {
    let mut s = String::from("layer");
    for n in names {
        s.push('\t');
        s.push_str(n);
    }
    s.push('\n');
    if let Some(first) = profiles.first() {
        for (i, layer) in first.layers.iter().enumerate() {
            s.push_str(layer);
            for p in profiles {
                let _ = write!(s, "\t{:.6}", p.l2[i]);
            }
            s.push('\n');
        }
    }
    s
}

pub fn compare(cfg: &RunConfig, schemes: &[SchemeKind], parallel: usize) -> anyhow::Result<()> {
    let corpus = read_corpus(cfg)?;
    let data = TrainData::from_corpus(&corpus, cfg.features.clone())?;
    let base = base_spec(cfg, &data);
    let out = cfg.out_root().join("compare");
    fs::create_dir_all(&out)?;
    let sc = SearchConfig {
        seeds: cfg.seeds.clone(),
        decode: cfg.decode(),
        parallel,
        out_root: Some(out.join("runs")),
    };
    let mut suites = Vec::new();
    let mut profiles = Vec::new();
    let mut names = Vec::new();
    let mut results = String::new();
    let mut failed = Vec::new();
    for &kind in schemes {
        let scheme = cfg.scheme.resolve(kind);
        let res = training::best_of_seeds(&data, &base, scheme, &sc).map_err(anyhow::Error::from).and_then(|(best, o, seeds)| {
            let suite = ood(cfg, &corpus, &o.best, &data.pipeline, kind.as_str())?;
            let (d, norm) = profile(cfg, &corpus, &o.best, &data.pipeline)?;
            Ok((best, seeds, suite, d, norm))
        });
        match res {
            Ok((best, seeds, suite, d, norm)) => {
                let line = json!({
                    "scheme": kind,
                    "best": best,
                    "seeds": seeds,
                    "cer": suite.conditions.iter().cloned().zip(suite.cer.iter().map(|&c| json!(c))).collect::<serde_json::Map<_, _>>(),
                    "distances": d,
                    "encoder_norm": norm,
                })
                .to_string();
                results.push_str(&line);
                results.push('\n');
                names.push(kind.to_string());
                suites.push(suite);
                profiles.push(d);
            }
            Err(e) => {
                eprintln!("{kind}: {e:#}");
                failed.push(kind.to_string());
            }
        }
    }
    let table = eval::cer_table_tsv(&suites);
    fs::write(out.join("cer.tsv"), &table)?;
    fs::write(out.join("distances.tsv"), distance_tsv(&names, &profiles))?;
    fs::write(out.join("results.jsonl"), results)?;
    print!("{table}");
    partial(failed, schemes.len())
}
