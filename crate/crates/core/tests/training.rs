use irl_core::eval::DecodeOptions;
use irl_core::features::FeatureConfig;
use irl_core::losses::{SchemeKind, TrainScheme};
use irl_core::seq2seq::{self, ModelConfig};
use irl_core::synthcorpus::{build_corpus, CorpusConfig};
use irl_core::training::{self, files, RunOptions, RunSpec, SearchConfig, TrainConfig, TrainData, TrainLog};

fn small_data(train: usize) -> TrainData {
    let cfg = CorpusConfig {
        train,
        dev_clean: 6,
        dev_other: 6,
        test_clean: 4,
        test_other: 4,
        train_speakers: 5,
        eval_speakers_per_split: 2,
        tracks_per_category: 2,
        held_out_tracks: 2,
        ..CorpusConfig::default()
    };
    TrainData::from_corpus(&build_corpus(&cfg).unwrap(), FeatureConfig::default()).unwrap()
}

fn spec(data: &TrainData, kind: SchemeKind, hidden: usize, epochs: usize) -> RunSpec {
    RunSpec {
        scheme: TrainScheme::new(kind),
        model: ModelConfig::new(hidden, data.vocab.clone(), data.num_coeffs()),
        train: TrainConfig {
            max_epochs: epochs,
            patience: epochs,
            distance_pairs: 2,
            ..TrainConfig::default()
        },
        seed: 5,
    }
}

#[test]
fn baseline_loss_decreases() {
    let data = small_data(50);
    let out = training::train(&data, &spec(&data, SchemeKind::Baseline, 16, 3), &RunOptions::default()).unwrap();
    let losses: Vec<f64> = out.log.records.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(out.finished);
}

#[test]
fn interrupted_run_resumes_bit_identically() {
    let data = small_data(12);
    for kind in [SchemeKind::IrlC, SchemeKind::Adversarial] {
        let s = spec(&data, kind, 6, 3);
        let full_dir = tempfile::tempdir().unwrap();
        let cut_dir = tempfile::tempdir().unwrap();
        let full = training::train(
            &data,
            &s,
            &RunOptions {
                out_dir: Some(full_dir.path().into()),
                epoch_limit: None,
            },
        )
        .unwrap();
        for limit in [1, 2] {
            let part = training::train(
                &data,
                &s,
                &RunOptions {
                    out_dir: Some(cut_dir.path().into()),
                    epoch_limit: Some(limit),
                },
            )
            .unwrap();
            assert!(!part.finished);
            assert_eq!(part.log.records.len(), limit);
        }
        let resumed = training::train(
            &data,
            &s,
            &RunOptions {
                out_dir: Some(cut_dir.path().into()),
                epoch_limit: None,
            },
        )
        .unwrap();
        assert_eq!(resumed.log.without_timing(), full.log.without_timing(), "{kind}");
        for f in [files::BEST, files::LAST] {
            let a = std::fs::read(full_dir.path().join(f)).unwrap();
            let b = std::fs::read(cut_dir.path().join(f)).unwrap();
            assert!(a == b, "{kind}: {f} differs");
        }
        let on_disk = TrainLog::read_jsonl(&cut_dir.path().join(files::LOG)).unwrap();
        assert_eq!(on_disk.without_timing(), full.log.without_timing());
        let (meta, best) = seq2seq::load_checkpoint(&cut_dir.path().join(files::BEST)).unwrap();
        assert_eq!(meta.corpus_hash, data.corpus_hash);
        assert_eq!(meta.config_hash, full.config_hash);
        let bits = |m: &seq2seq::Seq2Seq| -> Vec<u64> { m.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect() };
        assert!(bits(&best) == bits(&full.best));
    }
}

#[test]
fn other_config_in_same_directory_is_refused() {
    let data = small_data(8);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().into()),
        epoch_limit: Some(1),
    };
    training::train(&data, &spec(&data, SchemeKind::Baseline, 4, 2), &opts).unwrap();
    let err = training::train(&data, &spec(&data, SchemeKind::DataAug, 4, 2), &opts).unwrap_err();
    assert!(matches!(err, training::TrainError::IncompatibleCheckpoint(_)), "{err}");
}

#[test]
fn best_of_seeds_picks_lowest_dev_other_cer() {
    let data = small_data(8);
    let cfg = SearchConfig {
        seeds: vec![1, 2, 3],
        decode: DecodeOptions { width: 2, max_len: 20 },
        parallel: 1,
        out_root: None,
    };
    let base = spec(&data, SchemeKind::Baseline, 4, 1);
    let (best, _, all) = training::best_of_seeds(&data, &base, base.scheme, &cfg).unwrap();
    assert_eq!(all.iter().map(|c| c.seed).collect::<Vec<_>>(), [1, 2, 3]);
    let min = all.iter().map(|c| c.dev_other_cer).fold(f64::INFINITY, f64::min);
    assert_eq!(best.dev_other_cer, min);
    assert_eq!(best.seed, all.iter().find(|c| c.dev_other_cer == min).unwrap().seed);
}
