use stcnet::autodiff::Checkpoint;
use stcnet::nets::{GmConfig, LmConfig};
use stcnet::synth::{generate, Dataset, SynthConfig};
use stcnet::trainer::{train, Mode, Model, Scheme, Stage, TrainConfig};

fn dataset(videos: usize) -> Dataset {
    generate(&SynthConfig {
        videos,
        min_len: 40,
        max_len: 70,
        dim: 8,
        classes: 3,
        min_segment: 4,
        max_segment: 8,
        max_distractors: 2,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn config(epochs: usize, e_frozen: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        e_frozen,
        lr: 5e-3,
        val_every: 0,
        lm: LmConfig {
            width: 8,
            dilations: vec![1, 2, 4],
            ..LmConfig::default()
        },
        gm: GmConfig {
            width: 8,
            pool_k: 4,
            ..GmConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn param_bits(model: &Model, prefix: &str) -> Vec<(String, Vec<u64>)> {
    model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, p)| (n.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn two_stage_training_halves_both_objectives() {
    let ds = dataset(30);
    let cfg = TrainConfig {
        lm: LmConfig { width: 16, ..config(0, 0).lm },
        gm: GmConfig { width: 16, ..config(0, 0).gm },
        ..config(20, 8)
    };
    let out = train(&ds, &cfg).unwrap();
    let log = &out.log;
    assert_eq!(log.len(), 20);
    assert!(log[..8].iter().all(|e| e.stage == Stage::Localization));
    assert!(log[8..].iter().all(|e| e.stage == Stage::Joint));

    // The total changes meaning at the stage switch, so each objective is
    // compared from its first epoch to the last. Peaks that share the
    // annotated segment get near-identical windows with opposite labels
    // (positive vs background), which puts a floor under the grading term.
    let loc = |e: &stcnet::trainer::EpochLog| e.loss.bce.unwrap() + e.loss.cosine.unwrap();
    let (first, last) = (loc(&log[0]), loc(&log[19]));
    assert!(last <= 0.5 * first, "localization loss {first} -> {last}");
    let (first, last) = (log[8].loss.grading.unwrap(), log[19].loss.grading.unwrap());
    assert!(last <= 0.75 * first, "grading loss {first} -> {last}");
}

#[test]
fn full_mode_ignores_timestamps() {
    let ds = dataset(10);
    let cfg = TrainConfig {
        mode: Mode::Full,
        scheme: Scheme::EndToEnd,
        ..config(3, 0)
    };
    let mut shuffled = ds.clone();
    for v in &mut shuffled.videos {
        v.timestamp = v.segment.1 - 1 - (v.timestamp - v.segment.0);
    }
    let a = train(&ds, &cfg).unwrap();
    let b = train(&shuffled, &cfg).unwrap();
    assert_eq!(param_bits(&a.model, ""), param_bits(&b.model, ""));
    let ra = a.model.evaluate(&ds, stcnet::synth::Split::Test).unwrap();
    let rb = b.model.evaluate(&shuffled, stcnet::synth::Split::Test).unwrap();
    assert_eq!(ra.scores, rb.scores);
}

#[test]
fn oversized_trimmed_window_equals_full() {
    let ds = dataset(10);
    let full = TrainConfig {
        mode: Mode::Full,
        scheme: Scheme::EndToEnd,
        ..config(3, 0)
    };
    let trimmed = TrainConfig {
        mode: Mode::Trimmed(2 * 70),
        ..full.clone()
    };
    let a = train(&ds, &full).unwrap();
    let b = train(&ds, &trimmed).unwrap();
    assert_eq!(param_bits(&a.model, ""), param_bits(&b.model, ""));
}

#[test]
fn separate_scheme_freezes_localizer_after_warmup() {
    let ds = dataset(10);
    let warm = train(&ds, &TrainConfig { scheme: Scheme::TwoStage, ..config(2, 2) }).unwrap();
    let sep = train(&ds, &TrainConfig { scheme: Scheme::Separate, ..config(4, 2) }).unwrap();
    assert_eq!(param_bits(&warm.model, "lm."), param_bits(&sep.model, "lm."));
    assert_ne!(param_bits(&warm.model, "gm."), param_bits(&sep.model, "gm."));
    assert!(sep.log[2..].iter().all(|e| e.stage == Stage::Grading && Some(e.loss.total) == e.loss.grading));
}

#[test]
fn checkpoint_file_round_trip_restores_predictions() {
    let ds = dataset(10);
    let cfg = config(2, 1);
    let out = train(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = Checkpoint {
        config_hash: 42,
        epoch: 2,
        params: out.model.params.clone(),
    };
    ckpt.write_to(std::fs::File::create(&path).unwrap()).unwrap();
    let back = Checkpoint::read_from(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back.config_hash, 42);
    let mut restored = Model::for_dataset(&cfg, &ds).unwrap();
    restored.load_params(back.params).unwrap();
    assert_eq!(param_bits(&out.model, ""), param_bits(&restored, ""));
    let split = stcnet::synth::Split::Test;
    assert_eq!(
        out.model.evaluate(&ds, split).unwrap().videos,
        restored.evaluate(&ds, split).unwrap().videos
    );
}
