use std::collections::BTreeSet;

use sgst::checkpoint::{load_checkpoint, save_checkpoint};
use sgst::data::{generate_synthetic, read_dataset, write_dataset, Example, SyntheticSpec, Vocabs};
use sgst::model::{AlphaMode, Model, ModelConfig};
use sgst::train::{batch_gradient, evaluate, make_batches, train, MetricRecord, TrainConfig};

fn dataset(count: usize, seed: u64) -> (Vocabs, Vec<Example>, ModelConfig) {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let records = generate_synthetic(&spec, count).unwrap();
    let vocabs = Vocabs::build(&records);
    let config = ModelConfig {
        d_model: 16,
        d_ff: 32,
        ..ModelConfig::desk(vocabs.labels.len(), vocabs.tokens.len())
    };
    let examples = records
        .iter()
        .map(|r| Example::encode(r, &vocabs, config.neighborhood).unwrap())
        .collect();
    (vocabs, examples, config)
}

#[test]
fn batches_are_seeded_and_cover_every_example_once() {
    let (_, examples, _) = dataset(40, 1);
    let a = make_batches(&examples, 100, 7).unwrap();
    let b = make_batches(&examples, 100, 7).unwrap();
    let c = make_batches(&examples, 100, 8).unwrap();
    let order = |bs: &[sgst::train::Batch]| {
        bs.iter()
            .flat_map(|b| b.indices.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(order(&a), order(&b));
    assert_ne!(order(&a), order(&c));
    let seen: BTreeSet<usize> = order(&a).into_iter().collect();
    assert_eq!(seen.len(), 40);
    assert_eq!(order(&a).len(), 40);
    for batch in &a {
        assert!(batch.tokens() <= 100 || batch.len() == 1);
        for i in 0..batch.len() {
            let (input, inputs, targets) = batch.trimmed(i);
            let ex = &examples[batch.indices[i]];
            assert_eq!(input, ex.input);
            assert_eq!(inputs, ex.target[..ex.target.len() - 1]);
            assert_eq!(targets, ex.target[1..]);
        }
    }
    assert!(make_batches(&[], 100, 0).is_err());
}

#[test]
fn batch_gradient_does_not_depend_on_thread_count() {
    let (_, examples, mut config) = dataset(12, 2);
    config.alpha = AlphaMode::Learned;
    let model = Model::new(config, 2).unwrap();
    let batch = make_batches(&examples, 10_000, 0).unwrap().remove(0);
    let with = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| batch_gradient(&model, &batch).unwrap())
    };
    let (l1, g1) = with(1);
    let (l4, g4) = with(4);
    assert_eq!(l1.to_bits(), l4.to_bits());
    for (a, b) in g1.iter().zip(&g4) {
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // The batch loss is the token-weighted mean NLL.
    let (nll, _) = evaluate(&model, &examples).unwrap();
    assert!((l1 - nll).abs() < 1e-10);
}

#[test]
fn short_training_lowers_loss_and_reports_every_epoch() {
    let (_, examples, config) = dataset(8, 3);
    let mut model = Model::new(config, 3).unwrap();
    let (before, _) = evaluate(&model, &examples).unwrap();
    let tc = TrainConfig {
        epochs: 6,
        batch_tokens: 64,
        seed: 3,
        ..TrainConfig::desk()
    };
    let mut records: Vec<MetricRecord> = Vec::new();
    let report = train(&mut model, &examples, &tc, |r| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    let (after, _) = evaluate(&model, &examples).unwrap();
    assert!(after < before, "{after} >= {before}");
    assert_eq!(report.epochs, 6);
    assert_eq!(records.len(), 6);
    assert!(records.windows(2).all(|w| w[0].step < w[1].step));
}

#[test]
fn step_cap_is_respected() {
    let (_, examples, config) = dataset(8, 4);
    let mut model = Model::new(config, 4).unwrap();
    let tc = TrainConfig {
        epochs: 100,
        max_steps: Some(5),
        batch_tokens: 64,
        ..TrainConfig::desk()
    };
    let report = train(&mut model, &examples, &tc, |_| Ok(())).unwrap();
    assert_eq!(report.steps, 5);
}

#[test]
fn non_finite_parameters_abort_training() {
    let (_, examples, config) = dataset(4, 5);
    let mut model = Model::new(config, 5).unwrap();
    // Column 2 is EOS; PAD and BOS columns never reach the loss.
    model.params.get_mut("dec.output").unwrap().data_mut()[2] = f64::NAN;
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::desk()
    };
    let err = train(&mut model, &examples, &tc, |_| Ok(())).unwrap_err();
    assert!(matches!(err, sgst::Error::Diverged { .. }), "{err}");
}

#[test]
fn dataset_files_round_trip() {
    let spec = SyntheticSpec::default();
    let records = generate_synthetic(&spec, 5).unwrap();
    let path = std::env::temp_dir().join(format!("sgst-roundtrip-{}.jsonl", std::process::id()));
    write_dataset(&path, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().all(|l| l.contains("\"paragraph\"")));
    assert_eq!(read_dataset(&path).unwrap(), records);

    std::fs::write(
        &path,
        format!(
            "{}\n{{\"graph\": {{\"objects\": []}}, \"paragraph\": \"x\"}}\n",
            text.lines().next().unwrap()
        ),
    )
    .unwrap();
    let err = read_dataset(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    std::fs::remove_file(&path).unwrap();
}

#[test]
fn trained_checkpoint_round_trips_bitwise() {
    let (vocabs, examples, mut config) = dataset(6, 6);
    config.alpha = AlphaMode::Learned;
    let mut model = Model::new(config, 6).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_tokens: 64,
        ..TrainConfig::desk()
    };
    train(&mut model, &examples, &tc, |_| Ok(())).unwrap();
    let bytes = save_checkpoint(&model, &vocabs).unwrap();
    let (loaded, loaded_vocabs) = load_checkpoint(&bytes).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded_vocabs, vocabs);
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(load_checkpoint(&trailing).is_err());
}
