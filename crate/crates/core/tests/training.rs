use vlci_core::data::{synth_dataset, Split};
use vlci_core::trainer::*;
use vlci_core::Error;

fn tiny_run(stage: Stage) -> RunConfig {
    let mut r = RunConfig::defaults(stage);
    r.model = Preset::Tiny;
    r.max_len = 40;
    r.min_count = 1;
    r.epochs = 2;
    r.batch_size = 2;
    r.seed = 11;
    r.decode = DecodeStrategy::Greedy;
    r
}

fn tiny_data(seed: u64) -> Dataset {
    Dataset::from_synth(&synth_dataset(seed, 10).unwrap(), 64, 2).unwrap()
}

fn losses(s: &mut Session, data: &Dataset, n: usize) -> Vec<f64> {
    (0..n).map(|_| s.step(data).unwrap().total()).collect()
}

#[test]
fn checkpoint_round_trip_continues_bitwise() {
    let data = tiny_data(1);
    for stage in [Stage::Pretrain, Stage::Finetune] {
        let run = tiny_run(stage);
        let mut a = Session::new(&run, &data, Start::Fresh).unwrap();
        losses(&mut a, &data, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.safetensors");
        a.checkpoint().unwrap().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut b = Session::new(&run, &data, Start::Resume(&loaded)).unwrap();
        assert_eq!(b.step_count(), 3);
        let la = losses(&mut a, &data, 2);
        let lb = losses(&mut b, &data, 2);
        assert_eq!(la, lb, "{stage:?}");
    }
}

#[test]
fn fixed_seed_reproduces_losses_and_reports() {
    let data = tiny_data(2);
    let run = tiny_run(Stage::Pretrain);
    let trace = || {
        let mut s = Session::new(&run, &data, Start::Fresh).unwrap();
        losses(&mut s, &data, 5)
    };
    assert_eq!(trace(), trace());

    let ft = tiny_run(Stage::Finetune);
    let report = || {
        let out = train(&ft, &data, Start::Fresh).unwrap();
        let g = out.session.generator();
        let e = g
            .evaluate(data.split(Split::Test), &ft.decode_config())
            .unwrap();
        (serde_json::to_string(&e.report).unwrap(), e.hypotheses)
    };
    assert_eq!(report(), report());
}

#[test]
fn text_only_pretraining_reports_no_mim() {
    let data = tiny_data(3).text_only();
    let out = train(&tiny_run(Stage::Pretrain), &data, Start::Fresh).unwrap();
    assert_eq!(out.steps.len(), 2 * 4);
    for s in &out.steps {
        let StepRecord::Pretrain(r) = s else {
            panic!("fine-tuning record from a pre-training run")
        };
        assert!(r.l_mim.is_none());
        assert!(r.l_plm.is_finite());
    }
}

#[test]
fn finetuning_text_only_data_is_an_error() {
    let data = tiny_data(3).text_only();
    let err = train(&tiny_run(Stage::Finetune), &data, Start::Fresh).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn training_writes_log_and_best_checkpoint() {
    let data = tiny_data(4);
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(Stage::Finetune);
    run.log = Some(dir.path().join("log.ndjson"));
    run.checkpoint_out = Some(dir.path().join("best.safetensors"));
    let out = train(&run, &data, Start::Fresh).unwrap();
    let text = std::fs::read_to_string(dir.path().join("log.ndjson")).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), out.steps.len() + out.epochs.len());
    assert!(lines[0].get("L_NLL").is_some());
    assert!(lines.iter().any(|l| l.get("val_bleu4").is_some()));
    let saved = Checkpoint::load(&dir.path().join("best.safetensors")).unwrap();
    assert_eq!(saved.params, out.best.params);
    assert_eq!(saved.step, out.best.step);
}

#[test]
fn evaluating_references_against_themselves_is_perfect() {
    use vlci_core::metrics::{evaluate_corpus, Corpus, MetricConfig};
    let data = tiny_data(5);
    let refs: Vec<&str> = data.train.iter().map(|e| e.report.as_str()).collect();
    let corpus = Corpus::from_texts(&refs, &refs).unwrap();
    let r = evaluate_corpus(&corpus, &MetricConfig::default()).unwrap();
    assert_eq!(r.samples, refs.len());
    assert_eq!(r.bleu_4, 1.0);
    assert_eq!(r.ce_f1, 1.0);
}

#[test]
fn pretraining_twenty_samples_at_desk_scale_halves_the_loss() {
    let data = Dataset::from_synth(&synth_dataset(0, 20).unwrap(), 224, 1).unwrap();
    let mut run = RunConfig::defaults(Stage::Pretrain);
    run.min_count = 1;
    run.batch_size = 1;
    let out = train(&run, &data, Start::Fresh).unwrap();
    let initial = out.steps[0].total();
    let last = out.epochs.last().unwrap().train_loss;
    assert_eq!(out.epochs.len(), 30);
    assert!(last < 0.5 * initial, "{initial} -> {last}");
}
