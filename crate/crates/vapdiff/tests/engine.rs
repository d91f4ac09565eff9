use proptest::prelude::*;
use vapdiff::bankfile;
use vapdiff::config::RunConfig;
use vapdiff::dataset::{toy_samples, write_toy};
use vapdiff::engine::{
    toy_bank, train_loop, train_to_dir, training_examples, Corpus, PromptSource, SampleRequest, Session, LOSS_FILE,
};
use vapdiff::report::read_losses;
use vapdiff_core::bank::{DescriptionRecord, PromptBank, SplitTag};

fn small(cfg: &mut RunConfig) {
    cfg.codec.epochs = 2;
    cfg.train.checkpoint_every = 5;
}

#[test]
fn resumed_run_continues_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = toy_samples(9, 3, 5);
    write_toy(dir.path(), &train, &test).unwrap();
    let bank = toy_bank(&train, &test).unwrap();
    bankfile::save(&bank, &dir.path().join("bank.jsonl")).unwrap();

    let mut cfg = RunConfig::toy(dir.path());
    small(&mut cfg);
    cfg.train.steps = 14;
    let straight = dir.path().join("straight");
    train_to_dir(&cfg, &straight, None, false).unwrap();

    cfg.train.steps = 8;
    let split = dir.path().join("split");
    train_to_dir(&cfg, &split, None, false).unwrap();
    cfg.train.steps = 14;
    train_to_dir(&cfg, &split, Some(&split.join("checkpoint.ckpt")), false).unwrap();

    let a = read_losses(&straight.join(LOSS_FILE)).unwrap();
    let b = read_losses(&split.join(LOSS_FILE)).unwrap();
    assert_eq!(a.len(), 14);
    assert_eq!(a, b);

    cfg.model.denoiser.heads = 2;
    assert!(train_to_dir(&cfg, &dir.path().join("x"), Some(&split.join("checkpoint.ckpt")), false).is_err());
}

#[test]
fn descriptions_change_samples_after_training() {
    let (train, _) = toy_samples(6, 0, 9);
    let corpus = Corpus::from_toy(&train, &[]);
    let bank = toy_bank(&train, &[]).unwrap();
    let mut cfg = RunConfig::toy(std::path::Path::new("."));
    small(&mut cfg);
    let mut session = Session::new(&cfg, &corpus).unwrap();
    let examples = training_examples(&cfg, &session.codec, &corpus.train, Some(&bank)).unwrap();
    train_loop(&mut session, &examples, 30, |_, _| Ok(())).unwrap();

    let req = |source| SampleRequest { class: 2, count: 2, source, seed: 3 };
    let with = session.generate(&req(PromptSource::Bank), Some(&bank), "t").unwrap();
    let without = session.generate(&req(PromptSource::None), Some(&bank), "t").unwrap();
    let again = session.generate(&req(PromptSource::Bank), Some(&bank), "t").unwrap();
    let diff = with[0].0.data().iter().zip(without[0].0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-4, "{diff}");
    assert_eq!(with, again);
    assert!(with.iter().all(|(_, p)| p.prompt_image_id.is_some() && !p.fallback));

    let empty = PromptBank::new("empty", 3);
    let fallback = session.generate(&req(PromptSource::Bank), Some(&empty), "t").unwrap();
    assert!(fallback.iter().all(|(_, p)| p.fallback && p.prompt.is_none()));
    assert_eq!(fallback[0].0, without[0].0);
}

fn record() -> impl Strategy<Value = DescriptionRecord> {
    (0usize..4, "[a-z0-9-]{1,12}", "\\PC{0,60}", any::<bool>()).prop_map(|(class, id, text, seen)| {
        let mut r = DescriptionRecord::new(class, id, text);
        r.split_tag = if seen { SplitTag::Seen } else { SplitTag::Unseen };
        r
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn bank_file_roundtrip(records in prop::collection::vec(record(), 0..30)) {
        let mut bank = PromptBank::new("roundtrip", 4);
        for r in records {
            let _ = bank.insert(r);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.jsonl");
        bankfile::save(&bank, &path).unwrap();
        prop_assert_eq!(bankfile::load(&path, 4).unwrap(), bank);
    }
}
