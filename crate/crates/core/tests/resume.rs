use neufa::data::{generate_synthetic_corpus, Corpus, SyntheticSpec};
use neufa::harness::{StageConfig, TrainSchedule, Trainer};
use neufa::model::{load_checkpoint, LossWeights, NeuFA, NeuFAConfig, Progress};

fn corpus() -> Corpus {
    generate_synthetic_corpus(&SyntheticSpec {
        corpus_size: 10,
        vocab_size: 5,
        d_mel: 4,
        max_tokens: 5,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
}

fn schedule() -> TrainSchedule {
    TrainSchedule {
        stage1: StageConfig {
            steps: 8,
            weights: LossWeights::STAGE1,
        },
        stage2: StageConfig {
            steps: 8,
            weights: LossWeights::STAGE2,
        },
        batch_size: 3,
        learning_rate: 1e-3,
        seed: 5,
        checkpoint_every: 0,
    }
}

fn totals(t: &mut Trainer, c: &Corpus, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if t.progress.step == t.schedule.stage(t.progress.stage).unwrap().steps {
                t.progress = Progress {
                    stage: t.progress.stage + 1,
                    step: 0,
                };
            }
            t.step(c).unwrap().total
        })
        .collect()
}

#[test]
fn resumed_run_follows_the_uninterrupted_trajectory() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let model = || NeuFA::new(NeuFAConfig::micro(5, 4)).unwrap();

    let mut straight = Trainer::new(model(), schedule()).unwrap();
    totals(&mut straight, &c, 5);
    straight.save(&path).unwrap();
    // 10 more steps, crossing into stage 2
    let expected = totals(&mut straight, &c, 10);

    let mut resumed = Trainer::resume(load_checkpoint(&path).unwrap(), schedule()).unwrap();
    assert_eq!(resumed.progress, Progress { stage: 1, step: 5 });
    let got = totals(&mut resumed, &c, 10);
    assert_eq!(got, expected);
    assert_eq!(resumed.progress, straight.progress);

    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    straight.save(&a).unwrap();
    resumed.save(&b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn checkpoint_without_optimizer_cannot_resume() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = NeuFA::new(NeuFAConfig::micro(5, 4)).unwrap();
    neufa::model::save_checkpoint(&path, &m, None, None).unwrap();
    let err = Trainer::resume(load_checkpoint(&path).unwrap(), schedule()).err().unwrap();
    assert!(matches!(err, neufa::Error::Input(_)));
}
