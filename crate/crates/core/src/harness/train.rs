use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_order, Corpus};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Checkpoint, LossWeights, NeuFA, Progress};
use crate::tensor::nn::{apply_bn_stats, BnStats, Session};
use crate::tensor::{Adam, Graph, ParamId, Tensor};

/// Steps and loss weights of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    pub weights: LossWeights,
}

/// Two-stage schedule: alignment pretraining, then boundary fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds the batch shuffling.
    pub seed: u64,
    /// Write a checkpoint every this many steps of a stage; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            stage1: StageConfig {
                steps: 2000,
                weights: LossWeights::STAGE1,
            },
            stage2: StageConfig {
                steps: 2000,
                weights: LossWeights::STAGE2,
            },
            learning_rate: 1e-4,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.stage1.weights.validate()?;
        self.stage2.weights.validate()
    }

    pub fn stage(&self, stage: u8) -> Result<&StageConfig> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            s => Err(Error::Config(format!("no training stage {s}"))),
        }
    }

    /// Steps taken before `p` across both stages.
    fn global_step(&self, p: Progress) -> usize {
        if p.stage <= 1 {
            p.step
        } else {
            self.stage1.steps + p.step
        }
    }
}

/// Batch-mean loss values of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub total: f64,
    /// Only the terms that were computed.
    pub terms: BTreeMap<String, f64>,
}

/// Model, optimizer and position in the schedule.
pub struct Trainer {
    pub model: NeuFA,
    pub adam: Adam,
    pub schedule: TrainSchedule,
    pub progress: Progress,
    pub history: Vec<StepRecord>,
    order: Option<(usize, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(model: NeuFA, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let adam = Adam::new(&model.store, schedule.learning_rate);
        Ok(Trainer {
            model,
            adam,
            schedule,
            progress: Progress { stage: 1, step: 0 },
            history: Vec::new(),
            order: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(ck: Checkpoint, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let adam = ck
            .optimizer
            .ok_or_else(|| Error::Input("checkpoint has no optimizer state to resume from".into()))?;
        Ok(Trainer {
            model: ck.model,
            adam,
            schedule,
            progress: ck.progress.unwrap_or(Progress { stage: 1, step: 0 }),
            history: Vec::new(),
            order: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.adam), Some(self.progress))
    }

    fn batch_indices(&mut self, corpus: &Corpus) -> Result<Vec<usize>> {
        let k = self.schedule.global_step(self.progress);
        let per_epoch = corpus.len().div_ceil(self.schedule.batch_size);
        let epoch = k / per_epoch;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let seed = self.schedule.seed.wrapping_add(epoch as u64);
            self.order = Some((epoch, batch_order(corpus.len(), self.schedule.batch_size, seed)?));
        }
        Ok(self.order.as_ref().expect("order set").1[k % per_epoch].clone())
    }

    /// One optimizer step of the current stage on the next batch.
    pub fn step(&mut self, corpus: &Corpus) -> Result<StepRecord> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot train on an empty corpus".into()));
        }
        let stage = self.progress.stage;
        let weights = self.schedule.stage(stage)?.weights;
        let idx = self.batch_indices(corpus)?;
        let b = idx.len() as f64;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.model.store.len()];
        let mut bn: Vec<BnStats> = Vec::new();
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        for &i in &idx {
            let u = &corpus.utterances[i];
            let mut g = Graph::new();
            let (f, stats) = {
                let mut s = Session::new(&mut g, &self.model.store, true);
                let f = self.model.forward(&mut s, &u.tokens, &u.frames, Some(&u.boundaries), &weights)?;
                (f, std::mem::take(&mut s.bn_stats))
            };
            for (name, v) in f.losses.named() {
                let x = g.value(v).item();
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        term: format!("{name} (utterance {})", u.id),
                        value: x,
                    });
                }
                *terms.entry(name.to_string()).or_insert(0.0) += x / b;
            }
            let t = g.value(f.total).item();
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("total (utterance {})", u.id),
                    value: t,
                });
            }
            total += t / b;

            let scaled = g.scale(f.total, 1.0 / b);
            g.backward(scaled)?;
            for (id, gr) in g.param_grads() {
                match &mut grads[id.index()] {
                    Some(acc) => acc.add_assign(&gr),
                    slot => *slot = Some(gr),
                }
            }
            accumulate_bn(&mut bn, stats, 1.0 / b);
        }
        let grads: Vec<_> = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (ParamId(i), g)))
            .collect();
        for (id, g) in &grads {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    term: format!("gradient of {}", self.model.store.get(*id).name),
                    value: g.data().iter().copied().find(|x| !x.is_finite()).unwrap_or(f64::NAN),
                });
            }
        }
        self.adam.step(&mut self.model.store, &grads);
        apply_bn_stats(&mut self.model.store, &bn);

        let rec = StepRecord {
            stage,
            step: self.progress.step,
            total,
            terms,
        };
        self.progress.step += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining steps of the current stage, then moves to the
    /// next. Checkpoints go to `ckpt_dir` when given.
    pub fn run_stage(&mut self, corpus: &Corpus, ckpt_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let stage = self.progress.stage;
        let steps = self.schedule.stage(stage)?.steps;
        let every = self.schedule.checkpoint_every;
        let mut out = Vec::new();
        while self.progress.step < steps {
            let rec = self.step(corpus)?;
            if rec.step % 50 == 0 || self.progress.step == steps {
                log::info!("stage {stage} step {} total {:.5}", rec.step, rec.total);
            }
            out.push(rec);
            if let Some(dir) = ckpt_dir {
                if every > 0 && self.progress.step % every == 0 && self.progress.step < steps {
                    self.save(dir.join(format!("stage{stage}_step{:06}.ckpt", self.progress.step)))?;
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            self.save(dir.join(format!("stage{stage}.ckpt")))?;
        }
        if stage == 1 {
            self.progress = Progress { stage: 2, step: 0 };
        } else {
            self.progress = Progress { stage: 3, step: 0 };
        }
        Ok(out)
    }

    /// Both stages (or whatever remains of them).
    pub fn run(&mut self, corpus: &Corpus, ckpt_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        while self.progress.stage <= 2 {
            out.extend(self.run_stage(corpus, ckpt_dir)?);
        }
        Ok(out)
    }
}

fn accumulate_bn(acc: &mut Vec<BnStats>, stats: Vec<BnStats>, w: f64) {
    if acc.is_empty() {
        *acc = stats
            .into_iter()
            .map(|mut s| {
                s.mean.iter_mut().for_each(|x| *x *= w);
                s.var.iter_mut().for_each(|x| *x *= w);
                s
            })
            .collect();
        return;
    }
    for (a, s) in acc.iter_mut().zip(stats) {
        debug_assert_eq!(a.mean_id, s.mean_id);
        a.mean.iter_mut().zip(&s.mean).for_each(|(x, y)| *x += w * y);
        a.var.iter_mut().zip(&s.var).for_each(|(x, y)| *x += w * y);
    }
}

/// Trains `model` for one stage with a fresh optimizer and returns the
/// per-step history.
pub fn train_stage(model: &mut NeuFA, corpus: &Corpus, stage: StageConfig, schedule: &TrainSchedule) -> Result<Vec<StepRecord>> {
    let sched = TrainSchedule {
        stage1: stage,
        stage2: StageConfig { steps: 0, ..stage },
        ..schedule.clone()
    };
    let mut t = Trainer::new(model.clone(), sched)?;
    let hist = t.run_stage(corpus, None)?;
    *model = t.model;
    Ok(hist)
}
