use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{config_hash, Checkpoint, CheckpointMeta};
use super::losses::{branch_ce, masked_l1, NormStats, Sample};
use super::optim::{noam_lr, AdamState};
use super::{rng_stream, Result, RngStream, TrainConfig, TrainError};
use crate::augment::{sample_lambda, select_mixup_pairs};
use crate::nn::{Graph, Networks, Var};
use crate::score_io::{FrameDurations, MusicScore, PhonemeVocab};
use crate::tensor::Tensor2;

/// Loss components of one update, as written to `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_svs_ori: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_mix: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_svs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_si: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_pd: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub valid_l_svs: f64,
    pub best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHistory {
    /// Validation loss of the initialized model, before any update.
    pub initial_valid: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid: Option<f64>,
}

impl TrainHistory {
    /// Successive best-validation values, one per improvement.
    pub fn best_sequence(&self) -> Vec<f64> {
        self.epochs.iter().filter(|e| e.best).map(|e| e.valid_l_svs).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub final_epoch: usize,
    pub initial_valid: f64,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<usize>,
    pub last_train_loss: Option<f64>,
}

/// Graph handles of every loss term of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub l_ori: Var,
    pub l_mix: Option<Var>,
    pub l_svs: Var,
    pub l_si: Option<Var>,
    pub l_pd: Option<Var>,
    pub pairs: usize,
}

/// Layout of a training run on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self { root: root.into() };
        fs::create_dir_all(run.checkpoint_dir())?;
        Ok(run)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("epoch_{epoch}.ckpt"))
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("best.ckpt")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn epoch_log(&self) -> PathBuf {
        self.root.join("epochs.jsonl")
    }

    /// Epoch numbers of the checkpoints on disk, ascending.
    pub fn checkpoint_epochs(&self) -> Result<Vec<usize>> {
        let mut epochs = Vec::new();
        let dir = self.checkpoint_dir();
        if !dir.exists() {
            return Ok(epochs);
        }
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".ckpt")) {
                if let Ok(n) = n.parse() {
                    epochs.push(n);
                }
            }
        }
        epochs.sort_unstable();
        Ok(epochs)
    }

    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        Ok(self.checkpoint_epochs()?.last().map(|&e| self.epoch_checkpoint(e)))
    }

    fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }

    /// Drops log lines whose `key` exceeds `limit`, so that a resumed run
    /// rewrites exactly the lines an unbroken run would have.
    fn truncate_log(path: &Path, key: &str, limit: u64) -> Result<()> {
        if !path.exists() {
            return Ok(());
        }
        let mut kept = Vec::new();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            let v: serde_json::Value = serde_json::from_str(&line)?;
            if v.get(key).and_then(serde_json::Value::as_u64).is_some_and(|x| x <= limit) {
                kept.push(line);
            }
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        for line in kept {
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Owns both networks, the optimizer state and the feature statistics for
/// one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: PhonemeVocab,
    pub stats: NormStats,
    pub nets: Networks,
    pub adam: AdamState,
    pub epoch: usize,
    pub history: TrainHistory,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const NORM_MEAN: &str = "norm.mean";

impl Trainer {
    pub fn new(config: TrainConfig, vocab: PhonemeVocab, stats: NormStats) -> Result<Self> {
        config.validate()?;
        if stats.mean.len() != config.model.mel_dims {
            return Err(TrainError::Shape(format!(
                "statistics have {} dims, model expects {}",
                stats.mean.len(),
                config.model.mel_dims
            )));
        }
        let mut rng = rng_stream(config.seed, RngStream::Init, 0);
        let nets = Networks::new(&config.model, vocab.len(), &mut rng)?;
        let adam = AdamState::new(&nets.store);
        Ok(Self {
            config,
            vocab,
            stats,
            nets,
            adam,
            epoch: 0,
            history: TrainHistory::default(),
        })
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config.model, self.vocab.tokens())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.nets.store;
        let mut tensors: Vec<(String, Tensor2)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (prefix, moments) in [(ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for (id, t) in store.ids().zip(moments) {
                tensors.push((format!("{prefix}{}", store.name(id)), t.clone()));
            }
        }
        tensors.push((
            NORM_MEAN.into(),
            Tensor2::from_vec(1, self.stats.mean.len(), self.stats.mean.clone()),
        ));
        Checkpoint {
            config_hash: self.config_hash(),
            step: self.adam.step,
            meta: CheckpointMeta {
                epoch: self.epoch,
                model: self.config.model.clone(),
                vocab: self.vocab.tokens().to_vec(),
                history: self.history.clone(),
            },
            tensors,
        }
    }

    /// Restores a trainer. The model section of `config` must match the
    /// checkpoint's; the rest of `config` drives further training.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if config.model != ckpt.meta.model {
            return Err(TrainError::Compatibility("model configuration differs from the checkpoint".into()));
        }
        let mut vocab = PhonemeVocab::from_tokens(ckpt.meta.vocab.iter());
        vocab.reindex();
        if vocab.tokens() != ckpt.meta.vocab.as_slice() {
            return Err(TrainError::Compatibility("checkpoint vocabulary is malformed".into()));
        }
        let mean = ckpt
            .tensor(NORM_MEAN)
            .ok_or_else(|| TrainError::Compatibility("checkpoint lacks feature statistics".into()))?;
        let mut t = Self::new(config, vocab, NormStats { mean: mean.data.clone() })?;
        let ids: Vec<_> = t.nets.store.ids().collect();
        for id in ids {
            let name = t.nets.store.name(id).to_string();
            let load = |key: &str, shape: (usize, usize)| -> Result<Tensor2> {
                let v = ckpt
                    .tensor(key)
                    .ok_or_else(|| TrainError::Compatibility(format!("checkpoint lacks `{key}`")))?;
                if v.shape() != shape {
                    return Err(TrainError::Compatibility(format!("`{key}` has shape {:?}", v.shape())));
                }
                Ok(v.clone())
            };
            let shape = t.nets.store.value(id).shape();
            *t.nets.store.value_mut(id) = load(&name, shape)?;
            t.adam.m[id.0] = load(&format!("{ADAM_M}{name}"), shape)?;
            t.adam.v[id.0] = load(&format!("{ADAM_V}{name}"), shape)?;
        }
        t.adam.step = ckpt.step;
        t.epoch = ckpt.meta.epoch;
        t.history = ckpt.meta.history.clone();
        Ok(t)
    }

    /// Rebuilds a trainer for inference from a checkpoint alone.
    pub fn for_inference(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig {
            model: ckpt.meta.model.clone(),
            ..TrainConfig::default()
        };
        Self::from_checkpoint(config, ckpt)
    }

    /// Continues from the newest epoch checkpoint in `run`, trimming logs
    /// written after it.
    pub fn resume(config: TrainConfig, run: &RunDir) -> Result<Self> {
        let path = run
            .latest_checkpoint()?
            .ok_or_else(|| TrainError::Config(format!("no checkpoint under {}", run.checkpoint_dir().display())))?;
        let ckpt = Checkpoint::load(&path)?;
        let t = Self::from_checkpoint(config, &ckpt)?;
        RunDir::truncate_log(&run.train_log(), "step", t.adam.step)?;
        RunDir::truncate_log(&run.epoch_log(), "epoch", t.epoch as u64)?;
        Ok(t)
    }

    /// Denormalized mel prediction in evaluation mode.
    pub fn predict(&self, score: &MusicScore, durations: &FrameDurations) -> Result<Tensor2> {
        let y = self.nets.acoustic.infer(&self.nets.store, score, durations)?;
        self.stats.denormalize(&y)
    }

    /// Builds every loss term of training step `step` on `g`. All
    /// randomness comes from per-step streams, so rebuilding the same step
    /// gives the same graph.
    pub fn loss_graph(&self, g: &mut Graph, batch: &[&Sample], step: u64) -> Result<LossTerms> {
        if batch.is_empty() {
            return Err(TrainError::Shape("empty batch".into()));
        }
        let cfg = &self.config;
        let seed = cfg.seed;
        let mut main_rng = rng_stream(seed, RngStream::Dropout, step);
        let mut mix_rng = rng_stream(seed, RngStream::Mixup, step);
        let mut pred_rng = rng_stream(seed, RngStream::Predictor, step);
        let (acoustic, predictor) = (&self.nets.acoustic, &self.nets.predictor);
        let b = batch.len() as f64;

        let mut outputs = Vec::with_capacity(batch.len());
        let mut ori = Vec::with_capacity(batch.len());
        for s in batch {
            let (y, h) = acoustic.forward(g, &s.score, &s.durations, true, &mut main_rng)?;
            ori.push((g.l1(y, &s.target), 1.0 / b));
            outputs.push((y, h));
        }
        let l_ori = g.linear_comb(&ori);

        let mut mixes = Vec::new();
        let mut l_mix = None;
        let mut l_svs = l_ori;
        if cfg.ma {
            let pairs = select_mixup_pairs(batch.len(), cfg.mixup.proportion, &mut mix_rng);
            let mut terms = Vec::with_capacity(pairs.len());
            for &(i, j) in &pairs {
                let lambda = sample_lambda(cfg.mixup.alpha, &mut mix_rng)?;
                let t_max = batch[i].frames().max(batch[j].frames());
                let hi = g.pad_rows(outputs[i].1, t_max);
                let hj = g.pad_rows(outputs[j].1, t_max);
                let h_mix = g.linear_comb(&[(hi, lambda), (hj, 1.0 - lambda)]);
                let y_mix = acoustic.decode(g, h_mix, true, &mut mix_rng)?;
                let li = g.l1(y_mix, &batch[i].target);
                let lj = g.l1(y_mix, &batch[j].target);
                terms.push(g.linear_comb(&[(li, lambda), (lj, 1.0 - lambda)]));
                mixes.push((y_mix, i, j, lambda));
            }
            if !terms.is_empty() {
                let w = 1.0 / terms.len() as f64;
                let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, w)).collect();
                let m = g.linear_comb(&weighted);
                l_svs = g.linear_comb(&[(l_ori, 1.0 - cfg.mixup.w_mix), (m, cfg.mixup.w_mix)]);
                l_mix = Some(m);
            }
        }

        let (mut l_si, mut l_pd) = (None, None);
        let total = if cfg.cc {
            let mut si = Vec::with_capacity(batch.len());
            let mut pd = Vec::with_capacity(batch.len());
            for (s, &(y, _)) in batch.iter().zip(&outputs) {
                let truth = g.constant(s.target.clone());
                let (ph, pi) = predictor.forward(g, truth, true, &mut pred_rng)?;
                si.push((branch_ce(g, ph, pi, s, s.frames())?, 1.0 / b));
                let (ph, pi) = predictor.forward(g, y, true, &mut pred_rng)?;
                pd.push(branch_ce(g, ph, pi, s, s.frames())?);
            }
            if cfg.mixup_in_cycle {
                for &(y_mix, i, j, lambda) in &mixes {
                    let (ph, pi) = predictor.forward(g, y_mix, true, &mut pred_rng)?;
                    let ci = branch_ce(g, ph, pi, batch[i], batch[i].frames())?;
                    let cj = branch_ce(g, ph, pi, batch[j], batch[j].frames())?;
                    pd.push(g.linear_comb(&[(ci, lambda), (cj, 1.0 - lambda)]));
                }
            }
            let w = 1.0 / pd.len() as f64;
            let pd: Vec<(Var, f64)> = pd.into_iter().map(|v| (v, w)).collect();
            let si_v = g.linear_comb(&si);
            let pd_v = g.linear_comb(&pd);
            l_si = Some(si_v);
            l_pd = Some(pd_v);
            let wts = &cfg.weights;
            g.linear_comb(&[(l_svs, wts.w_svs), (si_v, wts.w_si), (pd_v, wts.w_pd)])
        } else {
            l_svs
        };
        Ok(LossTerms {
            total,
            l_ori,
            l_mix,
            l_svs,
            l_si,
            l_pd,
            pairs: mixes.len(),
        })
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepMetrics> {
        let step = self.adam.step + 1;
        let opt = &self.config.optimizer;
        let lr = noam_lr(step, opt.base_lr, opt.warmup_steps, self.config.model.d_model)?;
        let (metrics, grads) = {
            let mut g = Graph::new(&self.nets.store);
            let terms = self.loss_graph(&mut g, batch, step)?;
            let value = |v: Var| g.value(v).item();
            let metrics = StepMetrics {
                step,
                epoch: self.epoch + 1,
                seed: self.config.seed,
                lr,
                loss: value(terms.total),
                l_svs_ori: value(terms.l_ori),
                l_mix: terms.l_mix.map(value),
                l_svs: self.config.ma.then(|| value(terms.l_svs)),
                l_si: terms.l_si.map(value),
                l_pd: terms.l_pd.map(value),
                grad_norm: 0.0,
            };
            if !metrics.loss.is_finite() {
                return Err(TrainError::Divergence {
                    step,
                    detail: format!(
                        "loss {} (L_svs^ori {}, L_mix {:?}, L_si {:?}, L_pd {:?})",
                        metrics.loss, metrics.l_svs_ori, metrics.l_mix, metrics.l_si, metrics.l_pd
                    ),
                });
            }
            (metrics, g.backward(terms.total))
        };
        if !grads.is_finite() {
            return Err(TrainError::Divergence {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let grad_norm = self.adam.update(&mut self.nets.store, &grads, lr, &self.config.optimizer);
        Ok(StepMetrics { grad_norm, ..metrics })
    }

    /// Mean per-phrase `L_svs^ori` without dropout or mix-up.
    pub fn validate(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(TrainError::Config("validation set is empty".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let y = self.nets.acoustic.infer(&self.nets.store, &s.score, &s.durations)?;
            total += masked_l1(&y, &s.target)?;
        }
        Ok(total / samples.len() as f64)
    }

    /// Trains until `config.epochs` (or `stop_after`, whichever comes
    /// first), validating after every epoch. With a run directory, writes
    /// logs, per-epoch checkpoints and the best checkpoint.
    pub fn fit(
        &mut self,
        train: &[Sample],
        valid: &[Sample],
        run: Option<&RunDir>,
        stop_after: Option<usize>,
    ) -> Result<FitSummary> {
        if train.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let initial = match self.history.initial_valid {
            Some(v) => v,
            None => {
                let v = self.validate(valid)?;
                self.history.initial_valid = Some(v);
                v
            }
        };
        let last_epoch = stop_after.map_or(self.config.epochs, |s| s.min(self.config.epochs));
        let mut last_train_loss = None;
        while self.epoch < last_epoch {
            let epoch = self.epoch + 1;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng_stream(self.config.seed, RngStream::Shuffle, epoch as u64));
            let mut log = match run {
                Some(r) => Some(BufWriter::new(
                    fs::OpenOptions::new().create(true).append(true).open(r.train_log())?,
                )),
                None => None,
            };
            let mut loss_sum = 0.0;
            let mut steps = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                let m = self.train_step(&batch)?;
                if let Some(w) = log.as_mut() {
                    writeln!(w, "{}", serde_json::to_string(&m)?)?;
                }
                loss_sum += m.loss;
                steps += 1;
            }
            if let Some(mut w) = log {
                w.flush()?;
            }
            let valid_l_svs = self.validate(valid)?;
            let best = self.history.best_valid.is_none_or(|b| valid_l_svs < b);
            if best {
                self.history.best_valid = Some(valid_l_svs);
                self.history.best_epoch = Some(epoch);
            }
            let record = EpochRecord {
                epoch,
                step: self.adam.step,
                train_loss: loss_sum / steps as f64,
                valid_l_svs,
                best,
            };
            last_train_loss = Some(record.train_loss);
            self.history.epochs.push(record.clone());
            self.epoch = epoch;
            log::info!(
                "epoch {epoch}: train {:.5} valid {:.5}{}",
                record.train_loss,
                valid_l_svs,
                if best { " (best)" } else { "" }
            );
            if let Some(r) = run {
                let ckpt = self.checkpoint();
                ckpt.save(&r.epoch_checkpoint(epoch))?;
                if best {
                    ckpt.save(&r.best_checkpoint())?;
                }
                let epochs = r.checkpoint_epochs()?;
                if epochs.len() > self.config.keep_checkpoints {
                    for &old in &epochs[..epochs.len() - self.config.keep_checkpoints] {
                        fs::remove_file(r.epoch_checkpoint(old))?;
                    }
                }
                RunDir::append_line(&r.epoch_log(), &record)?;
            }
        }
        Ok(FitSummary {
            final_epoch: self.epoch,
            initial_valid: initial,
            best_valid: self.history.best_valid,
            best_epoch: self.history.best_epoch,
            last_train_loss,
        })
    }
}
