//! Single-image SGD training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::tensor::{Element, Graph, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub rpn: f64,
    pub head: f64,
}

pub struct TrainOutcome<T: Element = f32> {
    pub detector: Detector,
    pub store: ParamStore<T>,
    pub log: Vec<IterRecord>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoints go here at every learning-rate step and at the end.
    pub out_dir: Option<PathBuf>,
    /// Called after every iteration.
    pub progress: Option<&'a mut dyn FnMut(&IterRecord)>,
}

/// Trailing-window mean of the total loss.
pub fn smoothed(log: &[IterRecord], window: usize) -> Vec<f64> {
    (0..log.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            log[lo..=i].iter().map(|r| r.total).sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn grad_table<T: Element>(store: &ParamStore<T>) -> String {
    let mut s = String::from("parameter grad norms:\n");
    for (path, n) in store.grad_norms() {
        s.push_str(&format!("  {path:<40} {n:.6e}\n"));
    }
    s
}

fn write_checkpoint<T: Element>(dir: &Path, name: &str, store: &ParamStore<T>, cfg: &ExperimentConfig, iteration: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Checkpoint::from_store(store, &cfg.to_json(), iteration as u64).save(&dir.join(name))
}

/// Build a fresh detector from `cfg.seed` and train it on `scenes`.
pub fn train(cfg: &ExperimentConfig, scenes: &[Scene], opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    train_as::<f32>(cfg, scenes, opts)
}

/// [`train`] with parameters and activations held as `T`.
pub fn train_as<T: Element>(cfg: &ExperimentConfig, scenes: &[Scene], mut opts: TrainOptions<'_>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Invalid("training on an empty dataset".into()));
    }
    let mut store = ParamStore::<T>::new();
    let detector = Detector::new(&cfg.model_config(), &mut store, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs * scenes.len());
    let opt = &cfg.optimizer;
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        if epoch > 0 && opt.lr_steps.contains(&epoch) {
            if let Some(dir) = &opts.out_dir {
                write_checkpoint(dir, &format!("epoch{epoch:03}.gcac"), &store, cfg, iteration)?;
            }
        }
        order.shuffle(&mut rng);
        for &idx in &order {
            let lr = opt.lr_at(epoch, iteration);
            let flip = cfg.hflip && rng.gen_bool(0.5);
            let scene = if flip { scenes[idx].flipped() } else { scenes[idx].clone() };
            let (parts, grads) = {
                let mut g = Graph::new(&store);
                let x = g.input(scene.batch().cast());
                let parts = detector.training_loss(&mut g, x, std::slice::from_ref(&scene.targets), &mut rng)?;
                let read = |n| g.value(n).data()[0].as_f64();
                let vals = (read(parts.total), read(parts.rpn), parts.head.map(read).unwrap_or(0.0));
                (vals, g.backward(parts.total)?)
            };
            store.zero_grads();
            store.accumulate(grads.params)?;
            store.fill_missing_grads();
            let finite = parts.0.is_finite() && store.iter().all(|(_, p)| p.grad.as_ref().map_or(true, |g| g.all_finite()));
            if !finite {
                return Err(Error::NonFinite {
                    iteration,
                    dump: grad_table(&store),
                });
            }
            if opt.clip_grad_norm > 0.0 {
                let norm = store.grad_norms().iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
                if norm > opt.clip_grad_norm {
                    let k = T::of(opt.clip_grad_norm / norm);
                    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
                    for id in ids {
                        if let Some(gr) = store.get_mut(id).grad.as_mut() {
                            gr.data_mut().iter_mut().for_each(|v| *v *= k);
                        }
                    }
                }
            }
            store.sgd_step(lr, opt.momentum, opt.weight_decay)?;
            let rec = IterRecord {
                epoch,
                iteration,
                lr,
                total: parts.0,
                rpn: parts.1,
                head: parts.2,
            };
            if let Some(cb) = opts.progress.as_mut() {
                cb(&rec);
            }
            log.push(rec);
            iteration += 1;
        }
    }
    if let Some(dir) = &opts.out_dir {
        write_checkpoint(dir, "final.gcac", &store, cfg, iteration)?;
        std::fs::write(dir.join("train_log.json"), serde_json::to_string(&log)?)?;
    }
    Ok(TrainOutcome { detector, store, log })
}
