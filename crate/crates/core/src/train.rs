//! Training loop, batch loader and run log.
//!
//! Sample order and augmentation are pure functions of `(seed, position)`,
//! where `position` counts samples drawn since the start of training. The
//! loader thread can therefore run ahead of the optimizer, and a resumed run
//! draws exactly the batches the uninterrupted run would have drawn.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::data::{Augmentation, SampleRecord, SampleSource};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::Head;
use crate::model::AdsNet;
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::{resize_bilinear, ImageTensor};

/// Batches the loader may prepare ahead of the optimizer.
const QUEUE_DEPTH: usize = 2;
/// Parameters beyond this magnitude count as divergence. Initial weights are
/// O(1) and Adam moves a weight by about `lr` per step, so only a runaway
/// learning rate gets here; such runs saturate rather than overflow, and
/// would otherwise keep going on a dead network.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: u64,
    pub total: f64,
    /// Unweighted loss of every head with a nonzero weight.
    pub per_head: Vec<(Head, f64)>,
    pub learning_rate: f64,
}

/// One entry per iteration plus the wall-clock time (seconds since the run
/// started) at which it finished. Only `entries` is reproducible.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub wall_clock: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,total,final,early,bs,os,lr,seconds\n");
        for (e, t) in self.entries.iter().zip(&self.wall_clock) {
            let head = |h: Head| {
                e.per_head
                    .iter()
                    .find(|(k, _)| *k == h)
                    .map_or_else(|| "NA".to_string(), |(_, v)| format!("{v:.17e}"))
            };
            let _ = writeln!(
                s,
                "{},{:.17e},{},{},{},{},{:e},{:.3}",
                e.iteration,
                e.total,
                head(Head::Final),
                head(Head::Early),
                head(Head::Bs),
                head(Head::Os),
                e.learning_rate,
                t
            );
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.total).collect()
    }
}

/// Indices and augmentation seeds of the samples at positions
/// `start..start + count` of the stream.
pub fn sample_positions(seed: u64, n: usize, start: u64, count: usize) -> Vec<(usize, u64)> {
    let mut out = Vec::with_capacity(count);
    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for k in start..start + count as u64 {
        let epoch = k / n as u64;
        if epoch != perm_epoch {
            perm = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch)));
            perm_epoch = epoch;
        }
        out.push((perm[(k % n as u64) as usize], mix(seed ^ 0x5eed_a55a, k)));
    }
    out
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub iteration: u64,
    pub ids: Vec<String>,
    pub images: Tensor,
    pub masks: Tensor,
}

fn fit(rec: SampleRecord, size: usize) -> Result<SampleRecord> {
    if (rec.image.height(), rec.image.width()) == (size, size) {
        return Ok(rec);
    }
    Ok(SampleRecord {
        image: ImageTensor::resized(&rec.image, size, size)?,
        mask: resize_bilinear(&rec.mask, (size, size))?,
        ..rec
    })
}

pub fn make_batch(source: &dyn SampleSource, cfg: &RunConfig, iteration: u64) -> Result<Batch> {
    let b = cfg.train.batch_size;
    let picks = sample_positions(cfg.seed, source.len(), iteration * b as u64, b);
    let mut ids = Vec::with_capacity(b);
    let mut images = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for (index, aug_seed) in picks {
        let mut rec = fit(source.sample(index)?, cfg.image_size)?;
        if cfg.train.augment {
            rec = Augmentation::draw(&mut ChaCha8Rng::seed_from_u64(aug_seed)).apply(&rec)?;
        }
        ids.push(rec.image_id.clone());
        images.push(rec.image.into_tensor());
        masks.push(rec.mask.into_tensor());
    }
    Ok(Batch {
        iteration,
        ids,
        images: Tensor::stack(&images)?,
        masks: Tensor::stack(&masks)?,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints, the log and failure dumps go.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
}

pub struct TrainOutcome {
    pub net: AdsNet,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        learning_rate: cfg.train.learning_rate,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.adam_eps,
    }
}

fn snapshot(cfg: &RunConfig, store: &ParamStore, opt: &AdamState, iteration: u64) -> Checkpoint {
    Checkpoint {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        params: store.clone(),
        optimizer: opt.clone(),
        iteration,
        rng: RngState {
            seed: cfg.seed,
            word_pos: u128::from(iteration) * cfg.train.batch_size as u128,
        },
    }
}

fn first_non_finite<'a>(tensors: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Option<String> {
    tensors
        .filter(|(_, t)| !t.all_finite() || t.max_abs() > DIVERGENCE_LIMIT)
        .map(|(k, _)| k.clone())
        .next()
}

fn numeric_failure(out_dir: Option<&Path>, batch: &Batch, what: String, store: &ParamStore) -> Error {
    let mut dump = format!("numeric failure at iteration {}: {what}\nbatch: {}\n", batch.iteration, batch.ids.join(" "));
    let _ = writeln!(
        dump,
        "batch images: min {:e} max {:e}; masks foreground {}",
        batch.images.min(),
        batch.images.max(),
        batch.masks.sum()
    );
    for (name, t) in store.iter() {
        let _ = writeln!(dump, "{name}: max |w| = {:e}, finite = {}", t.max_abs(), t.all_finite());
    }
    let mut msg = format!("{what} at iteration {} (batch {})", batch.iteration, batch.ids.join(","));
    if let Some(dir) = out_dir {
        let path = dir.join("numeric_failure.txt");
        if std::fs::write(&path, &dump).is_ok() {
            msg.push_str(&format!("; diagnostics in {}", path.display()));
        }
    }
    log::error!("{dump}");
    Error::Numeric(msg)
}

/// Runs `cfg.train.iterations` optimizer steps (counting those already in
/// a resumed checkpoint) over `source`.
pub fn train(cfg: &RunConfig, source: &dyn SampleSource, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (net, mut store) = AdsNet::build(cfg)?;
    let mut opt = Adam::new(adam_config(cfg));
    let mut start = 0u64;
    if let Some(ck) = opts.resume {
        net.check_params(&ck.params)?;
        store = ck.params;
        opt = Adam::with_state(adam_config(cfg), ck.optimizer);
        start = ck.iteration;
    }
    let end = cfg.train.iterations as u64;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let out_dir = opts.out_dir.as_deref();
    let mut log = TrainLog::default();
    let clock = Instant::now();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(QUEUE_DEPTH);
        scope.spawn(move || {
            for it in start..end {
                if tx.send(make_batch(source, cfg, it)).is_err() {
                    break;
                }
            }
        });
        for it in start..end {
            let batch = rx
                .recv()
                .map_err(|_| Error::Data("batch loader stopped early".into()))??;
            debug_assert_eq!(batch.iteration, it);
            let mut g = Graph::new();
            let x = g.input(batch.images.clone());
            let y = g.input(batch.masks.clone());
            let vars = net.forward(&mut g, &store, x, false)?;
            let (loss, parts) = net.loss(&mut g, &vars, y)?;
            let total = g.value(loss).data()[0];
            if !total.is_finite() {
                return Err(numeric_failure(out_dir, &batch, format!("loss is {total}"), &store));
            }
            let lr = cfg.train.schedule.rate(cfg.train.learning_rate, it, end, cfg.train.warmup as u64);
            opt.config.learning_rate = lr;
            let grads = g.backward(loss)?.params();
            if let Some(name) = first_non_finite(grads.iter()) {
                return Err(numeric_failure(out_dir, &batch, format!("gradient of `{name}` is not finite"), &store));
            }
            opt.step(&mut store, &grads)?;
            if let Some(name) = first_non_finite(store.iter()) {
                return Err(numeric_failure(out_dir, &batch, format!("parameter `{name}` diverged"), &store));
            }
            let per_head = parts.iter().map(|&(h, v)| (h, g.value(v).data()[0])).collect();
            log.entries.push(LogEntry {
                iteration: it + 1,
                total,
                per_head,
                learning_rate: lr,
            });
            log.wall_clock.push(clock.elapsed().as_secs_f64());
            log::info!("iteration {} loss {total:.6}", it + 1);
            let done = it + 1;
            if let Some(dir) = out_dir {
                if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every as u64 == 0 && done < end {
                    snapshot(cfg, &store, &opt.state, done).save(&dir.join(format!("checkpoint_{done:06}.ckpt")))?;
                }
            }
        }
        Ok(())
    })?;

    let checkpoint = snapshot(cfg, &store, &opt.state, end.max(start));
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("checkpoint.ckpt"))?;
        std::fs::write(dir.join("train_log.csv"), log.to_csv())?;
    }
    Ok(TrainOutcome { net, checkpoint, log })
}

/// Rebuilds the network described by a checkpoint.
pub fn restore(ck: &Checkpoint) -> Result<(AdsNet, ParamStore)> {
    let cfg = RunConfig {
        encoder_weights: None,
        ..ck.config.clone()
    };
    let net = AdsNet::new(&cfg)?;
    net.check_params(&ck.params)?;
    Ok((net, ck.params.clone()))
}
