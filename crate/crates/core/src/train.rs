//! Optimizer, training loop, evaluation, single-image inference and the
//! attention-cost benchmark.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{pooled_token_count, pooled_tokens, tokenize, CrossAttentionBlock};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{augment, read_ppm, write_pgm, Sample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{compute_all, MetricsReport};
use crate::model::MvaNet;
use crate::nn::ParamStore;
use crate::par;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let pd = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let mh = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let vh = *vi / bc2;
                pd[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One optimizer step's record.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    /// Mean total loss over the accumulated images.
    pub loss: f64,
    /// Component losses averaged over the accumulated images.
    pub components: Vec<(String, f64)>,
}

impl StepLog {
    pub fn line(&self) -> String {
        let mut s = format!("step={} loss={:.6}", self.step, self.loss);
        for (k, v) in &self.components {
            s.push_str(&format!(" {k}={v:.6}"));
        }
        s
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and parameter gradients of one image.
pub fn loss_and_gradients(
    model: &MvaNet,
    params: &ParamStore,
    cfg: &RunConfig,
    sample: &Sample,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let out = model.forward(&mut tape, &p, &sample.image)?;
    let (total, breakdown) = total_loss(&mut tape, &out.supervision, &sample.mask, cfg.loss, cfg.pixel)?;
    let grads = tape.backward(total);
    Ok((breakdown, p.gradients(params, &grads)))
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: MvaNet,
    pub params: ParamStore,
    optimizer: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = MvaNet::new(config.model.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let params = model.init(&mut rng);
        Ok(Trainer {
            optimizer: Adam::new(&config.train),
            config,
            model,
            params,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Images used by optimizer step `step` (0-based), in a per-epoch
    /// seeded shuffle.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let acc = self.config.train.accumulate;
        (0..acc)
            .map(|j| {
                let pos = step * acc + j;
                let epoch = pos / n;
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.train.seed, epoch as u64, 0xE90C));
                order.shuffle(&mut rng);
                order[pos % n]
            })
            .collect()
    }

    /// One optimizer step over `batch`; gradients are averaged.
    pub fn step_on(&mut self, batch: &[&Sample]) -> Result<StepLog> {
        let step = self.step + 1;
        let seed = self.config.train.seed;
        let augmented: Vec<Sample> = batch
            .iter()
            .enumerate()
            .map(|(j, s)| {
                if self.config.train.augment {
                    augment(s, mix(seed, step as u64, j as u64))
                } else {
                    (*s).clone()
                }
            })
            .collect();
        let results = par::map_range(augmented.len(), |j| {
            loss_and_gradients(&self.model, &self.params, &self.config, &augmented[j])
        });
        let k = batch.len() as f64;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = 0.0;
        let mut components: Vec<(String, f64)> = Vec::new();
        for r in results {
            let (b, g) = r?;
            if !b.total.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: b
                        .components()
                        .iter()
                        .map(|(k, v)| format!("{k}={v}"))
                        .collect::<Vec<_>>()
                        .join(" "),
                });
            }
            loss += b.total / k;
            let comps = b.components();
            if components.is_empty() {
                components = comps.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
            }
            for (acc, (_, v)) in components.iter_mut().zip(comps) {
                acc.1 += v / k;
            }
            for (name, gi) in g {
                match grads.get_mut(&name) {
                    Some(a) => a.add_assign(&gi),
                    None => {
                        grads.insert(name, gi);
                    }
                }
            }
        }
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v /= k;
            }
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient of {name} is not finite"),
            });
        }
        self.optimizer.step(&mut self.params, &grads);
        self.step = step;
        Ok(StepLog { step, loss, components })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.step as u64, self.config.to_text(), &self.params)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

fn write_dump(dir: &Path, err: &Error, trainer: &Trainer) -> Result<()> {
    let mut text = format!("error: {err}\nstep: {}\n", trainer.step_count());
    for (name, t) in trainer.params.iter() {
        text.push_str(&format!(
            "{name}\tmax_abs={:e}\tfinite={}\n",
            t.max_abs(),
            t.is_finite()
        ));
    }
    let path = dir.join("diagnostic.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Full training run. With `out` set, the log, periodic checkpoints,
/// the final checkpoint and any non-finite diagnostic dump go there.
pub fn train(
    config: &RunConfig,
    samples: &[Sample],
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let size = config.model.image_size;
    if let Some(s) = samples.iter().find(|s| s.image.shape()[2..] != [size, size]) {
        return Err(Error::Config(format!(
            "sample {} has shape {:?}; model.image_size is {size}",
            s.id,
            s.image.shape()
        )));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut trainer = Trainer::new(config.clone())?;
    let steps = config.total_steps(samples.len());
    let mut log = Vec::with_capacity(steps);
    let mut log_text = String::new();
    for s in 0..steps {
        let idx = trainer.batch_indices(s, samples.len());
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let entry = match trainer.step_on(&batch) {
            Ok(e) => e,
            Err(e) => {
                if let Some(dir) = out {
                    write_dump(dir, &e, &trainer)?;
                }
                return Err(e);
            }
        };
        if entry.step % config.train.log_every == 0 || entry.step == steps {
            on_step(&entry);
            log_text.push_str(&entry.line());
            log_text.push('\n');
        }
        if let Some(dir) = out {
            let every = config.train.checkpoint_every;
            if every > 0 && entry.step % every == 0 && entry.step != steps {
                trainer.checkpoint().save(&dir.join(format!("step_{:06}.ckpt", entry.step)))?;
            }
        }
        log.push(entry);
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out {
        checkpoint.save(&dir.join("final.ckpt"))?;
        let lp = dir.join("train.log");
        std::fs::write(&lp, log_text).map_err(|e| Error::io(&lp, e))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Rebuilds the model from a checkpoint's configuration snapshot and checks
/// the stored parameters against it.
pub fn restore(ck: &Checkpoint) -> Result<(RunConfig, MvaNet, ParamStore)> {
    let cfg = RunConfig::parse(&ck.config)?;
    let model = MvaNet::new(cfg.model.clone())?;
    let template = model.init(&mut ChaCha8Rng::seed_from_u64(0));
    template.check_compatible(&ck.params)?;
    Ok((cfg, model, ck.params.clone()))
}

/// Predictions for every sample plus the metrics report.
pub fn evaluate(model: &MvaNet, params: &ParamStore, samples: &[Sample]) -> Result<(MetricsReport, Vec<Tensor>)> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let size = model.config.image_size;
    if let Some(s) = samples.iter().find(|s| s.image.shape()[2..] != [size, size]) {
        return Err(Error::Config(format!(
            "sample {} has shape {:?}; checkpoint expects {size}x{size}",
            s.id,
            s.image.shape()
        )));
    }
    let start = Instant::now();
    let preds = par::map_range(samples.len(), |i| model.predict(params, &samples[i].image))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let secs = start.elapsed().as_secs_f64();
    let gts: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    let mut report = compute_all(&preds, &gts)?;
    report.throughput = if secs > 0.0 { samples.len() as f64 / secs } else { 0.0 };
    Ok((report, preds))
}

/// Prediction for one image file, written as an 8-bit PGM. Returns the
/// in-memory prediction and the inference latency in seconds.
pub fn infer(model: &MvaNet, params: &ParamStore, image_path: &Path, out_path: &Path) -> Result<(Tensor, f64)> {
    let image = read_ppm(image_path)?;
    let (_, _, h, w) = image.dims4();
    let unit = 64 * model.config.grid_rows;
    for (axis, v) in [("height", h), ("width", w)] {
        if v % unit != 0 {
            return Err(Error::geometry(
                axis,
                format!("image {axis} {v} must be divisible by {unit} (64 x grid rows)"),
            ));
        }
    }
    let start = Instant::now();
    let pred = model.predict(params, &image)?;
    let secs = start.elapsed().as_secs_f64();
    write_pgm(out_path, &pred)?;
    Ok((pred, secs))
}

/// Attention cost of the localization global branch with pooled versus
/// full-token keys and values.
#[derive(Clone, Debug)]
pub struct AttentionBench {
    pub key_side: usize,
    pub query_tokens: usize,
    pub pooled_tokens: usize,
    pub full_tokens: usize,
    pub pooled_multiplies: u64,
    pub full_multiplies: u64,
    pub pooled_seconds: f64,
    pub full_seconds: f64,
}

impl AttentionBench {
    /// Measured multiply-count reduction in percent.
    pub fn reduction_percent(&self) -> f64 {
        100.0 * (1.0 - self.pooled_multiplies as f64 / self.full_multiplies as f64)
    }
}

/// Multiplies of K/V projection plus `QKᵀ` and `AV` for `nq` queries over
/// `nk` keys at width `c`.
pub fn attention_multiplies(nq: usize, nk: usize, c: usize) -> u64 {
    let (nq, nk, c) = (nq as u64, nk as u64, c as u64);
    nk * c * 2 * c + 2 * nq * nk * c
}

/// Times the cross-attention block with pooled and with full-token keys on
/// a `key_side × key_side` source; queries come from a grid-downsampled
/// distant view.
pub fn bench_attention(key_side: usize, grid_rows: usize, dim: usize, heads: usize, windows: &[usize], reps: usize, seed: u64) -> Result<AttentionBench> {
    let q_side = (key_side / grid_rows).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = CrossAttentionBlock::new("bench", dim, heads)?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    let keys = Tensor::uniform(&[1, dim, key_side, key_side], -1.0, 1.0, &mut rng);
    let query = Tensor::uniform(&[1, dim, q_side, q_side], -1.0, 1.0, &mut rng);

    let run = |pooled: bool| -> Result<f64> {
        let start = Instant::now();
        for _ in 0..reps.max(1) {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let k = tape.constant(keys.clone());
            let q = tape.constant(query.clone());
            let kv = if pooled { pooled_tokens(&mut tape, k, windows)? } else { tokenize(&mut tape, k) };
            let qt = tokenize(&mut tape, q);
            block.forward(&mut tape, &p, qt, qt, kv)?;
        }
        Ok(start.elapsed().as_secs_f64() / reps.max(1) as f64)
    };
    // warm up both paths once
    run(true)?;
    run(false)?;
    let pooled_seconds = run(true)?;
    let full_seconds = run(false)?;
    let nq = q_side * q_side;
    let pooled = pooled_token_count(key_side, key_side, windows);
    let full = key_side * key_side;
    Ok(AttentionBench {
        key_side,
        query_tokens: nq,
        pooled_tokens: pooled,
        full_tokens: full,
        pooled_multiplies: attention_multiplies(nq, pooled, dim),
        full_multiplies: attention_multiplies(nq, full, dim),
        pooled_seconds,
        full_seconds,
    })
}

/// End-to-end inference throughput at the configured size, images/second.
pub fn bench_throughput(cfg: &RunConfig, reps: usize) -> Result<f64> {
    let model = MvaNet::new(cfg.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let params = model.init(&mut rng);
    let s = cfg.model.image_size;
    let image = Tensor::uniform(&[1, 3, s, s], 0.0, 1.0, &mut rng);
    model.predict(&params, &image)?;
    let start = Instant::now();
    for _ in 0..reps.max(1) {
        model.predict(&params, &image)?;
    }
    Ok(reps.max(1) as f64 / start.elapsed().as_secs_f64())
}
