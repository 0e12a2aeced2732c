//! Mini-batch training on unlabeled images. Every sample of every step gets
//! freshly sampled synthetic shadows before the forward pass.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{losses_in, LossBreakdown, LossWeights, ShadowTargets};
use crate::model::{forward_in, init_params, ArchConfig, Checkpoint, ModelParams};
use crate::phantom::Corpus;
use crate::rng::{self, SeedStreams};
use crate::shadow::{rasterize_mask, sample_sectors, FanGeometry, SamplingConfig, SectorSpec, ShadowMask};
use crate::tensor::{Graph, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.shdw";
pub const CONFIG_ECHO: &str = "train_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables intermediate
    /// checkpoints.
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    pub sampling: SamplingConfig,
    /// Chance that a sample receives synthetic shadows in a given step.
    pub injection_probability: f64,
    pub arch: ArchConfig,
    /// Corpus directory or manifest.
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.3,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: 500,
            weights: LossWeights::default(),
            sampling: SamplingConfig::default(),
            injection_probability: 1.0,
            arch: ArchConfig::default(),
            corpus: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.injection_probability) {
            return Err(Error::Config("injection_probability outside [0, 1]".into()));
        }
        self.weights.validate()?;
        self.arch.validate()
    }
}

/// Momentum SGD: `v ← μ·v − η·g`, `p ← p + v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Vec<Tensor>,
    steps: u64,
}

impl MomentumSgd {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Self {
        MomentumSgd {
            learning_rate: learning_rate as f32,
            momentum: momentum as f32,
            velocity: params
                .named_tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            steps: 0,
        }
    }

    pub fn with_state(mut self, velocity: Vec<Tensor>, steps: u64) -> Result<Self> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("velocity does not match the model".into()));
        }
        self.velocity = velocity;
        self.steps = steps;
        Ok(self)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Steps applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &[&[f32]]) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, v), g) in params.tensors_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.iter()) {
                *vv = mu * *vv - lr * gv;
                *pv += *vv;
            }
        }
        self.steps += 1;
    }
}

/// Injects one mask per batch element, runs forward, losses and backward,
/// and applies one optimizer update.
pub fn train_step(
    params: &mut ModelParams,
    batch: &Tensor,
    masks: &[ShadowMask],
    w: &LossWeights,
    opt: &mut MomentumSgd,
) -> Result<LossBreakdown> {
    let (n, _, h, wd) = batch.dims4()?;
    if masks.len() != n {
        return Err(Error::shape(
            "train_step",
            format!("{} masks for a batch of {n}", masks.len()),
        ));
    }
    let targets = ShadowTargets::<f32>::new(masks)?;
    if targets.mask.shape() != batch.shape() {
        return Err(Error::shape(
            "train_step",
            format!("masks {:?} vs batch {:?}", targets.mask.shape(), batch.shape()),
        ));
    }
    let injected: Vec<f32> = batch
        .data()
        .iter()
        .zip(targets.mask.data())
        .map(|(&x, &m)| x * m)
        .collect();

    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let x_tilde = graph.constant(Tensor::new([n, 1, h, wd], injected)?);
    let out = forward_in(&mut graph, &params.arch, &bound, x_tilde)?;
    let losses = losses_in(&mut graph, &out, x_tilde, &targets, w)?;
    let breakdown = losses.breakdown(&graph, w);
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.steps(),
            l_ae: breakdown.l_ae,
            l_s: breakdown.l_s,
            l_sreg: breakdown.l_sreg,
            l_c: breakdown.l_c,
            total: breakdown.total,
        });
    }
    graph.backward(losses.total)?;
    let zeros: Vec<Vec<f32>>;
    let vars = bound.vars();
    let grads: Vec<&[f32]> = if vars.iter().all(|&v| graph.grad(v).is_some()) {
        vars.iter().map(|&v| graph.grad(v).expect("checked")).collect()
    } else {
        zeros = vars.iter().map(|&v| vec![0.0; graph.value(v).numel()]).collect();
        vars.iter()
            .zip(&zeros)
            .map(|(&v, z)| graph.grad(v).unwrap_or(z))
            .collect()
    };
    opt.apply(params, &grads);
    Ok(breakdown)
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based count of completed steps.
    pub step: u64,
    pub epoch: usize,
    pub l_ae: f64,
    pub l_s: f64,
    pub l_sreg: f64,
    pub l_c: f64,
    pub total: f64,
}

/// In-memory training state over a fixed image set.
pub struct Trainer {
    cfg: TrainConfig,
    geometry: FanGeometry,
    images: Vec<Tensor>,
    params: ModelParams,
    opt: MomentumSgd,
    streams: SeedStreams,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, geometry: FanGeometry, images: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let streams = SeedStreams::new(cfg.seed);
        let params = init_params(&cfg.arch, &mut streams.stream(rng::INIT, 0))?;
        let opt = MomentumSgd::new(&params, cfg.learning_rate, cfg.momentum);
        Self::assemble(cfg, geometry, images, params, opt)
    }

    pub fn resume(
        cfg: TrainConfig,
        geometry: FanGeometry,
        images: Vec<Tensor>,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        cfg.validate()?;
        if checkpoint.params.arch != cfg.arch {
            return Err(Error::Config("checkpoint architecture differs from config".into()));
        }
        let mut opt = MomentumSgd::new(&checkpoint.params, cfg.learning_rate, cfg.momentum);
        opt = match checkpoint.velocity {
            Some(v) => opt.with_state(v, checkpoint.step)?,
            None => {
                let zeros = opt.velocity.clone();
                opt.with_state(zeros, checkpoint.step)?
            }
        };
        Self::assemble(cfg, geometry, images, checkpoint.params, opt)
    }

    fn assemble(
        cfg: TrainConfig,
        geometry: FanGeometry,
        images: Vec<Tensor>,
        params: ModelParams,
        opt: MomentumSgd,
    ) -> Result<Self> {
        let (h, w) = cfg.arch.input_size;
        geometry.validate(w, h)?;
        cfg.sampling.validate(&geometry)?;
        if images.is_empty() {
            return Err(Error::Corpus("no training images".into()));
        }
        if let Some(bad) = images.iter().find(|t| t.shape() != [1, 1, h, w]) {
            return Err(Error::Corpus(format!(
                "image shape {:?} does not match model input {h}x{w}",
                bad.shape()
            )));
        }
        Ok(Trainer {
            streams: SeedStreams::new(cfg.seed),
            cfg,
            geometry,
            images,
            params,
            opt,
            order: None,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.opt.steps()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.images.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            velocity: Some(self.opt.velocity().to_vec()),
            step: self.opt.steps(),
        }
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..self.images.len()).collect();
            idx.shuffle(&mut self.streams.stream(rng::SHUFFLE, epoch as u64));
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("just set").1
    }

    /// Synthetic shadows for step `step` (0-based), one list per sample.
    pub fn injection_sectors(&self, step: u64, n: usize) -> Result<Vec<Vec<SectorSpec>>> {
        let mut rng = self.streams.stream(rng::INJECTION, step);
        (0..n)
            .map(|_| {
                let inject = self.cfg.injection_probability >= 1.0
                    || rng.random::<f64>() < self.cfg.injection_probability;
                if inject {
                    sample_sectors(&self.geometry, &mut rng, &self.cfg.sampling)
                } else {
                    Ok(Vec::new())
                }
            })
            .collect()
    }

    /// Runs the next optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.opt.steps();
        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as usize;
        let offset = (step % spe) as usize * self.cfg.batch_size;
        let batch_size = self.cfg.batch_size;
        let picks: Vec<usize> = {
            let order = self.epoch_order(epoch);
            order[offset..(offset + batch_size).min(order.len())].to_vec()
        };
        let batch = Tensor::stack(&picks.iter().map(|&i| self.images[i].clone()).collect::<Vec<_>>())?;
        let (h, w) = self.cfg.arch.input_size;
        let masks: Vec<ShadowMask> = self
            .injection_sectors(step, picks.len())?
            .iter()
            .map(|s| rasterize_mask(s, &self.geometry, w, h))
            .collect();
        let b = train_step(&mut self.params, &batch, &masks, &self.cfg.weights, &mut self.opt)?;
        Ok(StepRecord {
            step: step + 1,
            epoch,
            l_ae: b.l_ae,
            l_s: b.l_s,
            l_sreg: b.l_sreg,
            l_c: b.l_c,
            total: b.total,
        })
    }
}

/// Files produced by [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub records: Vec<StepRecord>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:07}.shdw"))
}

/// Trains on the corpus named in `cfg`, writing the config echo, a CSV loss
/// log row per step, periodic checkpoints and a final checkpoint under
/// `cfg.out_dir`.
pub fn fit(cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let corpus = Corpus::open(&cfg.corpus)?;
    let spec = &corpus.manifest.spec;
    if (spec.height, spec.width) != cfg.arch.input_size {
        return Err(Error::Config(format!(
            "corpus images are {}x{} but the model expects {:?}",
            spec.height, spec.width, cfg.arch.input_size
        )));
    }
    let images = corpus.train_images()?;
    let mut trainer = match &cfg.resume {
        Some(path) => Trainer::resume(cfg.clone(), spec.geometry, images, Checkpoint::load(path)?)?,
        None => Trainer::new(cfg.clone(), spec.geometry, images)?,
    };

    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join(CONFIG_ECHO);
    let mut json = serde_json::to_vec_pretty(cfg)?;
    json.push(b'\n');
    fs::write(&echo, json).map_err(|e| Error::io(&echo, e))?;
    if cfg.checkpoint_every > 0 {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let log_path = out.join(LOG_FILE);
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    // header written by hand so a run with no steps still gets one
    let mut log = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(std::io::BufWriter::new(log_file));
    log.write_record(["step", "epoch", "l_ae", "l_s", "l_sreg", "l_c", "total"])?;

    let mut records = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.step()?;
        log.serialize(rec)?;
        if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(&checkpoint_path(out, rec.step))?;
        }
        if rec.step % trainer.steps_per_epoch() == 0 {
            log::info!("epoch {} done: step {} total {:.5}", rec.epoch, rec.step, rec.total);
        }
        records.push(rec);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(log);

    let final_path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_path)?;
    Ok(FitOutcome {
        checkpoint: final_path,
        log: log_path,
        steps: trainer.step_count(),
        records,
    })
}

/// Reads a training log written by [`fit`].
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
