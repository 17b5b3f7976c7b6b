//! Seeded optimization loop with checkpointing.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, NamedArray, OptimizerMeta, RngState, MAGIC, VERSION};
pub use optim::{Optimizer, OptimizerKind, StepDecay, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SGD_MOMENTUM};

use std::fmt;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{sample_batch, BatchSpec, Dataset};
use crate::error::{GaitError, Result};
use crate::net::{BackboneConfig, GaitGl, Mode};
use crate::objective::{self, LossConfig, TripletOrder, TripletReduction, DEFAULT_MARGIN};
use crate::real::{Precision, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: String,
    pub backbone: BackboneConfig,
    pub batch: BatchSpec,
    pub iterations: u64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub decay: Option<StepDecay>,
    pub seed: u64,
    pub precision: Precision,
    pub margin: f64,
    pub reduction: TripletReduction,
    pub order: TripletOrder,
    /// write a checkpoint every this many iterations; 0 writes only the last
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Full-size defaults: 8 x 16 batches of 30 frames, Adam at 1e-4.
    pub fn for_profile(profile: &str) -> Result<Self> {
        let backbone = BackboneConfig::profile(profile)?;
        Ok(TrainConfig {
            profile: profile.to_string(),
            batch: BatchSpec::new(8, 16, backbone.input.0)?,
            backbone,
            iterations: 80_000,
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            decay: None,
            seed: 0,
            precision: Precision::Single,
            margin: DEFAULT_MARGIN,
            reduction: TripletReduction::MeanAll,
            order: TripletOrder::Corrected,
            checkpoint_every: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(GaitError::Config("iterations must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(GaitError::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch.t != self.backbone.input.0 {
            return Err(GaitError::Config(format!(
                "batch clip length {} differs from the profile's {}",
                self.batch.t, self.backbone.input.0
            )));
        }
        if let Some(d) = self.decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return Err(GaitError::Config("step decay needs every >= 1 and factor > 0".into()));
            }
        }
        self.backbone.validate()?;
        LossConfig::new(self.margin, 1).map(|_| ())
    }

    fn loss(&self, num_classes: usize) -> Result<LossConfig> {
        Ok(LossConfig {
            reduction: self.reduction,
            order: self.order,
            ..LossConfig::new(self.margin, num_classes)?
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub l_tri: f64,
    pub l_cse: f64,
    pub l_c: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub const HEADER: &'static str = "iteration\tl_tri\tl_cse\tl_c\twall_ms";
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{}",
            self.iteration, self.l_tri, self.l_cse, self.l_c, self.wall_ms
        )
    }
}

pub struct Trainer<F> {
    cfg: TrainConfig,
    model: GaitGl<F>,
    opt: Optimizer<F>,
    rng: ChaCha8Rng,
    iteration: u64,
    loss: LossConfig,
}

impl<F: Real> Trainer<F> {
    /// Fresh run: the model is initialized from the seeded stream, which then
    /// drives batch sampling and mask draws.
    pub fn new(cfg: TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let loss = cfg.loss(num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = GaitGl::new(cfg.backbone.clone(), Some(num_classes), &mut rng)?;
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.decay, model.params());
        Ok(Trainer { cfg, model, opt, rng, iteration: 0, loss })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, num_classes: usize, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, num_classes)?;
        ckpt.load_params(t.model.params_mut())?;
        ckpt.load_optimizer(t.model.params(), &mut t.opt)?;
        t.rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| GaitError::Checkpoint("checkpoint has no rng state".into()))?
            .restore();
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &GaitGl<F> {
        &self.model
    }

    pub fn into_model(self) -> GaitGl<F> {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_params(self.iteration, self.model.params())
            .with_optimizer(self.model.params(), &self.opt);
        c.rng = Some(RngState::capture(&self.rng));
        c
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let (_, h, w) = self.cfg.backbone.input;
        match ds.frame_extents() {
            Some(e) if e == (h, w) => Ok(()),
            Some((fh, fw)) => Err(GaitError::Config(format!(
                "dataset frames are {fh}x{fw} but profile '{}' expects {h}x{w}",
                self.cfg.profile
            ))),
            None => Err(GaitError::Config("dataset is empty".into())),
        }
    }

    /// One optimization step. A non-finite loss or gradient aborts before the
    /// parameters are touched.
    pub fn step(&mut self, ds: &Dataset) -> Result<MetricsRecord> {
        let started = Instant::now();
        self.check_dataset(ds)?;
        let batch = sample_batch::<F, _>(ds, &self.cfg.batch, &mut self.rng)?;
        let batch_id = self.iteration;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let x = tape.constant(batch.input);
        let emb = self.model.embed(&mut tape, &bound, x, Mode::Train, &mut self.rng)?;
        let logits = self.model.logits(&mut tape, &bound, emb)?;
        let tri = objective::triplet_loss(&mut tape, emb, &batch.labels, &self.loss)?;
        let cse = objective::cross_entropy_loss(&mut tape, logits, &batch.labels)?;
        let total = objective::combined_loss(&mut tape, tri, cse)?;
        let scalar = |t: &Tape<F>, v| t.value(v).data()[0].as_f64();
        let (l_tri, l_cse, l_c) = (scalar(&tape, tri), scalar(&tape, cse), scalar(&tape, total));
        let abort = |model: &GaitGl<F>| GaitError::NonFinite {
            iteration: batch_id + 1,
            batch_id,
            norms: model.params().norm_report(),
        };
        if !l_c.is_finite() {
            return Err(abort(&self.model));
        }
        tape.backward(total, self.model.params_mut())?;
        if self.model.params().iter().any(|(_, p)| !p.grad.all_finite()) {
            let err = abort(&self.model);
            self.model.params_mut().zero_grads();
            return Err(err);
        }
        self.opt.step(self.model.params_mut());
        self.iteration += 1;
        let rec = MetricsRecord {
            iteration: self.iteration,
            l_tri,
            l_cse,
            l_c,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        debug!("{rec}");
        Ok(rec)
    }

    /// Steps until the configured iteration count. Checkpoints go to
    /// `ckpt_dir` as `ckpt-NNNNNN.bin` at the configured interval and as
    /// `last.bin` at the end.
    pub fn run(
        &mut self,
        ds: &Dataset,
        ckpt_dir: Option<&Path>,
        mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut log = Vec::new();
        while self.iteration < self.cfg.iterations {
            let rec = self.step(ds)?;
            on_record(&rec)?;
            if rec.iteration % 50 == 0 {
                info!("iteration {} loss {:.4} ({} ms)", rec.iteration, rec.l_c, rec.wall_ms);
            }
            log.push(rec);
            if let Some(dir) = ckpt_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.iteration % every == 0 {
                    self.checkpoint().save(&dir.join(format!("ckpt-{:06}.bin", self.iteration)))?;
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            self.checkpoint().save(&dir.join("last.bin"))?;
        }
        Ok(log)
    }
}

/// Trains from scratch on `ds` and returns the trainer with its loss log.
pub fn train<F: Real>(ds: &Dataset, cfg: TrainConfig) -> Result<(Trainer<F>, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(cfg, ds.num_subjects())?;
    let log = t.run(ds, None, |_| Ok(()))?;
    Ok((t, log))
}
