//! The GaitGL network: staged GLCL backbone, temporal and spatial mapping,
//! separate FC layers, and the training-only classifier bank.

mod config;
pub mod layers;

pub use config::{
    Activation, BackboneConfig, ConvSpec, EvalLocal, GlclVariant, HeadMode, ShapeChain, StageConfig, StageTail,
    GEM_P_INIT, LEAKY_SLOPE,
};

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{GaitError, Result};
use crate::kernels::PoolKind;
use crate::mask::{self, MaskKind};
use crate::real::Real;
use crate::tensor::Tensor;

use layers::{GlclVars, LocalBranch};

/// Prefix of parameters that belong to the classifier bank.
pub const CLASSIFIER_PREFIX: &str = "classifier.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// random masks are drawn per layer and forward pass
    Train,
    /// deterministic local branch
    Eval,
}

/// Per-strip embedding of one sequence, strips ordered top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub strips: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Splits a `[N, H, B]` tensor into one matrix per sample.
    pub fn from_batch<F: Real>(t: &Tensor<F>) -> Result<Vec<Self>> {
        let &[n, strips, channels] = t.shape() else {
            return Err(GaitError::dim("embedding", format!("expected [N, H, B], got {:?}", t.shape())));
        };
        if !t.all_finite() {
            return Err(GaitError::Contract("embedding contains non-finite values".into()));
        }
        let per = strips * channels;
        Ok((0..n)
            .map(|i| EmbeddingMatrix {
                strips,
                channels,
                values: t.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect(),
            })
            .collect())
    }

    pub fn strip(&self, h: usize) -> &[f64] {
        &self.values[h * self.channels..(h + 1) * self.channels]
    }
}

#[derive(Debug, Clone, Copy)]
struct GlclIds {
    global_w: ParamId,
    global_b: ParamId,
    local_w: ParamId,
}

#[derive(Debug, Clone)]
struct StageIds {
    glcl: Vec<GlclIds>,
    lta: Option<ParamId>,
}

/// Parameters pulled onto a tape, indexed like the store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// A GaitGL model: configuration plus its parameter store.
#[derive(Debug)]
pub struct GaitGl<F> {
    cfg: BackboneConfig,
    params: ParamStore<F>,
    stages: Vec<StageIds>,
    gem_p: Option<ParamId>,
    fc: ParamId,
    classifier: Option<ParamId>,
    strips: usize,
}

fn init_uniform<F: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl<F: Real> GaitGl<F> {
    /// Builds and initializes a model. Weights are uniform in
    /// `+-1/sqrt(fan_in)`, biases zero. `num_classes` adds the classifier bank.
    pub fn new<R: Rng + ?Sized>(cfg: BackboneConfig, num_classes: Option<usize>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let chain = cfg.shape_chain(cfg.input.0)?;
        let mut params = ParamStore::new();
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut in_c = 1;
        for (si, s) in cfg.stages.iter().enumerate() {
            let mut glcl = Vec::with_capacity(s.glcl_count());
            for li in 0..s.glcl_count() {
                let prefix = format!("stage{}.glcl{}", si + 1, li + 1);
                let g = cfg.global_spec(in_c, s.channels);
                let l = cfg.local_spec(in_c, s.channels);
                glcl.push(GlclIds {
                    global_w: params.add(format!("{prefix}.global.weight"), init_uniform(&g.weight_shape(), g.fan_in(), rng))?,
                    global_b: params.add(format!("{prefix}.global.bias"), Tensor::zeros(&[s.channels]))?,
                    local_w: params.add(format!("{prefix}.local.weight"), init_uniform(&l.weight_shape(), l.fan_in(), rng))?,
                });
                in_c = s.channels;
            }
            let lta = match s.tail {
                StageTail::Lta { kernel, stride } => {
                    let spec = cfg.lta_spec(in_c, kernel, stride);
                    Some(params.add(
                        format!("stage{}.lta.weight", si + 1),
                        init_uniform(&spec.weight_shape(), spec.fan_in(), rng),
                    )?)
                }
                _ => None,
            };
            stages.push(StageIds { glcl, lta });
        }
        let gem_p = match cfg.head {
            HeadMode::Gem { p_init } => Some(params.add("head.gem_p", Tensor::from_f64(&[1], &[p_init])?)?),
            HeadMode::MaxAvg { .. } => None,
        };
        let strips = chain.strips;
        let fc = params.add(
            "head.fc.weight",
            init_uniform(&[strips, in_c, cfg.embed_channels], in_c, rng),
        )?;
        let classifier = match num_classes {
            Some(0) => return Err(GaitError::Config("classifier needs at least one class".into())),
            Some(k) => Some(params.add(
                format!("{CLASSIFIER_PREFIX}weight"),
                init_uniform(&[strips, cfg.embed_channels, k], cfg.embed_channels, rng),
            )?),
            None => None,
        };
        Ok(GaitGl { cfg, params, stages, gem_p, fc, classifier, strips })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn strips(&self) -> usize {
        self.strips
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.map(|id| self.params.value(id).shape()[2])
    }

    /// Puts every parameter on the tape, as a differentiable leaf when
    /// `track` is set and as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape<F>, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(id, p)| if track { tape.param(&self.params, id) } else { tape.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Binds differentiable leaves from `store`, which must share this
    /// model's parameter layout.
    pub fn bind_from(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> Bound {
        Bound { vars: store.iter().map(|(id, _)| tape.param(store, id)).collect() }
    }

    fn local_branch<'a, R: Rng + ?Sized>(
        &self,
        mode: Mode,
        h: usize,
        w: usize,
        rng: &mut R,
        slot: &'a mut Option<mask::MaskPair>,
    ) -> LocalBranch<'a> {
        if let MaskKind::FixedNPart(n) = self.cfg.mask.kind {
            return LocalBranch::Parts(n);
        }
        let pair = match mode {
            Mode::Train => mask::generate(&self.cfg.mask, h, w, rng),
            Mode::Eval => match self.cfg.eval_local {
                EvalLocal::FixedParts(n) => return LocalBranch::Parts(n),
                EvalLocal::NoMask => mask::MaskPair::none(h, w),
            },
        };
        LocalBranch::Masked(slot.insert(pair))
    }

    /// Runs the stages on `[N, 1, T, H, W]`. `T` may differ from the training
    /// clip length but must cover the LTA kernel.
    pub fn backbone<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let d = tape.value(x).dims5("backbone")?;
        let (_, h, w) = self.cfg.input;
        if d[1] != 1 || d[3] != h || d[4] != w {
            return Err(GaitError::dim(
                "backbone",
                format!("input {d:?} does not match profile [N, 1, T, {h}, {w}]"),
            ));
        }
        let mut x = x;
        for (si, (s, ids)) in self.cfg.stages.iter().zip(&self.stages).enumerate() {
            let stage_err = |e: GaitError| match e {
                GaitError::Dimension { op, detail } => {
                    GaitError::dim("backbone", format!("stage {}: {op}: {detail}", si + 1))
                }
                other => other,
            };
            for (variant, g) in s.variants.iter().zip(&ids.glcl) {
                let d = tape.value(x).dims5("backbone")?;
                let mut slot = None;
                let local = self.local_branch(mode, d[3], d[4], rng, &mut slot);
                let vars = GlclVars {
                    global_w: bound.get(g.global_w),
                    global_b: bound.get(g.global_b),
                    local_w: bound.get(g.local_w),
                };
                x = layers::glcl(tape, x, vars, *variant, local, self.cfg.kernel, self.cfg.activation)
                    .map_err(stage_err)?;
            }
            x = match s.tail {
                StageTail::Lta { kernel, stride } => {
                    let w = bound.get(ids.lta.expect("LTA stage has weights"));
                    layers::lta(tape, x, w, kernel, stride).map_err(stage_err)?
                }
                StageTail::SpatialPool => tape.pool(x, PoolKind::Max, [1, 2, 2], [1, 2, 2]).map_err(stage_err)?,
                StageTail::None => x,
            };
        }
        Ok(x)
    }

    /// Temporal max, per-strip spatial reduction and separate FC:
    /// `[N, C, T, H, W] -> [N, H, B]`. GeM input is clamped at zero first.
    pub fn head(&self, tape: &mut Tape<F>, bound: &Bound, feat: Var) -> Result<Var> {
        let t = layers::temporal_map(tape, feat)?;
        let t = match self.cfg.head {
            HeadMode::Gem { .. } => tape.clamp_min(t, 0.0),
            HeadMode::MaxAvg { .. } => t,
        };
        let s = layers::spatial_map(tape, t, self.cfg.head, self.gem_p.map(|id| bound.get(id)))?;
        let strips = tape.shape(s)[2];
        if strips != self.strips {
            return Err(GaitError::Config(format!(
                "{} separate FC weights for {strips} strips",
                self.strips
            )));
        }
        layers::separate_fc(tape, s, bound.get(self.fc))
    }

    pub fn embed<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let feat = self.backbone(tape, bound, x, mode, rng)?;
        self.head(tape, bound, feat)
    }

    /// Per-strip class scores `[N, H, classes]` from embeddings `[N, H, B]`.
    pub fn logits(&self, tape: &mut Tape<F>, bound: &Bound, emb: Var) -> Result<Var> {
        let id = self
            .classifier
            .ok_or_else(|| GaitError::Config("model was built without a classifier".into()))?;
        tape.separate_fc(emb, bound.get(id))
    }

    /// Eval-mode embeddings for a `[N, 1, T, H, W]` batch without recording
    /// gradients.
    pub fn embed_eval(&self, input: &Tensor<F>) -> Result<Vec<EmbeddingMatrix>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        // eval mode never draws, any rng will do
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let e = self.embed(&mut tape, &bound, x, Mode::Eval, &mut rng)?;
        EmbeddingMatrix::from_batch(tape.value(e))
    }
}
