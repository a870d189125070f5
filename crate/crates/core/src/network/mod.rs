//! The four-stage pyramid: patch embeddings, hire blocks and the classifier
//! head.

mod config;

use std::collections::HashMap;
use std::path::Path;

pub use config::{
    Budget, ModelConfig, PatchEmbedConfig, StageConfig, Toggles, BUILTIN_NAMES, MIN_INPUT,
    STAGE_STRIDES,
};

use crate::error::{Error, Result};
use crate::graph::{scoped, Eager, Graph, Layer};
use crate::hire::{bottleneck_dims, BottleneckMlp, BranchToggles, HireBranch, HireModule};
use crate::init::init_params;
use crate::ops::{ActivationKind, GatherMap, LinearParams, NormMode, NormParams};
use crate::params::{join, Parameterized, TensorMut, TensorRef};
use crate::rearrange::{pad_index, Axis, PaddingMode, RegionSpec, ShiftSpec};
use crate::serialize::{load_tensors, save_tensors};
use crate::tensor::{Element, FeatureMap};

/// `Z = ChannelMLP(BN(Y)) + Y`, `Y = HireModule(BN(X)) + X`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub norm1: NormParams<T>,
    pub hire: HireModule<T>,
    pub norm2: NormParams<T>,
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
    pub activation: ActivationKind,
}

impl<T: Element> Block<T> {
    pub fn channels(&self) -> usize {
        self.hire.channels()
    }

    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let n = scoped(g, "norm1", |g| g.batch_norm(x, &self.norm1))?;
        let h = scoped(g, "hire", |g| self.hire.forward(g, &n))?;
        let y = g.add(&h, x)?;
        let n = scoped(g, "norm2", |g| g.batch_norm(&y, &self.norm2))?;
        let m = channel_mlp_graph(g, &n, &self.fc1, &self.fc2, self.activation)?;
        g.add(&m, &y)
    }

    fn cast<U: Element>(&self) -> Block<U> {
        Block {
            norm1: self.norm1.cast(),
            hire: self.hire.cast(),
            norm2: self.norm2.cast(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
            activation: self.activation,
        }
    }

    fn set_norm_mode(&mut self, mode: NormMode) {
        self.norm1.mode = mode;
        self.norm2.mode = mode;
        self.hire.set_norm_mode(mode);
    }
}

impl<T: Element> Parameterized<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.hire.visit(&join(prefix, "hire"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.fc1.visit(&join(prefix, "mlp.fc1"), out);
        self.fc2.visit(&join(prefix, "mlp.fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.hire.visit_mut(&join(prefix, "hire"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), out);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), out);
    }
}

impl<T: Element> Layer<T> for Block<T> {
    fn forward_on<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        self.forward(g, x)
    }
}

pub fn hire_block<T: Element>(x: &FeatureMap<T>, p: &Block<T>) -> Result<FeatureMap<T>> {
    p.forward(&mut Eager, x)
}

fn check_channel_mlp<T: Element>(c: usize, fc1: &LinearParams<T>, fc2: &LinearParams<T>) -> Result<()> {
    if fc1.in_dim() != c || fc1.out_dim() != fc2.in_dim() || fc2.out_dim() != c {
        return Err(Error::config(format!(
            "channel MLP must chain {c} -> r*{c} -> {c}, got {} -> {} / {} -> {}",
            fc1.in_dim(),
            fc1.out_dim(),
            fc2.in_dim(),
            fc2.out_dim()
        )));
    }
    Ok(())
}

pub fn channel_mlp_graph<T: Element, G: Graph<T>>(
    g: &mut G,
    x: &G::Var,
    fc1: &LinearParams<T>,
    fc2: &LinearParams<T>,
    activation: ActivationKind,
) -> Result<G::Var> {
    let c = *g.shape(x).last().unwrap_or(&0);
    check_channel_mlp(c, fc1, fc2)?;
    let v = scoped(g, "mlp.fc1", |g| g.linear(x, fc1))?;
    let v = g.activation(&v, activation)?;
    scoped(g, "mlp.fc2", |g| g.linear(&v, fc2))
}

/// Per-token `C -> rC -> C` MLP.
pub fn channel_mlp<T: Element>(
    x: &FeatureMap<T>,
    fc1: &LinearParams<T>,
    fc2: &LinearParams<T>,
    activation: ActivationKind,
) -> Result<FeatureMap<T>> {
    channel_mlp_graph(&mut Eager, x, fc1, fc2, activation)
}

/// Overlapping patch embedding: a `kernel x kernel` window unfold with the
/// given stride followed by a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed<T = f32> {
    pub kernel: usize,
    pub stride: usize,
    pub padding: PaddingMode,
    /// `kernel * kernel * C_in -> C_out`, taps ordered (row, column, channel).
    pub proj: LinearParams<T>,
}

/// Output extent `ceil(extent / stride)`; the window of output `i` starts at
/// `i * stride - (kernel - stride) / 2`.
pub fn unfold_map(shape: &[usize], kernel: usize, stride: usize, padding: PaddingMode) -> Result<GatherMap> {
    let [n, h, w, c] = match *shape {
        [n, h, w, c] => [n, h, w, c],
        _ => return Err(Error::invalid(format!("patch embedding expects (N, H, W, C), got {shape:?}"))),
    };
    if stride == 0 || kernel < stride {
        return Err(Error::config(format!("patch embedding needs kernel >= stride >= 1, got {kernel}/{stride}")));
    }
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::invalid(format!("patch embedding input {shape:?} yields no tokens")));
    }
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let offset = ((kernel - stride) / 2) as isize;
    let axis_src = |extent: usize, out: usize| -> Result<Vec<Option<usize>>> {
        // A single-token axis has nothing to reflect about.
        let mode = if extent == 1 && padding == PaddingMode::Reflect {
            PaddingMode::Replicate
        } else {
            padding
        };
        let mut v = Vec::with_capacity(out * kernel);
        for o in 0..out {
            for k in 0..kernel {
                v.push(pad_index((o * stride + k) as isize - offset, extent, mode)?);
            }
        }
        Ok(v)
    };
    let rows = axis_src(h, ho)?;
    let cols = axis_src(w, wo)?;
    let mut src = Vec::with_capacity(n * ho * wo * kernel * kernel);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        src.push(match (rows[oy * kernel + ky], cols[ox * kernel + kx]) {
                            (Some(y), Some(x)) => (b * h + y) * w + x,
                            _ => GatherMap::ZERO,
                        });
                    }
                }
            }
        }
    }
    GatherMap::new(shape.to_vec(), vec![n, ho, wo, kernel * kernel * c], c, src)
}

impl<T: Element> PatchEmbed<T> {
    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let map = unfold_map(g.shape(x), self.kernel, self.stride, self.padding)?;
        let patches = g.gather(x, map)?;
        scoped(g, "proj", |g| g.linear(&patches, &self.proj))
    }

    fn cast<U: Element>(&self) -> PatchEmbed<U> {
        PatchEmbed {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            proj: self.proj.cast(),
        }
    }
}

pub fn patch_embed<T: Element>(x: &FeatureMap<T>, spec: &PatchEmbed<T>) -> Result<FeatureMap<T>> {
    spec.forward(&mut Eager, x)
}

impl<T: Element> Parameterized<T> for PatchEmbed<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.proj.visit(&join(prefix, "proj"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.proj.visit_mut(&join(prefix, "proj"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T = f32> {
    pub embed: PatchEmbed<T>,
    pub blocks: Vec<Block<T>>,
}

impl<T: Element> Parameterized<T> for Stage<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.embed.visit(&join(prefix, "embed"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.embed.visit_mut(&join(prefix, "embed"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    pub stages: Vec<Stage<T>>,
    /// Global average pool, then this projection.
    pub head: LinearParams<T>,
}

impl<T: Element> Block<T> {
    /// Zero projections and identity norms for block `index` of `stage`.
    pub fn zeroed(cfg: &ModelConfig, stage: usize, index: usize) -> Result<Self> {
        cfg.validate()?;
        build_block(cfg, stage, index)
    }
}

fn build_block<T: Element>(cfg: &ModelConfig, stage: usize, index: usize) -> Result<Block<T>> {
    let s = &cfg.stages[stage];
    let c = s.channels;
    let mode = cfg.norm_mode;
    let shift = cfg.shifts_block(index).then_some(ShiftSpec {
        step: s.s,
        manner: cfg.manner,
    });
    let (eh, ew) = cfg.effective_regions(stage);
    let branch = |axis, size, effective| -> Result<HireBranch<T>> {
        let dims = bottleneck_dims(cfg.fc_layers, effective, c)?;
        let mlp = BottleneckMlp::zeros(&dims, cfg.activation, true, mode)?;
        let mut b = HireBranch::new(RegionSpec::new(axis, size, s.padding)?, shift, mlp);
        b.inner = cfg.toggles.inner_rearrange;
        b.cross_restore = cfg.toggles.cross_restore;
        Ok(b)
    };
    let mut hire = HireModule::new(
        branch(Axis::Height, s.h, eh)?,
        branch(Axis::Width, s.w, ew)?,
        LinearParams::zeros(c, c),
    )?;
    hire.toggles = BranchToggles {
        height: cfg.toggles.height,
        width: cfg.toggles.width,
        channel: cfg.toggles.channel,
    };
    let hidden = cfg.stage_ratio(stage) * c;
    Ok(Block {
        norm1: NormParams::identity(c, mode),
        hire,
        norm2: NormParams::identity(c, mode),
        fc1: LinearParams::zeros(c, hidden),
        fc2: LinearParams::zeros(hidden, c),
        activation: cfg.activation,
    })
}

impl<T: Element> Model<T> {
    /// Every projection zero, every norm the identity. Shapes follow from
    /// the config alone.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = config.in_channels;
        for (i, (s, p)) in config.stages.iter().zip(&config.patch_embed).enumerate() {
            let embed = PatchEmbed {
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
                proj: LinearParams::zeros(p.kernel * p.kernel * cin, s.channels),
            };
            let blocks = (0..s.depth)
                .map(|j| build_block(config, i, j))
                .collect::<Result<_>>()?;
            stages.push(Stage { embed, blocks });
            cin = s.channels;
        }
        Ok(Self {
            config: config.clone(),
            stages,
            head: LinearParams::zeros(cin, config.num_classes),
        })
    }

    /// Seeded initialization; equal seeds give bitwise-equal parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeroed(config)?;
        init_params(&mut m, seed);
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    embed: s.embed.cast(),
                    blocks: s.blocks.iter().map(|b| b.cast()).collect(),
                })
                .collect(),
            head: self.head.cast(),
        }
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        self.config.norm_mode = mode;
        for s in &mut self.stages {
            s.blocks.iter_mut().for_each(|b| b.set_norm_mode(mode));
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [n, h, w, c] if c == self.config.in_channels => {
                if n == 0 {
                    return Err(Error::invalid("empty batch"));
                }
                if h < MIN_INPUT || w < MIN_INPUT {
                    return Err(Error::invalid(format!(
                        "input {h}x{w} is undersized, both extents must be at least {MIN_INPUT}"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::invalid(format!(
                "expected an (N, H, W, {}) image, got {shape:?}",
                self.config.in_channels
            ))),
        }
    }

    /// Output of every stage, pre-pool.
    pub fn stage_outputs<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<Vec<G::Var>> {
        self.check_input(g.shape(x))?;
        let mut outs: Vec<G::Var> = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let input = outs.last().unwrap_or(x);
            let v = scoped(g, &format!("stages.{i}"), |g| {
                let mut v = scoped(g, "embed", |g| s.embed.forward(g, input))?;
                for (j, b) in s.blocks.iter().enumerate() {
                    v = scoped(g, &format!("blocks.{j}"), |g| b.forward(g, &v))?;
                }
                Ok(v)
            })?;
            outs.push(v);
        }
        Ok(outs)
    }

    pub fn logits<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let feats = self.stage_outputs(g, x)?;
        let last = feats.last().expect("four stages");
        let pooled = g.mean_tokens(last)?;
        scoped(g, "head", |g| g.linear(&pooled, &self.head))
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, &FeatureMap<T>)> =
            self.tensors().into_iter().map(|t| (t.path, t.tensor)).collect();
        save_tensors(path, &tensors)
    }

    /// Replaces every tensor; names and shapes must match the config exactly.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let mut loaded: HashMap<String, FeatureMap<T>> = load_tensors(path)?.into_iter().collect();
        for t in self.tensors_mut() {
            let v = loaded
                .remove(&t.path)
                .ok_or_else(|| Error::Format(format!("weights file lacks tensor `{}`", t.path)))?;
            if v.shape() != t.tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    t.path,
                    v.shape(),
                    t.tensor.shape()
                )));
            }
            *t.tensor = v;
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Format(format!("weights file has unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

impl<T: Element> Parameterized<T> for Model<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stages.{i}")), out);
        }
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stages.{i}")), out);
        }
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}

impl<T: Element> Layer<T> for Model<T> {
    fn forward_on<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        self.logits(g, x)
    }
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(config, seed)
}

/// Logits `[N, classes]`.
pub fn forward<T: Element>(image: &FeatureMap<T>, model: &Model<T>) -> Result<FeatureMap<T>> {
    model.logits(&mut Eager, image)
}

/// Stage outputs `[N, ceil(H/4), ceil(W/4), C1]` through `[N, ceil(H/32), ceil(W/32), C4]`.
pub fn forward_features<T: Element>(image: &FeatureMap<T>, model: &Model<T>) -> Result<Vec<FeatureMap<T>>> {
    model.stage_outputs(&mut Eager, image)
}
