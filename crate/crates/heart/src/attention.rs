//! Attention preprocessors mapping `[S, F, T]` input tensors to
//! `[S, F, T]`.
//!
//! Eight variants share a common assembly: learnable Q/K/V stacks
//! produce per-time-step attention weights `A = Softmax(c·Tanh(Q ⊙ K))`
//! which gate `V` component-wise; heads are averaged, layer-normed,
//! and added back through a gated residual `x + α·(...)`. Parameters
//! are shared across stations, so a mechanism trained once applies to
//! every station of a city.
//!
//! Variants:
//!
//! | tag      | difference                                               |
//! |----------|----------------------------------------------------------|
//! | `OAtt`   | full mechanism, learnable scale `c` per (head, feature)   |
//! | `Att`    | `c` fixed to 1                                            |
//! | `TAtt`   | Q/K/V shared across features                              |
//! | `CAtt`   | operates on the feature axis instead of time              |
//! | `TCAtt`  | T-Att followed by C-Att                                   |
//! | `MAtt`   | no Q/K; `A ≡ 1` component-wise                            |
//! | `NLAtt`  | lifts each series into `d` dims; full `T×T` score matrix  |
//! | `Dense`  | plain dense stacks, summed over heads, no norm/residual   |
//!
//! `NoAttention` is the identity preprocessor used as the baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{component_seed, Graph, Mode, Rng, Tensor, Var};

/// Epsilon used by every layer norm in the attention assembly.
pub const LN_EPS: f64 = 1e-5;

/// The attention mechanism family. `NoAttention` denotes the baseline
/// identity preprocessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "o-att")]
    OAtt,
    #[serde(rename = "att")]
    Att,
    #[serde(rename = "t-att")]
    TAtt,
    #[serde(rename = "c-att")]
    CAtt,
    #[serde(rename = "tc-att")]
    TCAtt,
    #[serde(rename = "m-att")]
    MAtt,
    #[serde(rename = "nl-att")]
    NLAtt,
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "none")]
    NoAttention,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 9] = [
        AttentionVariant::OAtt,
        AttentionVariant::Att,
        AttentionVariant::TAtt,
        AttentionVariant::CAtt,
        AttentionVariant::TCAtt,
        AttentionVariant::MAtt,
        AttentionVariant::NLAtt,
        AttentionVariant::Dense,
        AttentionVariant::NoAttention,
    ];

    /// Human-readable label used in tables and figures.
    pub fn label(&self) -> &'static str {
        match self {
            AttentionVariant::OAtt => "O-Att",
            AttentionVariant::Att => "Att",
            AttentionVariant::TAtt => "T-Att",
            AttentionVariant::CAtt => "C-Att",
            AttentionVariant::TCAtt => "TC-Att",
            AttentionVariant::MAtt => "M-Att",
            AttentionVariant::NLAtt => "NL-Att",
            AttentionVariant::Dense => "Dense",
            AttentionVariant::NoAttention => "NoAttention",
        }
    }

    /// Whether the variant ends in a gated residual connection.
    pub fn has_residual(&self) -> bool {
        !matches!(
            self,
            AttentionVariant::Dense | AttentionVariant::NoAttention
        )
    }
}

/// Where the preprocessor sits in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Placement {
    #[serde(rename = "pre-encoder")]
    #[default]
    PreEncoder,
    #[serde(rename = "between-encoder-decoder")]
    BetweenEncoderDecoder,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_embed_dim() -> usize {
    8
}

/// Hyperparameters of one attention mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    /// Number of attention heads H.
    pub heads: usize,
    /// Layers per Q/K/V or dense stack; depth 1 is a single affine map.
    pub depth: usize,
    /// Dropout rate applied to the attention weights `A`.
    #[serde(default = "default_dropout")]
    pub dropout_weights: f64,
    /// Dropout rate applied after head combination.
    #[serde(default = "default_dropout")]
    pub dropout_output: f64,
    /// Embedding dimension for `NLAtt`.
    #[serde(default = "default_embed_dim")]
    pub nl_embed_dim: usize,
    #[serde(default)]
    pub placement: Placement,
}

impl AttentionConfig {
    pub fn new(variant: AttentionVariant, heads: usize, depth: usize) -> Self {
        Self {
            variant,
            heads,
            depth,
            dropout_weights: default_dropout(),
            dropout_output: default_dropout(),
            nl_embed_dim: default_embed_dim(),
            placement: Placement::PreEncoder,
        }
    }

    /// Baseline configuration: the identity preprocessor.
    pub fn none() -> Self {
        Self::new(AttentionVariant::NoAttention, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads < 1 {
            return Err(Error::Config("attention heads must be >= 1".into()));
        }
        if self.depth < 1 {
            return Err(Error::Config("attention depth must be >= 1".into()));
        }
        for (name, rate) in [
            ("dropout_weights", self.dropout_weights),
            ("dropout_output", self.dropout_output),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {rate}"
                )));
            }
        }
        if self.variant == AttentionVariant::NLAtt && self.nl_embed_dim < 1 {
            return Err(Error::Config("nl_embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Cell label in the style used by the result tables,
    /// e.g. `Att: H=2, L=2`.
    pub fn cell_label(&self) -> String {
        if self.variant == AttentionVariant::NoAttention {
            self.variant.label().to_string()
        } else {
            format!(
                "{}: H={}, L={}",
                self.variant.label(),
                self.heads,
                self.depth
            )
        }
    }
}

// ── parameter containers ────────────────────────────────────────────
//
// Generic over the storage: `Tensor` at rest (init, optimizer,
// checkpoints), `Var` once bound into a graph for a forward pass.

#[derive(Debug, Clone)]
pub struct DenseParams<T> {
    pub w: T,
    pub b: T,
}

/// One Q/K/V (or plain dense) stack: `depth` affine layers with ReLU
/// between them, never after the last.
#[derive(Debug, Clone)]
pub struct StackParams<T> {
    pub layers: Vec<DenseParams<T>>,
}

/// Shared tail of every residual-bearing variant: layer norm and the
/// residual gate.
#[derive(Debug, Clone)]
pub struct AssemblyParams<T> {
    pub ln_gamma: T,
    pub ln_beta: T,
    pub alpha: T,
}

/// Parameters for O-Att / Att / M-Att: per (head, feature) stacks.
/// `q`, `k` are absent for M-Att; `c` is present only for O-Att.
#[derive(Debug, Clone)]
pub struct PerFeatureParams<T> {
    /// Indexed `[head][feature]`.
    pub q: Option<Vec<Vec<StackParams<T>>>>,
    pub k: Option<Vec<Vec<StackParams<T>>>>,
    pub v: Vec<Vec<StackParams<T>>>,
    /// Learnable scale `c[head][feature]` (O-Att only).
    pub c: Option<Vec<Vec<T>>>,
    pub assembly: AssemblyParams<T>,
}

/// Parameters for T-Att / C-Att: stacks shared across the non-attended
/// axis, indexed `[head]`.
#[derive(Debug, Clone)]
pub struct SharedAxisParams<T> {
    pub q: Vec<StackParams<T>>,
    pub k: Vec<StackParams<T>>,
    pub v: Vec<StackParams<T>>,
    pub assembly: AssemblyParams<T>,
}

/// Parameters for NL-Att: per-feature embedding and projection maps,
/// per (head, feature) stacks acting in the embedding space.
#[derive(Debug, Clone)]
pub struct NonLocalParams<T> {
    /// Indexed `[feature]`; `w`, `b` of length `d`.
    pub embed: Vec<DenseParams<T>>,
    /// Indexed `[feature]`; `w` of length `d`, `b` of length 1.
    pub proj: Vec<DenseParams<T>>,
    pub q: Vec<Vec<StackParams<T>>>,
    pub k: Vec<Vec<StackParams<T>>>,
    pub v: Vec<Vec<StackParams<T>>>,
    pub assembly: AssemblyParams<T>,
}

/// Parameters for the Dense variant: per (head, feature) stacks only.
#[derive(Debug, Clone)]
pub struct DenseStackParams<T> {
    pub stacks: Vec<Vec<StackParams<T>>>,
}

/// Parameter set of one attention preprocessor.
#[derive(Debug, Clone)]
pub enum AttentionParams<T> {
    None,
    PerFeature(PerFeatureParams<T>),
    TimeShared(SharedAxisParams<T>),
    FeatureAxis(SharedAxisParams<T>),
    TimeThenFeature {
        time: SharedAxisParams<T>,
        feature: SharedAxisParams<T>,
    },
    NonLocal(NonLocalParams<T>),
    DenseStack(DenseStackParams<T>),
}

// ── traversal ───────────────────────────────────────────────────────

impl<A> DenseParams<A> {
    fn map<B>(&self, prefix: &str, f: &mut impl FnMut(&str, &A) -> B) -> DenseParams<B> {
        DenseParams {
            w: f(&format!("{prefix}.w"), &self.w),
            b: f(&format!("{prefix}.b"), &self.b),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut A)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl<A> StackParams<A> {
    fn map<B>(&self, prefix: &str, f: &mut impl FnMut(&str, &A) -> B) -> StackParams<B> {
        StackParams {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("{prefix}.l{i}"), f))
                .collect(),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut A)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("{prefix}.l{i}"), f);
        }
    }
}

impl<A> AssemblyParams<A> {
    fn map<B>(&self, prefix: &str, f: &mut impl FnMut(&str, &A) -> B) -> AssemblyParams<B> {
        AssemblyParams {
            ln_gamma: f(&format!("{prefix}.ln_gamma"), &self.ln_gamma),
            ln_beta: f(&format!("{prefix}.ln_beta"), &self.ln_beta),
            alpha: f(&format!("{prefix}.alpha"), &self.alpha),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut A)) {
        f(&format!("{prefix}.ln_gamma"), &mut self.ln_gamma);
        f(&format!("{prefix}.ln_beta"), &mut self.ln_beta);
        f(&format!("{prefix}.alpha"), &mut self.alpha);
    }
}

fn map_grid<A, B>(
    grid: &[Vec<StackParams<A>>],
    prefix: &str,
    role: &str,
    f: &mut impl FnMut(&str, &A) -> B,
) -> Vec<Vec<StackParams<B>>> {
    grid.iter()
        .enumerate()
        .map(|(h, row)| {
            row.iter()
                .enumerate()
                .map(|(fi, st)| st.map(&format!("{prefix}.h{h}.f{fi}.{role}"), f))
                .collect()
        })
        .collect()
}

fn grid_for_each_mut<A>(
    grid: &mut [Vec<StackParams<A>>],
    prefix: &str,
    role: &str,
    f: &mut impl FnMut(&str, &mut A),
) {
    for (h, row) in grid.iter_mut().enumerate() {
        for (fi, st) in row.iter_mut().enumerate() {
            st.for_each_mut(&format!("{prefix}.h{h}.f{fi}.{role}"), f);
        }
    }
}

fn map_shared<A, B>(
    p: &SharedAxisParams<A>,
    prefix: &str,
    f: &mut impl FnMut(&str, &A) -> B,
) -> SharedAxisParams<B> {
    SharedAxisParams {
        q: p.q
            .iter()
            .enumerate()
            .map(|(h, st)| st.map(&format!("{prefix}.h{h}.q"), f))
            .collect(),
        k: p.k
            .iter()
            .enumerate()
            .map(|(h, st)| st.map(&format!("{prefix}.h{h}.k"), f))
            .collect(),
        v: p.v
            .iter()
            .enumerate()
            .map(|(h, st)| st.map(&format!("{prefix}.h{h}.v"), f))
            .collect(),
        assembly: p.assembly.map(prefix, f),
    }
}

fn shared_for_each_mut<A>(
    p: &mut SharedAxisParams<A>,
    prefix: &str,
    f: &mut impl FnMut(&str, &mut A),
) {
    for (h, st) in p.q.iter_mut().enumerate() {
        st.for_each_mut(&format!("{prefix}.h{h}.q"), f);
    }
    for (h, st) in p.k.iter_mut().enumerate() {
        st.for_each_mut(&format!("{prefix}.h{h}.k"), f);
    }
    for (h, st) in p.v.iter_mut().enumerate() {
        st.for_each_mut(&format!("{prefix}.h{h}.v"), f);
    }
    p.assembly.for_each_mut(prefix, f);
}

impl<A> AttentionParams<A> {
    /// Structure-preserving map over every parameter, visiting in a
    /// fixed order with stable dotted names.
    pub fn map<B>(&self, prefix: &str, f: &mut impl FnMut(&str, &A) -> B) -> AttentionParams<B> {
        match self {
            AttentionParams::None => AttentionParams::None,
            AttentionParams::PerFeature(p) => AttentionParams::PerFeature(PerFeatureParams {
                q: p.q.as_ref().map(|q| map_grid(q, prefix, "q", f)),
                k: p.k.as_ref().map(|k| map_grid(k, prefix, "k", f)),
                v: map_grid(&p.v, prefix, "v", f),
                c: p.c.as_ref().map(|c| {
                    c.iter()
                        .enumerate()
                        .map(|(h, row)| {
                            row.iter()
                                .enumerate()
                                .map(|(fi, t)| f(&format!("{prefix}.h{h}.f{fi}.c"), t))
                                .collect()
                        })
                        .collect()
                }),
                assembly: p.assembly.map(prefix, f),
            }),
            AttentionParams::TimeShared(p) => AttentionParams::TimeShared(map_shared(p, prefix, f)),
            AttentionParams::FeatureAxis(p) => {
                AttentionParams::FeatureAxis(map_shared(p, prefix, f))
            }
            AttentionParams::TimeThenFeature { time, feature } => {
                AttentionParams::TimeThenFeature {
                    time: map_shared(time, &format!("{prefix}.t"), f),
                    feature: map_shared(feature, &format!("{prefix}.c"), f),
                }
            }
            AttentionParams::NonLocal(p) => AttentionParams::NonLocal(NonLocalParams {
                embed: p
                    .embed
                    .iter()
                    .enumerate()
                    .map(|(fi, d)| d.map(&format!("{prefix}.f{fi}.embed"), f))
                    .collect(),
                proj: p
                    .proj
                    .iter()
                    .enumerate()
                    .map(|(fi, d)| d.map(&format!("{prefix}.f{fi}.proj"), f))
                    .collect(),
                q: map_grid(&p.q, prefix, "q", f),
                k: map_grid(&p.k, prefix, "k", f),
                v: map_grid(&p.v, prefix, "v", f),
                assembly: p.assembly.map(prefix, f),
            }),
            AttentionParams::DenseStack(p) => AttentionParams::DenseStack(DenseStackParams {
                stacks: map_grid(&p.stacks, prefix, "stack", f),
            }),
        }
    }

    /// Visits every parameter immutably.
    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(&str, &A)) {
        self.map(prefix, &mut |name, t| f(name, t));
    }

    /// Visits every parameter mutably, same order and names as
    /// [`AttentionParams::map`].
    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut A)) {
        match self {
            AttentionParams::None => {}
            AttentionParams::PerFeature(p) => {
                if let Some(q) = &mut p.q {
                    grid_for_each_mut(q, prefix, "q", f);
                }
                if let Some(k) = &mut p.k {
                    grid_for_each_mut(k, prefix, "k", f);
                }
                grid_for_each_mut(&mut p.v, prefix, "v", f);
                if let Some(c) = &mut p.c {
                    for (h, row) in c.iter_mut().enumerate() {
                        for (fi, t) in row.iter_mut().enumerate() {
                            f(&format!("{prefix}.h{h}.f{fi}.c"), t);
                        }
                    }
                }
                p.assembly.for_each_mut(prefix, f);
            }
            AttentionParams::TimeShared(p) | AttentionParams::FeatureAxis(p) => {
                shared_for_each_mut(p, prefix, f);
            }
            AttentionParams::TimeThenFeature { time, feature } => {
                shared_for_each_mut(time, &format!("{prefix}.t"), f);
                shared_for_each_mut(feature, &format!("{prefix}.c"), f);
            }
            AttentionParams::NonLocal(p) => {
                for (fi, d) in p.embed.iter_mut().enumerate() {
                    d.for_each_mut(&format!("{prefix}.f{fi}.embed"), f);
                }
                for (fi, d) in p.proj.iter_mut().enumerate() {
                    d.for_each_mut(&format!("{prefix}.f{fi}.proj"), f);
                }
                grid_for_each_mut(&mut p.q, prefix, "q", f);
                grid_for_each_mut(&mut p.k, prefix, "k", f);
                grid_for_each_mut(&mut p.v, prefix, "v", f);
                p.assembly.for_each_mut(prefix, f);
            }
            AttentionParams::DenseStack(p) => {
                grid_for_each_mut(&mut p.stacks, prefix, "stack", f);
            }
        }
    }
}

impl AttentionParams<Tensor> {
    /// Binds every parameter tensor as a graph leaf, recording
    /// `(name, Var)` pairs for gradient extraction.
    pub fn bind(
        &self,
        g: &mut Graph,
        prefix: &str,
        names: &mut Vec<(String, Var)>,
    ) -> AttentionParams<Var> {
        self.map(prefix, &mut |name, t| {
            let var = g.leaf(t.clone());
            names.push((name.to_string(), var));
            var
        })
    }

    /// Binds parameters without gradient tracking (eval passes).
    pub fn bind_frozen(&self, g: &mut Graph) -> AttentionParams<Var> {
        self.map("", &mut |_, t| {
            let mut t = t.clone();
            t.requires_grad = false;
            g.constant(t)
        })
    }
}

// ── initialization ──────────────────────────────────────────────────

/// Uniform fan-in init for an `[out, in]` matrix: `U(-√(1/in), √(1/in))`.
fn init_matrix(rng: &mut Rng, out_dim: usize, in_dim: usize) -> Tensor {
    let bound = (1.0 / in_dim as f64).sqrt();
    let data: Vec<f64> = (0..out_dim * in_dim)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Tensor::new(&[out_dim, in_dim], data).unwrap().with_grad()
}

fn init_vector(rng: &mut Rng, len: usize, bound: f64) -> Tensor {
    let data: Vec<f64> = (0..len).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(&[len], data).unwrap().with_grad()
}

fn init_stack(rng: &mut Rng, width: usize, depth: usize) -> StackParams<Tensor> {
    StackParams {
        layers: (0..depth)
            .map(|_| DenseParams {
                w: init_matrix(rng, width, width),
                b: Tensor::zeros(&[width]).with_grad(),
            })
            .collect(),
    }
}

fn init_stack_grid(
    rng: &mut Rng,
    heads: usize,
    features: usize,
    width: usize,
    depth: usize,
) -> Vec<Vec<StackParams<Tensor>>> {
    (0..heads)
        .map(|_| {
            (0..features)
                .map(|_| init_stack(rng, width, depth))
                .collect()
        })
        .collect()
}

fn init_assembly(axis_len: usize) -> AssemblyParams<Tensor> {
    AssemblyParams {
        ln_gamma: Tensor::full(&[axis_len], 1.0).with_grad(),
        ln_beta: Tensor::zeros(&[axis_len]).with_grad(),
        // alpha starts at 0: every residual-bearing variant begins as
        // the exact identity map
        alpha: Tensor::zeros(&[1]).with_grad(),
    }
}

fn init_shared(rng: &mut Rng, heads: usize, width: usize, depth: usize) -> SharedAxisParams<Tensor> {
    SharedAxisParams {
        q: (0..heads).map(|_| init_stack(rng, width, depth)).collect(),
        k: (0..heads).map(|_| init_stack(rng, width, depth)).collect(),
        v: (0..heads).map(|_| init_stack(rng, width, depth)).collect(),
        assembly: init_assembly(width),
    }
}

/// Builds freshly initialized parameters for the given configuration.
///
/// `feature_dim` is the number of features the preprocessor sees (`F`,
/// or the latent channel count when placed between encoder and
/// decoder); `axis_len` is the window length `T`. Initialization draws
/// from a sub-stream of `seed` dedicated to the attention component,
/// so models sharing a seed get identical non-attention parameters.
pub fn init_attention(
    config: &AttentionConfig,
    feature_dim: usize,
    axis_len: usize,
    seed: u64,
) -> Result<AttentionParams<Tensor>> {
    config.validate()?;
    let mut rng = Rng::seed(component_seed(seed, "attention"));
    let (h, l, f, t) = (config.heads, config.depth, feature_dim, axis_len);
    Ok(match config.variant {
        AttentionVariant::NoAttention => AttentionParams::None,
        AttentionVariant::OAtt | AttentionVariant::Att => {
            AttentionParams::PerFeature(PerFeatureParams {
                q: Some(init_stack_grid(&mut rng, h, f, t, l)),
                k: Some(init_stack_grid(&mut rng, h, f, t, l)),
                v: init_stack_grid(&mut rng, h, f, t, l),
                // c starts at 1, so O-Att starts as Att
                c: (config.variant == AttentionVariant::OAtt).then(|| {
                    (0..h)
                        .map(|_| {
                            (0..f).map(|_| Tensor::full(&[1], 1.0).with_grad()).collect()
                        })
                        .collect()
                }),
                assembly: init_assembly(t),
            })
        }
        AttentionVariant::MAtt => AttentionParams::PerFeature(PerFeatureParams {
            q: None,
            k: None,
            v: init_stack_grid(&mut rng, h, f, t, l),
            c: None,
            assembly: init_assembly(t),
        }),
        AttentionVariant::TAtt => AttentionParams::TimeShared(init_shared(&mut rng, h, t, l)),
        AttentionVariant::CAtt => AttentionParams::FeatureAxis(init_shared(&mut rng, h, f, l)),
        AttentionVariant::TCAtt => AttentionParams::TimeThenFeature {
            time: init_shared(&mut rng, h, t, l),
            feature: init_shared(&mut rng, h, f, l),
        },
        AttentionVariant::NLAtt => {
            let d = config.nl_embed_dim;
            AttentionParams::NonLocal(NonLocalParams {
                embed: (0..f)
                    .map(|_| DenseParams {
                        w: init_vector(&mut rng, d, 1.0),
                        b: Tensor::zeros(&[d]).with_grad(),
                    })
                    .collect(),
                proj: (0..f)
                    .map(|_| DenseParams {
                        w: init_vector(&mut rng, d, (1.0 / d as f64).sqrt()),
                        b: Tensor::zeros(&[1]).with_grad(),
                    })
                    .collect(),
                q: init_stack_grid(&mut rng, h, f, d, l),
                k: init_stack_grid(&mut rng, h, f, d, l),
                v: init_stack_grid(&mut rng, h, f, d, l),
                assembly: init_assembly(t),
            })
        }
        AttentionVariant::Dense => AttentionParams::DenseStack(DenseStackParams {
            stacks: init_stack_grid(&mut rng, h, f, t, l),
        }),
    })
}

// ── forward passes ──────────────────────────────────────────────────

/// Runs one Q/K/V stack: dense → ReLU → ... → dense, with no
/// activation after the last layer.
pub fn qkv_stack_forward(g: &mut Graph, x: Var, stack: &StackParams<Var>) -> Result<Var> {
    let mut h = x;
    for (i, layer) in stack.layers.iter().enumerate() {
        if i > 0 {
            h = g.relu(h);
        }
        h = g.dense_apply(h, layer.w, layer.b)?;
    }
    Ok(h)
}

/// Row-wise stack for the embedding space of NL-Att: each layer maps
/// every row of `[T, d]` through the same affine map.
fn stack_rows_forward(g: &mut Graph, x: Var, stack: &StackParams<Var>) -> Result<Var> {
    let mut h = x;
    for (i, layer) in stack.layers.iter().enumerate() {
        if i > 0 {
            h = g.relu(h);
        }
        h = g.affine_rows(h, layer.w, layer.b)?;
    }
    Ok(h)
}

/// Attention weights `Softmax(c · Tanh(q ⊙ k))` over the vector axis.
/// `c = None` means the fixed scale 1. The Tanh bounds the logits to
/// `[-|c|, |c|]`, capping the ratio between any two weights.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, c: Option<Var>) -> Result<Var> {
    let qk = g.mul(q, k)?;
    let mut logits = g.tanh(qk);
    if let Some(c) = c {
        logits = g.mul_scalar(logits, c)?;
    }
    g.softmax(logits)
}

/// Shared assembly tail: head average, output dropout, layer norm,
/// gated residual onto the input slice.
fn assemble_residual(
    g: &mut Graph,
    x_slice: Var,
    head_outs: &[Var],
    assembly: &AssemblyParams<Var>,
    dropout_output: f64,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    let mean = g.mean_of(head_outs)?;
    let dropped = g.dropout(mean, dropout_output, mode, rng)?;
    let normed = g.layer_norm(dropped, assembly.ln_gamma, assembly.ln_beta, LN_EPS)?;
    let gated = g.mul_scalar(normed, assembly.alpha)?;
    g.add(x_slice, gated)
}

/// O-Att / Att / M-Att forward: a separate mechanism per feature,
/// shared across stations, acting on the time axis.
pub fn per_feature_attention_forward(
    g: &mut Graph,
    x: Var,
    config: &AttentionConfig,
    params: &PerFeatureParams<Var>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    if !matches!(
        config.variant,
        AttentionVariant::OAtt | AttentionVariant::Att | AttentionVariant::MAtt
    ) {
        return Err(Error::Contract(format!(
            "per-feature attention cannot run variant {}",
            config.variant.label()
        )));
    }
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "attention input must be rank 3, got {shape:?}"
        )));
    }
    let (s_dim, f_dim, t_dim) = (shape[0], shape[1], shape[2]);
    let mut out_slices = Vec::with_capacity(s_dim * f_dim);
    for s in 0..s_dim {
        for fi in 0..f_dim {
            let x_sf = g.slice_time(x, s, fi)?;
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let v_out = qkv_stack_forward(g, x_sf, &params.v[h][fi])?;
                let a = match (&params.q, &params.k) {
                    (Some(q), Some(k)) => {
                        let q_out = qkv_stack_forward(g, x_sf, &q[h][fi])?;
                        let k_out = qkv_stack_forward(g, x_sf, &k[h][fi])?;
                        let c = params.c.as_ref().map(|c| c[h][fi]);
                        attention_weights(g, q_out, k_out, c)?
                    }
                    // M-Att: A ≡ 1 component-wise, no softmax
                    _ => g.constant(Tensor::full(&[t_dim], 1.0)),
                };
                let a = g.dropout(a, config.dropout_weights, mode, rng)?;
                heads.push(g.mul(a, v_out)?);
            }
            out_slices.push(assemble_residual(
                g,
                x_sf,
                &heads,
                &params.assembly,
                config.dropout_output,
                rng,
                mode,
            )?);
        }
    }
    g.assemble_time_slices(&out_slices, s_dim, f_dim)
}

/// T-Att / C-Att / TC-Att forward. T-Att runs the per-feature assembly
/// with feature-shared stacks and `c ≡ 1`; C-Att runs the same
/// machinery along the feature axis for each fixed `(s, t)`; TC-Att is
/// T-Att followed by C-Att.
pub fn shared_axis_attention_forward(
    g: &mut Graph,
    x: Var,
    config: &AttentionConfig,
    params: &AttentionParams<Var>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    match (config.variant, params) {
        (AttentionVariant::TAtt, AttentionParams::TimeShared(p)) => {
            time_shared_forward(g, x, config, p, rng, mode)
        }
        (AttentionVariant::CAtt, AttentionParams::FeatureAxis(p)) => {
            feature_axis_forward(g, x, config, p, rng, mode)
        }
        (AttentionVariant::TCAtt, AttentionParams::TimeThenFeature { time, feature }) => {
            let mid = time_shared_forward(g, x, config, time, rng, mode)?;
            feature_axis_forward(g, mid, config, feature, rng, mode)
        }
        (v, _) => Err(Error::Contract(format!(
            "shared-axis attention cannot run variant {}",
            v.label()
        ))),
    }
}

fn time_shared_forward(
    g: &mut Graph,
    x: Var,
    config: &AttentionConfig,
    params: &SharedAxisParams<Var>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "attention input must be rank 3, got {shape:?}"
        )));
    }
    let (s_dim, f_dim) = (shape[0], shape[1]);
    let mut out_slices = Vec::with_capacity(s_dim * f_dim);
    for s in 0..s_dim {
        for fi in 0..f_dim {
            let x_sf = g.slice_time(x, s, fi)?;
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let q_out = qkv_stack_forward(g, x_sf, &params.q[h])?;
                let k_out = qkv_stack_forward(g, x_sf, &params.k[h])?;
                let v_out = qkv_stack_forward(g, x_sf, &params.v[h])?;
                let a = attention_weights(g, q_out, k_out, None)?;
                let a = g.dropout(a, config.dropout_weights, mode, rng)?;
                heads.push(g.mul(a, v_out)?);
            }
            out_slices.push(assemble_residual(
                g,
                x_sf,
                &heads,
                &params.assembly,
                config.dropout_output,
                rng,
                mode,
            )?);
        }
    }
    g.assemble_time_slices(&out_slices, s_dim, f_dim)
}

fn feature_axis_forward(
    g: &mut Graph,
    x: Var,
    config: &AttentionConfig,
    params: &SharedAxisParams<Var>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "attention input must be rank 3, got {shape:?}"
        )));
    }
    let (s_dim, t_dim) = (shape[0], shape[2]);
    let mut out_slices = Vec::with_capacity(s_dim * t_dim);
    for s in 0..s_dim {
        for t in 0..t_dim {
            let x_st = g.slice_feature(x, s, t)?;
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let q_out = qkv_stack_forward(g, x_st, &params.q[h])?;
                let k_out = qkv_stack_forward(g, x_st, &params.k[h])?;
                let v_out = qkv_stack_forward(g, x_st, &params.v[h])?;
                let a = attention_weights(g, q_out, k_out, None)?;
                let a = g.dropout(a, config.dropout_weights, mode, rng)?;
                heads.push(g.mul(a, v_out)?);
            }
            out_slices.push(assemble_residual(
                g,
                x_st,
                &heads,
                &params.assembly,
                config.dropout_output,
                rng,
                mode,
            )?);
        }
    }
    g.assemble_feature_slices(&out_slices, s_dim, t_dim)
}

/// NL-Att forward: each series is embedded into `d` dimensions, scores
/// form a full `T×T` matrix per `(s, f, h)` via `Softmax(QKᵀ/√d)`, and
/// the attended rows are projected back to one dimension per time step
/// before the usual assembly.
pub fn nl_att_forward(
    g: &mut Graph,
    x: Var,
    config: &AttentionConfig,
    params: &NonLocalParams<Var>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    if config.variant != AttentionVariant::NLAtt {
        return Err(Error::Contract(format!(
            "nl_att_forward cannot run variant {}",
            config.variant.label()
        )));
    }
    if config.nl_embed_dim < 1 {
        return Err(Error::Config("nl_embed_dim must be >= 1".into()));
    }
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "attention input must be rank 3, got {shape:?}"
        )));
    }
    let (s_dim, f_dim) = (shape[0], shape[1]);
    let inv_sqrt_d = 1.0 / (config.nl_embed_dim as f64).sqrt();
    let mut out_slices = Vec::with_capacity(s_dim * f_dim);
    for s in 0..s_dim {
        for fi in 0..f_dim {
            let x_sf = g.slice_time(x, s, fi)?;
            let e = g.embed_rows(x_sf, params.embed[fi].w, params.embed[fi].b)?;
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let q_mat = stack_rows_forward(g, e, &params.q[h][fi])?;
                let k_mat = stack_rows_forward(g, e, &params.k[h][fi])?;
                let v_mat = stack_rows_forward(g, e, &params.v[h][fi])?;
                let scores = g.matmul_nt(q_mat, k_mat)?;
                let scaled = g.scale(scores, inv_sqrt_d);
                let a = g.softmax_rows(scaled)?;
                let a = g.dropout(a, config.dropout_weights, mode, rng)?;
                let ctx = g.matmul(a, v_mat)?;
                heads.push(g.project_rows(ctx, params.proj[fi].w, params.proj[fi].b)?);
            }
            out_slices.push(assemble_residual(
                g,
                x_sf,
                &heads,
                &params.assembly,
                config.dropout_output,
                rng,
                mode,
            )?);
        }
    }
    g.assemble_time_slices(&out_slices, s_dim, f_dim)
}

/// Dense variant forward: per (s, f, h) a plain dense/ReLU stack on
/// the time axis, a final dropout, and a sum (not mean) over heads.
/// No layer norm, no residual.
pub fn dense_variant_forward(
    g: &mut Graph,
    x: Var,
    config: &AttentionConfig,
    params: &DenseStackParams<Var>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    if config.variant != AttentionVariant::Dense {
        return Err(Error::Contract(format!(
            "dense_variant_forward cannot run variant {}",
            config.variant.label()
        )));
    }
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "attention input must be rank 3, got {shape:?}"
        )));
    }
    let (s_dim, f_dim) = (shape[0], shape[1]);
    let mut out_slices = Vec::with_capacity(s_dim * f_dim);
    for s in 0..s_dim {
        for fi in 0..f_dim {
            let x_sf = g.slice_time(x, s, fi)?;
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let out = qkv_stack_forward(g, x_sf, &params.stacks[h][fi])?;
                heads.push(g.dropout(out, config.dropout_output, mode, rng)?);
            }
            out_slices.push(g.sum_of(&heads)?);
        }
    }
    g.assemble_time_slices(&out_slices, s_dim, f_dim)
}

/// Variant dispatcher. `NoAttention` returns the input unchanged.
pub fn attention_forward(
    g: &mut Graph,
    x: Var,
    config: &AttentionConfig,
    params: &AttentionParams<Var>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    config.validate()?;
    match (config.variant, params) {
        (AttentionVariant::NoAttention, AttentionParams::None) => Ok(x),
        (
            AttentionVariant::OAtt | AttentionVariant::Att | AttentionVariant::MAtt,
            AttentionParams::PerFeature(p),
        ) => per_feature_attention_forward(g, x, config, p, rng, mode),
        (
            AttentionVariant::TAtt | AttentionVariant::CAtt | AttentionVariant::TCAtt,
            AttentionParams::TimeShared(_)
            | AttentionParams::FeatureAxis(_)
            | AttentionParams::TimeThenFeature { .. },
        ) => shared_axis_attention_forward(g, x, config, params, rng, mode),
        (AttentionVariant::NLAtt, AttentionParams::NonLocal(p)) => {
            nl_att_forward(g, x, config, p, rng, mode)
        }
        (AttentionVariant::Dense, AttentionParams::DenseStack(p)) => {
            dense_variant_forward(g, x, config, p, rng, mode)
        }
        (v, _) => Err(Error::Contract(format!(
            "parameter set does not match variant {}",
            v.label()
        ))),
    }
}

/// Convenience wrapper: applies the preprocessor to a plain tensor,
/// building and discarding a throwaway graph.
pub fn apply(
    x: &Tensor,
    config: &AttentionConfig,
    params: &AttentionParams<Tensor>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let bound = params.bind_frozen(&mut g);
    let out = attention_forward(&mut g, xv, config, &bound, rng, mode)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_rel_err};

    fn rand_tensor(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Overwrites every parameter with random values (residual gates
    /// included), keeping shapes.
    fn randomize(params: &mut AttentionParams<Tensor>, seed: u64, bound: f64) {
        let mut rng = Rng::seed(seed);
        params.for_each_mut("", &mut |_, t| {
            let fresh = rand_tensor(&mut rng, t.shape(), bound);
            *t = fresh.with_grad();
        });
    }

    fn flatten(params: &AttentionParams<Tensor>) -> Vec<Tensor> {
        let mut out = Vec::new();
        params.for_each("", &mut |_, t| out.push(t.clone()));
        out
    }

    fn with_values(template: &AttentionParams<Tensor>, values: &[Tensor]) -> AttentionParams<Tensor> {
        let mut i = 0;
        template.map("", &mut |_, _| {
            let t = values[i].clone();
            i += 1;
            t
        })
    }

    fn eval_apply(
        x: &Tensor,
        config: &AttentionConfig,
        params: &AttentionParams<Tensor>,
    ) -> Tensor {
        let mut rng = Rng::seed(0);
        apply(x, config, params, &mut rng, Mode::Eval).unwrap()
    }

    #[test]
    fn qkv_stack_depth_one_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.5, -2.0, 0.5]));
        let stack = StackParams {
            layers: vec![DenseParams {
                w: g.leaf(Tensor::identity(3)),
                b: g.leaf(Tensor::zeros(&[3])),
            }],
        };
        let y = qkv_stack_forward(&mut g, x, &stack).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 0.5]);
    }

    #[test]
    fn qkv_stack_relu_kills_negative_path() {
        // first layer maps everything negative, second is identity:
        // the ReLU between them zeroes the signal, leaving the second
        // bias.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let neg = g.leaf(Tensor::matrix(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap());
        let zero_b = g.leaf(Tensor::zeros(&[2]));
        let id = g.leaf(Tensor::identity(2));
        let bias2 = g.leaf(Tensor::vector(&[7.0, -3.0]));
        let stack = StackParams {
            layers: vec![
                DenseParams { w: neg, b: zero_b },
                DenseParams { w: id, b: bias2 },
            ],
        };
        let y = qkv_stack_forward(&mut g, x, &stack).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, -3.0]);
    }

    #[test]
    fn qkv_stack_matches_composition_oracle() {
        let mut rng = Rng::seed(42);
        let t = 6;
        let w0 = rand_tensor(&mut rng, &[t, t], 0.8);
        let b0 = rand_tensor(&mut rng, &[t], 0.8);
        let w1 = rand_tensor(&mut rng, &[t, t], 0.8);
        let b1 = rand_tensor(&mut rng, &[t], 0.8);
        let xv = rand_tensor(&mut rng, &[t], 1.0);
        // explicit two-layer composition
        let mut mid = vec![0.0; t];
        for i in 0..t {
            mid[i] = b0.data()[i];
            for j in 0..t {
                mid[i] += w0.at2(i, j) * xv.data()[j];
            }
            mid[i] = mid[i].max(0.0);
        }
        let mut expect = vec![0.0; t];
        for i in 0..t {
            expect[i] = b1.data()[i];
            for j in 0..t {
                expect[i] += w1.at2(i, j) * mid[j];
            }
        }
        let mut g = Graph::new();
        let x = g.leaf(xv);
        let stack = StackParams {
            layers: vec![
                DenseParams { w: g.leaf(w0), b: g.leaf(b0) },
                DenseParams { w: g.leaf(w1), b: g.leaf(b1) },
            ],
        };
        let y = qkv_stack_forward(&mut g, x, &stack).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_uniform_cases() {
        // q = k = 0 -> tanh(0) = 0 -> uniform
        let mut g = Graph::new();
        let q = g.leaf(Tensor::zeros(&[5]));
        let k = g.leaf(Tensor::zeros(&[5]));
        let a = attention_weights(&mut g, q, k, None).unwrap();
        for v in g.value(a).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        // c = 0 -> zero logits -> uniform
        let q = g.leaf(Tensor::vector(&[3.0, -1.0, 0.5]));
        let k = g.leaf(Tensor::vector(&[2.0, 2.0, -4.0]));
        let c = g.leaf(Tensor::scalar(0.0));
        let a = attention_weights(&mut g, q, k, Some(c)).unwrap();
        for v in g.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_weights_saturation_bounds_ratio() {
        // q ⊙ k = [1e6, -1e6] saturates tanh to ±1: the weights equal
        // softmax([1, -1]) and their ratio is e².
        let mut g = Graph::new();
        let q = g.leaf(Tensor::vector(&[1e3, -1e3]));
        let k = g.leaf(Tensor::vector(&[1e3, 1e3]));
        let a = attention_weights(&mut g, q, k, None).unwrap();
        let w = g.value(a).data();
        assert!((w[0] - 0.880797).abs() < 1e-5);
        assert!((w[1] - 0.119203).abs() < 1e-5);
        assert!((w[0] / w[1] - (2.0_f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn per_feature_alpha_zero_is_identity() {
        for variant in [AttentionVariant::OAtt, AttentionVariant::Att, AttentionVariant::MAtt] {
            let cfg = AttentionConfig::new(variant, 2, 2);
            let mut params = init_attention(&cfg, 3, 5, 9).unwrap();
            // randomize everything except the gate, then force alpha = 0
            randomize(&mut params, 17, 0.7);
            if let AttentionParams::PerFeature(p) = &mut params {
                p.assembly.alpha = Tensor::zeros(&[1]).with_grad();
            }
            let mut rng = Rng::seed(3);
            let x = rand_tensor(&mut rng, &[2, 3, 5], 1.0);
            let y = eval_apply(&x, &cfg, &params);
            assert_eq!(x.data(), y.data(), "{variant:?}");
            // train mode: dropout acts only inside the gated branch
            let mut rng2 = Rng::seed(5);
            let y2 = apply(&x, &cfg, &params, &mut rng2, Mode::Train).unwrap();
            assert_eq!(x.data(), y2.data());
        }
    }

    #[test]
    fn m_att_has_no_q_k_parameters() {
        let cfg = AttentionConfig::new(AttentionVariant::MAtt, 2, 2);
        let params = init_attention(&cfg, 3, 4, 1).unwrap();
        let AttentionParams::PerFeature(p) = &params else {
            panic!("wrong container")
        };
        assert!(p.q.is_none() && p.k.is_none() && p.c.is_none());
        // and the forward output therefore cannot depend on any Q/K
        // perturbation
        let mut names = Vec::new();
        params.for_each("", &mut |n, _| names.push(n.to_string()));
        assert!(names.iter().all(|n| !n.contains(".q.") && !n.contains(".k.")));
    }

    #[test]
    fn per_feature_matches_scalar_loop_oracle() {
        // S=1, F=1, T=3, H=1, L=1, eval mode, straight-line f64 oracle
        let cfg = AttentionConfig::new(AttentionVariant::Att, 1, 1);
        let mut params = init_attention(&cfg, 1, 3, 2).unwrap();
        randomize(&mut params, 33, 0.9);
        let AttentionParams::PerFeature(p) = &params else {
            panic!()
        };
        let wq = p.q.as_ref().unwrap()[0][0].layers[0].w.clone();
        let bq = p.q.as_ref().unwrap()[0][0].layers[0].b.clone();
        let wk = p.k.as_ref().unwrap()[0][0].layers[0].w.clone();
        let bk = p.k.as_ref().unwrap()[0][0].layers[0].b.clone();
        let wv = p.v[0][0].layers[0].w.clone();
        let bv = p.v[0][0].layers[0].b.clone();
        let gamma = p.assembly.ln_gamma.clone();
        let beta = p.assembly.ln_beta.clone();
        let alpha = p.assembly.alpha.data()[0];

        let mut rng = Rng::seed(4);
        let x = rand_tensor(&mut rng, &[1, 1, 3], 1.0);
        let xv = x.data();

        let dense3 = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..3)
                .map(|i| (0..3).map(|j| w.at2(i, j) * xv[j]).sum::<f64>() + b.data()[i])
                .collect()
        };
        let q = dense3(&wq, &bq);
        let k = dense3(&wk, &bk);
        let v = dense3(&wv, &bv);
        let logits: Vec<f64> = (0..3).map(|i| (q[i] * k[i]).tanh()).collect();
        let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - lmax).exp()).collect();
        let esum: f64 = exps.iter().sum();
        let head: Vec<f64> = (0..3).map(|i| exps[i] / esum * v[i]).collect();
        let mu = head.iter().sum::<f64>() / 3.0;
        let var = head.iter().map(|h| (h - mu) * (h - mu)).sum::<f64>() / 3.0;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let expect: Vec<f64> = (0..3)
            .map(|i| xv[i] + alpha * ((head[i] - mu) * inv * gamma.data()[i] + beta.data()[i]))
            .collect();

        let y = eval_apply(&x, &cfg, &params);
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn t_att_swapping_features_swaps_outputs() {
        let cfg = AttentionConfig::new(AttentionVariant::TAtt, 2, 2);
        let mut params = init_attention(&cfg, 4, 6, 7).unwrap();
        randomize(&mut params, 71, 0.6);
        let mut rng = Rng::seed(8);
        let x = rand_tensor(&mut rng, &[2, 4, 6], 1.0);
        // swap features 1 and 3
        let mut swapped = x.clone();
        for s in 0..2 {
            for t in 0..6 {
                let a = (s * 4 + 1) * 6 + t;
                let b = (s * 4 + 3) * 6 + t;
                swapped.data_mut().swap(a, b);
            }
        }
        let y = eval_apply(&x, &cfg, &params);
        let y_swapped = eval_apply(&swapped, &cfg, &params);
        for s in 0..2 {
            for t in 0..6 {
                assert_eq!(y.at3(s, 1, t), y_swapped.at3(s, 3, t));
                assert_eq!(y.at3(s, 3, t), y_swapped.at3(s, 1, t));
                assert_eq!(y.at3(s, 0, t), y_swapped.at3(s, 0, t));
            }
        }
    }

    #[test]
    fn c_att_alpha_zero_is_identity() {
        let cfg = AttentionConfig::new(AttentionVariant::CAtt, 2, 1);
        let mut params = init_attention(&cfg, 4, 5, 3).unwrap();
        randomize(&mut params, 9, 0.5);
        if let AttentionParams::FeatureAxis(p) = &mut params {
            p.assembly.alpha = Tensor::zeros(&[1]).with_grad();
        }
        let mut rng = Rng::seed(2);
        let x = rand_tensor(&mut rng, &[2, 4, 5], 1.0);
        let y = eval_apply(&x, &cfg, &params);
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn tc_att_equals_t_att_then_c_att() {
        let cfg = AttentionConfig::new(AttentionVariant::TCAtt, 2, 2);
        let mut params = init_attention(&cfg, 3, 4, 11).unwrap();
        randomize(&mut params, 13, 0.6);
        let AttentionParams::TimeThenFeature { time, feature } = &params else {
            panic!()
        };
        let mut rng = Rng::seed(6);
        let x = rand_tensor(&mut rng, &[2, 3, 4], 1.0);

        // composed call, train mode so the rng stream matters
        let mut rng_a = Rng::seed(99);
        let full = apply(&x, &cfg, &params, &mut rng_a, Mode::Train).unwrap();

        // two separate stage calls with the same rng stream
        let t_cfg = AttentionConfig { variant: AttentionVariant::TAtt, ..cfg.clone() };
        let c_cfg = AttentionConfig { variant: AttentionVariant::CAtt, ..cfg.clone() };
        let t_params = AttentionParams::TimeShared(time.clone());
        let c_params = AttentionParams::FeatureAxis(feature.clone());
        let mut rng_b = Rng::seed(99);
        let mid = apply(&x, &t_cfg, &t_params, &mut rng_b, Mode::Train).unwrap();
        let staged = apply(&mid, &c_cfg, &c_params, &mut rng_b, Mode::Train).unwrap();

        assert_eq!(full.data(), staged.data());
    }

    #[test]
    fn nl_att_alpha_zero_is_identity() {
        let cfg = AttentionConfig::new(AttentionVariant::NLAtt, 2, 1);
        let mut params = init_attention(&cfg, 2, 4, 5).unwrap();
        randomize(&mut params, 19, 0.6);
        if let AttentionParams::NonLocal(p) = &mut params {
            p.assembly.alpha = Tensor::zeros(&[1]).with_grad();
        }
        let mut rng = Rng::seed(4);
        let x = rand_tensor(&mut rng, &[2, 2, 4], 1.0);
        let y = eval_apply(&x, &cfg, &params);
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn nl_att_d1_matches_score_loop_oracle() {
        // With d = 1, unit embedding and projection, and identity
        // depth-1 stacks, the score matrix is just q_t·k_{t'} and the
        // whole head reduces to a hand-rolled double loop.
        let t_dim = 4;
        let mut cfg = AttentionConfig::new(AttentionVariant::NLAtt, 1, 1);
        cfg.nl_embed_dim = 1;
        let mut params = init_attention(&cfg, 1, t_dim, 21).unwrap();
        randomize(&mut params, 55, 0.8);
        let AttentionParams::NonLocal(p) = &mut params else {
            panic!()
        };
        p.embed[0].w = Tensor::vector(&[1.0]).with_grad();
        p.embed[0].b = Tensor::zeros(&[1]).with_grad();
        p.proj[0].w = Tensor::vector(&[1.0]).with_grad();
        p.proj[0].b = Tensor::zeros(&[1]).with_grad();
        p.assembly.alpha = Tensor::scalar(1.0).with_grad();
        p.assembly.ln_gamma = Tensor::full(&[t_dim], 1.0).with_grad();
        p.assembly.ln_beta = Tensor::zeros(&[t_dim]).with_grad();
        let wq = p.q[0][0].layers[0].w.at2(0, 0);
        let bq = p.q[0][0].layers[0].b.data()[0];
        let wk = p.k[0][0].layers[0].w.at2(0, 0);
        let bk = p.k[0][0].layers[0].b.data()[0];
        let wv = p.v[0][0].layers[0].w.at2(0, 0);
        let bv = p.v[0][0].layers[0].b.data()[0];

        let mut rng = Rng::seed(91);
        let x = rand_tensor(&mut rng, &[1, 1, t_dim], 1.0);
        let xv = x.data();
        let q: Vec<f64> = xv.iter().map(|v| wq * v + bq).collect();
        let k: Vec<f64> = xv.iter().map(|v| wk * v + bk).collect();
        let v: Vec<f64> = xv.iter().map(|v| wv * v + bv).collect();
        // explicit T×T score loop with rows softmaxed
        let mut head = vec![0.0; t_dim];
        for t in 0..t_dim {
            let scores: Vec<f64> = (0..t_dim).map(|u| q[t] * k[u]).collect();
            let smax = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - smax).exp()).collect();
            let sum: f64 = exps.iter().sum();
            assert!((exps.iter().map(|e| e / sum).sum::<f64>() - 1.0).abs() < 1e-12);
            head[t] = (0..t_dim).map(|u| exps[u] / sum * v[u]).sum();
        }
        let mu = head.iter().sum::<f64>() / t_dim as f64;
        let var = head.iter().map(|h| (h - mu) * (h - mu)).sum::<f64>() / t_dim as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let expect: Vec<f64> = (0..t_dim).map(|i| xv[i] + (head[i] - mu) * inv).collect();

        let y = eval_apply(&x, &cfg, &params);
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn dense_variant_sums_over_heads() {
        let cfg = AttentionConfig::new(AttentionVariant::Dense, 2, 1);
        let mut params = init_attention(&cfg, 2, 3, 1).unwrap();
        randomize(&mut params, 23, 0.7);
        // make both heads identical
        if let AttentionParams::DenseStack(p) = &mut params {
            p.stacks[1] = p.stacks[0].clone();
        }
        let single_cfg = AttentionConfig::new(AttentionVariant::Dense, 1, 1);
        let single = if let AttentionParams::DenseStack(p) = &params {
            AttentionParams::DenseStack(DenseStackParams {
                stacks: vec![p.stacks[0].clone()],
            })
        } else {
            panic!()
        };
        let mut rng = Rng::seed(12);
        let x = rand_tensor(&mut rng, &[2, 2, 3], 1.0);
        let two = eval_apply(&x, &cfg, &params);
        let one = eval_apply(&x, &single_cfg, &single);
        for (a, b) in two.data().iter().zip(one.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_variant_zero_params_zero_output() {
        let cfg = AttentionConfig::new(AttentionVariant::Dense, 2, 2);
        let mut params = init_attention(&cfg, 2, 3, 1).unwrap();
        params.for_each_mut("", &mut |_, t| {
            *t = Tensor::zeros(t.shape()).with_grad();
        });
        let mut rng = Rng::seed(1);
        let x = rand_tensor(&mut rng, &[1, 2, 3], 1.0);
        let y = eval_apply(&x, &cfg, &params);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dense_variant_matches_stack_slice_wise() {
        let cfg = AttentionConfig::new(AttentionVariant::Dense, 1, 2);
        let mut params = init_attention(&cfg, 2, 4, 31).unwrap();
        randomize(&mut params, 37, 0.8);
        let AttentionParams::DenseStack(p) = &params else {
            panic!()
        };
        let mut rng = Rng::seed(3);
        let x = rand_tensor(&mut rng, &[2, 2, 4], 1.0);
        let y = eval_apply(&x, &cfg, &params);
        for s in 0..2 {
            for fi in 0..2 {
                let mut g = Graph::new();
                let slice: Vec<f64> = (0..4).map(|t| x.at3(s, fi, t)).collect();
                let xs = g.leaf(Tensor::vector(&slice));
                let stack = p.stacks[0][fi].map("", &mut |_, t: &Tensor| g.leaf(t.clone()));
                let out = qkv_stack_forward(&mut g, xs, &stack).unwrap();
                for t in 0..4 {
                    assert!((y.at3(s, fi, t) - g.value(out).data()[t]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dispatcher_no_attention_is_identity() {
        let cfg = AttentionConfig::none();
        let params = AttentionParams::None;
        let mut rng = Rng::seed(0);
        let x = rand_tensor(&mut rng, &[3, 2, 4], 1.0);
        let y = apply(&x, &cfg, &params, &mut rng, Mode::Train).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn dispatcher_rejects_mismatched_params() {
        let cfg = AttentionConfig::new(AttentionVariant::Att, 1, 1);
        let params = AttentionParams::None;
        let mut rng = Rng::seed(0);
        let x = rand_tensor(&mut rng, &[1, 2, 3], 1.0);
        assert!(matches!(
            apply(&x, &cfg, &params, &mut rng, Mode::Eval),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn all_variants_preserve_shape() {
        let mut rng = Rng::seed(44);
        let x = rand_tensor(&mut rng, &[3, 5, 12], 1.0);
        for variant in AttentionVariant::ALL {
            let mut cfg = AttentionConfig::new(variant, 2, 2);
            cfg.nl_embed_dim = 3;
            let mut params = init_attention(&cfg, 5, 12, 77).unwrap();
            randomize(&mut params, 78, 0.5);
            let y = eval_apply(&x, &cfg, &params);
            assert_eq!(y.shape(), &[3, 5, 12], "{variant:?}");
        }
    }

    #[test]
    fn per_feature_locality_is_exact() {
        // perturbing feature f' leaves every other feature's output
        // slice bitwise unchanged
        for variant in [
            AttentionVariant::OAtt,
            AttentionVariant::Att,
            AttentionVariant::MAtt,
            AttentionVariant::NLAtt,
            AttentionVariant::Dense,
        ] {
            let mut cfg = AttentionConfig::new(variant, 2, 2);
            cfg.nl_embed_dim = 2;
            let mut params = init_attention(&cfg, 3, 4, 7).unwrap();
            randomize(&mut params, 81, 0.6);
            let mut rng = Rng::seed(10);
            let x = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
            let mut xp = x.clone();
            for s in 0..2 {
                for t in 0..4 {
                    xp.data_mut()[(s * 3 + 2) * 4 + t] += 0.37;
                }
            }
            let y = eval_apply(&x, &cfg, &params);
            let yp = eval_apply(&xp, &cfg, &params);
            for s in 0..2 {
                for f in 0..2 {
                    for t in 0..4 {
                        assert_eq!(y.at3(s, f, t), yp.at3(s, f, t), "{variant:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn station_equivariance_is_exact() {
        for variant in AttentionVariant::ALL {
            let mut cfg = AttentionConfig::new(variant, 2, 2);
            cfg.nl_embed_dim = 2;
            let mut params = init_attention(&cfg, 3, 4, 15).unwrap();
            randomize(&mut params, 16, 0.6);
            let mut rng = Rng::seed(20);
            let x = rand_tensor(&mut rng, &[3, 3, 4], 1.0);
            // rotate the station axis by one
            let mut xr = Tensor::zeros(&[3, 3, 4]);
            for s in 0..3 {
                for f in 0..3 {
                    for t in 0..4 {
                        xr.data_mut()[(((s + 1) % 3) * 3 + f) * 4 + t] = x.at3(s, f, t);
                    }
                }
            }
            let y = eval_apply(&x, &cfg, &params);
            let yr = eval_apply(&xr, &cfg, &params);
            for s in 0..3 {
                for f in 0..3 {
                    for t in 0..4 {
                        assert_eq!(y.at3(s, f, t), yr.at3((s + 1) % 3, f, t), "{variant:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn identity_at_initialization_for_residual_variants() {
        let mut rng = Rng::seed(30);
        let x = rand_tensor(&mut rng, &[2, 3, 6], 1.0);
        for variant in AttentionVariant::ALL {
            if !variant.has_residual() {
                continue;
            }
            let mut cfg = AttentionConfig::new(variant, 2, 2);
            cfg.nl_embed_dim = 3;
            let params = init_attention(&cfg, 3, 6, 123).unwrap();
            let y = eval_apply(&x, &cfg, &params);
            assert_eq!(x.data(), y.data(), "{variant:?}");
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut cfg = AttentionConfig::new(AttentionVariant::OAtt, 2, 2);
        cfg.nl_embed_dim = 2;
        let mut params = init_attention(&cfg, 2, 5, 40).unwrap();
        randomize(&mut params, 41, 0.7);
        let mut rng = Rng::seed(50);
        let x = rand_tensor(&mut rng, &[2, 2, 5], 1.0);
        let a = eval_apply(&x, &cfg, &params);
        let b = eval_apply(&x, &cfg, &params);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn attention_block_gradients_match_finite_differences() {
        // every variant at S=2, F=3, T=6, H=2, L=2, eval mode
        for variant in AttentionVariant::ALL {
            if variant == AttentionVariant::NoAttention {
                continue;
            }
            let mut cfg = AttentionConfig::new(variant, 2, 2);
            cfg.nl_embed_dim = 3;
            let mut params = init_attention(&cfg, 3, 6, 60).unwrap();
            randomize(&mut params, 61, 0.5);
            let mut rng = Rng::seed(62);
            let x = rand_tensor(&mut rng, &[2, 3, 6], 1.0);
            let template = params.clone();
            let flat = flatten(&params);

            let forward = |ts: &[Tensor]| -> f64 {
                let p = with_values(&template, ts);
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let bound = p.bind_frozen(&mut g);
                let mut r = Rng::seed(0);
                let out = attention_forward(&mut g, xv, &cfg, &bound, &mut r, Mode::Eval).unwrap();
                let sq = g.square(out);
                let loss = g.mean_all(sq);
                g.value(loss).item().unwrap()
            };
            let numeric = finite_diff(&forward, &flat, 1e-5);

            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut names = Vec::new();
            let bound = params.bind(&mut g, "", &mut names);
            let mut r = Rng::seed(0);
            let out = attention_forward(&mut g, xv, &cfg, &bound, &mut r, Mode::Eval).unwrap();
            let sq = g.square(out);
            let loss = g.mean_all(sq);
            let grads = g.backward(loss).unwrap();
            let analytic: Vec<Tensor> = names
                .iter()
                .zip(&flat)
                .map(|((_, v), t)| grads.get_or_zeros(*v, t.shape()))
                .collect();

            let err = max_rel_err(&analytic, &numeric, 1e-4);
            assert!(err < 1e-4, "{variant:?}: max rel err {err}");
        }
    }

    #[test]
    fn train_mode_gradients_with_replayed_dropout_match_fd() {
        // dropout backward exercised by fixing the rng seed inside the
        // forward closure
        let cfg = AttentionConfig::new(AttentionVariant::Att, 2, 1);
        let mut params = init_attention(&cfg, 2, 4, 70).unwrap();
        randomize(&mut params, 71, 0.5);
        let mut rng = Rng::seed(72);
        let x = rand_tensor(&mut rng, &[1, 2, 4], 1.0);
        let template = params.clone();
        let flat = flatten(&params);

        let forward = |ts: &[Tensor]| -> f64 {
            let p = with_values(&template, ts);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let bound = p.bind_frozen(&mut g);
            let mut r = Rng::seed(7777);
            let out = attention_forward(&mut g, xv, &cfg, &bound, &mut r, Mode::Train).unwrap();
            let sq = g.square(out);
            let loss = g.mean_all(sq);
            g.value(loss).item().unwrap()
        };
        let numeric = finite_diff(&forward, &flat, 1e-5);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut names = Vec::new();
        let bound = params.bind(&mut g, "", &mut names);
        let mut r = Rng::seed(7777);
        let out = attention_forward(&mut g, xv, &cfg, &bound, &mut r, Mode::Train).unwrap();
        let sq = g.square(out);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = names
            .iter()
            .zip(&flat)
            .map(|((_, v), t)| grads.get_or_zeros(*v, t.shape()))
            .collect();

        let err = max_rel_err(&analytic, &numeric, 1e-4);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttentionConfig::new(AttentionVariant::Att, 0, 1);
        assert!(cfg.validate().is_err());
        cfg.heads = 1;
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
        cfg.depth = 1;
        cfg.dropout_weights = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout_weights = 0.1;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = AttentionConfig::new(AttentionVariant::TCAtt, 4, 2);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: AttentionConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        // kebab-case variant tags
        assert!(json.contains("\"tc-att\""));
    }
}
