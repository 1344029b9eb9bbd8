//! Embedding network.
//!
//! Each branch is a stack of stages; a stage is one resolution-halving
//! [`ConvBlockParams`] followed by zero or more [`ResBlockParams`]. The
//! multi-view network runs an independent branch per view, concatenates the
//! final feature maps along channels and reduces them with a single
//! convolution whose kernel covers the whole map, giving one value per
//! embedding dimension. The result is L2-normalized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::ops;
use crate::tensor::{NamedTensor, Real, Tape, Tensor, Var};
use crate::view::View;

pub const LRELU_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
pub const EMBED_EPS: f64 = 1e-12;
pub const DEFAULT_EMBEDDING_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub width: usize,
    pub res_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub input_size: usize,
    pub stages: Vec<StageConfig>,
    pub embedding_dim: usize,
}

impl BranchConfig {
    fn with_widths(input_size: usize, widths: &[usize]) -> Self {
        BranchConfig {
            input_size,
            stages: widths
                .iter()
                .map(|&width| StageConfig { width, res_blocks: 1 })
                .collect(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }

    /// 32×32 input, three stages of width 32/64/128.
    pub fn desk() -> Self {
        Self::with_widths(32, &[32, 64, 128])
    }

    /// 224×224 input, four stages ending on a 14×14 map.
    pub fn paper() -> Self {
        Self::with_widths(224, &[32, 64, 128, 256])
    }

    /// 32×32 input with narrow 8/16/32 stages; fast enough for repeated
    /// single-core training runs.
    pub fn compact() -> Self {
        Self::with_widths(32, &[8, 16, 32])
    }

    /// 8×8 input with 4/8 stages, used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self::with_widths(8, &[4, 8])
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "compact" => Ok(Self::compact()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!("unknown architecture preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("branch needs at least one stage"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding dimension must be >= 1"));
        }
        if self.stages.iter().any(|s| s.width == 0) {
            return Err(Error::config("stage widths must be >= 1"));
        }
        let div = 1usize << self.stages.len();
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size,
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// Side length of the last stage's feature map.
    pub fn final_map_size(&self) -> usize {
        self.input_size >> self.stages.len()
    }

    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.width)
    }
}

/// Which views the network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    MultiView,
    SingleView(View),
}

impl Arch {
    pub fn views(self) -> Vec<View> {
        match self {
            Arch::MultiView => View::ALL.to_vec(),
            Arch::SingleView(v) => vec![v],
        }
    }
}

/// Structural traversal over a parameter tree whose leaves are `P`
/// (tensors for storage, tape handles for a bound forward pass).
pub trait ParamTree<P> {
    type Of<Q>;

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Of<Q>;
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P));
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

/// Stride-2 3×3 convolution, instance norm, LReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<P> {
    pub conv: Conv<P>,
    pub norm: Norm<P>,
}

/// Two stride-1 3×3 convolutions with instance norm around an identity skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockParams<P> {
    pub conv1: Conv<P>,
    pub norm1: Norm<P>,
    pub conv2: Conv<P>,
    pub norm2: Norm<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<P> {
    pub down: ConvBlockParams<P>,
    pub res: Vec<ResBlockParams<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams<P> {
    pub stages: Vec<StageParams<P>>,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P> ParamTree<P> for Conv<P> {
    type Of<Q> = Conv<Q>;
    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl<P> ParamTree<P> for Norm<P> {
    type Of<Q> = Norm<Q>;
    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Norm<Q> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

impl<P> ParamTree<P> for ConvBlockParams<P> {
    type Of<Q> = ConvBlockParams<Q>;
    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ConvBlockParams<Q> {
        ConvBlockParams {
            conv: self.conv.map(f),
            norm: self.norm.map(f),
        }
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

impl<P> ParamTree<P> for ResBlockParams<P> {
    type Of<Q> = ResBlockParams<Q>;
    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ResBlockParams<Q> {
        ResBlockParams {
            conv1: self.conv1.map(f),
            norm1: self.norm1.map(f),
            conv2: self.conv2.map(f),
            norm2: self.norm2.map(f),
        }
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

impl<P> ParamTree<P> for StageParams<P> {
    type Of<Q> = StageParams<Q>;
    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> StageParams<Q> {
        StageParams {
            down: self.down.map(f),
            res: self.res.iter().map(|r| r.map(f)).collect(),
        }
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.down.visit(&join(prefix, "down"), f);
        for (i, r) in self.res.iter().enumerate() {
            r.visit(&join(prefix, &format!("res{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        for (i, r) in self.res.iter_mut().enumerate() {
            r.visit_mut(&join(prefix, &format!("res{i}")), f);
        }
    }
}

impl<P> ParamTree<P> for BranchParams<P> {
    type Of<Q> = BranchParams<Q>;
    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> BranchParams<Q> {
        BranchParams {
            stages: self.stages.iter().map(|s| s.map(f)).collect(),
        }
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("s{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("s{i}")), f);
        }
    }
}

fn init_conv<T: Real>(out_c: usize, in_c: usize, k: usize, rng: &mut seed::Rng) -> Conv<Tensor<T>> {
    let bound = (6.0 / (in_c * k * k) as f64).sqrt();
    Conv {
        weight: Tensor::uniform(&[out_c, in_c, k, k], bound, rng),
        bias: Tensor::zeros(&[out_c]),
    }
}

fn init_norm<T: Real>(c: usize) -> Norm<Tensor<T>> {
    Norm {
        gamma: Tensor::full(&[c], T::one()),
        beta: Tensor::zeros(&[c]),
    }
}

fn init_branch<T: Real>(cfg: &BranchConfig, rng: &mut seed::Rng) -> BranchParams<Tensor<T>> {
    let mut in_c = 3;
    let stages = cfg
        .stages
        .iter()
        .map(|st| {
            let down = ConvBlockParams {
                conv: init_conv(st.width, in_c, 3, rng),
                norm: init_norm(st.width),
            };
            in_c = st.width;
            let res = (0..st.res_blocks)
                .map(|_| ResBlockParams {
                    conv1: init_conv(st.width, st.width, 3, rng),
                    norm1: init_norm(st.width),
                    conv2: init_conv(st.width, st.width, 3, rng),
                    norm2: init_norm(st.width),
                })
                .collect();
            StageParams { down, res }
        })
        .collect();
    BranchParams { stages }
}

fn lrelu<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    ops::leaky_relu(tape, x, T::of(LRELU_SLOPE))
}

fn norm<T: Real>(tape: &mut Tape<T>, x: Var, p: &Norm<Var>) -> Result<Var> {
    ops::instance_norm2d(tape, x, p.gamma, p.beta, T::of(NORM_EPS))
}

/// conv (stride 2) → instance norm → LReLU; halves the spatial size.
pub fn conv_block_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &ConvBlockParams<Var>) -> Result<Var> {
    let [_, _, h, w] = tape.value(x).dims4("conv_block")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "conv block input {h}x{w} must have even spatial size"
        )));
    }
    let y = ops::conv2d(tape, x, p.conv.weight, p.conv.bias, 2, 1)?;
    let y = norm(tape, y, &p.norm)?;
    lrelu(tape, y)
}

/// conv → IN → LReLU → conv → IN, plus the input, then LReLU.
pub fn res_block_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &ResBlockParams<Var>) -> Result<Var> {
    let c = tape.value(x).dims4("res_block")?[1];
    let wc = tape.shape(p.conv1.weight)[0];
    if c != wc || tape.shape(p.conv1.weight)[1] != c {
        return Err(Error::dims("res_block", tape.shape(x), tape.shape(p.conv1.weight)));
    }
    let y = ops::conv2d(tape, x, p.conv1.weight, p.conv1.bias, 1, 1)?;
    let y = norm(tape, y, &p.norm1)?;
    let y = lrelu(tape, y)?;
    let y = ops::conv2d(tape, y, p.conv2.weight, p.conv2.bias, 1, 1)?;
    let y = norm(tape, y, &p.norm2)?;
    let y = ops::add(tape, y, x)?;
    lrelu(tape, y)
}

/// Runs one branch on an `N×3×S×S` batch, returning the last stage's map.
pub fn branch_forward<T: Real>(
    tape: &mut Tape<T>,
    images: Var,
    p: &BranchParams<Var>,
    cfg: &BranchConfig,
) -> Result<Var> {
    let [_, c, h, w] = tape.value(images).dims4("branch")?;
    if c != 3 || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::dims(
            "branch input",
            tape.shape(images),
            &[0, 3, cfg.input_size, cfg.input_size],
        ));
    }
    let mut x = images;
    for stage in &p.stages {
        x = conv_block_forward(tape, x, &stage.down)?;
        for r in &stage.res {
            x = res_block_forward(tape, x, r)?;
        }
    }
    Ok(x)
}

/// Network parameters bound to a tape for one forward pass.
pub struct BoundNet {
    arch: Arch,
    branches: Vec<BranchParams<Var>>,
    head: Conv<Var>,
}

impl BoundNet {
    pub fn branch(&self, view: View) -> Option<&BranchParams<Var>> {
        let idx = self.arch.views().iter().position(|&v| v == view)?;
        self.branches.get(idx)
    }
}

/// Embedding network with one branch per consumed view and a shared head.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet<T> {
    config: BranchConfig,
    arch: Arch,
    branches: Vec<BranchParams<Tensor<T>>>,
    head: Conv<Tensor<T>>,
}

impl<T: Real> EmbeddingNet<T> {
    /// Deterministic initialization: uniform `±sqrt(6/fan_in)` weights, zero
    /// biases, unit/zero norm affines. Each branch draws from its own stream.
    pub fn new(config: BranchConfig, arch: Arch, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let branches: Vec<_> = arch
            .views()
            .iter()
            .map(|&v| init_branch(&config, &mut seed::rng(seed_value, &[1, v as u64])))
            .collect();
        let k = config.final_map_size();
        let head = init_conv(
            config.embedding_dim,
            config.final_width() * branches.len(),
            k,
            &mut seed::rng(seed_value, &[2]),
        );
        Ok(EmbeddingNet {
            config,
            arch,
            branches,
            head,
        })
    }

    pub fn multi_view(config: BranchConfig, seed_value: u64) -> Result<Self> {
        Self::new(config, Arch::MultiView, seed_value)
    }

    pub fn single_view(config: BranchConfig, view: View, seed_value: u64) -> Result<Self> {
        Self::new(config, Arch::SingleView(view), seed_value)
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn branch(&self, view: View) -> Option<&BranchParams<Tensor<T>>> {
        let idx = self.arch.views().iter().position(|&v| v == view)?;
        self.branches.get(idx)
    }

    pub fn branch_mut(&mut self, view: View) -> Option<&mut BranchParams<Tensor<T>>> {
        let idx = self.arch.views().iter().position(|&v| v == view)?;
        self.branches.get_mut(idx)
    }

    pub fn head(&self) -> &Conv<Tensor<T>> {
        &self.head
    }

    /// Every parameter with its dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (b, v) in self.branches.iter().zip(self.arch.views()) {
            b.visit(v.as_str(), &mut |n, t| out.push((n, t)));
        }
        self.head.visit("head", &mut |n, t| out.push((n, t)));
        out
    }

    /// Mutable parameters in the order of [`EmbeddingNet::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in self.branches.iter_mut() {
            for s in b.stages.iter_mut() {
                push_block(&mut out, &mut s.down);
                for r in s.res.iter_mut() {
                    push_conv(&mut out, &mut r.conv1);
                    push_norm(&mut out, &mut r.norm1);
                    push_conv(&mut out, &mut r.conv2);
                    push_norm(&mut out, &mut r.norm2);
                }
            }
        }
        push_conv(&mut out, &mut self.head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> EmbeddingNet<U> {
        EmbeddingNet {
            config: self.config.clone(),
            arch: self.arch,
            branches: self.branches.iter().map(|b| b.map(&mut |t| t.cast())).collect(),
            head: self.head.map(&mut |t| t.cast()),
        }
    }

    /// Registers every parameter on `tape` as a grad-flagged leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundNet {
        self.bind_with(tape, true)
    }

    /// Registers parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundNet {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, grad: bool) -> BoundNet {
        let mut put = |t: &Tensor<T>| {
            if grad {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let branches = self.branches.iter().map(|b| b.map(&mut put)).collect();
        let head = self.head.map(&mut put);
        BoundNet {
            arch: self.arch,
            branches,
            head,
        }
    }

    /// Builds a [`BoundNet`] from vars already on a tape, given in
    /// [`EmbeddingNet::named_params`] order.
    pub fn bind_existing(&self, vars: &[Var]) -> Result<BoundNet> {
        let expected = self.named_params().len();
        if vars.len() != expected {
            return Err(Error::contract(format!("expected {expected} parameter vars, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = |_: &Tensor<T>| it.next().expect("length checked");
        let branches = self.branches.iter().map(|b| b.map(&mut next)).collect();
        let head = self.head.map(&mut next);
        Ok(BoundNet {
            arch: self.arch,
            branches,
            head,
        })
    }

    /// Gradients for every parameter, ordered like [`EmbeddingNet::params_mut`].
    pub fn gradients(&self, tape: &Tape<T>, bound: &BoundNet) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        for b in &bound.branches {
            b.visit("", &mut |_, v| out.push(tape.grad_or_zero(*v)));
        }
        bound.head.visit("", &mut |_, v| out.push(tape.grad_or_zero(*v)));
        out
    }

    fn head_forward(&self, tape: &mut Tape<T>, bound: &BoundNet, fused: Var) -> Result<Var> {
        let y = ops::conv2d(tape, fused, bound.head.weight, bound.head.bias, 1, 0)?;
        let n = tape.shape(y)[0];
        let y = ops::reshape(tape, y, &[n, self.config.embedding_dim])?;
        ops::l2_normalize(tape, y, T::of(EMBED_EPS))
    }

    /// Embeds a batch of frontal/profile image pairs into `N×D` unit rows.
    pub fn embed_pair(&self, tape: &mut Tape<T>, bound: &BoundNet, frontal: Var, profile: Var) -> Result<Var> {
        if self.arch != Arch::MultiView {
            return Err(Error::contract("embed_pair needs a multi-view network"));
        }
        if tape.shape(frontal) != tape.shape(profile) {
            return Err(Error::dims("embed_pair", tape.shape(frontal), tape.shape(profile)));
        }
        let f = branch_forward(tape, frontal, &bound.branches[0], &self.config)?;
        let p = branch_forward(tape, profile, &bound.branches[1], &self.config)?;
        let fused = ops::concat_channels(tape, f, p)?;
        self.head_forward(tape, bound, fused)
    }

    /// Embeds a batch of single-view images with a single-view network.
    pub fn embed_single(&self, tape: &mut Tape<T>, bound: &BoundNet, images: Var) -> Result<Var> {
        if !matches!(self.arch, Arch::SingleView(_)) {
            return Err(Error::contract("embed_single needs a single-view network"));
        }
        let f = branch_forward(tape, images, &bound.branches[0], &self.config)?;
        self.head_forward(tape, bound, f)
    }

    /// Forward pass on a batch: pairs for multi-view networks, the configured
    /// view for single-view ones (`profile` is then ignored).
    pub fn embed(&self, tape: &mut Tape<T>, bound: &BoundNet, frontal: Var, profile: Option<Var>) -> Result<Var> {
        match self.arch {
            Arch::MultiView => {
                let p = profile.ok_or_else(|| Error::contract("multi-view embedding needs both views"))?;
                self.embed_pair(tape, bound, frontal, p)
            }
            Arch::SingleView(_) => self.embed_single(tape, bound, frontal),
        }
    }

    /// Inference without gradients. `views[i]` is the `N×3×S×S` batch for
    /// the i-th view the network consumes.
    pub fn infer(&self, views: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let wanted = self.arch.views().len();
        if views.len() != wanted {
            return Err(Error::contract(format!("expected {wanted} view batches, got {}", views.len())));
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let vars: Vec<Var> = views.iter().map(|t| tape.constant((*t).clone())).collect();
        let y = self.embed(&mut tape, &bound, vars[0], vars.get(1).copied())?;
        Ok(tape.value(y).clone())
    }
}

fn push_conv<'a, T>(out: &mut Vec<&'a mut Tensor<T>>, c: &'a mut Conv<Tensor<T>>) {
    out.push(&mut c.weight);
    out.push(&mut c.bias);
}

fn push_norm<'a, T>(out: &mut Vec<&'a mut Tensor<T>>, n: &'a mut Norm<Tensor<T>>) {
    out.push(&mut n.gamma);
    out.push(&mut n.beta);
}

fn push_block<'a, T>(out: &mut Vec<&'a mut Tensor<T>>, b: &'a mut ConvBlockParams<Tensor<T>>) {
    push_conv(out, &mut b.conv);
    push_norm(out, &mut b.norm);
}

impl EmbeddingNet<f32> {
    pub fn to_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let named = self.named_params();
        crate::tensor::save_checkpoint(path, named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn from_checkpoint(path: &std::path::Path) -> Result<Self> {
        Self::from_named(crate::tensor::load_checkpoint(path)?)
    }

    /// Rebuilds a network from named tensors, inferring the architecture from
    /// tensor names and shapes.
    pub fn from_named(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut by_name: BTreeMap<String, Tensor<f32>> = tensors.into_iter().collect();
        let views: Vec<View> = View::ALL
            .into_iter()
            .filter(|v| by_name.contains_key(&format!("{v}.s0.down.conv.weight")))
            .collect();
        let arch = match views[..] {
            [View::Frontal, View::Profile] => Arch::MultiView,
            [v] => Arch::SingleView(v),
            _ => return Err(Error::Format("checkpoint holds no recognizable branch".into())),
        };
        let lead = views[0];
        let mut stages = Vec::new();
        while let Some(w) = by_name.get(&format!("{lead}.s{}.down.conv.weight", stages.len())) {
            let width = w.shape()[0];
            let i = stages.len();
            let mut res_blocks = 0;
            while by_name.contains_key(&format!("{lead}.s{i}.res{res_blocks}.conv1.weight")) {
                res_blocks += 1;
            }
            stages.push(StageConfig { width, res_blocks });
        }
        let head = by_name
            .get("head.weight")
            .ok_or_else(|| Error::Format("checkpoint has no head.weight".into()))?;
        let [dim, _, k, _] = head.dims4("head")?;
        let config = BranchConfig {
            input_size: k << stages.len(),
            stages,
            embedding_dim: dim,
        };
        let mut net = Self::new(config, arch, 0).map_err(|e| Error::Format(e.to_string()))?;
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(net.params_mut()) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "paper", "compact", "tiny"] {
            BranchConfig::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(BranchConfig::paper().final_map_size(), 14);
        let bad = BranchConfig {
            input_size: 30,
            ..BranchConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(EmbeddingNet::<f32>::multi_view(bad, 1).is_err());
    }

    #[test]
    fn param_order_is_consistent() {
        let mut net = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 3).unwrap();
        let shapes: Vec<Vec<usize>> = net.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> = net.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "frontal.s0.down.conv.weight");
        assert!(names.contains(&"profile.s1.res0.norm2.beta".to_string()));
        assert_eq!(names.last().unwrap(), "head.bias");
    }
}
