//! Average-velocity networks `u(z | r, t, class, omega, t_min, t_max)`.
//!
//! Two backbones (a residual MLP and a small Transformer) share two
//! conditioning backends:
//!
//! * `adaln_zero`: every condition embedding is summed into one vector that
//!   drives per-block shift/scale/gate modulation (zero-initialized).
//! * `in_context`: each condition type becomes several tokens (one embedding
//!   replicated, plus a learned per-slot type embedding) concatenated with
//!   the data token. For the MLP backbone the group embeddings are
//!   concatenated to the input features instead.
//!
//! Residual branches end in a learnable per-channel `gamma` initialized to
//! zero, so at init every block is the identity.

use imf_autodiff::{ParamStore, ParamVars, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{stream, Domain};

const LN_EPS: f64 = 1e-6;
/// Highest sinusoid frequency; frequencies are geometric in `[1, MAX_FREQ]`.
const MAX_FREQ: f64 = 4.0;
/// Name prefix of every training-only auxiliary-head parameter.
pub const AUX_PREFIX: &str = "aux.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    AdalnZero,
    InContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenCounts {
    pub class: usize,
    pub time: usize,
    pub guidance: usize,
    pub interval: usize,
}

impl Default for TokenCounts {
    fn default() -> Self {
        TokenCounts { class: 8, time: 4, guidance: 4, interval: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub data_dim: usize,
    pub conditioning_mode: ConditioningMode,
    pub tokens_per_condition: TokenCounts,
    /// Unshared trailing blocks of the auxiliary v-head; 0 disables it.
    pub aux_head_depth: usize,
    /// 0 means unconditional (no class pathway).
    pub num_classes: usize,
    pub embed_dim: usize,
    /// Feed (omega, t_min, t_max) to the network.
    pub omega_conditioning: bool,
    pub mlp_ratio: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            arch: Arch::Transformer,
            depth: 4,
            width: 128,
            heads: 4,
            data_dim: 2,
            conditioning_mode: ConditioningMode::InContext,
            tokens_per_condition: TokenCounts::default(),
            aux_head_depth: 0,
            num_classes: 0,
            embed_dim: 64,
            omega_conditioning: false,
            mlp_ratio: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(contract("net.depth must be >= 1"));
        }
        self.validate_shape()
    }

    /// Everything except `depth >= 1` (counting allows the degenerate case).
    fn validate_shape(&self) -> Result<()> {
        if self.width == 0 || self.data_dim == 0 || self.mlp_ratio == 0 {
            return Err(contract("net width, data_dim and mlp_ratio must be positive"));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(contract("net.embed_dim must be even and >= 2"));
        }
        if self.arch == Arch::Transformer && (self.heads == 0 || self.width % self.heads != 0) {
            return Err(contract(format!(
                "net.width ({}) must be divisible by net.heads ({})",
                self.width, self.heads
            )));
        }
        if self.aux_head_depth > 0 && self.aux_head_depth >= self.depth {
            return Err(contract("net.aux_head_depth must be < net.depth"));
        }
        Ok(())
    }

    /// Condition groups present, in sequence order, with their token counts.
    pub fn token_groups(&self) -> Vec<(Group, usize)> {
        let tc = &self.tokens_per_condition;
        let mut out = Vec::new();
        if self.num_classes > 0 {
            out.push((Group::Class, tc.class));
        }
        out.push((Group::Time, tc.time));
        if self.omega_conditioning {
            out.push((Group::Guidance, tc.guidance));
            out.push((Group::Interval, tc.interval));
        }
        out
    }

    pub fn num_condition_tokens(&self) -> usize {
        self.token_groups().iter().map(|(_, k)| k).sum()
    }

    fn trunk_depth(&self) -> usize {
        self.depth - self.aux_head_depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Class,
    Time,
    Guidance,
    Interval,
}

/// Conditions for one network evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionSet {
    pub r: f64,
    pub t: f64,
    /// `None` is the unconditional (null) class.
    pub class_label: Option<usize>,
    pub omega: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl ConditionSet {
    pub fn new(r: f64, t: f64) -> Self {
        ConditionSet { r, t, class_label: None, omega: 1.0, t_min: 0.0, t_max: 1.0 }
    }

    pub fn with_class(mut self, c: Option<usize>) -> Self {
        self.class_label = c;
        self
    }

    pub fn with_guidance(mut self, omega: f64, t_min: f64, t_max: f64) -> Self {
        self.omega = omega;
        self.t_min = t_min;
        self.t_max = t_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.r && self.r <= self.t && self.t <= 1.0) {
            return Err(contract(format!("need 0 <= r <= t <= 1, got r={}, t={}", self.r, self.t)));
        }
        if !(self.t_min <= self.t_max) || !(0.0..=0.5).contains(&self.t_min) || !(0.5..=1.0).contains(&self.t_max) {
            return Err(contract(format!("bad interval [{}, {}]", self.t_min, self.t_max)));
        }
        if !(self.omega >= 1.0) {
            return Err(contract(format!("omega must be >= 1, got {}", self.omega)));
        }
        Ok(())
    }
}

/// Per-sample conditions for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CondBatch {
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    pub class: Vec<Option<usize>>,
    pub omega: Vec<f64>,
    pub t_min: Vec<f64>,
    pub t_max: Vec<f64>,
}

impl CondBatch {
    pub fn from_sets(sets: &[ConditionSet]) -> Self {
        CondBatch {
            r: sets.iter().map(|c| c.r).collect(),
            t: sets.iter().map(|c| c.t).collect(),
            class: sets.iter().map(|c| c.class_label).collect(),
            omega: sets.iter().map(|c| c.omega).collect(),
            t_min: sets.iter().map(|c| c.t_min).collect(),
            t_max: sets.iter().map(|c| c.t_max).collect(),
        }
    }

    pub fn repeat(set: &ConditionSet, n: usize) -> Self {
        Self::from_sets(&vec![*set; n])
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn get(&self, i: usize) -> ConditionSet {
        ConditionSet {
            r: self.r[i],
            t: self.t[i],
            class_label: self.class[i],
            omega: self.omega[i],
            t_min: self.t_min[i],
            t_max: self.t_max[i],
        }
    }

    /// Boundary slice: `r := t`.
    pub fn at_boundary(&self) -> Self {
        CondBatch { r: self.t.clone(), ..self.clone() }
    }

    pub fn with_class(&self, class: Vec<Option<usize>>) -> Self {
        CondBatch { class, ..self.clone() }
    }
}

fn column(v: &[f64]) -> Tensor {
    Tensor::from_vec(vec![v.len(), 1], v.to_vec())
}

/// Conditions on a tape, each scalar as an `[n, 1]` column.
#[derive(Clone)]
pub struct CondVars<'t> {
    pub r: Var<'t>,
    pub t: Var<'t>,
    pub class: Vec<Option<usize>>,
    pub omega: Var<'t>,
    pub t_min: Var<'t>,
    pub t_max: Var<'t>,
}

impl<'t> CondVars<'t> {
    /// All conditions enter with zero tangent.
    pub fn constant(tape: &'t Tape, c: &CondBatch) -> Self {
        CondVars {
            r: tape.constant(column(&c.r)),
            t: tape.constant(column(&c.t)),
            class: c.class.clone(),
            omega: tape.constant(column(&c.omega)),
            t_min: tape.constant(column(&c.t_min)),
            t_max: tape.constant(column(&c.t_max)),
        }
    }

    /// Tangent direction `(r, t, class, omega, t_min, t_max) -> (0, 1, 0, 0, 0, 0)`.
    pub fn with_unit_time_tangent(tape: &'t Tape, c: &CondBatch) -> Self {
        let n = c.len();
        CondVars {
            t: tape.dual(column(&c.t), Tensor::ones(&[n, 1])),
            ..Self::constant(tape, c)
        }
    }

    /// Same conditions with `r` replaced by `t` (shares the `t` node).
    pub fn at_boundary(&self) -> Self {
        CondVars { r: self.t, ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }
}

// ---------------------------------------------------------------------------
// parameter layout

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Gaussian { fan_in: usize },
    Zero,
}

struct Layout {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.entries.push((name, shape, init));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{name}.w"), vec![fan_in, fan_out], Init::Gaussian { fan_in });
        self.push(format!("{name}.b"), vec![fan_out], Init::Zero);
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{name}.w"), vec![fan_in, fan_out], Init::Zero);
        self.push(format!("{name}.b"), vec![fan_out], Init::Zero);
    }

    fn embedder(&mut self, name: &str, cfg: &NetConfig) {
        self.linear(&format!("{name}.fc1"), cfg.embed_dim, cfg.width);
        self.linear(&format!("{name}.fc2"), cfg.width, cfg.width);
    }

    fn block(&mut self, name: &str, cfg: &NetConfig) {
        let w = cfg.width;
        let hidden = cfg.mlp_ratio * w;
        if cfg.arch == Arch::Transformer {
            self.linear(&format!("{name}.attn.qkv"), w, 3 * w);
            self.linear(&format!("{name}.attn.proj"), w, w);
        }
        self.linear(&format!("{name}.mlp.fc1"), w, hidden);
        self.linear(&format!("{name}.mlp.fc2"), hidden, w);
        match cfg.conditioning_mode {
            ConditioningMode::InContext => {
                if cfg.arch == Arch::Transformer {
                    self.push(format!("{name}.gamma1"), vec![w], Init::Zero);
                }
                self.push(format!("{name}.gamma2"), vec![w], Init::Zero);
            }
            ConditioningMode::AdalnZero => {
                let chunks = if cfg.arch == Arch::Transformer { 6 } else { 3 };
                self.zero_linear(&format!("{name}.adaln"), w, chunks * w);
            }
        }
    }

    fn head(&mut self, prefix: &str, cfg: &NetConfig) {
        if cfg.conditioning_mode == ConditioningMode::AdalnZero {
            self.zero_linear(&format!("{prefix}final.adaln"), cfg.width, 2 * cfg.width);
        }
        self.linear(&format!("{prefix}out"), cfg.width, cfg.data_dim);
    }
}

fn layout(cfg: &NetConfig) -> Layout {
    let mut l = Layout { entries: Vec::new() };
    let w = cfg.width;
    l.embedder("embed.t", cfg);
    l.embedder("embed.tr", cfg);
    if cfg.omega_conditioning {
        l.embedder("embed.omega", cfg);
        l.embedder("embed.tmin", cfg);
        l.embedder("embed.tmax", cfg);
    }
    if cfg.num_classes > 0 {
        let rows = cfg.num_classes + 1;
        l.push("embed.class".into(), vec![rows, w], Init::Gaussian { fan_in: rows });
    }
    let lift_in = match (cfg.arch, cfg.conditioning_mode) {
        (Arch::Mlp, ConditioningMode::InContext) => cfg.data_dim + w * cfg.token_groups().len(),
        _ => cfg.data_dim,
    };
    l.linear("lift", lift_in, w);
    if cfg.arch == Arch::Transformer && cfg.conditioning_mode == ConditioningMode::InContext {
        let n = cfg.num_condition_tokens();
        if n > 0 {
            l.push("tokens.type".into(), vec![n, w], Init::Gaussian { fan_in: n });
        }
    }
    for i in 0..cfg.depth {
        l.block(&format!("block{i}"), cfg);
    }
    l.head("", cfg);
    if cfg.aux_head_depth > 0 {
        for j in 0..cfg.aux_head_depth {
            l.block(&format!("{AUX_PREFIX}block{j}"), cfg);
        }
        l.head(AUX_PREFIX, cfg);
    }
    l
}

/// Fresh parameters: zero for residual gates, adaLN modulation and biases;
/// `N(0, 0.1 / fan_in)` for every other weight. Deterministic in `seed`.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = stream(seed, Domain::Init, 0);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg).entries {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![0.0; n],
            Init::Gaussian { fan_in } => {
                let std = (0.1 / fan_in as f64).sqrt();
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        };
        store.insert(name, Tensor::from_vec(shape, data));
    }
    Ok(store)
}

/// Scalar parameter count implied by `cfg`; `inference_only` drops the
/// auxiliary head.
pub fn count_params(cfg: &NetConfig, inference_only: bool) -> Result<usize> {
    cfg.validate_shape()?;
    Ok(layout(cfg)
        .entries
        .iter()
        .filter(|(name, _, _)| !(inference_only && name.starts_with(AUX_PREFIX)))
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum())
}

/// The parameters needed at inference (auxiliary head removed).
pub fn inference_params(params: &ParamStore) -> ParamStore {
    params.filter(|n| !n.starts_with(AUX_PREFIX))
}

// ---------------------------------------------------------------------------
// forward pass

/// Sinusoid frequencies for a `dim`-wide embedding.
fn frequencies(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|k| if half == 1 { 1.0 } else { MAX_FREQ.powf(k as f64 / (half - 1) as f64) })
        .collect()
}

/// Interleaved `[sin(f0 v), cos(f0 v), sin(f1 v), cos(f1 v), ...]`.
pub fn sinusoid_features(value: f64, dim: usize) -> Vec<f64> {
    frequencies(dim).iter().flat_map(|f| [(f * value).sin(), (f * value).cos()]).collect()
}

fn sinusoid<'t>(v: Var<'t>, dim: usize) -> Var<'t> {
    let n = v.shape()[0];
    let half = dim / 2;
    let freqs = v.tape().constant(Tensor::vector(frequencies(dim)));
    let arg = v * freqs; // [n, half]
    let s = arg.sin().reshape(&[n, half, 1]);
    let c = arg.cos().reshape(&[n, half, 1]);
    Var::concat(&[s, c], 2).reshape(&[n, dim])
}

fn linear<'t>(p: &ParamVars<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(p.get(&format!("{name}.w"))) + p.get(&format!("{name}.b"))
}

/// Linear map over the last axis of a `[n, s, w]` tensor.
fn linear3<'t>(p: &ParamVars<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let (n, s, w) = (shape[0], shape[1], shape[2]);
    let y = linear(p, name, x.reshape(&[n * s, w]));
    let out = y.shape()[1];
    y.reshape(&[n, s, out])
}

/// Sinusoidal features of an `[n, 1]` scalar column followed by a 2-layer
/// SiLU MLP; returns `[n, width]`.
pub fn embed_scalar<'t>(p: &ParamVars<'t>, name: &str, value: Var<'t>, dim: usize) -> Var<'t> {
    let h = linear(p, &format!("{name}.fc1"), sinusoid(value, dim)).silu();
    linear(p, &format!("{name}.fc2"), h)
}

struct GroupEmbeds<'t> {
    groups: Vec<(Group, usize, Var<'t>)>,
}

impl<'t> GroupEmbeds<'t> {
    fn sum(&self) -> Var<'t> {
        let mut it = self.groups.iter().map(|g| g.2);
        let first = it.next().expect("time group always present");
        it.fold(first, |a, b| a + b)
    }
}

fn check_classes(cfg: &NetConfig, class: &[Option<usize>]) -> Result<()> {
    for c in class.iter().flatten() {
        if *c >= cfg.num_classes {
            return Err(contract(format!(
                "class label {c} out of range for {} classes",
                cfg.num_classes
            )));
        }
    }
    Ok(())
}

fn group_embeddings<'t>(cfg: &NetConfig, p: &ParamVars<'t>, cond: &CondVars<'t>) -> GroupEmbeds<'t> {
    let tape = cond.t.tape();
    let n = cond.len();
    let ed = cfg.embed_dim;
    let mut groups = Vec::new();
    for (g, k) in cfg.token_groups() {
        let e = match g {
            Group::Class => {
                let rows = cfg.num_classes + 1;
                let mut onehot = vec![0.0; n * rows];
                for (i, c) in cond.class.iter().enumerate() {
                    onehot[i * rows + c.unwrap_or(cfg.num_classes)] = 1.0;
                }
                tape.constant(Tensor::from_vec(vec![n, rows], onehot)).matmul(p.get("embed.class"))
            }
            Group::Time => {
                embed_scalar(p, "embed.t", cond.t, ed) + embed_scalar(p, "embed.tr", cond.t - cond.r, ed)
            }
            Group::Guidance => embed_scalar(p, "embed.omega", cond.omega, ed),
            Group::Interval => {
                embed_scalar(p, "embed.tmin", cond.t_min, ed) + embed_scalar(p, "embed.tmax", cond.t_max, ed)
            }
        };
        groups.push((g, k, e));
    }
    GroupEmbeds { groups }
}

fn tokens_from_groups<'t>(p: &ParamVars<'t>, ge: &GroupEmbeds<'t>, width: usize) -> Option<Var<'t>> {
    let parts: Vec<Var<'t>> = ge
        .groups
        .iter()
        .filter(|(_, k, _)| *k > 0)
        .map(|(_, k, e)| {
            let n = e.shape()[0];
            e.reshape(&[n, 1, width]).broadcast_to(&[n, *k, width])
        })
        .collect();
    if parts.is_empty() {
        return None;
    }
    Some(Var::concat(&parts, 1) + p.get("tokens.type"))
}

/// Condition tokens `[n, T, width]` in order `[class, time, guidance,
/// interval]`, each group's embedding replicated and summed with a per-slot
/// type embedding.
pub fn condition_tokens<'t>(
    cfg: &NetConfig,
    p: &ParamVars<'t>,
    cond: &CondVars<'t>,
) -> Result<Option<Var<'t>>> {
    if cfg.conditioning_mode != ConditioningMode::InContext || cfg.arch != Arch::Transformer {
        return Err(contract("condition tokens require a transformer in in_context mode"));
    }
    check_classes(cfg, &cond.class)?;
    let ge = group_embeddings(cfg, p, cond);
    Ok(tokens_from_groups(p, &ge, cfg.width))
}

/// Token sequence `[T, width]` for a single condition set.
pub fn build_condition_tokens(cond: &ConditionSet, cfg: &NetConfig, params: &ParamStore) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.on_tape_frozen(&tape);
    let cv = CondVars::constant(&tape, &CondBatch::repeat(cond, 1));
    let toks = condition_tokens(cfg, &p, &cv)?;
    Ok(match toks {
        Some(t) => {
            let s = t.shape();
            t.value().reshape(&[s[1], s[2]])
        }
        None => Tensor::zeros(&[0, cfg.width]),
    })
}

fn attention<'t>(cfg: &NetConfig, p: &ParamVars<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let (n, s, w) = (shape[0], shape[1], shape[2]);
    let h = cfg.heads;
    let dh = w / h;
    let qkv = linear3(p, &format!("{name}.qkv"), x) // [n, s, 3w]
        .reshape(&[n, s, 3, h, dh])
        .permute(&[2, 0, 3, 1, 4]); // [3, n, h, s, dh]
    let pick = |i: usize| qkv.slice(0, i, i + 1).reshape(&[n * h, s, dh]);
    let (q, k, v) = (pick(0), pick(1), pick(2));
    let att = q.bmm(k, false, true).scale(1.0 / (dh as f64).sqrt()).softmax();
    let o = att.bmm(v, false, false).reshape(&[n, h, s, dh]).permute(&[0, 2, 1, 3]).reshape(&[n, s, w]);
    linear3(p, &format!("{name}.proj"), o)
}

fn feed_forward<'t>(p: &ParamVars<'t>, name: &str, x: Var<'t>, three_d: bool) -> Var<'t> {
    if three_d {
        let h = linear3(p, &format!("{name}.fc1"), x).gelu();
        linear3(p, &format!("{name}.fc2"), h)
    } else {
        let h = linear(p, &format!("{name}.fc1"), x).gelu();
        linear(p, &format!("{name}.fc2"), h)
    }
}

/// Split `[n, k*w]` into `k` modulation vectors, shaped for broadcasting
/// against `x` (`[n, 1, w]` for token sequences).
fn modulation<'t>(p: &ParamVars<'t>, name: &str, c: Var<'t>, k: usize, w: usize, three_d: bool) -> Vec<Var<'t>> {
    let m = linear(p, name, c.silu());
    let n = m.shape()[0];
    (0..k)
        .map(|i| {
            let part = m.slice(1, i * w, (i + 1) * w);
            if three_d {
                part.reshape(&[n, 1, w])
            } else {
                part
            }
        })
        .collect()
}

fn block<'t>(cfg: &NetConfig, p: &ParamVars<'t>, name: &str, x: Var<'t>, c: Option<Var<'t>>) -> Var<'t> {
    let w = cfg.width;
    let tf = cfg.arch == Arch::Transformer;
    match cfg.conditioning_mode {
        ConditioningMode::InContext => {
            let mut x = x;
            if tf {
                let a = attention(cfg, p, &format!("{name}.attn"), x.layer_norm(LN_EPS));
                x = x + a * p.get(&format!("{name}.gamma1"));
            }
            let m = feed_forward(p, &format!("{name}.mlp"), x.layer_norm(LN_EPS), tf);
            x + m * p.get(&format!("{name}.gamma2"))
        }
        ConditioningMode::AdalnZero => {
            let c = c.expect("adaLN blocks need a condition vector");
            let modulate = |h: Var<'t>, shift: Var<'t>, scale: Var<'t>| h * scale.add_scalar(1.0) + shift;
            if tf {
                let m = modulation(p, &format!("{name}.adaln"), c, 6, w, true);
                let a = attention(cfg, p, &format!("{name}.attn"), modulate(x.layer_norm(LN_EPS), m[0], m[1]));
                let x = x + a * m[2];
                let f = feed_forward(p, &format!("{name}.mlp"), modulate(x.layer_norm(LN_EPS), m[3], m[4]), true);
                x + f * m[5]
            } else {
                let m = modulation(p, &format!("{name}.adaln"), c, 3, w, false);
                let f = feed_forward(p, &format!("{name}.mlp"), modulate(x.layer_norm(LN_EPS), m[0], m[1]), false);
                x + f * m[2]
            }
        }
    }
}

fn head<'t>(cfg: &NetConfig, p: &ParamVars<'t>, prefix: &str, x: Var<'t>, c: Option<Var<'t>>) -> Var<'t> {
    // x: [n, w] features of the data token
    let mut h = x.layer_norm(LN_EPS);
    if cfg.conditioning_mode == ConditioningMode::AdalnZero {
        let m = modulation(p, &format!("{prefix}final.adaln"), c.expect("condition vector"), 2, cfg.width, false);
        h = h * m[1].add_scalar(1.0) + m[0];
    }
    linear(p, &format!("{prefix}out"), h)
}

/// Activations entering the blocks, plus the adaLN condition vector.
struct Stem<'t> {
    x: Var<'t>,
    c: Option<Var<'t>>,
}

fn stem<'t>(cfg: &NetConfig, p: &ParamVars<'t>, z: Var<'t>, cond: &CondVars<'t>) -> Result<Stem<'t>> {
    check_classes(cfg, &cond.class)?;
    let zs = z.shape();
    if zs.len() != 2 || zs[1] != cfg.data_dim || zs[0] != cond.len() {
        return Err(contract(format!(
            "input shape {:?} does not match [n={}, data_dim={}]",
            zs,
            cond.len(),
            cfg.data_dim
        )));
    }
    let n = zs[0];
    let ge = group_embeddings(cfg, p, cond);
    Ok(match (cfg.arch, cfg.conditioning_mode) {
        (Arch::Mlp, ConditioningMode::InContext) => {
            let mut parts = vec![z];
            parts.extend(ge.groups.iter().map(|g| g.2));
            Stem { x: linear(p, "lift", Var::concat(&parts, 1)), c: None }
        }
        (Arch::Mlp, ConditioningMode::AdalnZero) => Stem { x: linear(p, "lift", z), c: Some(ge.sum()) },
        (Arch::Transformer, ConditioningMode::InContext) => {
            let data = linear(p, "lift", z).reshape(&[n, 1, cfg.width]);
            let x = match tokens_from_groups(p, &ge, cfg.width) {
                Some(toks) => Var::concat(&[toks, data], 1),
                None => data,
            };
            Stem { x, c: None }
        }
        (Arch::Transformer, ConditioningMode::AdalnZero) => {
            Stem { x: linear(p, "lift", z).reshape(&[n, 1, cfg.width]), c: Some(ge.sum()) }
        }
    })
}

/// Features of the data token, `[n, w]`.
fn data_token<'t>(cfg: &NetConfig, x: Var<'t>) -> Var<'t> {
    if cfg.arch == Arch::Transformer {
        let s = x.shape();
        x.slice(1, s[1] - 1, s[1]).reshape(&[s[0], cfg.width])
    } else {
        x
    }
}

fn run_blocks<'t>(
    cfg: &NetConfig,
    p: &ParamVars<'t>,
    prefix: &str,
    range: std::ops::Range<usize>,
    mut x: Var<'t>,
    c: Option<Var<'t>>,
) -> Var<'t> {
    for i in range {
        x = block(cfg, p, &format!("{prefix}block{i}"), x, c);
    }
    x
}

/// Activations at the layer where the auxiliary head forks off.
pub fn fork_activations<'t>(cfg: &NetConfig, p: &ParamVars<'t>, z: Var<'t>, cond: &CondVars<'t>) -> Result<Var<'t>> {
    cfg.validate()?;
    let s = stem(cfg, p, z, cond)?;
    Ok(run_blocks(cfg, p, "", 0..cfg.trunk_depth(), s.x, s.c))
}

/// Average-velocity prediction; output has the shape of `z`.
pub fn forward_u<'t>(cfg: &NetConfig, p: &ParamVars<'t>, z: Var<'t>, cond: &CondVars<'t>) -> Result<Var<'t>> {
    cfg.validate()?;
    let s = stem(cfg, p, z, cond)?;
    let x = run_blocks(cfg, p, "", 0..cfg.depth, s.x, s.c);
    Ok(head(cfg, p, "", data_token(cfg, x), s.c))
}

/// Instantaneous velocity from the boundary condition `v(z, t) = u(z, t, t)`.
pub fn forward_v_boundary<'t>(cfg: &NetConfig, p: &ParamVars<'t>, z: Var<'t>, cond: &CondVars<'t>) -> Result<Var<'t>> {
    forward_u(cfg, p, z, &cond.at_boundary())
}

/// Instantaneous velocity from the auxiliary head: shared trunk, then
/// `aux_head_depth` unshared blocks and a separate output projection.
/// Evaluated on the boundary slice `r = t`.
pub fn forward_v_auxhead<'t>(cfg: &NetConfig, p: &ParamVars<'t>, z: Var<'t>, cond: &CondVars<'t>) -> Result<Var<'t>> {
    if cfg.aux_head_depth == 0 {
        return Err(contract("forward_v_auxhead called with aux_head_depth = 0"));
    }
    let cond = cond.at_boundary();
    let s = stem(cfg, p, z, &cond)?;
    let x = run_blocks(cfg, p, "", 0..cfg.trunk_depth(), s.x, s.c);
    let x = run_blocks(cfg, p, AUX_PREFIX, 0..cfg.aux_head_depth, x, s.c);
    Ok(head(cfg, p, AUX_PREFIX, data_token(cfg, x), s.c))
}

/// Convenience: `u` evaluated on plain tensors without recording gradients.
pub fn eval_u(cfg: &NetConfig, params: &ParamStore, z: &Tensor, cond: &CondBatch) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.on_tape_frozen(&tape);
    let cv = CondVars::constant(&tape, cond);
    let out = forward_u(cfg, &p, tape.constant(z.clone()), &cv)?;
    if let Some(e) = tape.fault() {
        return Err(e.into());
    }
    Ok((*out.value()).clone())
}
