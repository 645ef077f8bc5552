//! Network building blocks. Each block knows its parameter names, how to
//! register them, its closed-form parameter count, and its forward pass on a
//! [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, Init, ParameterStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

const LN_EPS: f64 = 1e-5;
const QK_NORM_EPS: f64 = 1e-12;

pub trait Module {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()>;

    /// Closed-form scalar count of the parameters `register` creates.
    fn param_count(&self) -> usize;
}

/// Fresh store holding only `module`'s parameters.
pub fn init_params<T: Real, M: Module>(module: &M, seed: u64) -> Result<ParameterStore<T>> {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    module.register(&mut store, &mut rng)?;
    Ok(store)
}

fn join(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Shared hyper-parameters of the blocks at one width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub ca_reduction: usize,
    pub kernel: usize,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            channels: 48,
            heads: 4,
            ffn_expansion: 2,
            ca_reduction: 4,
            kernel: 3,
        }
    }
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 {
            return Err(Error::Config("channels must be at least 1".into()));
        }
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("heads ({}) must divide channels ({c})", self.heads)));
        }
        if self.ca_reduction == 0 || !c.is_multiple_of(self.ca_reduction) {
            return Err(Error::Config(format!(
                "channel-attention reduction ({}) must divide channels ({c})",
                self.ca_reduction
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn expansion must be at least 1".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

// ---- convolutions -------------------------------------------------------

/// Standard `k × k` convolution with bias, "same" padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
        }
    }

    pub fn weight(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.get(&self.weight())?, p.get(&self.bias())?, 1, self.k / 2)
    }
}

impl Module for Conv {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let fan_in = self.cin * self.k * self.k;
        store.register(self.weight(), &[self.cout, self.cin, self.k, self.k], Init::KaimingUniform { fan_in }, rng)?;
        store.register(self.bias(), &[self.cout], Init::Zeros, rng)
    }

    fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub name: String,
    pub channels: usize,
    pub k: usize,
}

impl DepthwiseConv {
    pub fn weight(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.depthwise_conv2d(x, p.get(&self.weight())?, p.get(&self.bias())?, 1, self.k / 2)
    }
}

impl Module for DepthwiseConv {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let fan_in = self.k * self.k;
        store.register(self.weight(), &[self.channels, 1, self.k, self.k], Init::KaimingUniform { fan_in }, rng)?;
        store.register(self.bias(), &[self.channels], Init::Zeros, rng)
    }

    fn param_count(&self) -> usize {
        self.channels * self.k * self.k + self.channels
    }
}

/// Depthwise-separable convolution: per-channel `k × k` then `1 × 1` mixing.
#[derive(Debug, Clone)]
pub struct Dsc {
    pub depthwise: DepthwiseConv,
    pub pointwise: Conv,
}

impl Dsc {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            depthwise: DepthwiseConv {
                name: join(name, "depthwise"),
                channels: cin,
                k,
            },
            pointwise: Conv::new(join(name, "pointwise"), cin, cout, 1),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.depthwise.channels {
            return Err(Error::invalid(
                "dsc",
                format!("expected {} input channels, got {c}", self.depthwise.channels),
            ));
        }
        let d = self.depthwise.forward(g, p, x)?;
        self.pointwise.forward(g, p, d)
    }
}

impl Module for Dsc {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.depthwise.register(store, rng)?;
        self.pointwise.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }
}

/// A `k × k` feature convolution that is either standard or separable.
#[derive(Debug, Clone)]
pub enum SpatialConv {
    Standard(Conv),
    Separable(Dsc),
}

impl SpatialConv {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, separable: bool) -> Self {
        if separable {
            SpatialConv::Separable(Dsc::new(name, cin, cout, k))
        } else {
            SpatialConv::Standard(Conv::new(name, cin, cout, k))
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            SpatialConv::Standard(c) => c.forward(g, p, x),
            SpatialConv::Separable(d) => d.forward(g, p, x),
        }
    }
}

impl Module for SpatialConv {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            SpatialConv::Standard(c) => c.register(store, rng),
            SpatialConv::Separable(d) => d.register(store, rng),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            SpatialConv::Standard(c) => c.param_count(),
            SpatialConv::Separable(d) => d.param_count(),
        }
    }
}

// ---- attention and residual blocks -------------------------------------

/// Squeeze-excite gate: global pool → 1×1 reduce → relu → 1×1 expand →
/// sigmoid, multiplied back onto the input.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub reduce: Conv,
    pub expand: Conv,
}

impl ChannelAttention {
    pub fn new(name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "channel-attention reduction {reduction} does not divide {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            reduce: Conv::new(join(name, "reduce"), channels, hidden, 1),
            expand: Conv::new(join(name, "expand"), hidden, channels, 1),
        })
    }

    /// The `[N, C, 1, 1]` gate in `(0, 1)`.
    pub fn gate<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let h = self.reduce.forward(g, p, pooled)?;
        let h = g.relu(h)?;
        let s = self.expand.forward(g, p, h)?;
        g.sigmoid(s)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = self.gate(g, p, x)?;
        g.mul(x, s)
    }
}

impl Module for ChannelAttention {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.reduce.register(store, rng)?;
        self.expand.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }
}

/// Residual channel-attention block: `x + CA(conv(relu(conv(x))))`.
#[derive(Debug, Clone)]
pub struct Rcab {
    pub conv1: SpatialConv,
    pub conv2: SpatialConv,
    pub ca: ChannelAttention,
}

impl Rcab {
    /// `separable` selects a depthwise-separable first body conv.
    pub fn new(name: &str, spec: &BlockSpec, separable: bool) -> Result<Self> {
        let c = spec.channels;
        Ok(Self {
            conv1: SpatialConv::new(&join(name, "conv1"), c, c, spec.kernel, separable),
            conv2: SpatialConv::new(&join(name, "conv2"), c, c, spec.kernel, false),
            ca: ChannelAttention::new(&join(name, "ca"), c, spec.ca_reduction)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let h = self.ca.forward(g, p, h)?;
        if g.shape(h) != g.shape(x) {
            return Err(Error::shape("rcab", g.shape(x), g.shape(h)));
        }
        g.add(x, h)
    }
}

impl Module for Rcab {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv1.register(store, rng)?;
        self.conv2.register(store, rng)?;
        self.ca.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.ca.param_count()
    }
}

/// One query/key/value embedding: `1 × 1` conv then `3 × 3` depthwise conv.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub pointwise: Conv,
    pub depthwise: DepthwiseConv,
}

impl Embedding {
    fn new(name: &str, c: usize) -> Self {
        Self {
            pointwise: Conv::new(format!("{name}_pointwise"), c, c, 1),
            depthwise: DepthwiseConv {
                name: format!("{name}_depthwise"),
                channels: c,
                k: 3,
            },
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.pointwise.forward(g, p, x)?;
        self.depthwise.forward(g, p, h)
    }
}

impl Module for Embedding {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.pointwise.register(store, rng)?;
        self.depthwise.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.pointwise.param_count() + self.depthwise.param_count()
    }
}

/// Multi-head transposed attention: the attention map is `d × d` over the
/// channels of each head rather than over pixels, so cost is linear in the
/// pixel count.
#[derive(Debug, Clone)]
pub struct Mdta {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub query: Embedding,
    pub key: Embedding,
    pub value: Embedding,
    pub project: Conv,
}

impl Mdta {
    pub fn new(name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("heads ({heads}) must divide channels ({channels})")));
        }
        Ok(Self {
            name: name.to_string(),
            channels,
            heads,
            query: Embedding::new(&join(name, "q"), channels),
            key: Embedding::new(&join(name, "k"), channels),
            value: Embedding::new(&join(name, "v"), channels),
            project: Conv::new(join(name, "project"), channels, channels, 1),
        })
    }

    pub fn temperature(&self) -> String {
        join(&self.name, "temperature")
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xq: Var, xk: Var, xv: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, p, xq, xk, xv)?.0)
    }

    /// Also returns the `[N, heads, d, d]` attention map.
    pub fn forward_with_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        xq: Var,
        xk: Var,
        xv: Var,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(xq).to_vec();
        if g.shape(xk) != shape.as_slice() || g.shape(xv) != shape.as_slice() {
            return Err(Error::shape("mdta", &shape, g.shape(xk)));
        }
        let (n, c, h, w) = g.value(xq).dims4()?;
        if c != self.channels {
            return Err(Error::shape("mdta", &shape, &[n, self.channels, h, w]));
        }
        let d = c / self.heads;
        let heads_shape = vec![n, self.heads, d, h * w];

        let q = self.query.forward(g, p, xq)?;
        let k = self.key.forward(g, p, xk)?;
        let v = self.value.forward(g, p, xv)?;
        let q = g.reshape(q, heads_shape.clone())?;
        let k = g.reshape(k, heads_shape.clone())?;
        let v = g.reshape(v, heads_shape)?;
        let q = g.l2_normalize(q, QK_NORM_EPS)?;
        let k = g.l2_normalize(k, QK_NORM_EPS)?;

        let kt = g.transpose_last2(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.mul(logits, p.get(&self.temperature())?)?;
        let attn = g.softmax(logits, 3)?;
        let out = g.matmul(attn, v)?;
        let out = g.reshape(out, vec![n, c, h, w])?;
        Ok((self.project.forward(g, p, out)?, attn))
    }
}

impl Module for Mdta {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.query.register(store, rng)?;
        self.key.register(store, rng)?;
        self.value.register(store, rng)?;
        store.register(self.temperature(), &[self.heads], Init::Ones, rng)?;
        self.project.register(store, rng)
    }

    fn param_count(&self) -> usize {
        3 * self.query.param_count() + self.heads + self.project.param_count()
    }
}

/// `1 × 1` expand, gelu, `1 × 1` contract.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub expand: Conv,
    pub contract: Conv,
}

impl Ffn {
    pub fn new(name: &str, channels: usize, expansion: usize) -> Self {
        let hidden = channels * expansion;
        Self {
            expand: Conv::new(join(name, "expand"), channels, hidden, 1),
            contract: Conv::new(join(name, "contract"), hidden, channels, 1),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.contract.forward(g, p, h)
    }
}

impl Module for Ffn {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.expand.register(store, rng)?;
        self.contract.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.expand.param_count() + self.contract.param_count()
    }
}

/// Channel layer norm with learnable per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn gamma(&self) -> String {
        join(&self.name, "gamma")
    }

    pub fn beta(&self) -> String {
        join(&self.name, "beta")
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(&self.gamma())?, p.get(&self.beta())?, LN_EPS)
    }
}

impl Module for LayerNorm {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        store.register(self.gamma(), &[self.channels], Init::Ones, rng)?;
        store.register(self.beta(), &[self.channels], Init::Zeros, rng)
    }

    fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Pre-norm transformer block: `y = x + attn(LN(x))`, `out = y + ffn(LN(y))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Mdta,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn new(name: &str, spec: &BlockSpec) -> Result<Self> {
        let c = spec.channels;
        Ok(Self {
            norm1: LayerNorm {
                name: join(name, "norm1"),
                channels: c,
            },
            attn: Mdta::new(&join(name, "attn"), c, spec.heads)?,
            norm2: LayerNorm {
                name: join(name, "norm2"),
                channels: c,
            },
            ffn: Ffn::new(&join(name, "ffn"), c, spec.ffn_expansion),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = self.norm1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, n, n, n)?;
        let y = g.add(x, a)?;
        let n = self.norm2.forward(g, p, y)?;
        let f = self.ffn.forward(g, p, n)?;
        g.add(y, f)
    }
}

impl Module for TransformerBlock {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.norm1.register(store, rng)?;
        self.attn.register(store, rng)?;
        self.norm2.register(store, rng)?;
        self.ffn.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.norm1.param_count() + self.attn.param_count() + self.norm2.param_count() + self.ffn.param_count()
    }
}

/// Hybrid fusion block: concat → separable `3 × 3` → channel attention →
/// `1 × 1` down to the output width. Inputs must already share N, H, W.
#[derive(Debug, Clone)]
pub struct Hfb {
    pub in_channels: usize,
    pub out_channels: usize,
    pub mix: Dsc,
    pub ca: ChannelAttention,
    pub project: Conv,
}

impl Hfb {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, reduction: usize) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::Config("fusion block needs at least one input channel".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            mix: Dsc::new(&join(name, "mix"), in_channels, in_channels, 3),
            ca: ChannelAttention::new(&join(name, "ca"), in_channels, reduction)?,
            project: Conv::new(join(name, "project"), in_channels, out_channels, 1),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("hfb", "no inputs"))?;
        let (n, _, h, w) = g.value(first).dims4()?;
        for &v in inputs {
            let (vn, _, vh, vw) = g.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape("hfb", g.shape(first), g.shape(v)));
            }
        }
        let x = g.concat(inputs, 1)?;
        let x = self.mix.forward(g, p, x)?;
        let x = self.ca.forward(g, p, x)?;
        self.project.forward(g, p, x)
    }
}

impl Module for Hfb {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.mix.register(store, rng)?;
        self.ca.register(store, rng)?;
        self.project.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.mix.param_count() + self.ca.param_count() + self.project.param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down2,
    Up2,
}

/// Bilinear ×½ or ×2 followed by a `1 × 1` conv.
#[derive(Debug, Clone)]
pub struct Resample {
    pub direction: Direction,
    pub conv: Conv,
}

impl Resample {
    pub fn new(name: &str, channels: usize, direction: Direction) -> Self {
        Self {
            direction,
            conv: Conv::new(join(name, "conv"), channels, channels, 1),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let (oh, ow) = match self.direction {
            Direction::Down2 => (h / 2, w / 2),
            Direction::Up2 => (h * 2, w * 2),
        };
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("resample", format!("{h}x{w} cannot be halved")));
        }
        let r = g.bilinear_resize(x, oh, ow)?;
        self.conv.forward(g, p, r)
    }
}

impl Module for Resample {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}
