//! The two-stage deraining network.
//!
//! A shared backbone topology (shallow conv, a residual transformer branch
//! in parallel with a three-level encoder-decoder branch, a fusion block and
//! an RGB tail) is instantiated twice: once on the subsampled rainy image to
//! predict the rain layer, once at full resolution to rebuild the
//! background from attention-fused features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BlockSpec, Bound, Conv, Direction, Hfb, Mdta, Module, ParameterStore, Rcab, Resample, TransformerBlock};
use crate::tensor::{Real, Tensor};

/// Number of ×½ stages in the encoder-decoder branch.
pub const EDB_STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ElfConfig {
    pub base_channels: usize,
    pub rtb_depth: usize,
    pub rcab_per_stage: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub ca_reduction: usize,
    pub subsample: usize,
    pub use_sa: bool,
    pub use_dsc: bool,
    pub use_hfb: bool,
    pub use_mam: bool,
    pub use_ssim_loss: bool,
    pub use_sr: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub eps: f64,
}

impl Default for ElfConfig {
    fn default() -> Self {
        Self {
            base_channels: 48,
            rtb_depth: 10,
            rcab_per_stage: 1,
            heads: 4,
            ffn_expansion: 2,
            ca_reduction: 4,
            subsample: 2,
            use_sa: true,
            use_dsc: true,
            use_hfb: true,
            use_mam: true,
            use_ssim_loss: true,
            use_sr: true,
            alpha: -0.15,
            lambda: 1.0,
            eps: 1e-3,
        }
    }
}

impl ElfConfig {
    /// Small configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            rtb_depth: 1,
            heads: 1,
            ca_reduction: 2,
            ..Self::default()
        }
    }

    pub fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            channels: self.base_channels,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            ca_reduction: self.ca_reduction,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_spec().validate()?;
        if ![1, 2, 4].contains(&self.subsample) {
            return Err(Error::Config(format!("subsample must be 1, 2 or 4, got {}", self.subsample)));
        }
        if self.rcab_per_stage == 0 {
            return Err(Error::Config("rcab_per_stage must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !self.alpha.is_finite() || !self.lambda.is_finite() {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        Ok(())
    }

    /// Subsampling actually applied: 1 when the sub-space stage is disabled.
    pub fn effective_subsample(&self) -> usize {
        if self.use_sr {
            self.subsample
        } else {
            1
        }
    }

    /// Input height and width must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        self.effective_subsample() << EDB_STAGES
    }
}

/// Multi-source aggregation: the hybrid fusion block, or a plain concat and
/// `1 × 1` conv when that block is ablated.
#[derive(Debug, Clone)]
pub enum Fusion {
    Hybrid(Hfb),
    Plain(Conv),
}

impl Fusion {
    fn new(name: &str, cin: usize, cout: usize, cfg: &ElfConfig) -> Result<Self> {
        Ok(if cfg.use_hfb {
            Fusion::Hybrid(Hfb::new(name, cin, cout, cfg.ca_reduction)?)
        } else {
            Fusion::Plain(Conv::new(format!("{name}.project"), cin, cout, 1))
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, inputs: &[Var]) -> Result<Var> {
        match self {
            Fusion::Hybrid(h) => h.forward(g, p, inputs),
            Fusion::Plain(c) => {
                let x = g.concat(inputs, 1)?;
                c.forward(g, p, x)
            }
        }
    }
}

impl Module for Fusion {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            Fusion::Hybrid(h) => h.register(store, rng),
            Fusion::Plain(c) => c.register(store, rng),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Fusion::Hybrid(h) => h.param_count(),
            Fusion::Plain(c) => c.param_count(),
        }
    }
}

/// One unit of the global branch.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum GlobalBlock {
    Transformer(TransformerBlock),
    Residual(Rcab),
}

impl GlobalBlock {
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            GlobalBlock::Transformer(b) => b.forward(g, p, x),
            GlobalBlock::Residual(b) => b.forward(g, p, x),
        }
    }
}

impl Module for GlobalBlock {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            GlobalBlock::Transformer(b) => b.register(store, rng),
            GlobalBlock::Residual(b) => b.register(store, rng),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            GlobalBlock::Transformer(b) => b.param_count(),
            GlobalBlock::Residual(b) => b.param_count(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub down: Resample,
    pub rcabs: Vec<Rcab>,
    pub fuse: Fusion,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: Resample,
    pub fuse: Fusion,
    pub rcabs: Vec<Rcab>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub name: String,
    pub head: Conv,
    pub rtb: Vec<GlobalBlock>,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderStage>,
    pub fuse: Fusion,
    pub tail: Conv,
}

fn rcab_chain(name: &str, spec: &BlockSpec, count: usize, separable: bool) -> Result<Vec<Rcab>> {
    (0..count)
        .map(|i| Rcab::new(&format!("{name}.rcab{i}"), spec, separable))
        .collect()
}

impl Backbone {
    pub fn new(name: &str, in_channels: usize, cfg: &ElfConfig) -> Result<Self> {
        let spec = cfg.block_spec();
        let c = cfg.base_channels;
        let rtb = (0..cfg.rtb_depth)
            .map(|i| {
                let n = format!("{name}.rtb.block{i}");
                Ok(if cfg.use_sa {
                    GlobalBlock::Transformer(TransformerBlock::new(&n, &spec)?)
                } else {
                    GlobalBlock::Residual(Rcab::new(&n, &spec, false)?)
                })
            })
            .collect::<Result<_>>()?;
        let encoder = (0..EDB_STAGES)
            .map(|i| {
                let n = format!("{name}.edb.enc{i}");
                Ok(EncoderStage {
                    down: Resample::new(&format!("{n}.down"), c, Direction::Down2),
                    rcabs: rcab_chain(&n, &spec, cfg.rcab_per_stage, cfg.use_dsc)?,
                    fuse: Fusion::new(&format!("{n}.fuse"), 2 * c, c, cfg)?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..EDB_STAGES)
            .map(|i| {
                let n = format!("{name}.edb.dec{i}");
                Ok(DecoderStage {
                    up: Resample::new(&format!("{n}.up"), c, Direction::Up2),
                    fuse: Fusion::new(&format!("{n}.fuse"), 2 * c, c, cfg)?,
                    rcabs: rcab_chain(&n, &spec, cfg.rcab_per_stage, false)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            head: Conv::new(format!("{name}.head"), in_channels, c, 3),
            rtb,
            encoder,
            decoder,
            fuse: Fusion::new(&format!("{name}.fuse"), 2 * c, c, cfg)?,
            tail: Conv::new(format!("{name}.tail"), c, 3, 3),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let m = 1 << EDB_STAGES;
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("height and width must be multiples of {m}, got {h}x{w}"),
            ));
        }
        let x0 = self.head.forward(g, p, x)?;

        let mut t = x0;
        for b in &self.rtb {
            t = b.forward(g, p, t)?;
        }
        let global = g.add(x0, t)?;

        // encoder: each level fuses its residual features with the resized
        // shallow features
        let mut skips = vec![x0];
        let mut e = x0;
        for stage in &self.encoder {
            let mut d = stage.down.forward(g, p, e)?;
            for r in &stage.rcabs {
                d = r.forward(g, p, d)?;
            }
            let (_, _, eh, ew) = g.value(d).dims4()?;
            let shallow = g.bilinear_resize(x0, eh, ew)?;
            e = stage.fuse.forward(g, p, &[d, shallow])?;
            skips.push(e);
        }
        // decoder: the skip at the same scale is fused after upsampling
        skips.pop();
        let mut u = e;
        for stage in &self.decoder {
            let up = stage.up.forward(g, p, u)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            u = stage.fuse.forward(g, p, &[up, skip])?;
            for r in &stage.rcabs {
                u = r.forward(g, p, u)?;
            }
        }

        let fused = self.fuse.forward(g, p, &[global, u])?;
        self.tail.forward(g, p, fused)
    }
}

impl Module for Backbone {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.head.register(store, rng)?;
        for b in &self.rtb {
            b.register(store, rng)?;
        }
        for s in &self.encoder {
            s.down.register(store, rng)?;
            for r in &s.rcabs {
                r.register(store, rng)?;
            }
            s.fuse.register(store, rng)?;
        }
        for s in &self.decoder {
            s.up.register(store, rng)?;
            s.fuse.register(store, rng)?;
            for r in &s.rcabs {
                r.register(store, rng)?;
            }
        }
        self.fuse.register(store, rng)?;
        self.tail.register(store, rng)
    }

    fn param_count(&self) -> usize {
        let rcabs = |rs: &[Rcab]| rs.iter().map(Rcab::param_count).sum::<usize>();
        self.head.param_count()
            + self.rtb.iter().map(Module::param_count).sum::<usize>()
            + self
                .encoder
                .iter()
                .map(|s| s.down.param_count() + rcabs(&s.rcabs) + s.fuse.param_count())
                .sum::<usize>()
            + self
                .decoder
                .iter()
                .map(|s| s.up.param_count() + s.fuse.param_count() + rcabs(&s.rcabs))
                .sum::<usize>()
            + self.fuse.param_count()
            + self.tail.param_count()
    }
}

/// Multi-input attention: the rainy image supplies queries and values, the
/// upsampled rain map supplies keys; the result is fused with the embedded
/// coarse background.
#[derive(Debug, Clone)]
pub struct Mam {
    pub rain_embed: Conv,
    pub map_embed: Conv,
    pub attn: Mdta,
    pub fuse: Fusion,
}

impl Mam {
    pub fn new(cfg: &ElfConfig) -> Result<Self> {
        let c = cfg.base_channels;
        Ok(Self {
            rain_embed: Conv::new("mam.rain_embed", 3, c, 3),
            map_embed: Conv::new("mam.map_embed", 3, c, 3),
            attn: Mdta::new("mam.attn", c, cfg.heads)?,
            fuse: Fusion::new("mam.fuse", 2 * c, c, cfg)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, rainy: Var, map_up: Var, background: Var) -> Result<Var> {
        let fr = self.rain_embed.forward(g, p, rainy)?;
        let fm = self.map_embed.forward(g, p, map_up)?;
        let texture = self.attn.forward(g, p, fr, fm, fr)?;
        self.fuse.forward(g, p, &[texture, background])
    }
}

impl Module for Mam {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.rain_embed.register(store, rng)?;
        self.map_embed.register(store, rng)?;
        self.attn.register(store, rng)?;
        self.fuse.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.rain_embed.param_count() + self.map_embed.param_count() + self.attn.param_count() + self.fuse.param_count()
    }
}

/// Network topology without weights.
#[derive(Debug, Clone)]
pub struct Elf {
    pub config: ElfConfig,
    pub idn: Backbone,
    pub mam: Option<Mam>,
    pub background_embed: Conv,
    pub brn: Backbone,
}

/// Graph handles of the supervised outputs.
#[derive(Debug, Clone, Copy)]
pub struct ElfOutputs {
    pub derained_sub: Var,
    pub restored_full: Var,
    pub rain_map_sub: Var,
}

impl Elf {
    pub fn new(config: &ElfConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        Ok(Self {
            config: config.clone(),
            idn: Backbone::new("idn", 3, config)?,
            mam: if config.use_mam { Some(Mam::new(config)?) } else { None },
            background_embed: Conv::new("background_embed", 3, c, 3),
            brn: Backbone::new("brn", c, config)?,
        })
    }

    /// Returns `(rain_map_sub, derained_sub)`.
    pub fn idn_forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, rainy_sub: Var) -> Result<(Var, Var)> {
        let rain = self.idn.forward(g, p, rainy_sub)?;
        let derained = g.sub(rainy_sub, rain)?;
        Ok((rain, derained))
    }

    /// Attention-fused features at full resolution.
    pub fn mam_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        rain_map_sub: Var,
        derained_sub: Var,
        rainy_full: Var,
    ) -> Result<Var> {
        let (_, _, h, w) = g.value(rainy_full).dims4()?;
        let derained_up = g.bilinear_resize(derained_sub, h, w)?;
        let background = self.background_embed.forward(g, p, derained_up)?;
        match &self.mam {
            Some(mam) => {
                let map_up = g.bilinear_resize(rain_map_sub, h, w)?;
                mam.forward(g, p, rainy_full, map_up, background)
            }
            None => Ok(background),
        }
    }

    pub fn brn_forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_mam: Var, derained_sub: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(f_mam).dims4()?;
        let residual = self.brn.forward(g, p, f_mam)?;
        let coarse = g.bilinear_resize(derained_sub, h, w)?;
        g.add(residual, coarse)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, rainy_full: Var) -> Result<ElfOutputs> {
        let (_, c, h, w) = g.value(rainy_full).dims4()?;
        if c != 3 {
            return Err(Error::invalid("elf_forward", format!("expected 3 channels, got {c}")));
        }
        let m = self.config.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "elf_forward",
                format!("height and width must be multiples of {m}, got {h}x{w}"),
            ));
        }
        let s = self.config.effective_subsample();
        let rainy_sub = g.bilinear_resize(rainy_full, h / s, w / s)?;
        let (rain_map_sub, derained_sub) = self.idn_forward(g, p, rainy_sub)?;
        let f_mam = self.mam_forward(g, p, rain_map_sub, derained_sub, rainy_full)?;
        let restored_full = self.brn_forward(g, p, f_mam, derained_sub)?;
        Ok(ElfOutputs {
            derained_sub,
            restored_full,
            rain_map_sub,
        })
    }
}

impl Module for Elf {
    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.idn.register(store, rng)?;
        if let Some(mam) = &self.mam {
            mam.register(store, rng)?;
        }
        self.background_embed.register(store, rng)?;
        self.brn.register(store, rng)
    }

    fn param_count(&self) -> usize {
        self.idn.param_count()
            + self.mam.as_ref().map_or(0, Module::param_count)
            + self.background_embed.param_count()
            + self.brn.param_count()
    }
}

/// Concrete outputs of one inference pass.
#[derive(Debug, Clone)]
pub struct Prediction<T: Real = f32> {
    pub derained_sub: Tensor<T>,
    pub restored_full: Tensor<T>,
    pub rain_map_sub: Tensor<T>,
}

/// Topology plus weights.
#[derive(Debug, Clone)]
pub struct ElfModel {
    pub net: Elf,
    pub params: ParameterStore<f32>,
}

pub fn build_model(config: &ElfConfig, seed: u64) -> Result<ElfModel> {
    let net = Elf::new(config)?;
    let mut params = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.register(&mut params, &mut rng)?;
    debug_assert_eq!(params.num_scalars(), net.param_count());
    Ok(ElfModel { net, params })
}

pub fn count_params(model: &ElfModel) -> usize {
    model.params.num_scalars()
}

impl ElfModel {
    pub fn config(&self) -> &ElfConfig {
        &self.net.config
    }

    /// Runs without recording gradients. The restored image is clipped to
    /// `[0, 1]`; the sub-space outputs are returned as computed.
    pub fn predict(&self, rainy_full: &Tensor<f32>) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(rainy_full.clone());
        let out = self.net.forward(&mut g, &p, x)?;
        Ok(Prediction {
            derained_sub: g.value(out.derained_sub).clone(),
            restored_full: g.value(out.restored_full).clamp(0.0, 1.0),
            rain_map_sub: g.value(out.rain_map_sub).clone(),
        })
    }

    /// Restores a `[3, H, W]` image of any size: reflect-pads up to the
    /// divisibility multiple, predicts, and crops back to `H × W`.
    pub fn restore_image(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w) = match *image.shape() {
            [3, h, w] => (h, w),
            _ => return Err(Error::invalid("restore_image", format!("expected [3, H, W], got {:?}", image.shape()))),
        };
        let m = self.config().required_multiple();
        let padded = reflect_pad(image, h.div_ceil(m) * m, w.div_ceil(m) * m)?;
        let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
        let out = self.predict(&padded.reshape(vec![1, 3, ph, pw])?)?.restored_full;
        out.reshape(vec![3, ph, pw])?.narrow(1, 0, h)?.narrow(2, 0, w)
    }
}

/// Index into `0..n` after mirroring about the edges without repeating
/// them (`… 2 1 | 0 1 2 … n−1 | n−2 …`).
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extends a `[C, H, W]` image to `[C, out_h, out_w]` by reflection at the
/// bottom and right edges.
pub fn reflect_pad<T: Real>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] if h > 0 && w > 0 => (c, h, w),
        _ => return Err(Error::invalid("reflect_pad", format!("expected non-empty [C, H, W], got {:?}", image.shape()))),
    };
    if out_h < h || out_w < w {
        return Err(Error::invalid("reflect_pad", format!("cannot pad {h}x{w} down to {out_h}x{out_w}")));
    }
    let src = image.data();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let row = (ch * h + reflect_index(y, h)) * w;
            data.extend((0..out_w).map(|x| src[row + reflect_index(x, w)]));
        }
    }
    Tensor::from_vec(vec![c, out_h, out_w], data)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn random_image(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn zero_tail(model: &mut ElfModel, backbone: &str) {
        model.params.fill(&format!("{backbone}.tail.weight"), 0.0).unwrap();
        model.params.fill(&format!("{backbone}.tail.bias"), 0.0).unwrap();
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_edges() {
        let t = Tensor::from_vec(vec![1, 1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        assert_eq!(reflect_pad(&t, 1, 8).unwrap().data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
        let one = Tensor::from_vec(vec![1, 1, 1], vec![5.0f32]).unwrap();
        assert_eq!(reflect_pad(&one, 2, 2).unwrap().data(), &[5.0; 4]);
        assert!(reflect_pad(&t, 1, 2).is_err());
    }

    #[test]
    fn restore_image_keeps_arbitrary_sizes() {
        let model = build_model(&ElfConfig::tiny(), 0).unwrap();
        assert_eq!(model.config().required_multiple(), 16);
        let img = random_image(&[3, 20, 9], 4);
        let out = model.restore_image(&img).unwrap();
        assert_eq!(out.shape(), &[3, 20, 9]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // an aligned image restores exactly as a direct prediction
        let aligned = random_image(&[3, 16, 16], 5);
        let direct = model.predict(&aligned.reshape(vec![1, 3, 16, 16]).unwrap()).unwrap();
        assert_eq!(model.restore_image(&aligned).unwrap().data(), direct.restored_full.data());
    }

    #[test]
    fn config_validation() {
        assert!(ElfConfig::default().validate().is_ok());
        assert!(ElfConfig { heads: 5, ..ElfConfig::default() }.validate().is_err());
        assert!(ElfConfig { subsample: 3, ..ElfConfig::default() }.validate().is_err());
        assert!(build_model(&ElfConfig { heads: 7, ..ElfConfig::default() }, 0).is_err());
        assert_eq!(ElfConfig::default().required_multiple(), 16);
        assert_eq!(ElfConfig { use_sr: false, ..ElfConfig::default() }.required_multiple(), 8);
    }

    #[test]
    fn output_shapes() {
        let model = build_model(&ElfConfig::tiny(), 1).unwrap();
        let pred = model.predict(&random_image(&[1, 3, 64, 64], 2)).unwrap();
        assert_eq!(pred.derained_sub.shape(), &[1, 3, 32, 32]);
        assert_eq!(pred.rain_map_sub.shape(), &[1, 3, 32, 32]);
        assert_eq!(pred.restored_full.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn indivisible_input_names_the_multiple() {
        let model = build_model(&ElfConfig::tiny(), 1).unwrap();
        let err = model.predict(&random_image(&[1, 3, 24, 32], 2)).unwrap_err();
        assert!(err.to_string().contains("16"), "{err}");
    }

    #[test]
    fn idn_shapes_and_identity() {
        let model = build_model(&ElfConfig::tiny(), 3).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.leaf(random_image(&[2, 3, 64, 64], 4));
        let (rain, derained) = model.net.idn_forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(rain), &[2, 3, 64, 64]);
        assert_eq!(g.shape(derained), &[2, 3, 64, 64]);
        let xs = g.value(x).data();
        let rs = g.value(rain).data();
        let ds = g.value(derained).data();
        for i in 0..xs.len() {
            assert_eq!(xs[i] - rs[i] - ds[i], 0.0);
        }
    }

    #[test]
    fn zero_idn_tail_passes_input_through() {
        let mut model = build_model(&ElfConfig::tiny(), 3).unwrap();
        zero_tail(&mut model, "idn");
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.leaf(random_image(&[1, 3, 16, 16], 4));
        let (rain, derained) = model.net.idn_forward(&mut g, &p, x).unwrap();
        assert!(g.value(rain).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(derained), g.value(x));
    }

    #[test]
    fn zero_brn_tail_returns_the_upsampled_coarse_result() {
        let mut model = build_model(&ElfConfig::tiny(), 5).unwrap();
        zero_tail(&mut model, "brn");
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.leaf(random_image(&[1, 3, 32, 32], 6));
        let out = model.net.forward(&mut g, &p, x).unwrap();
        let up = g.bilinear_resize(out.derained_sub, 32, 32).unwrap();
        assert_eq!(g.value(out.restored_full), g.value(up));
    }

    #[test]
    fn restored_minus_coarse_is_the_brn_residual() {
        let model = build_model(&ElfConfig::tiny(), 7).unwrap();
        let mut g = Graph::<f64>::new();
        let p = model.params.cast::<f64>().bind(&mut g);
        let x = g.leaf(random_image(&[1, 3, 32, 32], 8).cast::<f64>());
        let s = g.bilinear_resize(x, 16, 16).unwrap();
        let (rain, der) = model.net.idn_forward(&mut g, &p, s).unwrap();
        let f = model.net.mam_forward(&mut g, &p, rain, der, x).unwrap();
        assert_eq!(g.shape(f), &[1, 4, 32, 32]);
        let residual = model.net.brn.forward(&mut g, &p, f).unwrap();
        let restored = model.net.brn_forward(&mut g, &p, f, der).unwrap();
        let coarse = g.bilinear_resize(der, 32, 32).unwrap();
        let diff = g.sub(restored, coarse).unwrap();
        for (a, b) in g.value(diff).data().iter().zip(g.value(residual).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_rain_keys_make_attention_independent_of_the_query() {
        // a zero map with a zero-bias embedding gives all-zero keys, so every
        // row of the attention map is uniform whatever the rainy image
        let mut model = build_model(&ElfConfig::tiny(), 9).unwrap();
        model.params.fill("mam.map_embed.bias", 0.0).unwrap();
        let mam = model.net.mam.as_ref().unwrap();
        let maps: Vec<Tensor<f32>> = (0..2)
            .map(|seed| {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g);
                let rainy = g.leaf(random_image(&[1, 3, 8, 8], seed));
                let zero = g.leaf(Tensor::zeros(vec![1, 3, 8, 8]));
                let fr = mam.rain_embed.forward(&mut g, &p, rainy).unwrap();
                let fm = mam.map_embed.forward(&mut g, &p, zero).unwrap();
                let (_, a) = mam.attn.forward_with_attention(&mut g, &p, fr, fm, fr).unwrap();
                g.value(a).clone()
            })
            .collect();
        assert_eq!(maps[0], maps[1]);
        assert!(maps[0].data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn deterministic_build_and_forward() {
        let a = build_model(&ElfConfig::tiny(), 11).unwrap();
        let b = build_model(&ElfConfig::tiny(), 11).unwrap();
        assert_eq!(a.params, b.params);
        let x = random_image(&[1, 3, 16, 16], 1);
        assert_eq!(a.predict(&x).unwrap().restored_full, b.predict(&x).unwrap().restored_full);
    }

    #[test]
    fn full_resolution_variant_keeps_sub_outputs_full_size() {
        let cfg = ElfConfig {
            use_sr: false,
            ..ElfConfig::tiny()
        };
        let model = build_model(&cfg, 1).unwrap();
        let pred = model.predict(&random_image(&[1, 3, 16, 16], 2)).unwrap();
        assert_eq!(pred.derained_sub.shape(), &[1, 3, 16, 16]);
        assert_eq!(pred.restored_full.shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn activations_stay_finite() {
        let model = build_model(&ElfConfig::tiny(), 2).unwrap();
        for seed in 0..100 {
            let pred = model.predict(&random_image(&[1, 3, 16, 16], seed)).unwrap();
            assert!(pred.derained_sub.is_finite() && pred.restored_full.is_finite());
        }
    }

    #[test]
    fn parameter_names_are_partitioned_by_submodule() {
        let model = build_model(&ElfConfig::tiny(), 0).unwrap();
        let total = count_params(&model);
        let parts: usize = ["idn.", "brn.", "mam.", "background_embed."]
            .iter()
            .map(|p| model.params.count_prefix(p))
            .sum();
        assert_eq!(parts, total);
        assert_eq!(total, model.net.param_count());
    }

    fn closed_form_tiny() -> usize {
        // C = 4, one transformer block, heads = 1, r = 2, one RCAB per stage
        let c = 4;
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let dw = |ch: usize| ch * 9 + ch;
        let dsc = |cin: usize, cout: usize| dw(cin) + conv(cin, cout, 1);
        let ca = |ch: usize| conv(ch, ch / 2, 1) + conv(ch / 2, ch, 1);
        let rcab = |sep: bool| if sep { dsc(c, c) } else { conv(c, c, 3) } + conv(c, c, 3) + ca(c);
        let mdta = 3 * (conv(c, c, 1) + dw(c)) + 1 + conv(c, c, 1);
        let block = 4 * c + mdta + conv(c, 2 * c, 1) + conv(2 * c, c, 1);
        let hfb = dsc(2 * c, 2 * c) + ca(2 * c) + conv(2 * c, c, 1);
        let resample = conv(c, c, 1);
        let body = block
            + 3 * (resample + rcab(true) + hfb)
            + 3 * (resample + hfb + rcab(false))
            + hfb
            + conv(c, 3, 3);
        let idn = conv(3, c, 3) + body;
        let brn = conv(c, c, 3) + body;
        let mam = 2 * conv(3, c, 3) + mdta + hfb;
        idn + brn + mam + conv(3, c, 3)
    }

    #[test]
    fn tiny_count_matches_closed_form() {
        let model = build_model(&ElfConfig::tiny(), 0).unwrap();
        assert_eq!(count_params(&model), closed_form_tiny());
    }

    #[test]
    fn default_count_and_dsc_saving() {
        let with = Elf::new(&ElfConfig::default()).unwrap().param_count();
        let without = Elf::new(&ElfConfig {
            use_dsc: false,
            ..ElfConfig::default()
        })
        .unwrap()
        .param_count();
        assert!((1_000_000..=2_000_000).contains(&with), "{with}");
        assert!(with < without);
        let saving = (without - with) as f64 / without as f64;
        assert!((0.04..=0.12).contains(&saving), "{saving}");
    }
}
