//! The full finite-difference suite: every differentiable primitive, every
//! block, and the end-to-end pipeline at a tiny width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, CheckOptions, GradReport};
use crate::losses::{charbonnier, loss_stage, ssim, LossConfig};
use crate::model::{Elf, ElfConfig, Mam};
use crate::nn::blocks::{
    init_params, BlockSpec, ChannelAttention, Conv, DepthwiseConv, Direction, Dsc, Ffn, Hfb, LayerNorm, Mdta, Module,
    Rcab, Resample, TransformerBlock,
};
use crate::nn::Bound;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    /// Tolerance for primitives and blocks.
    pub tol: f64,
    /// Tolerance for the end-to-end pipeline.
    pub pipeline_tol: f64,
    pub probes: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            pipeline_tol: 1e-3,
            probes: 100,
        }
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("length matches shape")
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, seed)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element carries a
/// distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = g.constant(random(g.shape(out), seed ^ 0x9e37));
    let prod = g.mul(out, r)?;
    g.sum_all(prod)
}

struct Runner {
    opts: CheckOptions,
    reports: Vec<GradReport>,
}

impl Runner {
    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        self.op_with(name, self.opts, inputs, f)
    }

    fn op_with<F>(&mut self, name: &str, opts: CheckOptions, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let seed = self.reports.len() as u64;
        let report = finite_diff_check(name, &inputs, opts, |g, v| {
            let out = f(g, v)?;
            project(g, out, seed)
        })?;
        self.reports.push(report);
        Ok(())
    }

    /// Checks a block with its parameters perturbed away from their
    /// initial values and treated as inputs alongside `data`.
    fn block<M, F>(&mut self, name: &str, module: &M, data: Vec<Tensor<f64>>, opts: CheckOptions, f: F) -> Result<()>
    where
        M: Module,
        F: Fn(&M, &mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
    {
        let seed = self.reports.len() as u64;
        let params = init_params::<f64, _>(module, seed)?;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let mut inputs = data;
        let n_data = inputs.len();
        for (i, (_, t)) in params.iter().enumerate() {
            let jitter = random(t.shape(), seed * 1000 + i as u64);
            inputs.push(t.zip_map(&jitter, |a, b| a + 0.1 * b)?);
        }
        let report = finite_diff_check(name, &inputs, opts, |g, v| {
            let mut bound = Bound::default();
            for (name, &var) in names.iter().zip(&v[n_data..]) {
                bound.insert(name.clone(), var);
            }
            let out = f(module, g, &bound, &v[..n_data])?;
            project(g, out, seed)
        })?;
        self.reports.push(report);
        Ok(())
    }
}

fn primitives(r: &mut Runner) -> Result<()> {
    let x4 = |seed| random(&[2, 3, 4, 5], seed);
    r.op("add", vec![x4(1), x4(2)], |g, v| g.add(v[0], v[1]))?;
    r.op("sub", vec![x4(3), x4(4)], |g, v| g.sub(v[0], v[1]))?;
    r.op("mul", vec![x4(5), x4(6)], |g, v| g.mul(v[0], v[1]))?;
    r.op("div", vec![x4(7), uniform(&[2, 3, 4, 5], 0.5, 1.5, 8)], |g, v| {
        g.div(v[0], v[1])
    })?;
    r.op("mul_channel_broadcast", vec![x4(9), random(&[3], 10)], |g, v| g.mul(v[0], v[1]))?;
    r.op("add_scalar_broadcast", vec![x4(11), random(&[], 12)], |g, v| g.add(v[0], v[1]))?;
    r.op("scale", vec![x4(13)], |g, v| g.scale(v[0], -1.7))?;
    r.op("add_scalar", vec![x4(14)], |g, v| g.add_scalar(v[0], 0.3))?;
    r.op("relu", vec![x4(15)], |g, v| g.relu(v[0]))?;
    r.op("gelu", vec![x4(16)], |g, v| g.gelu(v[0]))?;
    r.op("sigmoid", vec![x4(17)], |g, v| g.sigmoid(v[0]))?;
    r.op("sqrt", vec![uniform(&[2, 3, 4, 5], 0.2, 2.0, 18)], |g, v| g.sqrt(v[0]))?;
    r.op("square", vec![x4(19)], |g, v| g.square(v[0]))?;
    r.op("matmul", vec![random(&[2, 4, 6], 20), random(&[2, 6, 5], 21)], |g, v| {
        g.matmul(v[0], v[1])
    })?;
    r.op("transpose_last2", vec![random(&[2, 6, 10], 22)], |g, v| g.transpose_last2(v[0]))?;
    r.op("reshape", vec![x4(23)], |g, v| g.reshape(v[0], vec![6, 20]))?;
    let conv_in = |side| vec![random(&[2, 3, side, side], 24), random(&[4, 3, 3, 3], 25), random(&[4], 26)];
    r.op("conv2d", conv_in(6), |g, v| g.conv2d(v[0], v[1], v[2], 1, 1))?;
    r.op("conv2d_stride2", conv_in(7), |g, v| g.conv2d(v[0], v[1], v[2], 2, 1))?;
    r.op(
        "depthwise_conv2d",
        vec![random(&[2, 3, 6, 6], 27), random(&[3, 1, 3, 3], 28), random(&[3], 29)],
        |g, v| g.depthwise_conv2d(v[0], v[1], v[2], 1, 1),
    )?;
    r.op("bilinear_down", vec![random(&[1, 2, 10, 8], 30)], |g, v| g.bilinear_resize(v[0], 5, 4))?;
    r.op("bilinear_up", vec![random(&[2, 4, 4, 4], 31)], |g, v| g.bilinear_resize(v[0], 8, 7))?;
    r.op("softmax", vec![random(&[4, 5, 6], 32)], |g, v| g.softmax(v[0], 2))?;
    r.op("softmax_axis1", vec![random(&[4, 5, 6], 33)], |g, v| g.softmax(v[0], 1))?;
    r.op(
        "layer_norm",
        vec![x4(34), uniform(&[3], 0.5, 1.5, 35), random(&[3], 36)],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    )?;
    r.op("l2_normalize", vec![random(&[4, 5, 7], 37)], |g, v| g.l2_normalize(v[0], 1e-12))?;
    r.op("sum_axes", vec![x4(38)], |g, v| g.sum(v[0], &[1, 3]))?;
    r.op("mean_axes", vec![x4(39)], |g, v| g.mean(v[0], &[0, 2]))?;
    r.op("mean_all", vec![x4(40)], |g, v| g.mean_all(v[0]))?;
    r.op("global_avg_pool", vec![x4(41)], |g, v| g.global_avg_pool(v[0]))?;
    r.op("concat", vec![x4(42), random(&[2, 2, 4, 5], 43)], |g, v| g.concat(&v[..2], 1))?;
    r.op("narrow", vec![x4(44)], |g, v| g.narrow(v[0], 3, 1, 3))?;

    let img = |seed| uniform(&[1, 3, 16, 16], 0.0, 1.0, seed);
    let cfg = LossConfig::default();
    // The Charbonnier kernel bends on the scale of its eps, so the step has
    // to sit well below it.
    let fine = CheckOptions {
        h_rel: 1e-6,
        ..r.opts
    };
    r.op_with("charbonnier", fine, vec![img(45), img(46)], |g, v| {
        charbonnier(g, v[0], v[1], cfg.eps)
    })?;
    r.op("ssim", vec![img(47), img(48)], |g, v| ssim(g, v[0], v[1], &cfg))?;
    r.op_with("loss_stage", fine, vec![img(49), img(50)], |g, v| {
        loss_stage(g, v[0], v[1], &cfg)
    })?;
    Ok(())
}

fn blocks(r: &mut Runner) -> Result<()> {
    let opts = r.opts;
    let spec = BlockSpec {
        channels: 4,
        heads: 2,
        ffn_expansion: 2,
        ca_reduction: 2,
        kernel: 3,
    };
    let x = |seed| random(&[1, 4, 6, 6], seed);
    r.block("block.conv", &Conv::new("c", 4, 5, 3), vec![x(100)], opts, |m, g, p, v| {
        m.forward(g, p, v[0])
    })?;
    let dw = DepthwiseConv {
        name: "dw".into(),
        channels: 4,
        k: 3,
    };
    r.block("block.depthwise", &dw, vec![x(101)], opts, |m, g, p, v| m.forward(g, p, v[0]))?;
    r.block("block.dsc", &Dsc::new("d", 4, 6, 3), vec![x(102)], opts, |m, g, p, v| {
        m.forward(g, p, v[0])
    })?;
    r.block("block.channel_attention", &ChannelAttention::new("ca", 4, 2)?, vec![x(103)], opts, |m, g, p, v| {
        m.forward(g, p, v[0])
    })?;
    r.block("block.rcab", &Rcab::new("r", &spec, false)?, vec![x(104)], opts, |m, g, p, v| {
        m.forward(g, p, v[0])
    })?;
    r.block("block.rcab_separable", &Rcab::new("r", &spec, true)?, vec![x(105)], opts, |m, g, p, v| {
        m.forward(g, p, v[0])
    })?;
    r.block("block.mdta", &Mdta::new("a", 4, 2)?, vec![x(106)], opts, |m, g, p, v| {
        m.forward(g, p, v[0], v[0], v[0])
    })?;
    r.block(
        "block.mdta_cross",
        &Mdta::new("a", 4, 2)?,
        vec![x(107), x(108)],
        opts,
        |m, g, p, v| m.forward(g, p, v[0], v[1], v[0]),
    )?;
    r.block("block.ffn", &Ffn::new("f", 4, 2), vec![x(109)], opts, |m, g, p, v| m.forward(g, p, v[0]))?;
    let ln = LayerNorm {
        name: "ln".into(),
        channels: 4,
    };
    r.block("block.layer_norm", &ln, vec![x(110)], opts, |m, g, p, v| m.forward(g, p, v[0]))?;
    r.block("block.transformer", &TransformerBlock::new("t", &spec)?, vec![x(111)], opts, |m, g, p, v| {
        m.forward(g, p, v[0])
    })?;
    r.block("block.hfb", &Hfb::new("h", 8, 4, 2)?, vec![x(112), x(113)], opts, |m, g, p, v| {
        m.forward(g, p, v)
    })?;
    r.block("block.downsample", &Resample::new("s", 4, Direction::Down2), vec![x(114)], opts, |m, g, p, v| {
        m.forward(g, p, v[0])
    })?;
    r.block("block.upsample", &Resample::new("s", 4, Direction::Up2), vec![x(115)], opts, |m, g, p, v| {
        m.forward(g, p, v[0])
    })?;
    let mam_cfg = ElfConfig {
        heads: 2,
        ..ElfConfig::tiny()
    };
    let small = |seed| uniform(&[1, 3, 6, 6], 0.0, 1.0, seed);
    r.block(
        "block.mam",
        &Mam::new(&mam_cfg)?,
        vec![small(116), small(117), x(118)],
        opts,
        |m, g, p, v| m.forward(g, p, v[0], v[1], v[2]),
    )?;
    Ok(())
}

/// The whole two-stage network at `ElfConfig::tiny()` on a `16 × 16`
/// input, differentiating a projection of all three supervised outputs.
fn pipeline(r: &mut Runner, tol: f64) -> Result<()> {
    let net = Elf::new(&ElfConfig::tiny())?;
    // Many weights deep in the network carry gradients near 1e-9, where a
    // small step drowns in roundoff of the O(10) objective.
    let opts = CheckOptions {
        h_rel: 1e-3,
        ..r.opts.with_tol(tol)
    };
    let input = uniform(&[1, 3, 16, 16], 0.0, 1.0, 200);
    r.block("pipeline.tiny", &net, vec![input], opts, |m, g, p, v| {
        let out = m.forward(g, p, v[0])?;
        let a = project(g, out.restored_full, 1)?;
        let b = project(g, out.derained_sub, 2)?;
        let c = project(g, out.rain_map_sub, 3)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    })
}

/// Runs every check. Numerical failures are reported, not raised.
pub fn run_suite(opts: SuiteOptions) -> Result<Vec<GradReport>> {
    let mut r = Runner {
        opts: CheckOptions::default().with_tol(opts.tol).with_probes(opts.probes),
        reports: Vec::new(),
    };
    primitives(&mut r)?;
    blocks(&mut r)?;
    pipeline(&mut r, opts.pipeline_tol)?;
    Ok(r.reports)
}

pub fn report_table(reports: &[GradReport]) -> String {
    let mut s = format!(
        "{:<28} {:>6} {:>12} {:>12}  {}\n",
        "check", "probes", "max_rel", "max_abs", "status"
    );
    for r in reports {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let reports = run_suite(SuiteOptions::default()).unwrap();
        assert!(reports.len() > 45);
        for r in &reports {
            assert!(r.pass, "{r}");
            assert!(r.probe_count >= 100, "{r}");
        }
        let table = report_table(&reports);
        assert!(table.starts_with("check"));
        assert!(table.contains("pipeline.tiny"));
    }

    #[test]
    fn tightened_tolerance_reports_failures_without_erroring() {
        let opts = SuiteOptions {
            tol: 1e-14,
            ..SuiteOptions::default()
        };
        let reports = run_suite(opts).unwrap();
        assert!(reports.iter().any(|r| !r.pass));
    }
}
