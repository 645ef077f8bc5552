//! Training objective and image quality metrics.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ElfConfig;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight on the SSIM term; negative so minimizing the loss raises SSIM.
    pub alpha: f64,
    /// Weight on the full-resolution stage.
    pub lambda: f64,
    /// Charbonnier penalty.
    pub eps: f64,
    pub use_ssim: bool,
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: -0.15,
            lambda: 1.0,
            eps: 1e-3,
            use_ssim: true,
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl From<&ElfConfig> for LossConfig {
    fn from(cfg: &ElfConfig) -> Self {
        Self {
            alpha: cfg.alpha,
            lambda: cfg.lambda,
            eps: cfg.eps,
            use_ssim: cfg.use_ssim_loss,
            ..Self::default()
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("ssim window {} must be odd", self.window)));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(op: &'static str, g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Mean of `sqrt((pred − gt)² + eps²)`.
///
/// Evaluated as `eps + mean(d² / (sqrt(d² + eps²) + eps))`, which is the
/// same quantity but returns `eps` exactly when `pred == gt`.
pub fn charbonnier<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, eps: f64) -> Result<Var> {
    same_shape("charbonnier", g, pred, gt)?;
    let d = g.sub(pred, gt)?;
    let d2 = g.square(d)?;
    let r = g.add_scalar(d2, eps * eps)?;
    let r = g.sqrt(r)?;
    let den = g.add_scalar(r, eps)?;
    let excess = g.div(d2, den)?;
    let m = g.mean_all(excess)?;
    g.add_scalar(m, eps)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let mid = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over the valid window positions and all channels.
pub fn ssim<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    same_shape("ssim", g, pred, gt)?;
    let (_, c, h, w) = g.value(pred).dims4()?;
    if h < cfg.window || w < cfg.window {
        return Err(Error::invalid(
            "ssim",
            format!("{h}x{w} image is smaller than the {0}x{0} window", cfg.window),
        ));
    }
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let k = cfg.window;
    let mut kernel = Vec::with_capacity(c * k * k);
    for _ in 0..c {
        for y in 0..k {
            for x in 0..k {
                kernel.push(T::of(taps[y] * taps[x]));
            }
        }
    }
    let kw = g.constant(Tensor::from_vec(vec![c, 1, k, k], kernel)?);
    let kb = g.constant(Tensor::zeros(vec![c]));
    let blur = |g: &mut Graph<T>, v: Var| g.depthwise_conv2d(v, kw, kb, 1, 0);

    let mu_x = blur(g, pred)?;
    let mu_y = blur(g, gt)?;
    let xx = g.mul(pred, pred)?;
    let yy = g.mul(gt, gt)?;
    let xy = g.mul(pred, gt)?;
    let exx = blur(g, xx)?;
    let eyy = blur(g, yy)?;
    let exy = blur(g, xy)?;

    let mx2 = g.mul(mu_x, mu_x)?;
    let my2 = g.mul(mu_y, mu_y)?;
    let mxy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(exx, mx2)?;
    let var_y = g.sub(eyy, my2)?;
    let cov = g.sub(exy, mxy)?;

    let l_num = g.scale(mxy, 2.0)?;
    let l_num = g.add_scalar(l_num, cfg.c1)?;
    let c_num = g.scale(cov, 2.0)?;
    let c_num = g.add_scalar(c_num, cfg.c2)?;
    let l_den = g.add(mx2, my2)?;
    let l_den = g.add_scalar(l_den, cfg.c1)?;
    let c_den = g.add(var_x, var_y)?;
    let c_den = g.add_scalar(c_den, cfg.c2)?;

    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    g.mean_all(map)
}

/// `charbonnier + alpha · ssim`, or Charbonnier alone when SSIM is disabled.
pub fn loss_stage<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    let ch = charbonnier(g, pred, gt, cfg.eps)?;
    if !cfg.use_ssim {
        return Ok(ch);
    }
    let s = ssim(g, pred, gt, cfg)?;
    let s = g.scale(s, cfg.alpha)?;
    g.add(ch, s)
}

/// Sub-space stage loss plus `lambda` times the full-resolution stage loss.
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    derained_sub: Var,
    gt_sub: Var,
    restored_full: Var,
    gt_full: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let l_idn = loss_stage(g, derained_sub, gt_sub, cfg)?;
    let l_brn = loss_stage(g, restored_full, gt_full, cfg)?;
    let l_brn = g.scale(l_brn, cfg.lambda)?;
    g.add(l_idn, l_brn)
}

/// Peak signal-to-noise ratio for unit data range over all channels.
/// Identical images give `f64::INFINITY`.
pub fn psnr<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("psnr", pred.shape(), gt.shape()));
    }
    let n = pred.numel().max(1) as f64;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// SSIM of two image tensors, evaluated in `f64`.
pub fn ssim_value<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(pred.cast());
    let b = g.constant(gt.cast());
    let s = ssim(&mut g, a, b, &LossConfig::default())?;
    Ok(g.value(s).item())
}

/// PSNR formatted for reports; the infinite sentinel prints as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn eval2(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(a.clone());
        let y = g.leaf(b.clone());
        let out = f(&mut g, x, y).unwrap();
        g.value(out).item()
    }

    #[test]
    fn charbonnier_hand_values() {
        let z = Tensor::zeros(vec![1, 3, 4, 4]);
        let c = |d: f64| eval2(&Tensor::full(vec![1, 3, 4, 4], d), &z, |g, a, b| charbonnier(g, a, b, 1e-3));
        assert_eq!(eval2(&z, &z, |g, a, b| charbonnier(g, a, b, 1e-3)), 1e-3);
        assert!((c(3e-3) - 1e-5f64.sqrt()).abs() < 1e-12);
        assert!((c(1.0) - 1.0000005).abs() < 1e-9);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2]));
        let b = g.leaf(Tensor::zeros(vec![3]));
        assert!(charbonnier(&mut g, a, b, 1e-3).is_err());
    }

    #[test]
    fn ssim_identities() {
        let x = random(&[1, 3, 16, 16], 1);
        let y = random(&[1, 3, 16, 16], 2);
        let cfg = LossConfig::default();
        assert!((eval2(&x, &x, |g, a, b| ssim(g, a, b, &cfg)) - 1.0).abs() < 1e-12);
        let ab = eval2(&x, &y, |g, a, b| ssim(g, a, b, &cfg));
        let ba = eval2(&y, &x, |g, a, b| ssim(g, a, b, &cfg));
        assert_eq!(ab, ba);
        assert!(ab.abs() <= 1.0);
        let zero = Tensor::<f64>::zeros(vec![1, 1, 12, 12]);
        let one = Tensor::ones(vec![1, 1, 12, 12]);
        let s = ssim_value(&zero, &one).unwrap();
        assert!((s - 1e-4 / 1.0001).abs() < 1e-9, "{s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = random(&[1, 3, 10, 16], 1);
        assert!(ssim_value(&x, &x).is_err());
    }

    #[test]
    fn stage_and_total_closed_forms() {
        let gt = random(&[1, 3, 16, 16], 3);
        let sub = random(&[1, 3, 12, 12], 4);
        let cfg = LossConfig::default();
        let stage = eval2(&gt, &gt, |g, a, b| loss_stage(g, a, b, &cfg));
        assert!((stage + 0.149).abs() < 1e-9, "{stage}");

        let mut g = Graph::new();
        let s = g.leaf(sub.clone());
        let f = g.leaf(gt.clone());
        let total = loss_total(&mut g, s, s, f, f, &cfg).unwrap();
        assert!((g.value(total).item() + 0.298).abs() < 1e-9);

        let no_ssim = LossConfig {
            use_ssim: false,
            ..LossConfig::default()
        };
        assert_eq!(eval2(&gt, &gt, |g, a, b| loss_stage(g, a, b, &no_ssim)), 1e-3);
    }

    #[test]
    fn total_is_affine_in_lambda() {
        let (a, b, c, d) = (
            random(&[1, 3, 12, 12], 1),
            random(&[1, 3, 12, 12], 2),
            random(&[1, 3, 16, 16], 3),
            random(&[1, 3, 16, 16], 4),
        );
        let total = |lambda: f64| {
            let cfg = LossConfig {
                lambda,
                ..LossConfig::default()
            };
            let mut g = Graph::new();
            let v: Vec<Var> = [&a, &b, &c, &d].iter().map(|t| g.leaf((*t).clone())).collect();
            let l = loss_total(&mut g, v[0], v[1], v[2], v[3], &cfg).unwrap();
            g.value(l).item()
        };
        let idn = eval2(&a, &b, |g, x, y| loss_stage(g, x, y, &LossConfig::default()));
        assert!((total(0.0) - idn).abs() < 1e-12);
        let (l0, l1, l2) = (total(0.0), total(1.0), total(2.0));
        assert!(((l2 - l1) - (l1 - l0)).abs() < 1e-12);
    }

    // Direct transcription of the per-stage loss with explicit loops.
    fn brute_stage(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let (_, c, h, w) = x.dims4().unwrap();
        let (xs, ys) = (x.data(), y.data());
        let eps = 1e-3;
        let charb = xs.iter().zip(ys).map(|(a, b)| ((a - b).powi(2) + eps * eps).sqrt()).sum::<f64>() / xs.len() as f64;
        let k = 11;
        let mut gauss = [0.0; 11];
        for (i, gv) in gauss.iter_mut().enumerate() {
            *gv = (-((i as f64 - 5.0).powi(2)) / 4.5).exp();
        }
        let s: f64 = gauss.iter().sum();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for oy in 0..=h - k {
                for ox in 0..=w - k {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let wgt = gauss[dy] * gauss[dx] / (s * s);
                            let i = ch * h * w + (oy + dy) * w + ox + dx;
                            mx += wgt * xs[i];
                            my += wgt * ys[i];
                            sxx += wgt * xs[i] * xs[i];
                            syy += wgt * ys[i] * ys[i];
                            sxy += wgt * xs[i] * ys[i];
                        }
                    }
                    let (vx, vy, cv) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        charb - 0.15 * total / count as f64
    }

    #[test]
    fn total_matches_brute_force_transcription() {
        let (a, b, c, d) = (
            random(&[1, 3, 12, 13], 5),
            random(&[1, 3, 12, 13], 6),
            random(&[1, 2, 16, 14], 7),
            random(&[1, 2, 16, 14], 8),
        );
        let mut g = Graph::new();
        let v: Vec<Var> = [&a, &b, &c, &d].iter().map(|t| g.leaf((*t).clone())).collect();
        let l = loss_total(&mut g, v[0], v[1], v[2], v[3], &LossConfig::default()).unwrap();
        let expected = brute_stage(&a, &b) + brute_stage(&c, &d);
        assert!((g.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
        let b = Tensor::full(vec![1, 3, 4, 4], 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        assert!(psnr(&a, &Tensor::ones(vec![1, 3, 4, 4])).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let gt = random(&[1, 3, 8, 8], 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise: Vec<f64> = (0..gt.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = Tensor::from_vec(
                gt.shape().to_vec(),
                gt.data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect(),
            )
            .unwrap();
            let p = psnr(&noisy, &gt).unwrap();
            assert!(p < last);
            last = p;
        }
    }
}
