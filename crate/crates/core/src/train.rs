//! Adam, the learning-rate schedule, the training loop and evaluation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph};
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::kernels::resize::resize_forward;
use crate::losses::{loss_total, psnr, ssim_value, LossConfig};
use crate::model::ElfModel;
use crate::nn::ParameterStore;
use crate::synth::{augment, crop_patch, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterStore<f32>,
    pub v: ParameterStore<f32>,
    pub t: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParameterStore<f32>) -> Self {
        let mut zeros = params.clone();
        let names: Vec<String> = zeros.names().map(String::from).collect();
        for n in &names {
            zeros.fill(n, 0.0).expect("name comes from the store");
        }
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient.
pub fn adam_step(params: &mut ParameterStore<f32>, grads: &Gradients<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    let by_name: HashMap<&str, &Tensor<f32>> = grads.named().collect();
    for (name, g) in &by_name {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient((*name).to_string()));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1 as f32, state.beta2 as f32);
    let (nb1, nb2) = ((1.0 - state.beta1) as f32, (1.0 - state.beta2) as f32);
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    let step = (lr / c1) as f32;
    let sqrt_c2 = c2.sqrt() as f32;
    let eps = state.eps as f32;

    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let p = params.get(name).expect("listed name");
        let g = by_name.get(name.as_str()).copied();
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        let mut p = p.clone();
        let mut m = state.m.get(name).cloned().ok_or_else(|| Error::Config(format!("no moment for `{name}`")))?;
        let mut v = state.v.get(name).cloned().ok_or_else(|| Error::Config(format!("no moment for `{name}`")))?;
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = b1 * md[i] + nb1 * gi;
                vd[i] = b2 * vd[i] + nb2 * gi * gi;
                pd[i] -= step * md[i] / (vd[i].sqrt() / sqrt_c2 + eps);
            }
        }
        params.set(name, p)?;
        state.m.set(name, m)?;
        state.v.set(name, v)?;
    }
    Ok(())
}

/// `base_lr · decay^⌊epoch / interval⌋`.
pub fn lr_at_epoch(epoch: usize, base_lr: f64, decay: f64, interval: usize) -> f64 {
    base_lr * decay.powi((epoch / interval.max(1)) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_interval: usize,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            max_steps: None,
            batch: 12,
            patch: 256,
            seed: 0,
            base_lr: 2e-4,
            lr_decay: 0.8,
            lr_interval: 65,
            checkpoint_every: 10,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(self.lr_decay > 0.0) || self.lr_interval == 0 {
            return Err(Error::Config("lr decay must be positive and its interval non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Decimal with nine significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

impl LogRow {
    pub const HEADER: &'static str = "epoch,step,loss,lr";

    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.step, sig9(self.loss), sig9(self.lr))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub adam: AdamState,
    pub epochs_completed: usize,
    /// Epoch and restored PSNR of the best validation pass, if any ran.
    pub best: Option<(usize, f64)>,
}

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn batch_of(images: &[&Tensor]) -> Result<Tensor> {
    let owned: Vec<Tensor> = images.iter().map(|t| (*t).clone()).collect();
    Tensor::stack(&owned)
}

/// Bilinear ×(1/s) of an `[N, 3, H, W]` batch.
pub fn subsample_batch(x: &Tensor, s: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if s == 1 {
        return Ok(x.clone());
    }
    Tensor::from_vec(
        vec![n, c, h / s, w / s],
        resize_forward(x.data(), n * c, (h, w), (h / s, w / s)),
    )
}

/// One optimizer step on a prepared batch. Returns the loss.
pub fn train_step(
    model: &mut ElfModel,
    adam: &mut AdamState,
    loss_cfg: &LossConfig,
    degraded: &Tensor,
    clean: &Tensor,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, loss_cfg, degraded, clean)?;
    adam_step(&mut model.params, &grads, adam, lr)?;
    Ok(loss)
}

/// Joint loss of both stages and its gradients, without updating.
pub fn loss_and_grads(
    model: &ElfModel,
    loss_cfg: &LossConfig,
    degraded: &Tensor,
    clean: &Tensor,
) -> Result<(f64, Gradients<f32>)> {
    let s = model.config().effective_subsample();
    let clean_sub = subsample_batch(clean, s)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(degraded.clone());
    let gt = g.constant(clean.clone());
    let gt_sub = g.constant(clean_sub);
    let out = model.net.forward(&mut g, &p, x)?;
    let loss = loss_total(&mut g, out.derained_sub, gt_sub, out.restored_full, gt, loss_cfg)?;
    let value = g.value(loss).item() as f64;
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

fn nonfinite_as_loss(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, step },
        other => other,
    }
}

/// Runs the epoch loop. Each epoch visits the dataset in a seeded shuffled
/// order, one random crop and flip per sample. Checkpoints go to
/// `epoch_NNNN.ckpt` and `last.ckpt`; a non-finite loss aborts without
/// touching them.
pub fn run_training(
    model: &mut ElfModel,
    data: &[Sample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainReport> {
    run_training_validated(model, data, &[], cfg, loss_cfg)
}

/// As [`run_training`], additionally evaluating on `validation` after every
/// epoch and keeping the best restored PSNR in `best.ckpt`.
pub fn run_training_validated(
    model: &mut ElfModel,
    data: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let multiple = model.config().required_multiple();
    if !cfg.patch.is_multiple_of(multiple) {
        return Err(Error::Config(format!("patch {} must be a multiple of {multiple}", cfg.patch)));
    }
    let mut log_file = match &cfg.log_path {
        Some(path) => {
            let f = File::create(path).map_err(|e| Error::file(path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", LogRow::HEADER)?;
            Some(w)
        }
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut log = Vec::new();
    let mut step = 0;
    let mut epochs_completed = 0;
    let mut best: Option<(usize, f64)> = None;
    let batch = cfg.batch.min(data.len());
    let steps_per_epoch = data.len() / batch;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.base_lr, cfg.lr_decay, cfg.lr_interval);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(batch).take(steps_per_epoch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut clean = Vec::with_capacity(batch);
            let mut degraded = Vec::with_capacity(batch);
            for &i in chunk {
                let s = crop_patch(&data[i], cfg.patch, multiple, &mut rng)?;
                let s = augment(&s, &mut rng);
                clean.push(s.clean);
                degraded.push(s.degraded);
            }
            let clean = Tensor::stack(&clean)?;
            let degraded = Tensor::stack(&degraded)?;
            let loss = train_step(model, &mut adam, loss_cfg, &degraded, &clean, lr)
                .map_err(|e| nonfinite_as_loss(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let row = LogRow { epoch, step, loss, lr };
            if let Some(w) = log_file.as_mut() {
                writeln!(w, "{}", row.csv())?;
            }
            log.push(row);
            step += 1;
        }
        epochs_completed = epoch + 1;
        if let Some(dir) = &cfg.checkpoint_dir {
            let every = cfg.checkpoint_every.max(1);
            if epochs_completed % every == 0 || epochs_completed == cfg.epochs {
                let path = dir.join(format!("epoch_{epochs_completed:04}.ckpt"));
                save_checkpoint(&model.params, Some(&adam), epochs_completed as u32, &path)?;
            }
        }
        if !validation.is_empty() {
            let psnr = evaluate(model, validation)?.restored_psnr;
            if best.is_none_or(|(_, b)| psnr > b) {
                best = Some((epochs_completed, psnr));
                if let Some(dir) = &cfg.checkpoint_dir {
                    save_checkpoint(&model.params, Some(&adam), epochs_completed as u32, &dir.join("best.ckpt"))?;
                }
            }
        }
    }
    if let Some(w) = log_file.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(&model.params, Some(&adam), epochs_completed as u32, &dir.join("last.ckpt"))?;
    }
    Ok(TrainReport {
        log,
        adam,
        epochs_completed,
        best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub restored_psnr: f64,
    pub restored_ssim: f64,
    pub degraded_psnr: f64,
    pub degraded_ssim: f64,
    pub count: usize,
}

/// Mean PSNR and SSIM over aligned `[3, H, W]` pairs.
pub fn mean_metrics(pairs: &[(&Tensor, &Tensor)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for (pred, gt) in pairs {
        let to4 = |t: &Tensor| -> Result<Tensor> {
            match *t.shape() {
                [c, h, w] => t.reshape(vec![1, c, h, w]),
                _ => Ok((*t).clone()),
            }
        };
        let (a, b) = (to4(pred)?, to4(gt)?);
        p += psnr(&a, &b)?;
        s += ssim_value(&a, &b)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}

/// Restores every sample with clipping and compares both the restored and
/// the raw degraded image against the clean one.
pub fn evaluate(model: &ElfModel, data: &[Sample]) -> Result<EvalReport> {
    let mut restored = Vec::with_capacity(data.len());
    for s in data {
        let (_, h, w) = match *s.degraded.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::invalid("evaluate", "samples must be [3, H, W]")),
        };
        let x = s.degraded.reshape(vec![1, 3, h, w])?;
        let out = model.predict(&x)?;
        restored.push(out.restored_full.reshape(vec![3, h, w])?);
    }
    let rp: Vec<(&Tensor, &Tensor)> = restored.iter().zip(data).map(|(r, s)| (r, &s.clean)).collect();
    let dp: Vec<(&Tensor, &Tensor)> = data.iter().map(|s| (&s.degraded, &s.clean)).collect();
    let (restored_psnr, restored_ssim) = mean_metrics(&rp)?;
    let (degraded_psnr, degraded_ssim) = mean_metrics(&dp)?;
    Ok(EvalReport {
        restored_psnr,
        restored_ssim,
        degraded_psnr,
        degraded_ssim,
        count: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ElfConfig};
    use crate::nn::Init;
    use crate::synth::{generate_sample, DegradationSpec};

    fn store(values: &[f32]) -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.register("w", &[values.len()], Init::Zeros, &mut rng).unwrap();
        s.set("w", Tensor::from_vec(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    fn grads_for(params: &ParameterStore<f32>, g: &[f32]) -> Gradients<f32> {
        let mut graph = Graph::new();
        let w = graph.param("w", params.get("w").unwrap().clone());
        let c = graph.constant(Tensor::from_vec(vec![g.len()], g.to_vec()).unwrap());
        let prod = graph.mul(w, c).unwrap();
        let loss = graph.sum_all(prod).unwrap();
        graph.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[0.5, -1.0]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = grads_for(&p, &[0.0, 0.0]);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let g = grads_for(&p, &[1.0, -3.0, 0.25]);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 1e-3).abs() < 1e-8);
        assert!((w[1] - 1e-3).abs() < 1e-8);
        assert!((w[2] + 1e-3).abs() < 1e-8);
    }

    #[test]
    fn doubling_lr_doubles_the_first_update() {
        let run = |lr: f64| {
            let mut p = store(&[0.0, 0.0]);
            let mut st = AdamState::new(&p);
            let g = grads_for(&p, &[0.3, -0.7]);
            adam_step(&mut p, &g, &mut st, lr).unwrap();
            p.get("w").unwrap().data().to_vec()
        };
        let (a, b) = (run(1e-3), run(2e-3));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        let mut graph = Graph::new().without_finite_checks();
        let w = graph.param("w", p.get("w").unwrap().clone());
        let c = graph.constant(Tensor::from_vec(vec![1], vec![f32::NAN]).unwrap());
        let prod = graph.mul(w, c).unwrap();
        let loss = graph.sum_all(prod).unwrap();
        let g = graph.backward(loss).unwrap();
        let err = adam_step(&mut p, &g, &mut st, 1e-3).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at_epoch(0, 2e-4, 0.8, 65), 2e-4);
        assert!((lr_at_epoch(64, 2e-4, 0.8, 65) - 2e-4).abs() < 1e-18);
        assert!((lr_at_epoch(65, 2e-4, 0.8, 65) - 1.6e-4).abs() < 1e-15);
        assert!((lr_at_epoch(130, 2e-4, 0.8, 65) - 1.28e-4).abs() < 1e-15);
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(-0.149), "-0.149000000");
        assert_eq!(sig9(2e-4), "0.000200000000");
        assert_eq!(sig9(12.5), "12.5000000");
        let row = LogRow {
            epoch: 1,
            step: 7,
            loss: 0.5,
            lr: 1.6e-4,
        };
        assert_eq!(row.csv(), "1,7,0.500000000,0.000160000000");
    }

    fn small_set(n: usize, size: usize, offset: u64) -> Vec<Sample> {
        (0..n)
            .map(|i| generate_sample(size, offset + i as u64, &DegradationSpec::default()).unwrap())
            .collect()
    }

    #[test]
    fn idn_only_loss_never_reaches_the_brn() {
        let cfg = ElfConfig {
            use_mam: false,
            lambda: 0.0,
            ..ElfConfig::tiny()
        };
        let model = build_model(&cfg, 1).unwrap();
        let data = small_set(2, 32, 0);
        let x = batch_of(&[&data[0].degraded, &data[1].degraded]).unwrap();
        let y = batch_of(&[&data[0].clean, &data[1].clean]).unwrap();
        let (_, grads) = loss_and_grads(&model, &LossConfig::from(&cfg), &x, &y).unwrap();
        for (name, g) in grads.named() {
            if name.starts_with("brn.") || name.starts_with("background_embed.") {
                assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(grads.named().any(|(n, g)| n.starts_with("idn.") && g.max_abs() > 0.0));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        // zero-mean batches with a random offset, so the sign of each pooled
        // channel statistic varies between batches
        use rand::Rng;
        // at width 4 the two-unit squeeze layers can start fully rectified, so
        // use width 8
        let cfg = ElfConfig {
            base_channels: 8,
            heads: 2,
            ..ElfConfig::tiny()
        };
        let model = build_model(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut touched: HashMap<String, bool> = model.params.names().map(|n| (n.to_string(), false)).collect();
        for _ in 0..10 {
            let offset = rng.gen_range(-1.0f32..1.0);
            let mut random = || {
                let data = (0..2 * 3 * 32 * 32).map(|_| offset + rng.gen_range(-1.0f32..1.0)).collect();
                Tensor::from_vec(vec![2, 3, 32, 32], data).unwrap()
            };
            let x = random();
            let y = random();
            let (_, grads) = loss_and_grads(&model, &LossConfig::from(&cfg), &x, &y).unwrap();
            for (name, g) in grads.named() {
                if g.max_abs() > 0.0 {
                    touched.insert(name.to_string(), true);
                }
            }
        }
        let dead: Vec<_> = touched.iter().filter(|(_, &t)| !t).map(|(n, _)| n.clone()).collect();
        assert!(dead.is_empty(), "{dead:?}");
    }

    #[test]
    fn training_is_deterministic_and_logs_csv() {
        let data = small_set(4, 32, 200);
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str| {
            let mut model = build_model(&ElfConfig::tiny(), 3).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                batch: 2,
                patch: 32,
                seed: 5,
                log_path: Some(dir.path().join(name)),
                checkpoint_dir: Some(dir.path().join(format!("{name}_ckpt"))),
                checkpoint_every: 1,
                ..TrainConfig::default()
            };
            let report = run_training(&mut model, &data, &cfg, &LossConfig::default()).unwrap();
            (report, std::fs::read_to_string(dir.path().join(name)).unwrap(), model)
        };
        let (a, log_a, model_a) = run("a.csv");
        let (b, log_b, model_b) = run("b.csv");
        assert_eq!(a.log, b.log);
        assert_eq!(log_a, log_b);
        assert_eq!(model_a.params, model_b.params);
        assert_eq!(a.log.len(), 4);
        assert!(log_a.starts_with("epoch,step,loss,lr\n0,0,"));
        assert!(dir.path().join("a.csv_ckpt/epoch_0002.ckpt").exists());
        assert!(dir.path().join("a.csv_ckpt/last.ckpt").exists());
    }

    #[test]
    fn validation_keeps_best_checkpoint() {
        let data = small_set(2, 32, 400);
        let val = small_set(2, 32, 500);
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model(&ElfConfig::tiny(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch: 2,
            patch: 32,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let report = run_training_validated(&mut model, &data, &val, &cfg, &LossConfig::default()).unwrap();
        let (epoch, psnr) = report.best.unwrap();
        assert!((1..=3).contains(&epoch));
        assert!(psnr.is_finite());
        let restored = crate::checkpoint::load_checkpoint(&dir.path().join("best.ckpt"), &model).unwrap();
        assert_eq!(restored.epoch, epoch as u32);
        assert!(run_training(&mut model, &data, &cfg, &LossConfig::default()).unwrap().best.is_none());
    }

    #[test]
    fn evaluating_clean_against_clean() {
        let data: Vec<Sample> = small_set(2, 32, 300)
            .into_iter()
            .map(|s| Sample {
                degraded: s.clean.clone(),
                ..s
            })
            .collect();
        let pairs: Vec<(&Tensor, &Tensor)> = data.iter().map(|s| (&s.clean, &s.clean)).collect();
        let (p, s) = mean_metrics(&pairs).unwrap();
        assert_eq!(p, f64::INFINITY);
        assert!((s - 1.0).abs() < 1e-12);
        let model = build_model(&ElfConfig::tiny(), 0).unwrap();
        let a = evaluate(&model, &data).unwrap();
        assert_eq!(a, evaluate(&model, &data).unwrap());
        assert_eq!(a.degraded_psnr, f64::INFINITY);
    }
}
