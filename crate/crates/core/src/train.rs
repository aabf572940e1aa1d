//! Cyclic multi-scale training: one of the three scale losses per iteration,
//! Adam with step-wise halving, CSV logging, validation and resumable state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{crop_to, pad_reflect, sample_patch, stack, PairedDataset};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{psnr, ssim, SSIM_WINDOW};
use crate::net::{MultiScaleOutput, Network, SCALES};
use crate::param::{ParamStore, RngState};
use crate::tensor::{Real, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.omck";
pub const SUMMARY_FILE: &str = "summary.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub patch: usize,
    pub total_iters: usize,
    /// Iterations at which the learning rate halves. Empty means 60% and 80%
    /// of `total_iters`.
    pub lr_halving_milestones: Vec<usize>,
    pub seed: u64,
    pub hflip: bool,
    /// 0 validates only after the last iteration.
    pub validate_every: usize,
    /// Validation images used; 0 means all.
    pub validate_limit: usize,
    /// 0 writes the checkpoint only after the last iteration.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            patch: 128,
            total_iters: 1000,
            lr_halving_milestones: Vec::new(),
            seed: 0,
            hflip: true,
            validate_every: 0,
            validate_limit: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("train.{k} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps <= 0.0 {
            return bad(format!("train.adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.patch == 0 || self.patch % 4 != 0 {
            return bad(format!("train.patch must be a positive multiple of 4, got {}", self.patch));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        if self.lr_halving_milestones.is_empty() {
            vec![self.total_iters * 3 / 5, self.total_iters * 4 / 5]
        } else {
            self.lr_halving_milestones.clone()
        }
    }

    /// Learning rate in effect at iteration `k`.
    pub fn lr_at(&self, k: usize) -> f64 {
        let halvings = self.milestones().iter().filter(|&&m| k >= m).count();
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }
}

/// Scale index optimized at iteration `k`: 0 → full, 1 → half, 2 → quarter.
pub fn selected_scale(k: usize) -> usize {
    k % SCALES
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    pub k: usize,
    /// Adam first moments, indexed like the parameter store.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Per-parameter Adam step counts; parameters without a gradient are skipped.
    pub steps: Vec<u64>,
    pub rng: RngState,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: usize,
    pub best: Option<BestMetrics>,
}

impl<T: Real> TrainState<T> {
    pub fn new(ps: &ParamStore<T>, rng: RngState) -> Self {
        let zeros = || ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect::<Vec<_>>();
        Self {
            k: 0,
            m: zeros(),
            v: zeros(),
            steps: vec![0; ps.len()],
            rng,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            best: None,
        }
    }

    /// Next `n` dataset indices, reshuffling whenever the epoch runs out.
    pub fn next_indices(&mut self, n_pairs: usize, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor >= self.order.len() {
                self.order = (0..n_pairs).collect();
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Serializes parameters, moments and loop state.
    pub fn to_checkpoint(&self, ps: &ParamStore<T>) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_params(ps);
        for (i, (_, p)) in ps.iter().enumerate() {
            ck.push(format!("adam.m/{}", p.name), &self.m[i]);
            ck.push(format!("adam.v/{}", p.name), &self.v[i]);
        }
        let join = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(",");
        ck.set_meta("train.k", self.k);
        ck.set_meta("train.steps", join(&mut self.steps.iter().map(u64::to_string)));
        ck.set_meta("train.rng_seed", self.rng.seed());
        ck.set_meta("train.rng_word_pos", self.rng.word_pos());
        ck.set_meta("train.rng_algorithm", self.rng.algorithm());
        ck.set_meta("train.order", join(&mut self.order.iter().map(usize::to_string)));
        ck.set_meta("train.cursor", self.cursor);
        ck.set_meta("train.epoch", self.epoch);
        if let Some(b) = self.best {
            ck.set_meta("train.best_psnr", b.psnr_db);
            ck.set_meta("train.best_ssim", b.ssim);
            ck.set_meta("train.best_iteration", b.iteration);
        }
        ck
    }

    /// Restores parameters and loop state written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, ps: &mut ParamStore<T>) -> Result<Self> {
        ck.load_params(ps)?;
        let algo = ck.meta("train.rng_algorithm")?;
        if algo != RngState::ALGORITHM {
            return Err(Error::Checkpoint(format!("unsupported rng `{algo}`")));
        }
        let rng = RngState::restore(ck.meta_parsed("train.rng_seed")?, ck.meta_parsed("train.rng_word_pos")?);
        let mut st = Self::new(ps, rng);
        for (i, (_, p)) in ps.iter().enumerate() {
            for (slot, prefix) in [(&mut st.m[i], "adam.m/"), (&mut st.v[i], "adam.v/")] {
                let name = format!("{prefix}{}", p.name);
                let r = ck.record(&name).ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
                let t = r.to_tensor::<T>()?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("`{name}` has shape {:?}", t.shape())));
                }
                *slot = t;
            }
        }
        let list = |key: &str| -> Result<Vec<u64>> {
            let s = ck.meta(key)?;
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|x| x.parse().map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}"))))
                .collect()
        };
        st.steps = list("train.steps")?;
        if st.steps.len() != ps.len() {
            return Err(Error::Checkpoint("train.steps length differs from parameter count".into()));
        }
        st.order = list("train.order")?.into_iter().map(|x| x as usize).collect();
        st.k = ck.meta_parsed("train.k")?;
        st.cursor = ck.meta_parsed("train.cursor")?;
        st.epoch = ck.meta_parsed("train.epoch")?;
        if ck.meta.contains_key("train.best_psnr") {
            st.best = Some(BestMetrics {
                psnr_db: ck.meta_parsed("train.best_psnr")?,
                ssim: ck.meta_parsed("train.best_ssim")?,
                iteration: ck.meta_parsed("train.best_iteration")?,
            });
        }
        Ok(st)
    }
}

/// Area-mean pyramid `[G, G/2, G/4]` of `[B, 3, H, W]` ground truth.
pub fn downsample_gt<T: Real>(gt: &Tensor<T>) -> Result<[Tensor<T>; SCALES]> {
    let (b, c, h, w) = match *gt.shape() {
        [b, c, h, w] => (b, c, h, w),
        ref s => return Err(dim_err("downsample_gt", s, &[0, 3, 0, 0])),
    };
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "ground truth extents must be positive and divisible by 4, got {h}x{w}"
        )));
    }
    let half = |t: &Tensor<T>, h: usize, w: usize| {
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        Tensor::from_fn(vec![b, c, ho, wo], |i| {
            let (p, y, x) = (i / (ho * wo), (i / wo) % ho, i % wo);
            let base = p * h * w + 2 * y * w + 2 * x;
            let d = t.data();
            (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]) * quarter
        })
    };
    let g2 = half(gt, h, w);
    let g4 = half(&g2, h / 2, w / 2);
    Ok([gt.clone(), g2, g4])
}

/// Mean absolute error between the fused output and the ground truth at the
/// scale selected by `k`. Returns the loss node and the scale index.
pub fn cms_loss<T: Real>(g: &mut Graph<T>, out: &MultiScaleOutput, gts: &[Var], k: usize) -> Result<(Var, usize)> {
    if gts.len() != SCALES {
        return Err(Error::Precondition {
            op: "cms_loss",
            msg: format!("expected {SCALES} ground-truth scales, got {}", gts.len()),
        });
    }
    for (i, &v) in out.s.iter().chain(&out.c).chain(gts).enumerate() {
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite {
                op: format!("cms_loss input {i}"),
            });
        }
    }
    for i in 0..SCALES {
        let (a, b) = (g.shape(out.fused[i]), g.shape(gts[i]));
        if a != b {
            return Err(dim_err("cms_loss", a, b));
        }
    }
    let s = selected_scale(k);
    let d = g.sub(gts[s], out.fused[s])?;
    let a = g.abs(d)?;
    Ok((g.mean(a)?, s))
}

/// One Adam update from the gradients stored in `ps`, at the learning rate
/// of iteration `state.k`. Parameters without a gradient are left untouched.
/// Any non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Real>(ps: &mut ParamStore<T>, state: &mut TrainState<T>, cfg: &TrainConfig) -> Result<()> {
    for (_, p) in ps.iter() {
        if p.grad.as_ref().is_some_and(|g| !g.all_finite()) {
            return Err(Error::NonFiniteGradient { name: p.name.clone() });
        }
    }
    let lr = cfg.lr_at(state.k);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, eps) = (T::one(), T::of(cfg.adam_eps));
    for (i, p) in ps.iter_mut().enumerate() {
        let Some(grad) = p.grad.as_ref().filter(|_| p.trainable) else { continue };
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let step = T::of(lr);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= step * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub scale: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Forward, CMS loss, backward and Adam on one batch. Increments `state.k`.
pub fn train_step<T: Real>(
    net: &Network,
    ps: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    input: Tensor<T>,
    target: &Tensor<T>,
) -> Result<StepRecord> {
    let gts = downsample_gt(target)?;
    let mut g = Graph::new();
    let x = g.constant(input);
    let out = net.forward(&mut g, ps, x)?;
    let gt_vars: Vec<Var> = gts.into_iter().map(|t| g.constant(t)).collect();
    let (loss, scale) = cms_loss(&mut g, &out, &gt_vars, state.k)?;
    let grads = g.backward(loss)?;
    ps.zero_grads();
    g.accumulate_param_grads(&grads, ps);
    let rec = StepRecord {
        iteration: state.k,
        scale,
        loss: g.value(loss).item().as_f64(),
        lr: cfg.lr_at(state.k),
    };
    adam_step(ps, state, cfg)?;
    state.k += 1;
    Ok(rec)
}

/// Draws the next training batch as `[B, 3, P, P]` input and target tensors.
pub fn next_batch<T: Real>(ds: &PairedDataset, state: &mut TrainState<T>, cfg: &TrainConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    let idx = state.next_indices(ds.pairs.len(), cfg.batch_size);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in idx {
        let (x, y, _) = sample_patch(&ds.pairs[i], cfg.patch, cfg.hflip, &mut state.rng);
        xs.push(x);
        ys.push(y);
    }
    Ok((stack(&xs)?, stack(&ys)?))
}

/// Full-image inference: reflect-pads to a multiple of 4, runs the network,
/// and crops the full-scale fused output back.
pub fn enhance<T: Real>(net: &Network, ps: &ParamStore<T>, image: &Tensor<f32>) -> Result<Tensor<T>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let padded = pad_reflect(&image.cast::<T>(), 4)?;
    let batch = padded.reshape(vec![1, 3, padded.shape()[1], padded.shape()[2]])?;
    let [full, _, _] = net.predict(ps, &batch)?;
    let full = full.reshape(full.shape()[1..].to_vec())?;
    Ok(crop_to(&full, h, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// PSNR and SSIM of the clamped enhanced outputs against the targets.
pub fn evaluate<T: Real>(net: &Network, ps: &ParamStore<T>, ds: &PairedDataset, limit: usize) -> Result<Vec<ImageScore>> {
    let n = if limit == 0 { ds.pairs.len() } else { limit.min(ds.pairs.len()) };
    ds.pairs[..n]
        .iter()
        .map(|p| {
            let out = enhance(net, ps, &p.input)?.map(|v| v.max(T::zero()).min(T::one()));
            score(&p.name, &out, &p.target.cast())
        })
        .collect()
}

pub fn score<T: Real>(name: &str, out: &Tensor<T>, target: &Tensor<T>) -> Result<ImageScore> {
    let (h, w) = (target.shape()[1], target.shape()[2]);
    let ssim = if h >= SSIM_WINDOW && w >= SSIM_WINDOW { ssim(out, target)? } else { f64::NAN };
    Ok(ImageScore {
        name: name.to_string(),
        psnr_db: psnr(out, target)?,
        ssim,
    })
}

pub fn mean_scores(scores: &[ImageScore]) -> (f64, f64) {
    let n = scores.len().max(1) as f64;
    (
        scores.iter().map(|s| s.psnr_db).sum::<f64>() / n,
        scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: f64,
    pub best_psnr_db: Option<f64>,
    pub best_ssim: Option<f64>,
    pub best_iteration: Option<usize>,
    pub wall_seconds: f64,
}

/// Where the loop writes its artifacts, plus checkpoint metadata to embed.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub dir: Option<PathBuf>,
    pub meta: Vec<(String, String)>,
    /// Include the wall-clock column in the metrics log.
    pub wall_time: bool,
}

impl RunOutputs {
    fn path(&self, file: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(file))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

fn open_log(path: &Path, header: &[&str], append: bool) -> Result<csv::Writer<std::fs::File>> {
    let exists = append && path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(exists)
        .write(true)
        .truncate(!exists)
        .open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(header).map_err(|e| csv_err(path, e))?;
        w.flush()?;
    }
    Ok(w)
}

/// Runs iterations `state.k .. cfg.total_iters`, logging each step, validating
/// and checkpointing as configured. Resumed runs append to existing logs.
pub fn train_loop<T: Real>(
    net: &Network,
    ps: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    train: &PairedDataset,
    val: Option<&PairedDataset>,
    cfg: &TrainConfig,
    out: &RunOutputs,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.pairs.is_empty() {
        return Err(Error::Dataset {
            path: train.root.join(&train.split),
            msg: "no training pairs".into(),
        });
    }
    if let Some(d) = &out.dir {
        std::fs::create_dir_all(d)?;
    }
    let resumed = state.k > 0;
    let mut header = vec!["iteration", "selected_scale", "loss", "lr"];
    if out.wall_time {
        header.push("wall_ms");
    }
    let metrics_path = out.path(METRICS_FILE);
    let mut log = metrics_path.as_deref().map(|p| open_log(p, &header, resumed)).transpose()?;
    let val_path = out.path(VALIDATION_FILE);
    let mut val_log = match (val, &val_path) {
        (Some(_), Some(p)) => Some(open_log(p, &["iteration", "psnr_db", "ssim"], resumed)?),
        _ => None,
    };

    let started = Instant::now();
    let mut final_loss = f64::NAN;
    while state.k < cfg.total_iters {
        let t0 = Instant::now();
        let (x, y) = next_batch(train, state, cfg)?;
        let rec = train_step(net, ps, state, cfg, x, &y)?;
        final_loss = rec.loss;
        if let (Some(w), Some(p)) = (&mut log, &metrics_path) {
            let mut row = vec![
                rec.iteration.to_string(),
                (1usize << rec.scale).to_string(),
                rec.loss.to_string(),
                rec.lr.to_string(),
            ];
            if out.wall_time {
                row.push(format!("{:.3}", t0.elapsed().as_secs_f64() * 1e3));
            }
            w.write_record(&row).map_err(|e| csv_err(p, e))?;
            w.flush()?;
        }
        if rec.iteration % 50 == 0 {
            log::info!("iter {} scale 1/{} loss {:.5} lr {:.2e}", rec.iteration, 1 << rec.scale, rec.loss, rec.lr);
        }

        let last = state.k == cfg.total_iters;
        if let Some(v) = val {
            if last || (cfg.validate_every > 0 && state.k % cfg.validate_every == 0) {
                let scores = evaluate(net, ps, v, cfg.validate_limit)?;
                let (p, s) = mean_scores(&scores);
                log::info!("validation at {}: psnr {p:.3} dB ssim {s:.4}", state.k);
                if state.best.is_none_or(|b| p > b.psnr_db) {
                    state.best = Some(BestMetrics {
                        psnr_db: p,
                        ssim: s,
                        iteration: state.k,
                    });
                }
                if let (Some(w), Some(path)) = (&mut val_log, &val_path) {
                    w.write_record([state.k.to_string(), p.to_string(), s.to_string()])
                        .map_err(|e| csv_err(path, e))?;
                    w.flush()?;
                }
            }
        }
        if let Some(path) = out.path(CHECKPOINT_FILE) {
            if last || (cfg.checkpoint_every > 0 && state.k % cfg.checkpoint_every == 0) {
                let mut ck = state.to_checkpoint(ps);
                for (k, v) in &out.meta {
                    ck.set_meta(k, v);
                }
                ck.save(&path)?;
            }
        }
    }

    let summary = TrainSummary {
        iterations: state.k,
        final_loss,
        best_psnr_db: state.best.map(|b| b.psnr_db),
        best_ssim: state.best.map(|b| b.ssim),
        best_iteration: state.best.map(|b| b.iteration),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(p) = out.path(SUMMARY_FILE) {
        let text = toml::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(p, text)?;
    }
    Ok(summary)
}
