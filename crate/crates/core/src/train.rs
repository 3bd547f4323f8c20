//! Adam, the triangular cyclic learning rate, expert pre-training and gate
//! training with frozen experts.

use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tape, Var};
use crate::dataset::{Pair, PairSet};
use crate::error::{Error, Result};
use crate::expert::{Expert, TaskTag};
use crate::gating::DanNet;
use crate::loss::{total_loss, LossConfig};
use crate::metrics::psnr;
use crate::params::{Bound, ParamStore};
use crate::scalar::Real;
use crate::synth::{Mode, Transform};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Iterations from `base_lr` up to `max_lr`; a full triangle is twice this.
    pub step_size: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub patch_size: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Validation PSNR is logged every this many iterations (0 disables).
    pub val_every: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            max_lr: 3e-4,
            step_size: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            iterations: 200,
            patch_size: 32,
            loss: LossConfig::default(),
            seed: 0,
            val_every: 50,
            augment: true,
        }
    }
}

/// Frozen-parameter checksums are compared this often during gate training.
pub const FREEZE_CHECK_EVERY: u64 = 50;

impl TrainConfig {
    /// Defaults with the 4000-iteration triangle shrunk to fit `iterations`.
    pub fn for_iterations(iterations: u64) -> Self {
        Self {
            iterations,
            step_size: (iterations / 2).clamp(1, 2000),
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("TrainConfig", d));
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr && self.max_lr.is_finite()) {
            return bad(format!("need 0 < base_lr {} <= max_lr {}", self.base_lr, self.max_lr));
        }
        if self.step_size == 0 || self.batch_size == 0 {
            return bad("step_size and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad(format!("adam betas ({}, {}) / eps {}", self.beta1, self.beta2, self.eps));
        }
        if self.patch_size < 32 || !self.patch_size.is_power_of_two() {
            return bad(format!("patch_size {} must be a power of two >= 32", self.patch_size));
        }
        self.loss.validate()
    }

    /// One-line summary of every setting.
    pub fn summary(&self) -> String {
        format!(
            "lr {:e}..{:e} triangular step {} | adam ({}, {}, {:e}) | batch {} iters {} patch {} | \
             epsilon {:e} lambda_st {} | seed {} val_every {} augment {}",
            self.base_lr,
            self.max_lr,
            self.step_size,
            self.beta1,
            self.beta2,
            self.eps,
            self.batch_size,
            self.iterations,
            self.patch_size,
            self.loss.epsilon,
            self.loss.lambda_st,
            self.seed,
            self.val_every,
            self.augment
        )
    }
}

/// Triangular schedule: `base_lr` at multiples of `2·step_size`, `max_lr`
/// half way, linear in between and no decay across cycles.
pub fn cyclic_lr(iteration: u64, cfg: &TrainConfig) -> f64 {
    let cycle = 2 * cfg.step_size;
    let pos = iteration % cycle;
    let dist = pos.min(cycle - pos);
    let f = dist as f64 / cfg.step_size as f64;
    cfg.base_lr * (1.0 - f) + cfg.max_lr * f
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn restore(store: &ParamStore<T>, cfg: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        let fits = |ms: &[Tensor<T>]| ms.len() == store.len() && ms.iter().zip(store.iter()).all(|(a, (_, p))| a.shape() == p.shape());
        if !fits(&m) || !fits(&v) {
            return Err(Error::Checkpoint("optimiser moments do not match the parameters".into()));
        }
        Ok(Self { cfg, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update. A non-finite gradient rejects the whole step, leaving
    /// parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid("adam_step", format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        for (g, m) in grads.iter().zip(&self.m) {
            if g.shape() != m.shape() {
                return Err(Error::shape("adam_step", format!("gradient {:?} vs parameter {:?}", g.shape(), m.shape())));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            warn!("adam step {} rejected: non-finite gradient for {}", self.step + 1, store.names()[i]);
            return Err(Error::NonFinite { op: "adam_step" });
        }
        self.step += 1;
        let AdamConfig { beta1: b1, beta2: b2, eps } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let g = grads[k].data()[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                *pv = T::lit(pv.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iteration,lr,loss,val_psnr\n");
    for r in rows {
        let val = r.val_psnr.map(|v| format!("{:.6}", v)).unwrap_or_default();
        let _ = writeln!(out, "{},{:e},{:.8},{}", r.iteration, r.lr, r.loss, val);
    }
    out
}

fn task_mode(task: TaskTag) -> Mode {
    match task {
        TaskTag::Dehaze => Mode::Haze,
        TaskTag::Desnow => Mode::Snow,
    }
}

/// Random `patch × patch` window of a `[1, 3, S, S]` image pair.
fn crop_pair<T: Real>(p: &Pair<T>, patch: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, c, h, w] = p.degraded.dims4()?;
    if patch > h || patch > w {
        return Err(Error::invalid("train", format!("patch {} larger than image {}x{}", patch, h, w)));
    }
    if patch == h && patch == w {
        return Ok((p.degraded.clone(), p.clean.clone()));
    }
    let (y0, x0) = (rng.random_range(0..=h - patch), rng.random_range(0..=w - patch));
    let cut = |t: &Tensor<T>| {
        Tensor::from_fn(&[1, c, patch, patch], |k| {
            let (ch, i, j) = (k / (patch * patch), (k / patch) % patch, k % patch);
            t.data()[ch * h * w + (y0 + i) * w + x0 + j]
        })
    };
    Ok((cut(&p.degraded), cut(&p.clean)))
}

/// Epoch-shuffled sampler producing augmented `[B, 3, P, P]` batches.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    next: usize,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            next: 0,
        }
    }

    fn batch<T: Real>(&mut self, pairs: &[Pair<T>], cfg: &TrainConfig) -> Result<(Tensor<T>, Tensor<T>)> {
        let (mut deg, mut clean) = (Vec::with_capacity(cfg.batch_size), Vec::with_capacity(cfg.batch_size));
        for _ in 0..cfg.batch_size {
            if self.next == self.order.len() {
                self.order = (0..pairs.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.next = 0;
            }
            let p = &pairs[self.order[self.next]];
            self.next += 1;
            let (d, c) = crop_pair(p, cfg.patch_size, &mut self.rng)?;
            let t = if cfg.augment { Transform::random(&mut self.rng) } else { Transform::IDENTITY };
            deg.push(t.apply(&d)?);
            clean.push(t.apply(&c)?);
        }
        Ok((Tensor::stack_batch(&deg)?, Tensor::stack_batch(&clean)?))
    }
}

fn chunks<T: Real>(pairs: &[Pair<T>], size: usize) -> impl Iterator<Item = Result<(Tensor<T>, Tensor<T>)>> + '_ {
    pairs.chunks(size.max(1)).map(|c| {
        let deg: Vec<_> = c.iter().map(|p| p.degraded.clone()).collect();
        let clean: Vec<_> = c.iter().map(|p| p.clean.clone()).collect();
        Ok((Tensor::stack_batch(&deg)?, Tensor::stack_batch(&clean)?))
    })
}

/// Mean total loss of a tape-free forward over every pair, weighted by pair.
fn dataset_loss<T: Real>(
    pairs: &[Pair<T>],
    cfg: &TrainConfig,
    forward: impl Fn(&Var<T>) -> Result<Var<T>>,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in chunks(pairs, cfg.batch_size) {
        let (deg, clean) = chunk?;
        let n = deg.shape()[0] as f64;
        let out = forward(&Var::constant(deg))?;
        total += n * total_loss(&out, &Var::constant(clean), &cfg.loss)?.total.value().item()?.as_f64();
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Mean per-image PSNR of `outputs(degraded)` against the clean images;
/// one value per returned output.
fn dataset_psnr<T: Real, const K: usize>(
    pairs: &[Pair<T>],
    batch: usize,
    outputs: impl Fn(&Var<T>) -> Result<[Tensor<T>; K]>,
) -> Result<[f64; K]> {
    let mut sums = [0.0; K];
    for chunk in chunks(pairs, batch) {
        let (deg, clean) = chunk?;
        let outs = outputs(&Var::constant(deg))?;
        for (k, out) in outs.iter().enumerate() {
            for i in 0..clean.shape()[0] {
                sums[k] += psnr(&out.batch_item(i)?, &clean.batch_item(i)?)?;
            }
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok(sums.map(|s| s / n))
}

/// Mean PSNR of the degraded inputs themselves.
pub fn degraded_psnr<T: Real>(pairs: &[Pair<T>]) -> Result<f64> {
    let mut s = 0.0;
    for p in pairs {
        s += psnr(&p.degraded, &p.clean)?;
    }
    Ok(s / pairs.len().max(1) as f64)
}

pub fn expert_psnr<T: Real>(e: &Expert<T>, pairs: &[Pair<T>], batch: usize) -> Result<f64> {
    let p = e.params.bind(None);
    Ok(dataset_psnr(pairs, batch, |x| Ok([e.forward(&p, x)?.value().clone()]))?[0])
}

/// Mean PSNR of (mixture, dehaze expert alone, desnow expert alone).
pub fn dan_psnr<T: Real>(d: &DanNet<T>, pairs: &[Pair<T>], batch: usize) -> Result<[f64; 3]> {
    let (ph, ps, pg) = (d.dehaze.params.bind(None), d.desnow.params.bind(None), d.gate_params.bind(None));
    dataset_psnr(pairs, batch, |x| {
        let o = d.forward(&ph, &ps, &pg, x)?;
        Ok([o.restored.value().clone(), o.j_dehaze.value().clone(), o.j_desnow.value().clone()])
    })
}

fn gradients<T: Real>(loss: &Var<T>, bound: &Bound<T>) -> Result<Vec<Tensor<T>>> {
    let mut g = backward(loss)?;
    Ok(bound
        .vars()
        .iter()
        .map(|v| g.take(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect())
}

#[derive(Clone, Debug)]
pub struct ExpertReport {
    pub log: Vec<LogRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub degraded_val_psnr: f64,
    pub initial_val_psnr: f64,
    pub final_val_psnr: f64,
    pub rejected_steps: u64,
}

/// Trains `expert` in place on the training split of `data`.
///
/// Losses before and after are full passes over the training split without
/// augmentation. A non-finite batch loss aborts with [`Error::Diverged`];
/// the expert then still holds the parameters of the last good step.
pub fn train_expert<T: Real>(
    expert: &mut Expert<T>,
    adam: &mut Adam<T>,
    data: &PairSet<T>,
    cfg: &TrainConfig,
) -> Result<ExpertReport> {
    cfg.validate()?;
    let mode = task_mode(expert.task);
    if let Some(p) = data.train.iter().chain(&data.val).find(|p| p.mode != mode) {
        return Err(Error::invalid(
            "train_expert",
            format!("{} expert given {} pair {}", expert.task, p.mode, p.id),
        ));
    }
    if data.train.is_empty() {
        return Err(Error::invalid("train_expert", "no training pairs"));
    }
    let eval_loss = |e: &Expert<T>| {
        let p = e.params.bind(None);
        dataset_loss(&data.train, cfg, |x| e.forward(&p, x))
    };
    let initial_loss = eval_loss(expert)?;
    let degraded_val_psnr = degraded_psnr(&data.val)?;
    let initial_val_psnr = expert_psnr(expert, &data.val, cfg.batch_size)?;
    info!(
        "{} expert: {} params, initial loss {:.5}, val psnr {:.3} dB (degraded {:.3} dB)",
        expert.task,
        expert.count_params(),
        initial_loss,
        initial_val_psnr,
        degraded_val_psnr
    );
    let mut sampler = Sampler::new(cfg.seed);
    let mut log = Vec::new();
    let mut rejected = 0;
    let start = adam.step_count();
    for it in start..start + cfg.iterations {
        let lr = cyclic_lr(it, cfg);
        let (deg, clean) = sampler.batch(&data.train, cfg)?;
        let (loss, grads) = {
            let tape = Tape::new();
            let bound = expert.params.bind(Some(&tape));
            let out = expert.forward(&bound, &Var::constant(deg))?;
            let parts = total_loss(&out, &Var::constant(clean), &cfg.loss)?;
            let loss = parts.total.value().item()?.as_f64();
            if !loss.is_finite() {
                warn!("loss diverged at iteration {}", it);
                return Err(Error::Diverged { iteration: it });
            }
            (loss, gradients(&parts.total, &bound)?)
        };
        match adam.step(&mut expert.params, &grads, lr) {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => rejected += 1,
            Err(e) => return Err(e),
        }
        let done = it + 1 - start;
        let val_psnr = if cfg.val_every > 0 && (done.is_multiple_of(cfg.val_every) || done == cfg.iterations) {
            let v = expert_psnr(expert, &data.val, cfg.batch_size)?;
            info!("iter {:>5} lr {:.3e} loss {:.5} val psnr {:.3} dB", done, lr, loss, v);
            Some(v)
        } else {
            None
        };
        log.push(LogRow {
            iteration: done,
            lr,
            loss,
            val_psnr,
        });
    }
    let final_loss = eval_loss(expert)?;
    let final_val_psnr = expert_psnr(expert, &data.val, cfg.batch_size)?;
    Ok(ExpertReport {
        log,
        initial_loss,
        final_loss,
        degraded_val_psnr,
        initial_val_psnr,
        final_val_psnr,
        rejected_steps: rejected,
    })
}

#[derive(Clone, Debug)]
pub struct GateReport {
    pub log: Vec<LogRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub degraded_val_psnr: f64,
    /// PSNR of the mixture before gate training.
    pub initial_val_psnr: f64,
    pub final_val_psnr: f64,
    pub dehaze_val_psnr: f64,
    pub desnow_val_psnr: f64,
    pub rejected_steps: u64,
}

fn check_frozen<T: Real>(d: &DanNet<T>, want: &(String, String), it: u64) -> Result<()> {
    let now = (d.dehaze.params.checksum(), d.desnow.params.checksum());
    if &now != want {
        return Err(Error::FrozenDrift(format!("expert checksums changed by iteration {}", it)));
    }
    Ok(())
}

/// Trains only the gate network of `dan` on the training split of a mixed
/// dataset. Expert parameters enter the graph as constants and their
/// checksums are compared every [`FREEZE_CHECK_EVERY`] iterations.
pub fn train_gate<T: Real>(dan: &mut DanNet<T>, adam: &mut Adam<T>, data: &PairSet<T>, cfg: &TrainConfig) -> Result<GateReport> {
    cfg.validate()?;
    if !dan.frozen {
        return Err(Error::invalid("train_gate", "gate training requires frozen experts"));
    }
    if data.train.is_empty() {
        return Err(Error::invalid("train_gate", "no training pairs"));
    }
    let frozen = (dan.dehaze.params.checksum(), dan.desnow.params.checksum());
    let (ph, ps) = (dan.dehaze.params.bind(None), dan.desnow.params.bind(None));
    let eval_loss = |d: &DanNet<T>| {
        let pg = d.gate_params.bind(None);
        dataset_loss(&data.train, cfg, |x| Ok(d.forward(&ph, &ps, &pg, x)?.restored))
    };
    let initial_loss = eval_loss(dan)?;
    let degraded_val_psnr = degraded_psnr(&data.val)?;
    let [initial_val_psnr, dehaze_val_psnr, desnow_val_psnr] = dan_psnr(dan, &data.val, cfg.batch_size)?;
    info!(
        "gate: initial loss {:.5}, val psnr mix {:.3} / dehaze {:.3} / desnow {:.3} dB (degraded {:.3} dB)",
        initial_loss, initial_val_psnr, dehaze_val_psnr, desnow_val_psnr, degraded_val_psnr
    );
    let mut sampler = Sampler::new(cfg.seed);
    let mut log = Vec::new();
    let mut rejected = 0;
    let start = adam.step_count();
    for it in start..start + cfg.iterations {
        let lr = cyclic_lr(it, cfg);
        let (deg, clean) = sampler.batch(&data.train, cfg)?;
        let (loss, grads) = {
            let tape = Tape::new();
            let pg = dan.gate_params.bind(Some(&tape));
            let out = dan.forward(&ph, &ps, &pg, &Var::constant(deg))?;
            let parts = total_loss(&out.restored, &Var::constant(clean), &cfg.loss)?;
            let loss = parts.total.value().item()?.as_f64();
            if !loss.is_finite() {
                warn!("gate loss diverged at iteration {}", it);
                return Err(Error::Diverged { iteration: it });
            }
            (loss, gradients(&parts.total, &pg)?)
        };
        match adam.step(&mut dan.gate_params, &grads, lr) {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => rejected += 1,
            Err(e) => return Err(e),
        }
        let done = it + 1 - start;
        if done.is_multiple_of(FREEZE_CHECK_EVERY) {
            check_frozen(dan, &frozen, done)?;
        }
        let val_psnr = if cfg.val_every > 0 && (done.is_multiple_of(cfg.val_every) || done == cfg.iterations) {
            let v = dan_psnr(dan, &data.val, cfg.batch_size)?[0];
            info!("iter {:>5} lr {:.3e} loss {:.5} val psnr {:.3} dB", done, lr, loss, v);
            Some(v)
        } else {
            None
        };
        log.push(LogRow {
            iteration: done,
            lr,
            loss,
            val_psnr,
        });
    }
    check_frozen(dan, &frozen, cfg.iterations)?;
    let final_loss = eval_loss(dan)?;
    let final_val_psnr = dan_psnr(dan, &data.val, cfg.batch_size)?[0];
    Ok(GateReport {
        log,
        initial_loss,
        final_loss,
        degraded_val_psnr,
        initial_val_psnr,
        final_val_psnr,
        dehaze_val_psnr,
        desnow_val_psnr,
        rejected_steps: rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::full(&[1], v));
        s
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let mut s = scalar_store(0.25);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let zero = [Tensor::zeros(&[1])];
        adam.step(&mut s, &zero, 1e-3).unwrap();
        assert_eq!(s.get(s.find("p").unwrap()).data()[0], 0.25);

        adam.step(&mut s, &[Tensor::full(&[1], 2.0)], 1e-3).unwrap();
        let (m, v) = (adam.first_moments()[0].data()[0], adam.second_moments()[0].data()[0]);
        adam.step(&mut s, &zero, 1e-3).unwrap();
        assert_eq!(adam.first_moments()[0].data()[0], 0.9 * m);
        assert_eq!(adam.second_moments()[0].data()[0], 0.999 * v);
    }

    #[test]
    fn first_step_by_hand() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, &[Tensor::full(&[1], 1.0)], 1e-3).unwrap();
        // m̂ = 1 and v̂ = 1 after bias correction
        let want = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(s.find("p").unwrap()).data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 1e-3, 0.37);
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.0f64);
        let mut last = 0.0;
        for t in 1..=500 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let step = lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            p -= step;
            let before = s.get(s.find("p").unwrap()).data()[0];
            adam.step(&mut s, &[Tensor::full(&[1], g)], lr).unwrap();
            last = before - s.get(s.find("p").unwrap()).data()[0];
        }
        assert!((s.get(s.find("p").unwrap()).data()[0] - p).abs() < 1e-12);
        assert!((last - lr).abs() <= 0.05 * lr, "{}", last);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let err = adam.step(&mut s, &[Tensor::full(&[1], f64::NAN)], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(s.get(s.find("p").unwrap()).data()[0], 1.0);
        assert!(adam.step(&mut s, &[Tensor::zeros(&[2])], 1e-3).is_err());
    }

    #[test]
    fn schedule_contract() {
        let cfg = TrainConfig::default();
        assert_eq!(cyclic_lr(0, &cfg), 2e-4);
        assert_eq!(cyclic_lr(2000, &cfg), 3e-4);
        assert_eq!(cyclic_lr(4000, &cfg), 2e-4);
        for t in 0..=4000 {
            let lr = cyclic_lr(t, &cfg);
            assert_eq!(lr, cyclic_lr(4000 - t, &cfg));
            assert!((2e-4..=3e-4).contains(&lr));
            assert_eq!(lr, cyclic_lr(t + 4000, &cfg), "no decay across cycles");
        }
        assert!(cyclic_lr(1000, &cfg) > cyclic_lr(999, &cfg));
        let short = TrainConfig::for_iterations(200);
        assert_eq!(short.step_size, 100);
        assert_eq!(cyclic_lr(100, &short), 3e-4);
        assert_eq!(TrainConfig::for_iterations(10_000).step_size, 2000);
        assert_eq!(TrainConfig::for_iterations(0).step_size, 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { base_lr: 4e-4, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { patch_size: 48, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{:?}", c);
        }
        assert!(TrainConfig::default().summary().contains("lambda_st 0.2"));
    }

    #[test]
    fn csv_log_format() {
        let rows = [
            LogRow { iteration: 1, lr: 2e-4, loss: 0.5, val_psnr: None },
            LogRow { iteration: 2, lr: 3e-4, loss: 0.25, val_psnr: Some(20.0) },
        ];
        let csv = log_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), "iteration,lr,loss,val_psnr");
        assert!(csv.lines().nth(1).unwrap().ends_with(','));
        assert!(csv.lines().nth(2).unwrap().ends_with(",20.000000"));
    }
}
