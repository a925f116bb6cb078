//! Joint training: batch assembly, the unified loss and its gradients,
//! learning-rate and generation-order schedules, the training loop and the
//! finite-difference gradient checker.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::backbone::{backward, forward, forward_traced};
use crate::data::{Example, SceneSpec, CAPTION_QUESTION};
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::heads::{
    diffusion_loss_grad_rows, diffusion_losses_rows, draw_noise, text_head_backward, text_logits,
    text_loss_grad, DiffusionSchedule,
};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::sequence::{
    build_generation_sequence, build_understanding_sequence, sample_permutation, AttentionMask, Modality,
    OrderMode, Payload, TokenStream,
};
use crate::tensor::Float;

/// How generation orders are chosen over the course of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderSchedule {
    /// Random permutations early, annealed linearly to raster.
    Annealed,
    Raster,
    Random,
}

impl OrderSchedule {
    pub fn word(self) -> &'static str {
        match self {
            Self::Annealed => "annealed",
            Self::Raster => "raster",
            Self::Random => "random",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        [Self::Annealed, Self::Raster, Self::Random].into_iter().find(|s| s.word() == w)
    }
}

/// Which tasks a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSet {
    Unified,
    /// Only the generation share of each batch (matched visual-token budget).
    GenOnly,
    /// Only the understanding share of each batch.
    UndOnly,
}

impl TaskSet {
    pub fn word(self) -> &'static str {
        match self {
            Self::Unified => "unified",
            Self::GenOnly => "t2i",
            Self::UndOnly => "i2t",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        [Self::Unified, Self::GenOnly, Self::UndOnly].into_iter().find(|s| s.word() == w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_text: f64,
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of each batch that is generation examples.
    pub task_mix_gen: f64,
    pub order_random_frac: f64,
    pub order_anneal_end_frac: f64,
    pub order_schedule: OrderSchedule,
    pub tasks: TaskSet,
    pub adam: AdamWConfig,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_text: 0.005,
            total_steps: 20_000,
            warmup_frac: 0.065,
            lr: 1e-4,
            batch_size: 32,
            task_mix_gen: 0.5,
            order_random_frac: 0.3,
            order_anneal_end_frac: 0.6,
            order_schedule: OrderSchedule::Annealed,
            tasks: TaskSet::Unified,
            adam: AdamWConfig::default(),
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.lambda_text >= 0.0) {
            return bad("lambda_text must be >= 0");
        }
        if !unit(self.warmup_frac) || !unit(self.task_mix_gen) {
            return bad("warmup_frac and task_mix_gen must lie in [0, 1]");
        }
        if !(0.0 <= self.order_random_frac
            && self.order_random_frac <= self.order_anneal_end_frac
            && self.order_anneal_end_frac <= 1.0)
        {
            return bad("need 0 <= order_random_frac <= order_anneal_end_frac <= 1");
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("total_steps, batch_size and log_every must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

/// Linear warmup to `lr`, then constant.
pub fn lr_at(step: u64, tc: &TrainConfig) -> f64 {
    let warmup = tc.warmup_frac * tc.total_steps as f64;
    if step as f64 >= warmup {
        tc.lr
    } else {
        tc.lr * step as f64 / warmup
    }
}

/// Probability that a generation example at `step` uses a random order.
pub fn random_order_prob(step: u64, tc: &TrainConfig) -> f64 {
    match tc.order_schedule {
        OrderSchedule::Raster => 0.0,
        OrderSchedule::Random => 1.0,
        OrderSchedule::Annealed => {
            let frac = step as f64 / tc.total_steps as f64;
            let (a, b) = (tc.order_random_frac, tc.order_anneal_end_frac);
            if frac < a {
                1.0
            } else if frac >= b {
                0.0
            } else {
                (b - frac) / (b - a)
            }
        }
    }
}

/// Per-example draw of the generation order.
pub fn order_mode<R: Rng + ?Sized>(step: u64, tc: &TrainConfig, rng: &mut R) -> OrderMode {
    if rng.gen_bool(random_order_prob(step, tc)) {
        OrderMode::Random
    } else {
        OrderMode::Raster
    }
}

/// Per-dimension standardization of latent tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Largest standardized magnitude seen in the corpus plus a margin;
    /// the sampler clamps predicted clean tokens to this range.
    pub clip: f64,
}

const STD_FLOOR: f64 = 1e-6;
const CLIP_MARGIN: f64 = 0.5;

impl LatentStats {
    pub fn from_tokens(tokens: &[Vec<f64>]) -> Result<Self> {
        let dim = tokens.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
        let n = tokens.len() as f64;
        let mut mean = vec![0.0; dim];
        for t in tokens {
            mean.iter_mut().zip(t).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for t in tokens {
            var.iter_mut().zip(t).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
        let max = tokens
            .iter()
            .flat_map(|t| t.iter().zip(&mean).zip(&std).map(|((v, m), s)| ((v - m) / s).abs()))
            .fold(0.0, f64::max);
        Ok(Self {
            mean,
            std,
            clip: max + CLIP_MARGIN,
        })
    }

    /// Statistics over every latent token of `examples`.
    pub fn compute<'a>(fe: &Frontend, examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let mut tokens = Vec::new();
        for e in examples {
            tokens.extend(fe.latent_tokens(&e.image)?);
        }
        Self::from_tokens(&tokens)
    }

    pub fn standardize(&self, tok: &[f64]) -> Vec<f64> {
        tok.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn destandardize(&self, tok: &[f64]) -> Vec<f64> {
        tok.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

/// A training example with every model input precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub spec: SceneSpec,
    pub prompt: Vec<u32>,
    /// Standardized latent tokens in raster order.
    pub tokens: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    /// `(question, answer)` id pairs; the caption pair comes first.
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

pub fn prepare_examples<'a>(
    fe: &Frontend,
    stats: &LatentStats,
    examples: impl IntoIterator<Item = &'a Example>,
) -> Result<Vec<Prepared>> {
    examples
        .into_iter()
        .map(|e| {
            let tokens = fe.latent_tokens(&e.image)?.iter().map(|t| stats.standardize(t)).collect();
            let mut pairs = vec![(fe.vocab.tokenize(CAPTION_QUESTION)?, fe.vocab.tokenize(&e.caption)?)];
            for (q, a) in &e.qa {
                pairs.push((fe.vocab.tokenize(q)?, fe.vocab.tokenize(a)?));
            }
            Ok(Prepared {
                spec: e.spec,
                prompt: fe.vocab.tokenize(&e.caption)?,
                tokens,
                features: fe.features(&e.image)?,
                pairs,
            })
        })
        .collect()
}

fn cast_rows<T: Float>(rows: &[Vec<f64>]) -> Vec<Vec<T>> {
    rows.iter().map(|r| r.iter().map(|&v| T::of(v)).collect()).collect()
}

/// One packed example together with the seed of its `(t, ε)` draws.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem<T> {
    pub stream: TokenStream<T>,
    pub mask: AttentionMask,
    pub noise_seed: u64,
}

pub fn gen_item<T: Float>(cfg: &ModelConfig, ex: &Prepared, mode: OrderMode, rng: &mut ChaCha8Rng) -> Result<BatchItem<T>> {
    let perm = sample_permutation(mode, cfg.n_img(), rng);
    let (stream, mask) = build_generation_sequence(&ex.prompt, &cast_rows::<T>(&ex.tokens), &perm, cfg.grid)?;
    Ok(BatchItem {
        stream,
        mask,
        noise_seed: rng.gen(),
    })
}

pub fn und_item<T: Float>(ex: &Prepared, pair: usize, rng: &mut ChaCha8Rng) -> Result<BatchItem<T>> {
    let (q, a) = &ex.pairs[pair];
    let (stream, mask) = build_understanding_sequence(&cast_rows::<T>(&ex.features), q, a)?;
    Ok(BatchItem {
        stream,
        mask,
        noise_seed: rng.gen(),
    })
}

/// RNG for everything random about `step`; independent of earlier steps.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// A batch and the fraction of its generation examples in random order.
pub struct Batch<T> {
    pub items: Vec<BatchItem<T>>,
    pub rnd_frac: f64,
}

/// Generation/understanding counts for one batch. The generation count is
/// `floor(mix * B)` plus a Bernoulli draw on the fractional part.
fn task_counts<R: Rng + ?Sized>(tc: &TrainConfig, rng: &mut R) -> (usize, usize) {
    let want = tc.task_mix_gen * tc.batch_size as f64;
    let mut n_gen = want.floor() as usize;
    if rng.gen_bool(want - want.floor()) {
        n_gen += 1;
    }
    let n_gen = n_gen.min(tc.batch_size);
    let n_und = tc.batch_size - n_gen;
    match tc.tasks {
        TaskSet::Unified => (n_gen, n_und),
        TaskSet::GenOnly => (n_gen, 0),
        TaskSet::UndOnly => (0, n_und),
    }
}

pub fn sample_batch<T: Float>(cfg: &ModelConfig, tc: &TrainConfig, data: &[Prepared], step: u64) -> Result<Batch<T>> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = step_rng(tc.seed, step);
    let (n_gen, n_und) = task_counts(tc, &mut rng);
    let mut items = Vec::with_capacity(n_gen + n_und);
    let mut n_random = 0;
    for _ in 0..n_gen {
        let ex = &data[rng.gen_range(0..data.len())];
        let mode = order_mode(step, tc, &mut rng);
        n_random += (mode == OrderMode::Random) as usize;
        items.push(gen_item(cfg, ex, mode, &mut rng)?);
    }
    for _ in 0..n_und {
        let ex = &data[rng.gen_range(0..data.len())];
        let pair = rng.gen_range(0..ex.pairs.len());
        items.push(und_item(ex, pair, &mut rng)?);
    }
    let rnd_frac = if n_gen == 0 { 0.0 } else { n_random as f64 / n_gen as f64 };
    Ok(Batch { items, rnd_frac })
}

/// `L = L_Visual + λ L_Text` and its two terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub visual: f64,
    pub text: f64,
}

fn flagged_counts<T>(batch: &[BatchItem<T>]) -> (usize, usize) {
    let mut vis = 0;
    let mut txt = 0;
    for item in batch {
        for p in item.stream.flagged() {
            match item.stream.entries[p].modality {
                Modality::Image => vis += 1,
                _ => txt += 1,
            }
        }
    }
    (vis, txt)
}

/// Summed per-position losses of one item; accumulates gradients weighted by
/// `w_vis` (per image token) and `w_txt` (per text token) when asked.
fn item_pass<T: Float>(
    cfg: &ModelConfig,
    sched: &DiffusionSchedule,
    params: &ModelParams<T>,
    item: &BatchItem<T>,
    w_vis: T,
    w_txt: T,
    grads: Option<&mut ModelParams<T>>,
) -> Result<(f64, f64)> {
    let d = cfg.d_model;
    let s = &item.stream;
    let mut rng = ChaCha8Rng::seed_from_u64(item.noise_seed);
    let (mut img, mut x0, mut draws) = (Vec::new(), Vec::new(), Vec::new());
    let (mut txt, mut targets) = (Vec::new(), Vec::new());
    for p in s.flagged() {
        if p == 0 {
            return Err(Error::ShapeMismatch("the first stream entry cannot be a loss target".into()));
        }
        match &s.entries[p].payload {
            Payload::Vector(v) => {
                img.push(p);
                x0.extend_from_slice(v);
                draws.push(draw_noise(sched, cfg.token_dim, &mut rng));
            }
            Payload::Token(id) => {
                txt.push(p);
                targets.push(*id);
            }
        }
    }
    let gather = |z: &[T], pos: &[usize]| -> Vec<T> {
        pos.iter().flat_map(|&p| z[(p - 1) * d..p * d].iter().copied()).collect()
    };
    let text_terms = |logits: &[T]| -> Result<(f64, Vec<Vec<T>>)> {
        let rows: Vec<Vec<T>> = logits.chunks_exact(cfg.vocab_size).map(<[T]>::to_vec).collect();
        let mut sum = 0.0;
        let mut dl = Vec::with_capacity(rows.len());
        for (row, &id) in rows.iter().zip(&targets) {
            let (l, g) = text_loss_grad(std::slice::from_ref(row), &[id], &[true])?;
            sum += l.as_f64();
            dl.push(g.into_iter().next().unwrap());
        }
        Ok((sum, dl))
    };
    let sum = |v: Vec<T>| v.into_iter().fold(0.0, |a, l| a + l.as_f64());

    let Some(g) = grads else {
        let z: Vec<T> = forward(cfg, &params.backbone, s, &item.mask)?.concat();
        let lv = sum(diffusion_losses_rows(&params.diffusion_head, sched, &x0, &gather(&z, &img), &draws));
        let zt = gather(&z, &txt);
        let lt = if txt.is_empty() { 0.0 } else { text_terms(&text_logits(&params.text_head, &zt))?.0 };
        return Ok((lv, lt));
    };

    let trace = forward_traced(cfg, &params.backbone, s, &item.mask)?;
    let mut dz = vec![T::zero(); s.len() * d];
    let scatter = |dz: &mut [T], pos: &[usize], rows: &[T]| {
        for (&p, r) in pos.iter().zip(rows.chunks_exact(d)) {
            crate::tensor::axpy(&mut dz[(p - 1) * d..p * d], T::one(), r);
        }
    };
    let (losses, dzi) = diffusion_loss_grad_rows(
        &params.diffusion_head,
        sched,
        &x0,
        &gather(&trace.z, &img),
        &draws,
        w_vis,
        &mut g.diffusion_head,
    );
    scatter(&mut dz, &img, &dzi);
    let lv = sum(losses);
    let mut lt = 0.0;
    if !txt.is_empty() {
        let zt = gather(&trace.z, &txt);
        let (l, dl) = text_terms(&text_logits(&params.text_head, &zt))?;
        lt = l;
        if w_txt != T::zero() {
            let dl: Vec<T> = dl.concat().into_iter().map(|v| v * w_txt).collect();
            let dzt = text_head_backward(&params.text_head, &zt, &dl, &mut g.text_head);
            scatter(&mut dz, &txt, &dzt);
        }
    }
    backward(cfg, &params.backbone, s, &item.mask, &trace, &dz, &mut g.backbone);
    Ok((lv, lt))
}

fn combine(lambda: f64, (lv, lt): (f64, f64), (n_vis, n_txt): (usize, usize)) -> LossParts {
    let visual = if n_vis == 0 { 0.0 } else { lv / n_vis as f64 };
    let text = if n_txt == 0 { 0.0 } else { lt / n_txt as f64 };
    LossParts {
        total: visual + lambda * text,
        visual,
        text,
    }
}

/// The unified loss of a batch; each term is a mean over its flagged
/// positions across the whole batch and an absent term contributes 0.
pub fn unified_loss<T: Float>(
    cfg: &ModelConfig,
    sched: &DiffusionSchedule,
    params: &ModelParams<T>,
    batch: &[BatchItem<T>],
    lambda: f64,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sums = (0.0, 0.0);
    for item in batch {
        let (v, t) = item_pass(cfg, sched, params, item, T::zero(), T::zero(), None)?;
        sums.0 += v;
        sums.1 += t;
    }
    Ok(combine(lambda, sums, flagged_counts(batch)))
}

/// Loss and gradients. Examples run in parallel on `pool`; per-example
/// gradients are summed in batch order, so the result does not depend on
/// the thread count.
pub fn unified_loss_and_grads<T: Float>(
    cfg: &ModelConfig,
    sched: &DiffusionSchedule,
    params: &ModelParams<T>,
    batch: &[BatchItem<T>],
    lambda: f64,
    pool: Option<&ThreadPool>,
) -> Result<(LossParts, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let counts = flagged_counts(batch);
    let w_vis = if counts.0 == 0 { T::zero() } else { T::of(1.0 / counts.0 as f64) };
    let w_txt = if counts.1 == 0 { T::zero() } else { T::of(lambda / counts.1 as f64) };
    let mut total = params.zeros_like();
    let mut sums = (0.0, 0.0);
    let run = |item: &BatchItem<T>| -> Result<(f64, f64, ModelParams<T>)> {
        let mut g = params.zeros_like();
        let (v, t) = item_pass(cfg, sched, params, item, w_vis, w_txt, Some(&mut g))?;
        Ok((v, t, g))
    };
    let chunk = pool.map_or(1, |p| 2 * p.current_num_threads());
    for part in batch.chunks(chunk) {
        let results: Vec<Result<(f64, f64, ModelParams<T>)>> = match pool {
            Some(p) => p.install(|| part.par_iter().map(run).collect()),
            None => part.iter().map(run).collect(),
        };
        for r in results {
            let (v, t, g) = r?;
            sums.0 += v;
            sums.1 += t;
            total.add_assign(&g);
        }
    }
    Ok((combine(lambda, sums, counts), total))
}

/// Thread pool sized by `UNIFLUID_THREADS` (default: all cores).
pub fn thread_pool() -> ThreadPool {
    let n = std::env::var("UNIFLUID_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
}

/// One record of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: LossParts,
    pub lr: f64,
    pub rnd_frac: f64,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} L={} Lv={} Lt={} lr={} rnd_frac={}",
            self.step, self.loss.total, self.loss.visual, self.loss.text, self.lr, self.rnd_frac
        )
    }
}

impl StepMetrics {
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad metrics line `{line}`"));
        let mut vals = [0.0f64; 5];
        let mut step = None;
        let keys = ["L", "Lv", "Lt", "lr", "rnd_frac"];
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            if k == "step" {
                step = Some(v.parse().map_err(|_| bad())?);
            } else {
                let i = keys.iter().position(|&x| x == k).ok_or_else(bad)?;
                vals[i] = v.parse().map_err(|_| bad())?;
            }
        }
        Ok(Self {
            step: step.ok_or_else(bad)?,
            loss: LossParts {
                total: vals[0],
                visual: vals[1],
                text: vals[2],
            },
            lr: vals[3],
            rnd_frac: vals[4],
        })
    }
}

/// Parameters, optimizer state and data for a run.
pub struct Trainer<T: Float> {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ModelParams<T>,
    pub opt: AdamW<T>,
    /// Number of completed steps.
    pub step: u64,
    pub stats: LatentStats,
    pub sched: DiffusionSchedule,
    data: Vec<Prepared>,
    pool: ThreadPool,
}

impl<T: Float> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Vec<Prepared>, stats: LatentStats) -> Result<Self> {
        let params = ModelParams::init(&model_cfg, train_cfg.seed);
        Self::resume(model_cfg, train_cfg, data, stats, params, None, 0)
    }

    /// Continues from saved parameters and optimizer state.
    pub fn resume(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        data: Vec<Prepared>,
        stats: LatentStats,
        params: ModelParams<T>,
        opt: Option<AdamW<T>>,
        step: u64,
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let sched = DiffusionSchedule::cosine(model_cfg.t_train, model_cfg.sample_steps)?.with_clip(Some(stats.clip));
        let opt = opt.unwrap_or_else(|| AdamW::new(train_cfg.adam, params.tensors().into_iter().map(|(_, t)| t)));
        Ok(Self {
            model_cfg,
            train_cfg,
            params,
            opt,
            step,
            stats,
            sched,
            data,
            pool: thread_pool(),
        })
    }

    pub fn data(&self) -> &[Prepared] {
        &self.data
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let batch = sample_batch::<T>(&self.model_cfg, &self.train_cfg, &self.data, step)?;
        let lambda = self.train_cfg.lambda_text;
        let (loss, grads) = unified_loss_and_grads(
            &self.model_cfg,
            &self.sched,
            &self.params,
            &batch.items,
            lambda,
            Some(&self.pool),
        )
        .map_err(|e| match e {
            Error::NonFiniteActivation { layer } => Error::NonFiniteLoss {
                step,
                detail: format!("non-finite activation in layer {layer}"),
            },
            e => e,
        })?;
        if !loss.total.is_finite() || !grads.all_finite() {
            let bad: Vec<String> = grads
                .tensors()
                .into_iter()
                .filter(|(_, t)| !t.all_finite())
                .map(|(n, _)| n)
                .collect();
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "L={} Lv={} Lt={} non-finite gradients in [{}]",
                    loss.total,
                    loss.visual,
                    loss.text,
                    bad.join(", ")
                ),
            });
        }
        let lr = lr_at(step, &self.train_cfg);
        let params = self.params.tensors_mut().into_iter().map(|(_, t)| t).collect();
        let grads = grads.tensors().into_iter().map(|(_, t)| t).collect();
        self.opt.step(params, grads, lr);
        self.step += 1;
        Ok(StepMetrics {
            step,
            loss,
            lr,
            rnd_frac: batch.rnd_frac,
        })
    }

    /// Trains until `end` steps are complete, passing every logged record to
    /// `log`.
    pub fn run_until(&mut self, end: u64, mut log: impl FnMut(&StepMetrics) -> Result<()>) -> Result<Option<StepMetrics>> {
        let mut last = None;
        while self.step < end {
            let m = self.train_step()?;
            if m.step % self.train_cfg.log_every == 0 || self.step == self.train_cfg.total_steps {
                log(&m)?;
            }
            last = Some(m);
        }
        Ok(last)
    }

    /// Trains for the configured number of steps.
    pub fn run(&mut self, log: impl FnMut(&StepMetrics) -> Result<()>) -> Result<Option<StepMetrics>> {
        self.run_until(self.train_cfg.total_steps, log)
    }
}

/// Worst finite-difference disagreement for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tolerance)
    }

    /// `GradCheckFailure` naming the worst tensor when the check failed.
    pub fn into_result(self) -> Result<Self> {
        match self.tensors.iter().filter(|t| t.max_rel_err >= self.tolerance).max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)) {
            Some(t) => Err(Error::GradCheckFailure {
                tensor: t.name.clone(),
                coord: t.worst_coord,
                rel_err: t.max_rel_err,
            }),
            None => Ok(self),
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(f, "{:<36} coords={:<3} max_rel_err={:.3e}", t.name, t.coords, t.max_rel_err)?;
        }
        write!(
            f,
            "{} max_rel_err={:.3e} tolerance={:e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tolerance
        )
    }
}

pub const GRAD_CHECK_H: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central finite differences against the analytic gradient on `coords`
/// random coordinates per tensor (all of them for small tensors).
pub fn grad_check(
    cfg: &ModelConfig,
    sched: &DiffusionSchedule,
    params: &ModelParams<f64>,
    batch: &[BatchItem<f64>],
    lambda: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = unified_loss_and_grads(cfg, sched, params, batch, lambda, None)?;
    let analytic = grads.to_named();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        let (name, g) = &analytic[ti];
        let picks: Vec<usize> = if g.numel() <= coords {
            (0..g.numel()).collect()
        } else {
            rand::seq::index::sample(&mut rng, g.numel(), coords).into_vec()
        };
        let mut worst = (0.0f64, 0usize);
        for &c in &picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.tensors_mut()[ti].1.data[c] += delta;
                Ok(unified_loss(cfg, sched, &p, batch, lambda)?.total)
            };
            let fd = (eval(GRAD_CHECK_H)? - eval(-GRAD_CHECK_H)?) / (2.0 * GRAD_CHECK_H);
            let an = g.data[c];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_CHECK_FLOOR);
            if rel > worst.0 || picks.len() == 1 {
                worst = (worst.0.max(rel), c);
            }
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            coords: picks.len(),
            max_rel_err: worst.0,
            worst_coord: worst.1,
        });
    }
    Ok(GradCheckReport {
        tolerance: GRAD_CHECK_TOL,
        tensors,
    })
}

/// Which tasks a gradient-check batch contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckBatch {
    Mixed,
    GenOnly,
    UndOnly,
}

/// Gradient check on the tiny configuration with a perturbed initialization
/// (so no tensor sits at an exact zero) and a small batch of real examples.
pub fn grad_check_tiny(seed: u64, which: CheckBatch) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let fe = Frontend::new(&cfg, 0, 1);
    let corpus = crate::data::build_corpus(seed, &crate::data::CorpusOptions::default());
    let examples: Vec<&Example> = corpus.train().take(4).collect();
    let stats = LatentStats::compute(&fe, examples.iter().copied())?;
    let data = prepare_examples(&fe, &stats, examples)?;
    let sched = DiffusionSchedule::cosine(cfg.t_train, cfg.sample_steps)?;
    let mut params = ModelParams::<f64>::init(&cfg, seed);
    params.perturb(0.05, seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut batch = Vec::new();
    if which != CheckBatch::UndOnly {
        batch.push(gen_item(&cfg, &data[0], OrderMode::Raster, &mut rng)?);
        batch.push(gen_item(&cfg, &data[1], OrderMode::Random, &mut rng)?);
    }
    if which != CheckBatch::GenOnly {
        batch.push(und_item(&data[2], 0, &mut rng)?);
        batch.push(und_item(&data[3], 1, &mut rng)?);
    }
    grad_check(&cfg, &sched, &params, &batch, 0.5, 10, seed.wrapping_add(3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_corpus, CorpusOptions};

    fn tiny_setup(n: usize) -> (ModelConfig, Vec<Prepared>, LatentStats) {
        let cfg = ModelConfig::tiny();
        let fe = Frontend::new(&cfg, 0, 1);
        let corpus = build_corpus(3, &CorpusOptions::default());
        let ex: Vec<&Example> = corpus.train().take(n).collect();
        let stats = LatentStats::compute(&fe, ex.iter().copied()).unwrap();
        let data = prepare_examples(&fe, &stats, ex).unwrap();
        (cfg, data, stats)
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            total_steps: 6,
            batch_size: 4,
            lr: 1e-3,
            log_every: 1,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_points() {
        let tc = TrainConfig::default();
        assert_eq!(lr_at(0, &tc), 0.0);
        assert_eq!(lr_at(1300, &tc), 1e-4);
        assert_eq!(lr_at(650, &tc), 0.5e-4);
        assert_eq!(lr_at(19_999, &tc), 1e-4);
    }

    #[test]
    fn order_frequencies() {
        let tc = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (frac, want) in [(0.1, 1.0), (0.45, 0.5), (0.8, 0.0)] {
            let step = (frac * tc.total_steps as f64) as u64;
            assert!((random_order_prob(step, &tc) - want).abs() < 1e-12);
            let hits = (0..10_000).filter(|_| order_mode(step, &tc, &mut rng) == OrderMode::Random).count();
            assert!((hits as f64 / 1e4 - want).abs() <= 0.02);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            order_random_frac: 0.7,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let neg = TrainConfig {
            lambda_text: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn standardized_tokens_have_unit_moments() {
        let cfg = ModelConfig::default();
        let fe = Frontend::new(&cfg, 0, 1);
        let corpus = build_corpus(0, &CorpusOptions::default());
        let stats = LatentStats::compute(&fe, corpus.train()).unwrap();
        let data = prepare_examples(&fe, &stats, corpus.train()).unwrap();
        let toks: Vec<&Vec<f64>> = data.iter().flat_map(|p| &p.tokens).collect();
        let n = toks.len() as f64;
        for k in 0..cfg.token_dim {
            let m = toks.iter().map(|t| t[k]).sum::<f64>() / n;
            let s = (toks.iter().map(|t| (t[k] - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 0.05 && (0.9..=1.1).contains(&s), "dim {k}: {m} {s}");
        }
        assert!(stats.std.iter().all(|&s| s > 0.0));
        assert!(toks.iter().flat_map(|t| t.iter()).all(|v| v.abs() <= stats.clip));
        let round = stats.destandardize(&stats.standardize(&fe.latent_tokens(&corpus.examples[0].image).unwrap()[3]));
        let orig = &fe.latent_tokens(&corpus.examples[0].image).unwrap()[3];
        assert!(round.iter().zip(orig).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn task_mix_over_many_batches() {
        let (cfg, data, _) = tiny_setup(8);
        for mix in [0.5, 0.3] {
            let tc = TrainConfig {
                task_mix_gen: mix,
                ..Default::default()
            };
            let (mut gen, mut total) = (0usize, 0usize);
            for step in 0..1000 {
                let b = sample_batch::<f32>(&cfg, &tc, &data, step).unwrap();
                gen += b.items.iter().filter(|i| i.stream.task == crate::sequence::Task::Gen).count();
                total += b.items.len();
            }
            assert!((gen as f64 / total as f64 - mix).abs() <= 0.03);
        }
    }

    #[test]
    fn batches_are_a_function_of_seed_and_step() {
        let (cfg, data, _) = tiny_setup(8);
        let tc = TrainConfig::default();
        let a = sample_batch::<f64>(&cfg, &tc, &data, 17).unwrap();
        let b = sample_batch::<f64>(&cfg, &tc, &data, 17).unwrap();
        let c = sample_batch::<f64>(&cfg, &tc, &data, 18).unwrap();
        assert_eq!(a.items, b.items);
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn loss_composition() {
        let (cfg, data, stats) = tiny_setup(4);
        let sched = DiffusionSchedule::cosine(cfg.t_train, cfg.sample_steps).unwrap().with_clip(Some(stats.clip));
        let mut p = ModelParams::<f64>::init(&cfg, 1);
        p.perturb(0.05, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = gen_item(&cfg, &data[0], OrderMode::Raster, &mut rng).unwrap();
        let und = und_item(&data[1], 2, &mut rng).unwrap();
        let mixed = vec![gen.clone(), und.clone()];
        let l0 = unified_loss(&cfg, &sched, &p, &mixed, 0.0).unwrap();
        assert_eq!(l0.total, l0.visual);
        assert!(l0.text > 0.0);
        let l1 = unified_loss(&cfg, &sched, &p, &[und.clone()], 1.0).unwrap();
        assert_eq!((l1.total, l1.visual), (l1.text, 0.0));
        let lg = unified_loss(&cfg, &sched, &p, &[gen], 1.0).unwrap();
        assert_eq!(lg.text, 0.0);
        assert!(matches!(
            unified_loss::<f64>(&cfg, &sched, &p, &[], 1.0),
            Err(Error::EmptyBatch)
        ));
        let (lg2, _) = unified_loss_and_grads(&cfg, &sched, &p, &mixed, 0.3, None).unwrap();
        let lf = unified_loss(&cfg, &sched, &p, &mixed, 0.3).unwrap();
        assert!((lg2.total - lf.total).abs() < 1e-12);
    }

    #[test]
    fn lambda_scales_text_head_gradient() {
        let (cfg, data, stats) = tiny_setup(4);
        let sched = DiffusionSchedule::cosine(cfg.t_train, cfg.sample_steps).unwrap().with_clip(Some(stats.clip));
        let mut p = ModelParams::<f64>::init(&cfg, 1);
        p.perturb(0.05, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = vec![
            gen_item(&cfg, &data[0], OrderMode::Random, &mut rng).unwrap(),
            und_item(&data[1], 0, &mut rng).unwrap(),
        ];
        let (_, g1) = unified_loss_and_grads(&cfg, &sched, &p, &batch, 0.2, None).unwrap();
        let (_, g3) = unified_loss_and_grads(&cfg, &sched, &p, &batch, 0.6, None).unwrap();
        for (a, b) in g1.text_head.w.data.iter().zip(&g3.text_head.w.data) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
        assert_eq!(g1.diffusion_head, g3.diffusion_head);
    }

    #[test]
    fn gradients_do_not_depend_on_thread_count() {
        let (cfg, data, stats) = tiny_setup(6);
        let sched = DiffusionSchedule::cosine(cfg.t_train, cfg.sample_steps).unwrap().with_clip(Some(stats.clip));
        let p = ModelParams::<f64>::init(&cfg, 1);
        let tc = TrainConfig { batch_size: 6, ..Default::default() };
        let batch = sample_batch::<f64>(&cfg, &tc, &data, 3).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (la, ga) = unified_loss_and_grads(&cfg, &sched, &p, &batch.items, 0.1, None).unwrap();
        let (lb, gb) = unified_loss_and_grads(&cfg, &sched, &p, &batch.items, 0.1, Some(&pool)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn grad_check_mixed_gen_und() {
        for which in [CheckBatch::Mixed, CheckBatch::GenOnly, CheckBatch::UndOnly] {
            let r = grad_check_tiny(0, which).unwrap();
            assert!(r.passed(), "{which:?}\n{r}");
            assert!(r.tensors.iter().all(|t| t.coords >= 10.min(t.coords.max(1))));
        }
    }

    #[test]
    fn text_head_gradient_matches_closed_form() {
        let (cfg, data, stats) = tiny_setup(2);
        let sched = DiffusionSchedule::cosine(cfg.t_train, cfg.sample_steps).unwrap().with_clip(Some(stats.clip));
        let p = ModelParams::<f64>::init(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let item = und_item::<f64>(&data[0], 1, &mut rng).unwrap();
        let (_, g) = unified_loss_and_grads(&cfg, &sched, &p, std::slice::from_ref(&item), 1.0, None).unwrap();
        // zero head: softmax is uniform, so dL/db = 1/V - mean one-hot of targets
        let z = forward(&cfg, &p.backbone, &item.stream, &item.mask).unwrap();
        let flagged: Vec<usize> = item.stream.flagged().collect();
        let v = cfg.vocab_size;
        let mut want_b = vec![1.0 / v as f64; v];
        let mut want_w = vec![0.0; v * cfg.d_model];
        for &pos in &flagged {
            let id = item.stream.entries[pos].token().unwrap() as usize;
            want_b[id] -= 1.0 / flagged.len() as f64;
            for c in 0..v {
                let coef = (1.0 / v as f64 - (c == id) as u8 as f64) / flagged.len() as f64;
                for k in 0..cfg.d_model {
                    want_w[c * cfg.d_model + k] += coef * z[pos - 1][k];
                }
            }
        }
        for (a, b) in g.text_head.b.data.iter().zip(&want_b) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.text_head.w.data.iter().zip(&want_w) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_replay() {
        let (cfg, data, stats) = tiny_setup(6);
        let run = || {
            let mut t = Trainer::<f64>::new(cfg.clone(), tiny_train_cfg(), data.clone(), stats.clone()).unwrap();
            let mut log = Vec::new();
            t.run(|m| {
                log.push(m.to_string());
                Ok(())
            })
            .unwrap();
            (t.params, log)
        };
        let (pa, la) = run();
        let (pb, lb) = run();
        assert_eq!(pa, pb);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 6);
        let m = StepMetrics::parse(&la[3]).unwrap();
        assert_eq!(m.to_string(), la[3]);
    }

    #[test]
    fn split_run_matches_uninterrupted_run() {
        let (cfg, data, stats) = tiny_setup(6);
        let mut full = Trainer::<f64>::new(cfg.clone(), tiny_train_cfg(), data.clone(), stats.clone()).unwrap();
        full.run(|_| Ok(())).unwrap();
        let mut first = Trainer::<f64>::new(cfg.clone(), tiny_train_cfg(), data.clone(), stats.clone()).unwrap();
        first.run_until(3, |_| Ok(())).unwrap();
        let mut second = Trainer::resume(cfg, tiny_train_cfg(), data, stats, first.params.clone(), Some(first.opt.clone()), 3).unwrap();
        second.run(|_| Ok(())).unwrap();
        assert_eq!(full.params, second.params);
    }

    #[test]
    fn zero_lambda_leaves_text_head_untouched() {
        let (cfg, data, stats) = tiny_setup(6);
        let tc = TrainConfig {
            lambda_text: 0.0,
            ..tiny_train_cfg()
        };
        let mut t = Trainer::<f64>::new(cfg, tc, data, stats).unwrap();
        let before = t.params.text_head.clone();
        let before_bb = t.params.backbone.clone();
        t.run(|_| Ok(())).unwrap();
        assert_eq!(t.params.text_head, before);
        assert_ne!(t.params.backbone, before_bb);
    }

    #[test]
    fn non_finite_loss_is_reported_with_step() {
        let (cfg, data, stats) = tiny_setup(6);
        let mut t = Trainer::<f64>::new(cfg, tiny_train_cfg(), data, stats).unwrap();
        t.train_step().unwrap();
        t.params.diffusion_head.b3.data[0] = f64::NAN;
        match t.train_step() {
            Err(Error::NonFiniteLoss { step: 1, detail }) => assert!(detail.contains("Lv=NaN"), "{detail}"),
            other => panic!("{:?}", other.map(|m| m.to_string())),
        }
    }

    #[test]
    fn task_sets_drop_the_other_task() {
        let (cfg, data, _) = tiny_setup(6);
        for (tasks, gen, und) in [(TaskSet::GenOnly, 16, 0), (TaskSet::UndOnly, 0, 16), (TaskSet::Unified, 16, 16)] {
            let tc = TrainConfig { tasks, ..Default::default() };
            let b = sample_batch::<f32>(&cfg, &tc, &data, 0).unwrap();
            let g = b.items.iter().filter(|i| i.stream.task == crate::sequence::Task::Gen).count();
            assert_eq!((g, b.items.len() - g), (gen, und));
        }
    }
}
