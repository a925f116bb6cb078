//! Output heads: a linear text classifier and a per-token diffusion MLP.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{DiffusionHeadParams, TextHeadParams};
use crate::tensor::{linear, linear_backward, log_sum_exp, silu, silu_grad, Float, Tensor};

pub fn text_logits<T: Float>(p: &TextHeadParams<T>, z: &[T]) -> Vec<T> {
    linear(z, &p.w, Some(&p.b))
}

/// Accumulates text-head gradients for one position and returns `dL/dz`.
pub fn text_head_backward<T: Float>(
    p: &TextHeadParams<T>,
    z: &[T],
    dlogits: &[T],
    g: &mut TextHeadParams<T>,
) -> Vec<T> {
    linear_backward(z, dlogits, &p.w, &mut g.w, Some(&mut g.b), true).unwrap()
}

fn check_text_shapes<T>(logits: &[Vec<T>], targets: &[u32], flags: &[bool]) -> Result<usize> {
    if logits.len() != targets.len() || logits.len() != flags.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows, {} targets, {} flags",
            logits.len(),
            targets.len(),
            flags.len()
        )));
    }
    let count = flags.iter().filter(|&&f| f).count();
    if count == 0 {
        return Err(Error::NoLossPositions);
    }
    Ok(count)
}

/// Mean cross-entropy over flagged positions.
pub fn text_loss<T: Float>(logits: &[Vec<T>], targets: &[u32], flags: &[bool]) -> Result<T> {
    Ok(text_loss_grad(logits, targets, flags)?.0)
}

/// Loss together with its gradient w.r.t. every logit row (zero rows where
/// the position is not flagged).
pub fn text_loss_grad<T: Float>(
    logits: &[Vec<T>],
    targets: &[u32],
    flags: &[bool],
) -> Result<(T, Vec<Vec<T>>)> {
    let count = check_text_shapes(logits, targets, flags)?;
    let inv = T::one() / T::of(count as f64);
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for ((row, &target), &flag) in logits.iter().zip(targets).zip(flags) {
        let target = target as usize;
        if target >= row.len() {
            return Err(Error::ShapeMismatch(format!("target {target} outside {} classes", row.len())));
        }
        if !flag {
            grads.push(vec![T::zero(); row.len()]);
            continue;
        }
        let lse = log_sum_exp(row);
        loss += (lse - row[target]) * inv;
        let mut g: Vec<T> = row.iter().map(|&l| (l - lse).exp() * inv).collect();
        g[target] -= inv;
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Cosine noise schedule and the strided subset used for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t_train: usize,
    /// `t_train + 1` entries; index 0 is the clean signal.
    pub alpha_bar: Vec<f64>,
    pub sample_steps: usize,
    /// Clamp applied to the predicted clean token during sampling.
    pub x0_clip: Option<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl DiffusionSchedule {
    pub fn cosine(t_train: usize, sample_steps: usize) -> Result<Self> {
        if t_train == 0 || sample_steps == 0 || sample_steps > t_train {
            return Err(Error::NumericalFailure(format!(
                "need 1 <= sample_steps ({sample_steps}) <= t_train ({t_train})"
            )));
        }
        let f = |t: usize| {
            let u = (t as f64 / t_train as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(t_train + 1);
        alpha_bar.push(1.0);
        for t in 1..=t_train {
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Ok(Self {
            t_train,
            alpha_bar,
            sample_steps,
            x0_clip: None,
        })
    }

    /// Timesteps visited by the sampler: `0 = s_0 < s_1 < ... < s_S = t_train`
    /// with `s_i = round(i * t_train / S)`. Sampling walks this list from the
    /// end and finishes at the clean index 0.
    pub fn sample_ts(&self) -> Vec<usize> {
        (0..=self.sample_steps)
            .map(|i| ((i * self.t_train) as f64 / self.sample_steps as f64).round() as usize)
            .collect()
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.x0_clip = clip;
        self
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn time_embedding<T: Float>(t: usize, dim: usize) -> Vec<T> {
    let half = (dim / 2).max(1);
    (0..dim)
        .map(|i| {
            let k = (i % half) as f64;
            let a = t as f64 * (-(10000f64).ln() * k / half as f64).exp();
            T::of(if i < half { a.sin() } else { a.cos() })
        })
        .collect()
}

/// Anything that predicts the noise in `x_t`.
pub trait EpsModel<T: Float> {
    fn token_dim(&self) -> usize;
    fn predict_eps(&self, x_t: &[T], t: usize, z: &[T]) -> Vec<T>;

    /// Several tokens at once, one row each.
    fn predict_eps_rows(&self, x_t: &[T], ts: &[usize], z: &[T]) -> Vec<T> {
        let m = ts.len();
        let (td, cond) = (x_t.len() / m, z.len() / m);
        (0..m)
            .flat_map(|i| self.predict_eps(&x_t[i * td..(i + 1) * td], ts[i], &z[i * cond..(i + 1) * cond]))
            .collect()
    }
}

/// Activations of one head evaluation.
#[derive(Debug, Clone)]
pub struct HeadTrace<T> {
    input: Vec<T>,
    cond: usize,
    a1: Vec<T>,
    h1: Vec<T>,
    a2: Vec<T>,
    h2: Vec<T>,
    pub out: Vec<T>,
}

impl<T: Float> DiffusionHeadParams<T> {
    /// Standalone head with the same initialization rules as the full model.
    pub fn init(token_dim: usize, cond_dim: usize, d_time: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let s: f64 = StandardNormal.sample(&mut rng);
                    T::of(std * s)
                })
                .collect();
            Tensor::from_vec(shape, data)
        };
        let inp = token_dim + cond_dim + d_time;
        Self {
            w1: normal(&[width, inp], 1.0 / (inp as f64).sqrt()),
            b1: Tensor::zeros(&[width]),
            w2: normal(&[width, width], 1.0 / (width as f64).sqrt()),
            b2: Tensor::zeros(&[width]),
            w3: normal(&[token_dim, width], 0.1 / (width as f64).sqrt()),
            b3: Tensor::zeros(&[token_dim]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    pub fn forward(&self, x_t: &[T], t: usize, z: &[T]) -> HeadTrace<T> {
        self.forward_rows(x_t, &[t], z)
    }

    /// Evaluates `ts.len()` tokens at once; `x_t` and `z` hold one row per
    /// token.
    pub fn forward_rows(&self, x_t: &[T], ts: &[usize], z: &[T]) -> HeadTrace<T> {
        let m = ts.len();
        let (td, cond) = (x_t.len() / m, z.len() / m);
        let inp = self.w1.cols();
        let d_time = inp - td - cond;
        let mut input = Vec::with_capacity(m * inp);
        for (i, &t) in ts.iter().enumerate() {
            input.extend_from_slice(&x_t[i * td..(i + 1) * td]);
            input.extend_from_slice(&z[i * cond..(i + 1) * cond]);
            input.extend(time_embedding::<T>(t, d_time));
        }
        let a1 = linear(&input, &self.w1, Some(&self.b1));
        let h1: Vec<T> = a1.iter().map(|&a| silu(a)).collect();
        let a2 = linear(&h1, &self.w2, Some(&self.b2));
        let h2: Vec<T> = a2.iter().map(|&a| silu(a)).collect();
        let out = linear(&h2, &self.w3, Some(&self.b3));
        HeadTrace {
            input,
            cond,
            a1,
            h1,
            a2,
            h2,
            out,
        }
    }

    /// Accumulates gradients and returns `dL/dz`, one row per token.
    pub fn backward(&self, tr: &HeadTrace<T>, dout: &[T], g: &mut Self) -> Vec<T> {
        let dh2 = linear_backward(&tr.h2, dout, &self.w3, &mut g.w3, Some(&mut g.b3), true).unwrap();
        let da2: Vec<T> = dh2.iter().zip(&tr.a2).map(|(&d, &a)| d * silu_grad(a)).collect();
        let dh1 = linear_backward(&tr.h1, &da2, &self.w2, &mut g.w2, Some(&mut g.b2), true).unwrap();
        let da1: Vec<T> = dh1.iter().zip(&tr.a1).map(|(&d, &a)| d * silu_grad(a)).collect();
        let din = linear_backward(&tr.input, &da1, &self.w1, &mut g.w1, Some(&mut g.b1), true).unwrap();
        let td = self.w3.rows();
        let inp = self.w1.cols();
        din.chunks_exact(inp).flat_map(|r| r[td..td + tr.cond].iter().copied()).collect()
    }
}

impl<T: Float> EpsModel<T> for DiffusionHeadParams<T> {
    fn token_dim(&self) -> usize {
        self.w3.rows()
    }

    fn predict_eps(&self, x_t: &[T], t: usize, z: &[T]) -> Vec<T> {
        self.forward(x_t, t, z).out
    }

    fn predict_eps_rows(&self, x_t: &[T], ts: &[usize], z: &[T]) -> Vec<T> {
        self.forward_rows(x_t, ts, z).out
    }
}

/// One `(t, ε)` draw for a token.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub t: usize,
    pub eps: Vec<T>,
}

pub fn draw_noise<T: Float, R: Rng + ?Sized>(sched: &DiffusionSchedule, dim: usize, rng: &mut R) -> NoiseDraw<T> {
    let t = rng.gen_range(1..=sched.t_train);
    let eps = (0..dim)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            T::of(n)
        })
        .collect();
    NoiseDraw { t, eps }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) ε`.
pub fn add_noise<T: Float>(sched: &DiffusionSchedule, x0: &[T], draw: &NoiseDraw<T>) -> Vec<T> {
    let ab = sched.alpha_bar[draw.t];
    let (a, s) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    x0.iter().zip(&draw.eps).map(|(&x, &e)| a * x + s * e).collect()
}

/// `||ε̂ - ε||² / token_dim` for a given draw.
pub fn diffusion_loss_at<T: Float, M: EpsModel<T> + ?Sized>(
    model: &M,
    sched: &DiffusionSchedule,
    x0: &[T],
    z: &[T],
    draw: &NoiseDraw<T>,
) -> T {
    diffusion_losses_rows(model, sched, x0, z, std::slice::from_ref(draw))[0]
}

/// Per-token diffusion loss with a fresh `(t, ε)` draw.
pub fn diffusion_loss<T: Float, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    sched: &DiffusionSchedule,
    x0: &[T],
    z: &[T],
    rng: &mut R,
) -> T {
    let draw = draw_noise(sched, x0.len(), rng);
    diffusion_loss_at(model, sched, x0, z, &draw)
}

/// Loss for a given draw plus head gradients; returns `(loss, dL/dz)`.
/// `weight` scales the gradient (the loss is returned unscaled).
pub fn diffusion_loss_grad<T: Float>(
    p: &DiffusionHeadParams<T>,
    sched: &DiffusionSchedule,
    x0: &[T],
    z: &[T],
    draw: &NoiseDraw<T>,
    weight: T,
    g: &mut DiffusionHeadParams<T>,
) -> (T, Vec<T>) {
    let (losses, dz) = diffusion_loss_grad_rows(p, sched, x0, z, std::slice::from_ref(draw), weight, g);
    (losses[0], dz)
}

fn noised_rows<T: Float>(sched: &DiffusionSchedule, x0: &[T], draws: &[NoiseDraw<T>]) -> (Vec<T>, Vec<usize>) {
    let td = x0.len() / draws.len();
    let x_t = x0.chunks_exact(td).zip(draws).flat_map(|(x, d)| add_noise(sched, x, d)).collect();
    (x_t, draws.iter().map(|d| d.t).collect())
}

fn row_losses<T: Float>(out: &[T], draws: &[NoiseDraw<T>]) -> Vec<T> {
    let td = out.len() / draws.len();
    out.chunks_exact(td)
        .zip(draws)
        .map(|(o, d)| o.iter().zip(&d.eps).map(|(&o, &e)| (o - e) * (o - e)).sum::<T>() / T::of(td as f64))
        .collect()
}

/// Per-token losses for one draw per row of `x0`/`z`.
pub fn diffusion_losses_rows<T: Float, M: EpsModel<T> + ?Sized>(
    model: &M,
    sched: &DiffusionSchedule,
    x0: &[T],
    z: &[T],
    draws: &[NoiseDraw<T>],
) -> Vec<T> {
    if draws.is_empty() {
        return Vec::new();
    }
    let (x_t, ts) = noised_rows(sched, x0, draws);
    row_losses(&model.predict_eps_rows(&x_t, &ts, z), draws)
}

/// Batched [`diffusion_loss_grad`]: per-token losses and `dL/dz` rows.
pub fn diffusion_loss_grad_rows<T: Float>(
    p: &DiffusionHeadParams<T>,
    sched: &DiffusionSchedule,
    x0: &[T],
    z: &[T],
    draws: &[NoiseDraw<T>],
    weight: T,
    g: &mut DiffusionHeadParams<T>,
) -> (Vec<T>, Vec<T>) {
    if draws.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let (x_t, ts) = noised_rows(sched, x0, draws);
    let tr = p.forward_rows(&x_t, &ts, z);
    let td = x0.len() / draws.len();
    let scale = T::of(2.0 / td as f64) * weight;
    let dout: Vec<T> = tr
        .out
        .chunks_exact(td)
        .zip(draws)
        .flat_map(|(o, d)| o.iter().zip(&d.eps).map(move |(&o, &e)| (o - e) * scale))
        .collect();
    let losses = row_losses(&tr.out, draws);
    let dz = p.backward(&tr, &dout, g);
    (losses, dz)
}

/// Ancestral DDPM sampling over the strided timesteps, conditioned on `z`.
pub fn diffusion_sample<T: Float, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    sched: &DiffusionSchedule,
    z: &[T],
    rng: &mut R,
) -> Vec<T> {
    let dim = model.token_dim();
    let mut x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let ts = sched.sample_ts();
    for k in (1..ts.len()).rev() {
        let (t, s) = (ts[k], ts[k - 1]);
        let (ab_t, ab_s) = (sched.alpha_bar[t], sched.alpha_bar[s]);
        let beta = 1.0 - ab_t / ab_s;
        let xt: Vec<T> = x.iter().map(|&v| T::of(v)).collect();
        let eps = model.predict_eps(&xt, t, z);
        let c_x0 = ab_s.sqrt() * beta / (1.0 - ab_t);
        let c_xt = (ab_t / ab_s).sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        let var = beta * (1.0 - ab_s) / (1.0 - ab_t);
        for (xi, e) in x.iter_mut().zip(&eps) {
            let mut x0 = (*xi - (1.0 - ab_t).sqrt() * e.as_f64()) / ab_t.sqrt();
            if let Some(c) = sched.x0_clip {
                x0 = x0.clamp(-c, c);
            }
            *xi = c_x0 * x0 + c_xt * *xi;
        }
        if s > 0 {
            for xi in x.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut *rng);
                *xi += var.sqrt() * n;
            }
        }
    }
    x.into_iter().map(T::of).collect()
}
