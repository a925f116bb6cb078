//! Model configuration and the named parameter set shared by the backbone
//! and both heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sequence::TokenGrid;
use crate::tensor::{Float, Tensor};

/// Architecture of the backbone and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    /// Dimension of one continuous image token (merged latent patch).
    pub token_dim: usize,
    pub grid: TokenGrid,
    pub head_width: usize,
    pub d_time: usize,
    pub t_train: usize,
    pub sample_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq: 128,
            vocab_size: 64,
            token_dim: 16,
            grid: TokenGrid { rows: 4, cols: 4 },
            head_width: 256,
            d_time: 64,
            t_train: 1000,
            sample_steps: 100,
        }
    }
}

impl ModelConfig {
    /// One layer, `d_model = 16`: the configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq: 48,
            head_width: 24,
            d_time: 8,
            t_train: 100,
            sample_steps: 20,
            ..Self::default()
        }
    }

    pub fn n_img(&self) -> usize {
        self.grid.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ShapeMismatch(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_time % 2 != 0 {
            return bad(format!("d_time {} must be even", self.d_time));
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_train {
            return bad(format!(
                "sample_steps {} must be in 1..={}",
                self.sample_steps, self.t_train
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub tok_emb: Tensor<T>,
    pub img_w: Tensor<T>,
    pub img_b: Tensor<T>,
    pub pos1d: Tensor<T>,
    pub pos2d: Tensor<T>,
    /// `n_img + 1` rows; the last row is the sentinel.
    pub target_pos: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextHeadParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Three-layer MLP over `[x_t, z, time embedding]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionHeadParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub backbone: BackboneParams<T>,
    pub text_head: TextHeadParams<T>,
    pub diffusion_head: DiffusionHeadParams<T>,
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal<T: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut *self.rng);
                T::of(std * n)
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// `out × in` weight with `1/sqrt(in)` scaling.
    fn linear<T: Float>(&mut self, out: usize, inp: usize) -> Tensor<T> {
        self.normal(&[out, inp], 1.0 / (inp as f64).sqrt())
    }
}

fn ones<T: Float>(n: usize) -> Tensor<T> {
    Tensor::from_vec(&[n], vec![T::one(); n])
}

impl<T: Float> ModelParams<T> {
    /// Seeded initialization. The text head starts at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let d = cfg.d_model;
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_g: ones(d),
                ln1_b: Tensor::zeros(&[d]),
                wq: init.linear(d, d),
                wk: init.linear(d, d),
                wv: init.linear(d, d),
                wo: init.normal(&[d, d], 1.0 / ((d * 2 * cfg.n_layers) as f64).sqrt()),
                ln2_g: ones(d),
                ln2_b: Tensor::zeros(&[d]),
                w1: init.linear(cfg.d_ff, d),
                b1: Tensor::zeros(&[cfg.d_ff]),
                w2: init.normal(&[d, cfg.d_ff], 1.0 / ((cfg.d_ff * 2 * cfg.n_layers) as f64).sqrt()),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let backbone = BackboneParams {
            tok_emb: init.normal(&[cfg.vocab_size, d], 0.5),
            img_w: init.linear(d, cfg.token_dim),
            img_b: Tensor::zeros(&[d]),
            pos1d: init.normal(&[cfg.max_seq, d], 0.1),
            pos2d: init.normal(&[cfg.n_img(), d], 0.1),
            target_pos: init.normal(&[cfg.n_img() + 1, d], 0.1),
            blocks,
            lnf_g: ones(d),
            lnf_b: Tensor::zeros(&[d]),
        };
        let text_head = TextHeadParams {
            w: Tensor::zeros(&[cfg.vocab_size, d]),
            b: Tensor::zeros(&[cfg.vocab_size]),
        };
        let head_in = cfg.token_dim + d + cfg.d_time;
        let w3 = init.normal(&[cfg.token_dim, cfg.head_width], 0.1 / (cfg.head_width as f64).sqrt());
        let diffusion_head = DiffusionHeadParams {
            w1: init.linear(cfg.head_width, head_in),
            b1: Tensor::zeros(&[cfg.head_width]),
            w2: init.linear(cfg.head_width, cfg.head_width),
            b2: Tensor::zeros(&[cfg.head_width]),
            w3,
            b3: Tensor::zeros(&[cfg.token_dim]),
        };
        Self {
            backbone,
            text_head,
            diffusion_head,
        }
    }

    /// A copy with every tensor zeroed; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, t| t.fill(T::zero()));
        out
    }

    /// Tensors in canonical order with their unique names.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let bb = &self.backbone;
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("backbone.tok_emb".into(), &bb.tok_emb),
            ("backbone.img_w".into(), &bb.img_w),
            ("backbone.img_b".into(), &bb.img_b),
            ("backbone.pos1d".into(), &bb.pos1d),
            ("backbone.pos2d".into(), &bb.pos2d),
            ("backbone.target_pos".into(), &bb.target_pos),
        ];
        for (i, b) in bb.blocks.iter().enumerate() {
            let p = |n: &str| format!("backbone.blocks.{i}.{n}");
            out.extend([
                (p("ln1_g"), &b.ln1_g),
                (p("ln1_b"), &b.ln1_b),
                (p("wq"), &b.wq),
                (p("wk"), &b.wk),
                (p("wv"), &b.wv),
                (p("wo"), &b.wo),
                (p("ln2_g"), &b.ln2_g),
                (p("ln2_b"), &b.ln2_b),
                (p("w1"), &b.w1),
                (p("b1"), &b.b1),
                (p("w2"), &b.w2),
                (p("b2"), &b.b2),
            ]);
        }
        let dh = &self.diffusion_head;
        out.extend([
            ("backbone.lnf_g".into(), &bb.lnf_g),
            ("backbone.lnf_b".into(), &bb.lnf_b),
            ("text_head.w".into(), &self.text_head.w),
            ("text_head.b".into(), &self.text_head.b),
            ("diffusion_head.w1".into(), &dh.w1),
            ("diffusion_head.b1".into(), &dh.b1),
            ("diffusion_head.w2".into(), &dh.w2),
            ("diffusion_head.b2".into(), &dh.b2),
            ("diffusion_head.w3".into(), &dh.w3),
            ("diffusion_head.b3".into(), &dh.b3),
        ]);
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let bb = &mut self.backbone;
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("backbone.tok_emb".into(), &mut bb.tok_emb),
            ("backbone.img_w".into(), &mut bb.img_w),
            ("backbone.img_b".into(), &mut bb.img_b),
            ("backbone.pos1d".into(), &mut bb.pos1d),
            ("backbone.pos2d".into(), &mut bb.pos2d),
            ("backbone.target_pos".into(), &mut bb.target_pos),
        ];
        for (i, b) in bb.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("backbone.blocks.{i}.{n}");
            out.extend([
                (p("ln1_g"), &mut b.ln1_g),
                (p("ln1_b"), &mut b.ln1_b),
                (p("wq"), &mut b.wq),
                (p("wk"), &mut b.wk),
                (p("wv"), &mut b.wv),
                (p("wo"), &mut b.wo),
                (p("ln2_g"), &mut b.ln2_g),
                (p("ln2_b"), &mut b.ln2_b),
                (p("w1"), &mut b.w1),
                (p("b1"), &mut b.b1),
                (p("w2"), &mut b.w2),
                (p("b2"), &mut b.b2),
            ]);
        }
        let dh = &mut self.diffusion_head;
        out.extend([
            ("backbone.lnf_g".into(), &mut bb.lnf_g),
            ("backbone.lnf_b".into(), &mut bb.lnf_b),
            ("text_head.w".into(), &mut self.text_head.w),
            ("text_head.b".into(), &mut self.text_head.b),
            ("diffusion_head.w1".into(), &mut dh.w1),
            ("diffusion_head.b1".into(), &mut dh.b1),
            ("diffusion_head.w2".into(), &mut dh.w2),
            ("diffusion_head.b2".into(), &mut dh.b2),
            ("diffusion_head.w3".into(), &mut dh.w3),
            ("diffusion_head.b3".into(), &mut dh.b3),
        ]);
        out
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        for (n, t) in self.tensors() {
            f(&n, t);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (n, t) in self.tensors_mut() {
            f(&n, t);
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }

    /// Tensors in canonical order, cloned out.
    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each(|n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Overwrites tensors from a named list. Every name must be present with
    /// the expected shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        let mut err = None;
        self.for_each_mut(|n, t| {
            if err.is_some() {
                return;
            }
            match named.iter().find(|(m, _)| m == n) {
                Some((_, src)) if src.shape == t.shape => t.data.copy_from_slice(&src.data),
                Some((_, src)) => {
                    err = Some(Error::ShapeMismatch(format!(
                        "`{n}`: expected {:?}, found {:?}",
                        t.shape, src.shape
                    )))
                }
                None => err = Some(Error::ShapeMismatch(format!("missing tensor `{n}`"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.all_finite());
        ok
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, t), (_, o)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            t.add_assign(o);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.for_each_mut(|_, t| t.data.iter_mut().for_each(|x| *x *= s));
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        let named: Vec<(String, Tensor<U>)> =
            self.to_named().into_iter().map(|(n, t)| (n, t.cast())).collect();
        let mut out = ModelParams::<U>::shell_like(self);
        out.load_named(&named).expect("same layout");
        out
    }

    fn shell_like<S: Float>(src: &ModelParams<S>) -> Self {
        let z = |t: &Tensor<S>| Tensor::<T>::zeros(&t.shape);
        let bb = &src.backbone;
        ModelParams {
            backbone: BackboneParams {
                tok_emb: z(&bb.tok_emb),
                img_w: z(&bb.img_w),
                img_b: z(&bb.img_b),
                pos1d: z(&bb.pos1d),
                pos2d: z(&bb.pos2d),
                target_pos: z(&bb.target_pos),
                blocks: bb
                    .blocks
                    .iter()
                    .map(|b| BlockParams {
                        ln1_g: z(&b.ln1_g),
                        ln1_b: z(&b.ln1_b),
                        wq: z(&b.wq),
                        wk: z(&b.wk),
                        wv: z(&b.wv),
                        wo: z(&b.wo),
                        ln2_g: z(&b.ln2_g),
                        ln2_b: z(&b.ln2_b),
                        w1: z(&b.w1),
                        b1: z(&b.b1),
                        w2: z(&b.w2),
                        b2: z(&b.b2),
                    })
                    .collect(),
                lnf_g: z(&bb.lnf_g),
                lnf_b: z(&bb.lnf_b),
            },
            text_head: TextHeadParams {
                w: z(&src.text_head.w),
                b: z(&src.text_head.b),
            },
            diffusion_head: DiffusionHeadParams {
                w1: z(&src.diffusion_head.w1),
                b1: z(&src.diffusion_head.b1),
                w2: z(&src.diffusion_head.w2),
                b2: z(&src.diffusion_head.b2),
                w3: z(&src.diffusion_head.w3),
                b3: z(&src.diffusion_head.b3),
            },
        }
    }

    /// Adds `N(0, std²)` noise to every tensor; gradient checks use this to
    /// move away from the zero-initialized text head.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.for_each_mut(|_, t| {
            for x in t.data.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *x += T::of(std * n);
            }
        });
    }
}
