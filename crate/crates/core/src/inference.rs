//! Inference: image generation with diffusion sampling per token, and greedy
//! text decoding for captioning and question answering.
//!
//! Both run incrementally over a [`KvCache`] by default; [`Decode::Recompute`]
//! re-runs the full forward pass at every step and serves as the reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{forward, forward_incremental, AppendPolicy, KvCache};
use crate::codec::{ToyImage, EOS};
use crate::data::CAPTION_QUESTION;
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::heads::{diffusion_sample, text_logits, DiffusionSchedule};
use crate::model::{ModelConfig, ModelParams};
use crate::sequence::{
    build_understanding_sequence, generation_prefix, image_entry, sample_permutation, text_entry,
    AttentionMask, OrderMode, Permutation, Task, TokenStream,
};
use crate::tensor::Float;
use crate::training::LatentStats;

/// Greedy decoding stops after this many tokens if no EOS appears.
pub const MAX_ANSWER_TOKENS: usize = 16;

/// Everything needed to run a trained model.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ModelParams<T>,
    pub stats: LatentStats,
    pub sched: DiffusionSchedule,
    pub frontend: Frontend,
}

impl<T: Float> Model<T> {
    pub fn new(cfg: ModelConfig, params: ModelParams<T>, stats: LatentStats, frontend: Frontend) -> Result<Self> {
        cfg.validate()?;
        let sched = DiffusionSchedule::cosine(cfg.t_train, cfg.sample_steps)?.with_clip(Some(stats.clip));
        Ok(Self {
            cfg,
            params,
            stats,
            sched,
            frontend,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode {
    Cached,
    Recompute,
}

/// Incremental decoder state for one sequence.
enum Stepper<'a, T: Float> {
    Cached {
        model: &'a Model<T>,
        cache: KvCache<T>,
    },
    Recompute {
        model: &'a Model<T>,
        stream: TokenStream<T>,
        prefix: usize,
    },
}

impl<'a, T: Float> Stepper<'a, T> {
    /// Starts from a bidirectional prefix and returns the output of its last
    /// entry.
    fn start(model: &'a Model<T>, prefix: TokenStream<T>, decode: Decode) -> Result<(Self, Vec<T>)> {
        match decode {
            Decode::Cached => {
                let mut cache = KvCache::new(&model.cfg);
                let z = forward_incremental(&model.cfg, &model.params.backbone, &mut cache, &prefix.entries, AppendPolicy::Bidirectional)?;
                Ok((Self::Cached { model, cache }, z.last().cloned().unwrap_or_default()))
            }
            Decode::Recompute => {
                let n = prefix.len();
                let z = forward(&model.cfg, &model.params.backbone, &prefix, &AttentionMask::prefix_lm(n, n))?;
                Ok((
                    Self::Recompute {
                        model,
                        stream: prefix,
                        prefix: n,
                    },
                    z.last().cloned().unwrap_or_default(),
                ))
            }
        }
    }

    /// Appends one causal entry and returns its output.
    fn push(&mut self, entry: crate::sequence::Entry<T>) -> Result<Vec<T>> {
        match self {
            Self::Cached { model, cache } => {
                let z = forward_incremental(&model.cfg, &model.params.backbone, cache, std::slice::from_ref(&entry), AppendPolicy::Causal)?;
                Ok(z.into_iter().next().unwrap())
            }
            Self::Recompute { model, stream, prefix } => {
                if stream.len() + 1 > model.cfg.max_seq {
                    return Err(Error::CacheOverflow {
                        needed: stream.len() + 1,
                        capacity: model.cfg.max_seq,
                    });
                }
                stream.entries.push(entry);
                let mask = AttentionMask::prefix_lm(stream.len(), *prefix);
                let z = forward(&model.cfg, &model.params.backbone, stream, &mask)?;
                Ok(z.into_iter().last().unwrap())
            }
        }
    }
}

/// Samples the image tokens for a prompt in the order given by `perm`.
/// Tokens are returned standardized and in generation order.
pub fn sample_latents<T: Float>(
    model: &Model<T>,
    prompt_ids: &[u32],
    perm: &Permutation,
    rng: &mut ChaCha8Rng,
    decode: Decode,
) -> Result<Vec<Vec<T>>> {
    let cfg = &model.cfg;
    if perm.len() != cfg.n_img() {
        return Err(Error::InvalidPermutation(format!("permutation of {} for {} tokens", perm.len(), cfg.n_img())));
    }
    let prefix = TokenStream {
        task: Task::Gen,
        entries: generation_prefix(prompt_ids, perm, cfg.grid),
    };
    let (mut stepper, mut z) = Stepper::start(model, prefix, decode)?;
    let mut out = Vec::with_capacity(cfg.n_img());
    for k in 0..cfg.n_img() {
        let x = diffusion_sample(&model.params.diffusion_head, &model.sched, &z, rng);
        if k + 1 < cfg.n_img() {
            z = stepper.push(image_entry(x.clone(), k, perm, cfg.grid))?;
        }
        out.push(x);
    }
    Ok(out)
}

/// Places generation-order tokens on the grid, undoes standardization and
/// decodes to pixels.
pub fn latents_to_image<T: Float>(model: &Model<T>, tokens: &[Vec<T>], perm: &Permutation) -> Result<ToyImage> {
    let mut raster = vec![Vec::new(); tokens.len()];
    for (tok, &cell) in tokens.iter().zip(perm.order()) {
        let v: Vec<f64> = tok.iter().map(|x| x.as_f64()).collect();
        raster[cell] = model.stats.destandardize(&v);
    }
    model.frontend.decode_tokens(&raster)
}

/// Seed of sample `i` in a call that starts from `seed`.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// One generated image from its own seed; the permutation is drawn first.
pub fn generate_one<T: Float>(model: &Model<T>, prompt_ids: &[u32], seed: u64, order: OrderMode, decode: Decode) -> Result<ToyImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = sample_permutation(order, model.cfg.n_img(), &mut rng);
    let tokens = sample_latents(model, prompt_ids, &perm, &mut rng, decode)?;
    latents_to_image(model, &tokens, &perm)
}

/// `n` images for a text prompt; sample `i` uses seed `seed + i`.
pub fn generate<T: Float>(model: &Model<T>, prompt: &str, n: usize, seed: u64, order: OrderMode) -> Result<Vec<ToyImage>> {
    let ids = model.frontend.vocab.tokenize(prompt)?;
    (0..n)
        .into_par_iter()
        .map(|i| generate_one(model, &ids, sample_seed(seed, i), order, Decode::Cached))
        .collect()
}

fn argmax<T: Float>(v: &[T]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding after an understanding prefix. Returns the tokens before
/// EOS and the logits of every decoding step (including the EOS step).
pub fn greedy_decode<T: Float>(
    model: &Model<T>,
    features: &[Vec<T>],
    question_ids: &[u32],
    decode: Decode,
) -> Result<(Vec<u32>, Vec<Vec<T>>)> {
    let (prefix, _) = build_understanding_sequence(features, question_ids, &[])?;
    let mut pos = prefix.len();
    let (mut stepper, mut z) = Stepper::start(model, prefix, decode)?;
    let mut ids = Vec::new();
    let mut all_logits = Vec::new();
    for _ in 0..MAX_ANSWER_TOKENS {
        let logits = text_logits(&model.params.text_head, &z);
        let id = argmax(&logits);
        all_logits.push(logits);
        if id == EOS {
            break;
        }
        ids.push(id);
        if ids.len() == MAX_ANSWER_TOKENS {
            break;
        }
        z = stepper.push(text_entry(id, pos, Task::Und, false))?;
        pos += 1;
    }
    Ok((ids, all_logits))
}

fn image_features<T: Float>(fe: &Frontend, img: &ToyImage) -> Result<Vec<Vec<T>>> {
    Ok(fe
        .features(img)?
        .into_iter()
        .map(|r| r.into_iter().map(T::of).collect())
        .collect())
}

/// Greedy answer to a question about an image.
pub fn answer<T: Float>(model: &Model<T>, img: &ToyImage, question: &str) -> Result<String> {
    let q = model.frontend.vocab.tokenize(question)?;
    let feats = image_features(&model.frontend, img)?;
    let (ids, _) = greedy_decode(model, &feats, &q, Decode::Cached)?;
    Ok(model.frontend.vocab.detokenize(&ids))
}

pub fn caption<T: Float>(model: &Model<T>, img: &ToyImage) -> Result<String> {
    answer(model, img, CAPTION_QUESTION)
}

/// Fraction of answer positions (and EOS) where the greedy token under
/// teacher forcing equals the reference, with the count of positions.
pub fn teacher_forced_hits<T: Float>(model: &Model<T>, img: &ToyImage, question: &str, reference: &str) -> Result<(usize, usize)> {
    let fe = &model.frontend;
    let q = fe.vocab.tokenize(question)?;
    let a = fe.vocab.tokenize(reference)?;
    let feats = image_features(fe, img)?;
    let (stream, mask) = build_understanding_sequence(&feats, &q, &a)?;
    let z = forward(&model.cfg, &model.params.backbone, &stream, &mask)?;
    let mut hits = 0;
    let mut total = 0;
    for p in stream.flagged() {
        let want = stream.entries[p].token().expect("answer entries are tokens");
        hits += (argmax(&text_logits(&model.params.text_head, &z[p - 1])) == want) as usize;
        total += 1;
    }
    Ok((hits, total))
}
