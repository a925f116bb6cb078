//! Packed multimodal token streams, prefix-LM masks and image-token orders.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::codec::{BOI, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
    Boi,
    EncFeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Gen,
    Und,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload<T> {
    Token(u32),
    Vector(Vec<T>),
}

/// Grid cell a next-target embedding points at. The last image token has no
/// successor and points at the sentinel row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetPos {
    Cell(usize, usize),
    Sentinel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub modality: Modality,
    pub payload: Payload<T>,
    pub pos1d: Option<usize>,
    pub pos2d: Option<(usize, usize)>,
    pub target_pos2d: Option<TargetPos>,
    pub loss_flag: bool,
    pub task: Task,
}

impl<T> Entry<T> {
    pub fn token(&self) -> Option<u32> {
        match self.payload {
            Payload::Token(id) => Some(id),
            Payload::Vector(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[T]> {
        match &self.payload {
            Payload::Vector(v) => Some(v),
            Payload::Token(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream<T> {
    pub task: Task,
    pub entries: Vec<Entry<T>>,
}

impl<T> TokenStream<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Positions whose entry carries a loss flag.
    pub fn flagged(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.loss_flag)
            .map(|(i, _)| i)
    }
}

/// Prefix-LM allow matrix: the first `prefix_len` positions see each other
/// bidirectionally, the rest are causal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    prefix_len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn prefix_lm(n: usize, prefix_len: usize) -> Self {
        let prefix_len = prefix_len.min(n);
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allow[i * n + j] = if i < prefix_len { j < prefix_len } else { j <= i };
            }
        }
        Self {
            n,
            prefix_len,
            allow,
        }
    }

    pub fn causal(n: usize) -> Self {
        Self::prefix_lm(n, 0)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.n..(i + 1) * self.n]
    }
}

/// Shape of the merged image-token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn index(&self, (r, c): (usize, usize)) -> usize {
        r * self.cols + c
    }
}

/// Order in which image tokens are produced; `order[k]` is the raster index
/// of the k-th generated token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
        }
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::InvalidPermutation(format!("{order:?}")));
            }
            seen[i] = true;
        }
        Ok(Self { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(k, &i)| k == i)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrderMode {
    Raster,
    Random,
}

/// `Raster` is the identity; `Random` is uniform over all `n!` orders.
pub fn sample_permutation<R: Rng + ?Sized>(mode: OrderMode, n_img: usize, rng: &mut R) -> Permutation {
    let mut p = Permutation::identity(n_img);
    if mode == OrderMode::Random {
        p.order.shuffle(rng);
    }
    p
}

/// A text-token entry at 1D position `pos`.
pub fn text_entry<T>(id: u32, pos: usize, task: Task, loss: bool) -> Entry<T> {
    Entry {
        modality: Modality::Text,
        payload: Payload::Token(id),
        pos1d: Some(pos),
        pos2d: None,
        target_pos2d: None,
        loss_flag: loss,
        task,
    }
}

/// `[BOS, prompt…, BOI, image tokens in permuted order]`.
///
/// BOS, prompt and BOI form the bidirectional prefix. Image entry `k` sits at
/// cell `perm[k]` and carries the next-target embedding of `perm[k + 1]`; BOI
/// carries `perm[0]`.
pub fn build_generation_sequence<T: Float>(
    prompt_ids: &[u32],
    latent_tokens: &[Vec<T>],
    perm: &Permutation,
    grid: TokenGrid,
) -> Result<(TokenStream<T>, AttentionMask)> {
    if latent_tokens.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: latent_tokens.len(),
        });
    }
    if perm.len() != grid.len() {
        return Err(Error::InvalidPermutation(format!(
            "permutation of {} for {} image tokens",
            perm.len(),
            grid.len()
        )));
    }
    let mut entries = generation_prefix(prompt_ids, perm, grid);
    for k in 0..grid.len() {
        entries.push(image_entry(latent_tokens[perm.order[k]].clone(), k, perm, grid));
    }
    let n = entries.len();
    let prefix = prompt_ids.len() + 2;
    Ok((
        TokenStream {
            task: Task::Gen,
            entries,
        },
        AttentionMask::prefix_lm(n, prefix),
    ))
}

/// The bidirectional part of a generation stream, used on its own at
/// inference time.
pub fn generation_prefix<T>(prompt_ids: &[u32], perm: &Permutation, grid: TokenGrid) -> Vec<Entry<T>> {
    let mut entries = Vec::with_capacity(prompt_ids.len() + 2 + grid.len());
    entries.push(text_entry(BOS, 0, Task::Gen, false));
    for (i, &id) in prompt_ids.iter().enumerate() {
        entries.push(text_entry(id, i + 1, Task::Gen, false));
    }
    entries.push(Entry {
        modality: Modality::Boi,
        payload: Payload::Token(BOI),
        pos1d: Some(prompt_ids.len() + 1),
        pos2d: None,
        target_pos2d: Some(TargetPos::Cell(grid.cell(perm.order[0]).0, grid.cell(perm.order[0]).1)),
        loss_flag: false,
        task: Task::Gen,
    });
    entries
}

/// Image entry `k` of a generation stream holding `value`.
pub fn image_entry<T>(value: Vec<T>, k: usize, perm: &Permutation, grid: TokenGrid) -> Entry<T> {
    let target = match perm.order.get(k + 1) {
        Some(&next) => {
            let (r, c) = grid.cell(next);
            TargetPos::Cell(r, c)
        }
        None => TargetPos::Sentinel,
    };
    Entry {
        modality: Modality::Image,
        payload: Payload::Vector(value),
        pos1d: None,
        pos2d: Some(grid.cell(perm.order[k])),
        target_pos2d: Some(target),
        loss_flag: true,
        task: Task::Gen,
    }
}

/// `[features…, BOS, question…, SEP, answer…, EOS]`.
///
/// Features, question and SEP form the bidirectional prefix. With an empty
/// answer only the prefix is built (inference), without EOS.
pub fn build_understanding_sequence<T: Float>(
    enc_feats: &[Vec<T>],
    question_ids: &[u32],
    answer_ids: &[u32],
) -> Result<(TokenStream<T>, AttentionMask)> {
    if question_ids.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    let mut entries = Vec::with_capacity(enc_feats.len() + question_ids.len() + answer_ids.len() + 3);
    for (i, f) in enc_feats.iter().enumerate() {
        entries.push(Entry {
            modality: Modality::EncFeat,
            payload: Payload::Vector(f.clone()),
            pos1d: Some(i),
            pos2d: None,
            target_pos2d: None,
            loss_flag: false,
            task: Task::Und,
        });
    }
    let mut pos = enc_feats.len();
    let mut push = |entries: &mut Vec<Entry<T>>, id: u32, loss: bool| {
        entries.push(text_entry(id, pos, Task::Und, loss));
        pos += 1;
    };
    push(&mut entries, BOS, false);
    for &id in question_ids {
        push(&mut entries, id, false);
    }
    push(&mut entries, SEP, false);
    let prefix = entries.len();
    if !answer_ids.is_empty() {
        for &id in answer_ids {
            push(&mut entries, id, true);
        }
        push(&mut entries, EOS, true);
    }
    let n = entries.len();
    Ok((
        TokenStream {
            task: Task::Und,
            entries,
        },
        AttentionMask::prefix_lm(n, prefix),
    ))
}
