//! Pre-norm decoder-only transformer over a packed [`TokenStream`].
//!
//! The full forward accepts an arbitrary allow-mask and can record a trace
//! for the hand-written backward pass. The incremental forward appends
//! entries to a [`KvCache`]; both paths share the same per-row attention
//! kernel, so a cached decode reproduces the full forward row for row.

use crate::error::{Error, Result};
use crate::model::{BackboneParams, BlockParams, ModelConfig};
use crate::sequence::{AttentionMask, Entry, Modality, Payload, TargetPos, TokenStream};
use crate::tensor::{
    axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, Float,
};

/// Saved activations of one block.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_stats: Vec<(T, T)>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads × n × n`, zero where attention is disallowed.
    probs: Vec<T>,
    att: Vec<T>,
    x_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_stats: Vec<(T, T)>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub n: usize,
    layers: Vec<LayerTrace<T>>,
    x_final: Vec<T>,
    lnf_stats: Vec<(T, T)>,
    /// `n × d_model` outputs.
    pub z: Vec<T>,
}

impl<T: Float> ForwardTrace<T> {
    pub fn z_row(&self, i: usize) -> &[T] {
        let d = self.z.len() / self.n;
        &self.z[i * d..(i + 1) * d]
    }
}

fn target_row(cfg: &ModelConfig, t: TargetPos) -> usize {
    match t {
        TargetPos::Cell(r, c) => cfg.grid.index((r, c)),
        TargetPos::Sentinel => cfg.n_img(),
    }
}

fn check_entry<T: Float>(cfg: &ModelConfig, e: &Entry<T>) -> Result<()> {
    let bad = |m: String| Err(Error::ShapeMismatch(m));
    if let Some(p) = e.pos1d {
        if p >= cfg.max_seq {
            return bad(format!("1d position {p} >= max_seq {}", cfg.max_seq));
        }
    }
    if let Some((r, c)) = e.pos2d {
        if r >= cfg.grid.rows || c >= cfg.grid.cols {
            return bad(format!("2d position ({r}, {c}) outside grid"));
        }
    }
    if let Some(TargetPos::Cell(r, c)) = e.target_pos2d {
        if r >= cfg.grid.rows || c >= cfg.grid.cols {
            return bad(format!("target position ({r}, {c}) outside grid"));
        }
    }
    match (&e.modality, &e.payload) {
        (Modality::Text | Modality::Boi, Payload::Token(id)) if (*id as usize) < cfg.vocab_size => Ok(()),
        (Modality::Image, Payload::Vector(v)) if v.len() == cfg.token_dim => Ok(()),
        (Modality::EncFeat, Payload::Vector(v)) if v.len() == cfg.d_model => Ok(()),
        (m, _) => bad(format!("payload does not fit a {m:?} entry")),
    }
}

/// Input embedding of one entry: modality map plus positional terms.
fn embed<T: Float>(cfg: &ModelConfig, p: &BackboneParams<T>, e: &Entry<T>) -> Vec<T> {
    let mut x = match &e.payload {
        Payload::Token(id) => p.tok_emb.row(*id as usize).to_vec(),
        Payload::Vector(v) if e.modality == Modality::Image => linear(v, &p.img_w, Some(&p.img_b)),
        Payload::Vector(v) => v.clone(),
    };
    if let Some(pos) = e.pos1d {
        axpy(&mut x, T::one(), p.pos1d.row(pos));
    }
    if let Some(cell) = e.pos2d {
        axpy(&mut x, T::one(), p.pos2d.row(cfg.grid.index(cell)));
    }
    if let Some(t) = e.target_pos2d {
        axpy(&mut x, T::one(), p.target_pos.row(target_row(cfg, t)));
    }
    x
}

fn embed_backward<T: Float>(
    cfg: &ModelConfig,
    e: &Entry<T>,
    dx: &[T],
    g: &mut BackboneParams<T>,
) {
    match &e.payload {
        Payload::Token(id) => axpy(g.tok_emb.row_mut(*id as usize), T::one(), dx),
        Payload::Vector(v) if e.modality == Modality::Image => {
            for (o, &d) in dx.iter().enumerate() {
                axpy(g.img_w.row_mut(o), d, v);
                g.img_b.data[o] += d;
            }
        }
        // encoder features are frozen inputs
        Payload::Vector(_) => {}
    }
    if let Some(pos) = e.pos1d {
        axpy(g.pos1d.row_mut(pos), T::one(), dx);
    }
    if let Some(cell) = e.pos2d {
        axpy(g.pos2d.row_mut(cfg.grid.index(cell)), T::one(), dx);
    }
    if let Some(t) = e.target_pos2d {
        axpy(g.target_pos.row_mut(target_row(cfg, t)), T::one(), dx);
    }
}

/// Multi-head attention for a block of query rows.
///
/// `q` holds `m` rows; `keys`/`values` hold every visible position.
/// `allowed(i)` lists, in ascending order, the key positions query row `i`
/// may attend to. When `probs` is given it receives the `heads × m × n_keys`
/// attention weights.
fn attend<T: Float>(
    cfg: &ModelConfig,
    q: &[T],
    keys: &[T],
    values: &[T],
    allowed: &dyn Fn(usize) -> Vec<usize>,
    mut probs: Option<&mut Vec<T>>,
) -> Vec<T> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let m = q.len() / d;
    let n_keys = keys.len() / d;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); m * d];
    if let Some(p) = probs.as_deref_mut() {
        p.clear();
        p.resize(cfg.n_heads * m * n_keys, T::zero());
    }
    let mut w = Vec::with_capacity(n_keys);
    for i in 0..m {
        let js = allowed(i);
        for h in 0..cfg.n_heads {
            let hs = h * dh..(h + 1) * dh;
            let qi = &q[i * d..(i + 1) * d][hs.clone()];
            w.clear();
            let mut max = T::neg_infinity();
            for &j in &js {
                let s = dot(qi, &keys[j * d..(j + 1) * d][hs.clone()]) * scale;
                max = max.max(s);
                w.push(s);
            }
            let mut sum = T::zero();
            for s in w.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = T::one() / sum;
            let oi = &mut out[i * d..(i + 1) * d][hs.clone()];
            for (&j, s) in js.iter().zip(w.iter_mut()) {
                *s *= inv;
                axpy(oi, *s, &values[j * d..(j + 1) * d][hs.clone()]);
            }
            if let Some(p) = probs.as_deref_mut() {
                let base = (h * m + i) * n_keys;
                for (&j, &s) in js.iter().zip(w.iter()) {
                    p[base + j] = s;
                }
            }
        }
    }
    out
}

fn mask_allowed(mask: &AttentionMask) -> impl Fn(usize) -> Vec<usize> + '_ {
    move |i| {
        mask.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Where a block reads keys and values from.
enum KvSink<'a, T> {
    /// Keys/values are exactly the rows being processed.
    Local,
    /// New keys/values are appended to a cache and attention reads the cache.
    Cache { keys: &'a mut Vec<T>, values: &'a mut Vec<T> },
}

fn block_forward<T: Float>(
    cfg: &ModelConfig,
    bp: &BlockParams<T>,
    x: Vec<T>,
    kv: KvSink<'_, T>,
    allowed: &dyn Fn(usize) -> Vec<usize>,
    trace: Option<&mut Vec<LayerTrace<T>>>,
) -> Vec<T> {
    let (ln1, ln1_stats) = layer_norm(&x, &bp.ln1_g, &bp.ln1_b);
    let q = linear(&ln1, &bp.wq, None);
    let k = linear(&ln1, &bp.wk, None);
    let v = linear(&ln1, &bp.wv, None);
    let mut probs = Vec::new();
    let want_probs = trace.is_some();
    let att = match kv {
        KvSink::Local => attend(cfg, &q, &k, &v, allowed, want_probs.then_some(&mut probs)),
        KvSink::Cache { keys, values } => {
            keys.extend_from_slice(&k);
            values.extend_from_slice(&v);
            attend(cfg, &q, keys, values, allowed, want_probs.then_some(&mut probs))
        }
    };
    let proj = linear(&att, &bp.wo, None);
    let mut x_mid = x.clone();
    axpy(&mut x_mid, T::one(), &proj);
    let (ln2, ln2_stats) = layer_norm(&x_mid, &bp.ln2_g, &bp.ln2_b);
    let h_pre = linear(&ln2, &bp.w1, Some(&bp.b1));
    let h_act: Vec<T> = h_pre.iter().map(|&a| gelu(a)).collect();
    let ffn = linear(&h_act, &bp.w2, Some(&bp.b2));
    let mut out = x_mid.clone();
    axpy(&mut out, T::one(), &ffn);
    if let Some(tr) = trace {
        tr.push(LayerTrace {
            x_in: x,
            ln1,
            ln1_stats,
            q,
            k,
            v,
            probs,
            att,
            x_mid,
            ln2,
            ln2_stats,
            h_pre,
            h_act,
        });
    }
    out
}

fn validate<T: Float>(cfg: &ModelConfig, stream: &TokenStream<T>, mask: &AttentionMask) -> Result<()> {
    if stream.len() > cfg.max_seq {
        return Err(Error::ShapeMismatch(format!(
            "stream length {} exceeds max_seq {}",
            stream.len(),
            cfg.max_seq
        )));
    }
    if mask.len() != stream.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask is {0}x{0} for a stream of {1}",
            mask.len(),
            stream.len()
        )));
    }
    stream.entries.iter().try_for_each(|e| check_entry(cfg, e))
}

fn run<T: Float>(
    cfg: &ModelConfig,
    p: &BackboneParams<T>,
    stream: &TokenStream<T>,
    mask: &AttentionMask,
    mut layers: Option<&mut Vec<LayerTrace<T>>>,
) -> Result<(Vec<T>, Vec<T>, Vec<(T, T)>)> {
    validate(cfg, stream, mask)?;
    let mut x: Vec<T> = stream.entries.iter().flat_map(|e| embed(cfg, p, e)).collect();
    let allowed = mask_allowed(mask);
    for (l, bp) in p.blocks.iter().enumerate() {
        x = block_forward(cfg, bp, x, KvSink::Local, &allowed, layers.as_deref_mut());
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l });
        }
    }
    let (z, stats) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
    Ok((z, x, stats))
}

/// One output vector per stream position.
pub fn forward<T: Float>(
    cfg: &ModelConfig,
    p: &BackboneParams<T>,
    stream: &TokenStream<T>,
    mask: &AttentionMask,
) -> Result<Vec<Vec<T>>> {
    let (z, _, _) = run(cfg, p, stream, mask, None)?;
    Ok(z.chunks_exact(cfg.d_model).map(<[T]>::to_vec).collect())
}

/// Forward pass that keeps the activations needed by [`backward`].
pub fn forward_traced<T: Float>(
    cfg: &ModelConfig,
    p: &BackboneParams<T>,
    stream: &TokenStream<T>,
    mask: &AttentionMask,
) -> Result<ForwardTrace<T>> {
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let (z, x_final, lnf_stats) = run(cfg, p, stream, mask, Some(&mut layers))?;
    Ok(ForwardTrace {
        n: stream.len(),
        layers,
        x_final,
        lnf_stats,
        z,
    })
}

/// Accumulates parameter gradients given `dz`, the loss gradient w.r.t. the
/// `n × d_model` outputs.
pub fn backward<T: Float>(
    cfg: &ModelConfig,
    p: &BackboneParams<T>,
    stream: &TokenStream<T>,
    mask: &AttentionMask,
    trace: &ForwardTrace<T>,
    dz: &[T],
    g: &mut BackboneParams<T>,
) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let n = trace.n;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dx = layer_norm_backward(&trace.x_final, &trace.lnf_stats, dz, &p.lnf_g, &mut g.lnf_g, &mut g.lnf_b);
    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let bp = &p.blocks[l];
        let gb = &mut g.blocks[l];

        // feed-forward
        let dh_act = linear_backward(&lt.h_act, &dx, &bp.w2, &mut gb.w2, Some(&mut gb.b2), true).unwrap();
        let dh_pre: Vec<T> = dh_act.iter().zip(&lt.h_pre).map(|(&a, &h)| a * gelu_grad(h)).collect();
        let dln2 = linear_backward(&lt.ln2, &dh_pre, &bp.w1, &mut gb.w1, Some(&mut gb.b1), true).unwrap();
        let dmid = layer_norm_backward(&lt.x_mid, &lt.ln2_stats, &dln2, &bp.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
        let mut dx_mid = dx;
        axpy(&mut dx_mid, T::one(), &dmid);

        // attention
        let datt = linear_backward(&lt.att, &dx_mid, &bp.wo, &mut gb.wo, None, true).unwrap();
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for i in 0..n {
            let row = mask.row(i);
            for h in 0..cfg.n_heads {
                let hs = h * dh..(h + 1) * dh;
                let pr = &lt.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let dout = &datt[i * d..(i + 1) * d][hs.clone()];
                let mut s = T::zero();
                for j in 0..n {
                    if row[j] {
                        dp[j] = dot(dout, &lt.v[j * d..(j + 1) * d][hs.clone()]);
                        s += pr[j] * dp[j];
                    }
                }
                for j in 0..n {
                    if !row[j] {
                        continue;
                    }
                    let ds = pr[j] * (dp[j] - s) * scale;
                    axpy(&mut dq[i * d..(i + 1) * d][hs.clone()], ds, &lt.k[j * d..(j + 1) * d][hs.clone()]);
                    axpy(&mut dk[j * d..(j + 1) * d][hs.clone()], ds, &lt.q[i * d..(i + 1) * d][hs.clone()]);
                    axpy(&mut dv[j * d..(j + 1) * d][hs.clone()], pr[j], dout);
                }
            }
        }
        let mut dln1 = linear_backward(&lt.ln1, &dq, &bp.wq, &mut gb.wq, None, true).unwrap();
        axpy(&mut dln1, T::one(), &linear_backward(&lt.ln1, &dk, &bp.wk, &mut gb.wk, None, true).unwrap());
        axpy(&mut dln1, T::one(), &linear_backward(&lt.ln1, &dv, &bp.wv, &mut gb.wv, None, true).unwrap());
        let din = layer_norm_backward(&lt.x_in, &lt.ln1_stats, &dln1, &bp.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
        axpy(&mut dx_mid, T::one(), &din);
        dx = dx_mid;
    }
    for (e, dxr) in stream.entries.iter().zip(dx.chunks_exact(d)) {
        embed_backward(cfg, e, dxr, g);
    }
}

/// How newly appended entries attend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendPolicy {
    /// The whole bidirectional prefix, in a single call on an empty cache.
    Bidirectional,
    /// Each new entry sees the cache, earlier new entries and itself.
    Causal,
}

/// Per-layer keys and values of every position appended so far.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    fill: usize,
    capacity: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::with_capacity(cfg.max_seq * cfg.d_model); cfg.n_layers],
            values: vec![Vec::with_capacity(cfg.max_seq * cfg.d_model); cfg.n_layers],
            fill: 0,
            capacity: cfg.max_seq,
        }
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Appends `entries` to `cache` and returns their output vectors.
pub fn forward_incremental<T: Float>(
    cfg: &ModelConfig,
    p: &BackboneParams<T>,
    cache: &mut KvCache<T>,
    entries: &[Entry<T>],
    policy: AppendPolicy,
) -> Result<Vec<Vec<T>>> {
    let start = cache.fill;
    let m = entries.len();
    if start + m > cache.capacity {
        return Err(Error::CacheOverflow {
            needed: start + m,
            capacity: cache.capacity,
        });
    }
    if policy == AppendPolicy::Bidirectional && start > 0 {
        return Err(Error::PolicyViolation(
            "the bidirectional prefix must be appended in one call on an empty cache".into(),
        ));
    }
    entries.iter().try_for_each(|e| check_entry(cfg, e))?;
    let mut x: Vec<T> = entries.iter().flat_map(|e| embed(cfg, p, e)).collect();
    let allowed = |i: usize| -> Vec<usize> {
        match policy {
            AppendPolicy::Bidirectional => (0..m).collect(),
            AppendPolicy::Causal => (0..=start + i).collect(),
        }
    };
    for (l, bp) in p.blocks.iter().enumerate() {
        let kv = KvSink::Cache {
            keys: &mut cache.keys[l],
            values: &mut cache.values[l],
        };
        x = block_forward(cfg, bp, x, kv, &allowed, None);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l });
        }
    }
    cache.fill += m;
    let (z, _) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
    Ok(z.chunks_exact(cfg.d_model).map(<[T]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::sequence::{
        build_generation_sequence, build_understanding_sequence, sample_permutation, OrderMode, Permutation,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gen_stream<T: Float>(cfg: &ModelConfig, seed: u64, mode: OrderMode) -> (TokenStream<T>, AttentionMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt: Vec<u32> = (0..3).map(|_| rng.gen_range(5..32)).collect();
        let toks: Vec<Vec<T>> = (0..cfg.n_img())
            .map(|_| (0..cfg.token_dim).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect())
            .collect();
        let perm = sample_permutation(mode, cfg.n_img(), &mut rng);
        build_generation_sequence(&prompt, &toks, &perm, cfg.grid).unwrap()
    }

    fn und_stream<T: Float>(cfg: &ModelConfig, seed: u64) -> (TokenStream<T>, AttentionMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Vec<T>> = (0..16)
            .map(|_| (0..cfg.d_model).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect())
            .collect();
        build_understanding_sequence(&feats, &[21, 22, 23], &[7, 9]).unwrap()
    }

    fn params<T: Float>(cfg: &ModelConfig) -> ModelParams<T> {
        let mut p = ModelParams::init(cfg, 5);
        p.perturb(0.05, 6);
        p
    }

    #[test]
    fn single_bos_smoke() {
        let cfg = ModelConfig::default();
        let p = params::<f32>(&cfg);
        let (s, _) = build_generation_sequence::<f32>(&[], &vec![vec![0.0; 16]; 16], &Permutation::identity(16), cfg.grid).unwrap();
        let one = TokenStream {
            task: s.task,
            entries: vec![s.entries[0].clone()],
        };
        let z = forward(&cfg, &p.backbone, &one, &AttentionMask::causal(1)).unwrap();
        assert_eq!(z.len(), 1);
        assert!(z[0].iter().all(|v| v.is_finite()));
        assert_eq!(z, forward(&cfg, &p.backbone, &one, &AttentionMask::causal(1)).unwrap());
    }

    #[test]
    fn perturbing_last_token_under_causal_mask_changes_only_last_output() {
        let cfg = ModelConfig::tiny();
        let p = params::<f64>(&cfg);
        let (s, _) = gen_stream::<f64>(&cfg, 1, OrderMode::Raster);
        let mask = AttentionMask::causal(s.len());
        let a = forward(&cfg, &p.backbone, &s, &mask).unwrap();
        let mut s2 = s.clone();
        if let Payload::Vector(v) = &mut s2.entries.last_mut().unwrap().payload {
            v[0] += 1.0;
        }
        let b = forward(&cfg, &p.backbone, &s2, &mask).unwrap();
        let n = s.len();
        assert_eq!(&a[..n - 1], &b[..n - 1]);
        assert_ne!(a[n - 1], b[n - 1]);
    }

    #[test]
    fn shape_errors() {
        let cfg = ModelConfig::tiny();
        let p = params::<f64>(&cfg);
        let (s, m) = gen_stream::<f64>(&cfg, 1, OrderMode::Raster);
        assert!(matches!(
            forward(&cfg, &p.backbone, &s, &AttentionMask::causal(3)),
            Err(Error::ShapeMismatch(_))
        ));
        let short = ModelConfig { max_seq: 10, ..cfg.clone() };
        assert!(matches!(forward(&short, &p.backbone, &s, &m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let cfg = ModelConfig::tiny();
        let mut p = params::<f64>(&cfg);
        p.backbone.blocks[0].w2.data[0] = f64::INFINITY;
        let (s, m) = gen_stream::<f64>(&cfg, 1, OrderMode::Raster);
        assert!(matches!(
            forward(&cfg, &p.backbone, &s, &m),
            Err(Error::NonFiniteActivation { layer: 0 })
        ));
    }

    fn incremental_matches(cfg: &ModelConfig, s: &TokenStream<f32>, m: &AttentionMask) -> f32 {
        let p = params::<f32>(cfg);
        let full = forward(cfg, &p.backbone, s, m).unwrap();
        let mut cache = KvCache::new(cfg);
        let pre = m.prefix_len();
        let mut inc = forward_incremental(cfg, &p.backbone, &mut cache, &s.entries[..pre], AppendPolicy::Bidirectional).unwrap();
        for e in &s.entries[pre..] {
            inc.extend(forward_incremental(cfg, &p.backbone, &mut cache, std::slice::from_ref(e), AppendPolicy::Causal).unwrap());
        }
        assert_eq!(cache.fill(), s.len());
        full.iter()
            .flatten()
            .zip(inc.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn kv_cache_matches_full_forward() {
        let cfg = ModelConfig::default();
        for seed in 0..3 {
            for mode in [OrderMode::Raster, OrderMode::Random] {
                let (s, m) = gen_stream::<f32>(&cfg, seed, mode);
                assert_eq!(s.len(), 21);
                assert!(incremental_matches(&cfg, &s, &m) < 1e-5);
            }
            let (s, m) = und_stream::<f32>(&cfg, seed);
            assert!(incremental_matches(&cfg, &s, &m) < 1e-5);
        }
    }

    #[test]
    fn prefix_in_one_call_equals_forward_on_prefix() {
        let cfg = ModelConfig::tiny();
        let p = params::<f64>(&cfg);
        let (s, m) = und_stream::<f64>(&cfg, 3);
        let pre = m.prefix_len();
        let prefix = TokenStream {
            task: s.task,
            entries: s.entries[..pre].to_vec(),
        };
        let full = forward(&cfg, &p.backbone, &prefix, &AttentionMask::prefix_lm(pre, pre)).unwrap();
        let mut cache = KvCache::new(&cfg);
        let inc = forward_incremental(&cfg, &p.backbone, &mut cache, &prefix.entries, AppendPolicy::Bidirectional).unwrap();
        assert_eq!(full, inc);
    }

    #[test]
    fn cache_overflow_and_policy() {
        let cfg = ModelConfig { max_seq: 20, ..ModelConfig::tiny() };
        let p = params::<f64>(&cfg);
        let (s, m) = gen_stream::<f64>(&ModelConfig::tiny(), 0, OrderMode::Raster);
        let mut cache = KvCache::new(&cfg);
        forward_incremental(&cfg, &p.backbone, &mut cache, &s.entries[..m.prefix_len()], AppendPolicy::Bidirectional).unwrap();
        assert!(matches!(
            forward_incremental(&cfg, &p.backbone, &mut cache, &s.entries[..1], AppendPolicy::Bidirectional),
            Err(Error::PolicyViolation(_))
        ));
        let rest = &s.entries[m.prefix_len()..];
        assert!(matches!(
            forward_incremental(&cfg, &p.backbone, &mut cache, rest, AppendPolicy::Causal),
            Err(Error::CacheOverflow { needed: 21, capacity: 20 })
        ));
        assert_eq!(cache.fill(), 5);
    }

    #[test]
    fn backward_matches_finite_differences_on_a_projection() {
        let cfg = ModelConfig::tiny();
        let p = params::<f64>(&cfg);
        let (s, m) = und_stream::<f64>(&cfg, 2);
        let n = s.len();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w: Vec<f64> = (0..n * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |bp: &BackboneParams<f64>| -> f64 {
            forward(&cfg, bp, &s, &m).unwrap().iter().flatten().zip(&w).map(|(a, b)| a * b).sum()
        };
        let trace = forward_traced(&cfg, &p.backbone, &s, &m).unwrap();
        let mut g = p.zeros_like().backbone;
        backward(&cfg, &p.backbone, &s, &m, &trace, &w, &mut g);
        let checks: Vec<(fn(&mut BackboneParams<f64>) -> &mut Vec<f64>, fn(&BackboneParams<f64>) -> &Vec<f64>)> = vec![
            (|b| &mut b.blocks[0].wq.data, |b| &b.blocks[0].wq.data),
            (|b| &mut b.blocks[0].wk.data, |b| &b.blocks[0].wk.data),
            (|b| &mut b.blocks[0].wv.data, |b| &b.blocks[0].wv.data),
            (|b| &mut b.blocks[0].w1.data, |b| &b.blocks[0].w1.data),
            (|b| &mut b.blocks[0].ln1_g.data, |b| &b.blocks[0].ln1_g.data),
            (|b| &mut b.tok_emb.data, |b| &b.tok_emb.data),
            (|b| &mut b.pos1d.data, |b| &b.pos1d.data),
        ];
        for (get_mut, get) in checks {
            let len = get(&p.backbone).len();
            for idx in [0usize, 3, 17, 40].map(|i| i % len) {
                let mut plus = p.backbone.clone();
                get_mut(&mut plus)[idx] += 1e-5;
                let mut minus = p.backbone.clone();
                get_mut(&mut minus)[idx] -= 1e-5;
                let fd = (objective(&plus) - objective(&minus)) / 2e-5;
                let an = get(&g)[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {an}");
            }
        }
    }
}
