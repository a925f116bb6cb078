//! Metrics and experiment harnesses: toy-FID over frozen encoder features,
//! attribute match, text accuracy, and the λ / task / order comparisons.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::ToyImage;
use crate::config::RunConfig;
use crate::data::{extract_attributes, render, Example, SceneSpec, Split, CAPTION_QUESTION};
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::inference::{answer, generate_one, sample_seed, teacher_forced_hits, Decode, Model};
use crate::io;
use crate::pipeline::{self, Workspace};
use crate::sequence::OrderMode;
use crate::tensor::Float;
use crate::training::{OrderSchedule, StepMetrics, TaskSet};

/// Length of one toy-FID feature vector.
pub const D_FEAT: usize = 16;
/// Added to the covariance diagonal when fewer than `d + 1` samples exist.
pub const RIDGE: f64 = 1e-6;

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
}

impl FeatureMoments {
    /// Sample mean and unbiased covariance; a ridge is added when `n < d + 1`.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("feature rows differ in length".into()));
        }
        let n = rows.len();
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        if n > 1 {
            for r in rows {
                for i in 0..d {
                    let di = r[i] - mean[i];
                    for j in 0..d {
                        cov[i * d + j] += di * (r[j] - mean[j]);
                    }
                }
            }
            cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        }
        if n < d + 1 {
            (0..d).for_each(|i| cov[i * d + i] += RIDGE);
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure("non-finite matrix entry".into()));
    }
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-15, 10_000).ok_or_else(|| Error::NumericalFailure("eigensolver did not converge".into()))
}

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m)?;
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose())
}

/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^{1/2})`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric matrix `Σ1^{1/2} Σ2 Σ1^{1/2}`, which is similar to `Σ1 Σ2`.
pub fn frechet_distance(a: &FeatureMoments, b: &FeatureMoments) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.len() != a.dim() * a.dim() || b.cov.len() != b.dim() * b.dim() {
        return Err(Error::DimensionMismatch(format!("moments of dimension {} and {}", a.dim(), b.dim())));
    }
    let mu = DVector::from_vec(a.mean.clone()) - DVector::from_vec(b.mean.clone());
    let (s1, s2) = (a.cov_matrix(), b.cov_matrix());
    let r1 = psd_sqrt(s1.clone())?;
    let inner = eigen(&r1 * &s2 * &r1)?;
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d2 = mu.norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !d2.is_finite() {
        return Err(Error::NumericalFailure("non-finite Fréchet distance".into()));
    }
    Ok(d2.max(0.0))
}

/// Codec latents average-pooled over the four image quadrants:
/// `2 × 2 × 4 = 16` values per image.
pub fn fid_features(fe: &Frontend, img: &ToyImage) -> Result<Vec<f64>> {
    let g = fe.codec.encode(img)?;
    let (h, w) = (g.height / 2, g.width / 2);
    let mut out = vec![0.0; 4 * g.channels];
    for r in 0..g.height {
        for c in 0..g.width {
            let q = (r / h).min(1) * 2 + (c / w).min(1);
            for (k, v) in g.cell(r, c).iter().enumerate() {
                out[q * g.channels + k] += v / (h * w) as f64;
            }
        }
    }
    Ok(out)
}

pub fn image_moments(fe: &Frontend, images: &[ToyImage]) -> Result<FeatureMoments> {
    let rows: Vec<Vec<f64>> = images.par_iter().map(|i| fid_features(fe, i)).collect::<Result<_>>()?;
    FeatureMoments::from_features(&rows)
}

pub fn toy_fid(fe: &Frontend, generated: &[ToyImage], reference: &[ToyImage]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::EmptyBatch);
    }
    frechet_distance(&image_moments(fe, generated)?, &image_moments(fe, reference)?)
}

/// Clean renders of every scene.
pub fn reference_images() -> Vec<ToyImage> {
    SceneSpec::all().iter().map(render).collect()
}

/// `n` specs drawn uniformly with replacement.
pub fn draw_specs(specs: &[SceneSpec], n: usize, seed: u64) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| specs[rng.gen_range(0..specs.len())]).collect()
}

/// Independent draws averaged by [`noise_floor`].
pub const FLOOR_DRAWS: usize = 64;

/// Mean toy-FID of `n` clean renders of uniformly drawn `specs` against the
/// reference set, over [`FLOOR_DRAWS`] draws: the score of a sampler that
/// reproduces scenes exactly, limited only by which scenes it drew.
pub fn noise_floor(fe: &Frontend, specs: &[SceneSpec], n: usize, seed: u64) -> Result<f64> {
    let reference = image_moments(fe, &reference_images())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..FLOOR_DRAWS).map(|_| rng.gen()).collect();
    let fids: Vec<f64> = seeds
        .par_iter()
        .map(|&s| {
            let imgs: Vec<ToyImage> = draw_specs(specs, n, s).iter().map(render).collect();
            frechet_distance(&image_moments(fe, &imgs)?, &reference)
        })
        .collect::<Result<_>>()?;
    Ok(fids.iter().sum::<f64>() / FLOOR_DRAWS as f64)
}

/// Attribute accuracies of generated images against their prompts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttrReport {
    pub shape: f64,
    pub color: f64,
    pub position: f64,
    pub size: f64,
    /// Fraction with all four attributes right.
    pub all: f64,
    pub n: usize,
}

pub fn attr_match(prompts: &[String], images: &[ToyImage]) -> Result<AttrReport> {
    if prompts.len() != images.len() {
        return Err(Error::LengthMismatch {
            expected: prompts.len(),
            got: images.len(),
        });
    }
    let specs: Vec<SceneSpec> = prompts.iter().map(|p| SceneSpec::parse_caption(p)).collect::<Result<_>>()?;
    let hits: Vec<[bool; 4]> = specs
        .par_iter()
        .zip(images)
        .map(|(s, img)| extract_attributes(img).matches(s))
        .collect();
    let n = hits.len();
    let frac = |f: &dyn Fn(&[bool; 4]) -> bool| {
        if n == 0 {
            0.0
        } else {
            hits.iter().filter(|h| f(h)).count() as f64 / n as f64
        }
    };
    Ok(AttrReport {
        color: frac(&|h| h[0]),
        shape: frac(&|h| h[1]),
        position: frac(&|h| h[2]),
        size: frac(&|h| h[3]),
        all: frac(&|h| h.iter().all(|&b| b)),
        n,
    })
}

/// Anything that answers questions about images.
pub trait Responder: Sync {
    /// Free-running answer.
    fn respond(&self, img: &ToyImage, question: &str) -> Result<String>;
    /// `(correct, total)` greedy tokens under teacher forcing on `reference`
    /// followed by EOS.
    fn teacher_forced(&self, img: &ToyImage, question: &str, reference: &str) -> Result<(usize, usize)>;
}

impl<T: Float> Responder for Model<T> {
    fn respond(&self, img: &ToyImage, question: &str) -> Result<String> {
        answer(self, img, question)
    }

    fn teacher_forced(&self, img: &ToyImage, question: &str, reference: &str) -> Result<(usize, usize)> {
        teacher_forced_hits(self, img, question, reference)
    }
}

/// Understanding metrics over a set of examples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextReport {
    /// Exact-match accuracy of greedy answers to the QA pairs.
    pub text_acc: f64,
    /// Teacher-forced token accuracy on the QA answers.
    pub qa_token_acc: f64,
    /// Teacher-forced token accuracy on captions.
    pub caption_token_acc: f64,
    pub n_questions: usize,
    /// Exact-match accuracy per question.
    pub per_question: Vec<(String, f64)>,
}

pub fn eval_understanding<R: Responder>(model: &R, examples: &[&Example]) -> Result<TextReport> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    struct One {
        question: String,
        right: bool,
        tf: (usize, usize),
    }
    let qa: Vec<One> = examples
        .par_iter()
        .flat_map_iter(|e| e.qa.iter().map(move |(q, a)| (e, q, a)))
        .map(|(e, q, a)| {
            Ok(One {
                question: q.clone(),
                right: model.respond(&e.image, q)? == *a,
                tf: model.teacher_forced(&e.image, q, a)?,
            })
        })
        .collect::<Result<_>>()?;
    let caps: Vec<(usize, usize)> = examples
        .par_iter()
        .map(|e| model.teacher_forced(&e.image, CAPTION_QUESTION, &e.caption))
        .collect::<Result<_>>()?;
    let ratio = |(h, t): (usize, usize)| if t == 0 { 0.0 } else { h as f64 / t as f64 };
    let sum = |v: &mut dyn Iterator<Item = (usize, usize)>| v.fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let mut per_question: Vec<(String, f64)> = Vec::new();
    let mut questions: Vec<&str> = qa.iter().map(|o| o.question.as_str()).collect();
    questions.sort_unstable();
    questions.dedup();
    for q in questions {
        let c = sum(&mut qa.iter().filter(|o| o.question == q).map(|o| (o.right as usize, 1)));
        per_question.push((q.to_string(), ratio(c)));
    }
    Ok(TextReport {
        text_acc: ratio(sum(&mut qa.iter().map(|o| (o.right as usize, 1)))),
        qa_token_acc: ratio(sum(&mut qa.iter().map(|o| o.tf))),
        caption_token_acc: ratio(sum(&mut caps.iter().copied())),
        n_questions: qa.len(),
        per_question,
    })
}

/// Generated images for prompts drawn from `specs`, with the prompts.
/// Image `i` uses seed `seed + i`.
pub fn generate_for_specs<T: Float>(
    model: &Model<T>,
    specs: &[SceneSpec],
    seed: u64,
    order: OrderMode,
) -> Result<(Vec<String>, Vec<ToyImage>)> {
    let prompts: Vec<String> = specs.iter().map(SceneSpec::caption).collect();
    let images = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let ids = model.frontend.vocab.tokenize(p)?;
            generate_one(model, &ids, sample_seed(seed, i), order, Decode::Cached)
        })
        .collect::<Result<_>>()?;
    Ok((prompts, images))
}

/// Everything measured for one checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub label: String,
    /// CRC of the evaluated checkpoint, as 8 hex digits.
    pub checkpoint: String,
    pub toy_fid: f64,
    pub noise_floor: f64,
    pub attr: AttrReport,
    /// Attribute match on one prompt per heldout scene.
    pub heldout_attr: AttrReport,
    pub text_acc: f64,
    pub qa_token_acc: f64,
    pub caption_token_acc: f64,
    pub n_questions: usize,
    /// Run configuration lines.
    pub config: Vec<String>,
}

/// Generation and understanding metrics for a model trained under `run`.
pub fn evaluate<T: Float>(model: &Model<T>, ws: &Workspace, label: &str, checkpoint_crc: u32) -> Result<EvalReport> {
    let run = &ws.run;
    let train_specs = ws.corpus.specs(Split::Train);
    let drawn = draw_specs(&train_specs, run.eval_n_gen, run.eval_seed);
    let (prompts, images) = generate_for_specs(model, &drawn, run.eval_seed, run.eval_order)?;
    let reference = reference_images();
    let toy = toy_fid(&model.frontend, &images, &reference)?;
    let floor = noise_floor(&model.frontend, &train_specs, run.eval_n_gen, run.eval_seed ^ 0x5eed)?;
    let attr = attr_match(&prompts, &images)?;
    let heldout_specs = ws.corpus.specs(Split::Heldout);
    let heldout_attr = if heldout_specs.is_empty() {
        AttrReport::default()
    } else {
        let (p, i) = generate_for_specs(model, &heldout_specs, run.eval_seed.wrapping_add(1 << 32), run.eval_order)?;
        attr_match(&p, &i)?
    };
    let heldout: Vec<&Example> = ws.corpus.heldout().collect();
    let text = eval_understanding(model, &heldout)?;
    Ok(EvalReport {
        label: label.to_string(),
        checkpoint: format!("{checkpoint_crc:08x}"),
        toy_fid: toy,
        noise_floor: floor,
        attr,
        heldout_attr,
        text_acc: text.text_acc,
        qa_token_acc: text.qa_token_acc,
        caption_token_acc: text.caption_token_acc,
        n_questions: text.n_questions,
        config: run.to_text().lines().map(str::to_string).collect(),
    })
}

fn attr_records(out: &mut String, prefix: &str, a: &AttrReport) {
    for (k, v) in [
        ("shape", a.shape),
        ("color", a.color),
        ("position", a.position),
        ("size", a.size),
        ("all", a.all),
    ] {
        writeln!(out, "{prefix}_{k}={v}").unwrap();
    }
    writeln!(out, "{prefix}_n={}", a.n).unwrap();
}

impl EvalReport {
    /// Newline-delimited `key=value` records; [`EvalReport::parse`] inverts it.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        writeln!(s, "label={}", self.label).unwrap();
        writeln!(s, "checkpoint={}", self.checkpoint).unwrap();
        writeln!(s, "toy_fid={}", self.toy_fid).unwrap();
        writeln!(s, "noise_floor={}", self.noise_floor).unwrap();
        attr_records(&mut s, "attr", &self.attr);
        attr_records(&mut s, "heldout_attr", &self.heldout_attr);
        writeln!(s, "text_acc={}", self.text_acc).unwrap();
        writeln!(s, "qa_token_acc={}", self.qa_token_acc).unwrap();
        writeln!(s, "caption_token_acc={}", self.caption_token_acc).unwrap();
        writeln!(s, "n_questions={}", self.n_questions).unwrap();
        for line in &self.config {
            writeln!(s, "config={line}").unwrap();
        }
        s
    }

    /// Reads records back; table lines and blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for line in text.lines() {
            if line.is_empty() || line.starts_with('|') || line.starts_with('+') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad report line `{line}`")))?;
            let f = || v.parse::<f64>().map_err(|_| Error::Format(format!("bad number in `{line}`")));
            let u = || v.parse::<usize>().map_err(|_| Error::Format(format!("bad count in `{line}`")));
            let attr = |a: &mut AttrReport, field: &str| -> Result<()> {
                match field {
                    "shape" => a.shape = f()?,
                    "color" => a.color = f()?,
                    "position" => a.position = f()?,
                    "size" => a.size = f()?,
                    "all" => a.all = f()?,
                    "n" => a.n = u()?,
                    _ => return Err(Error::Format(format!("unknown report key `{k}`"))),
                }
                Ok(())
            };
            match k {
                "label" => r.label = v.to_string(),
                "checkpoint" => r.checkpoint = v.to_string(),
                "toy_fid" => r.toy_fid = f()?,
                "noise_floor" => r.noise_floor = f()?,
                "text_acc" => r.text_acc = f()?,
                "qa_token_acc" => r.qa_token_acc = f()?,
                "caption_token_acc" => r.caption_token_acc = f()?,
                "n_questions" => r.n_questions = u()?,
                "config" => r.config.push(v.to_string()),
                _ => {
                    if let Some(field) = k.strip_prefix("heldout_attr_") {
                        attr(&mut r.heldout_attr, field)?
                    } else if let Some(field) = k.strip_prefix("attr_") {
                        attr(&mut r.attr, field)?
                    } else {
                        return Err(Error::Format(format!("unknown report key `{k}`")));
                    }
                }
            }
        }
        Ok(r)
    }

    pub fn file_name(&self) -> String {
        format!("eval_{}.txt", self.checkpoint)
    }

    /// Table followed by records.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file_name());
        fs::write(&path, format!("{}\n{}", table(std::slice::from_ref(self)), self.to_records()))?;
        Ok(path)
    }
}

/// ASCII table of the headline numbers, one row per report.
pub fn table(reports: &[EvalReport]) -> String {
    let head = ["run", "toy_fid", "floor", "attr_all", "heldout_all", "text_acc", "cap_tok_acc"];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                format!("{:.4}", r.toy_fid),
                format!("{:.4}", r.noise_floor),
                format!("{:.3}", r.attr.all),
                format!("{:.3}", r.heldout_attr.all),
                format!("{:.3}", r.text_acc),
                format!("{:.3}", r.caption_token_acc),
            ]
        })
        .collect();
    let mut w: Vec<usize> = head.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.len());
        }
    }
    let rule: String = w.iter().map(|&n| format!("+{}", "-".repeat(n + 2))).collect::<String>() + "+\n";
    let line = |cells: &[String]| -> String {
        cells.iter().zip(&w).map(|(c, &n)| format!("| {c:<n$} ")).collect::<String>() + "|\n"
    };
    let mut s = rule.clone();
    s += &line(&head.map(String::from));
    s += &rule;
    for r in &rows {
        s += &line(r);
    }
    s + &rule
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&table(std::slice::from_ref(self)))
    }
}

/// Trains under `run` and evaluates the final checkpoint. A checkpoint
/// already in `out_dir` from the same configuration is resumed, or reused
/// as is when complete.
pub fn train_and_evaluate<T: Float>(
    run: &RunConfig,
    label: &str,
    log: &mut dyn FnMut(&str, &StepMetrics) -> Result<()>,
) -> Result<EvalReport> {
    let existing = run.out_dir.join(pipeline::CHECKPOINT_FILE);
    let resume = match pipeline::load_checkpoint::<T>(&existing) {
        Ok(l) if l.run == *run => Some(l.step),
        _ => None,
    };
    let (ckpt, crc) = match resume {
        Some(step) if step >= run.train.total_steps => (existing.clone(), io::checkpoint_crc(&existing)?),
        r => {
            let out = pipeline::train::<T>(run, r.map(|_| existing.as_path()), None, |m| log(label, m))?;
            (out.checkpoint, out.crc)
        }
    };
    let (model, _) = pipeline::load_model::<T>(&ckpt)?;
    let ws = Workspace::new(run)?;
    let report = evaluate(&model, &ws, label, crc)?;
    report.write(&run.out_dir)?;
    Ok(report)
}

fn sub_run(base: &RunConfig, dir: &str) -> RunConfig {
    let mut r = base.clone();
    r.out_dir = base.out_dir.join(dir);
    r
}

/// Whether a sequence is non-decreasing except for at most `allowed`
/// adjacent pairs.
pub fn monotone_with_violations(values: &[f64], increasing: bool, allowed: usize) -> bool {
    let bad = values
        .windows(2)
        .filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] })
        .count();
    bad <= allowed
}

/// Results of a λ sweep plus single-task baselines.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub lambdas: Vec<f64>,
    /// One per λ, in the given order.
    pub runs: Vec<EvalReport>,
    pub t2i_only: Option<EvalReport>,
    pub i2t_only: Option<EvalReport>,
}

impl SweepResult {
    /// Text accuracy non-decreasing and toy-FID non-improving (non-decreasing)
    /// in λ, each allowing one adjacent violation.
    pub fn trade_off_holds(&self) -> (bool, bool) {
        let acc: Vec<f64> = self.runs.iter().map(|r| r.text_acc).collect();
        let fid: Vec<f64> = self.runs.iter().map(|r| r.toy_fid).collect();
        (monotone_with_violations(&acc, true, 1), monotone_with_violations(&fid, true, 1))
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let mut all: Vec<EvalReport> = self.runs.clone();
        all.extend(self.t2i_only.clone());
        all.extend(self.i2t_only.clone());
        s += &table(&all);
        let (acc, fid) = self.trade_off_holds();
        writeln!(s, "trade_off_text_acc_nondecreasing={acc}").unwrap();
        writeln!(s, "trade_off_fid_nonimproving={fid}").unwrap();
        if let (Some(u), Some(t)) = (self.runs.first(), &self.t2i_only) {
            writeln!(
                s,
                "unified_vs_t2i_only: unified(lambda={}) toy_fid={} t2i_only toy_fid={} unified_better={}",
                self.lambdas[0],
                u.toy_fid,
                t.toy_fid,
                u.toy_fid < t.toy_fid
            )
            .unwrap();
        }
        s
    }
}

/// One run per λ with a shared seed, plus T2I-only and I2T-only baselines
/// when `baselines` is set. The T2I-only run keeps the generation share of
/// each batch, so both see the same number of visual tokens.
pub fn run_lambda_sweep<T: Float>(
    base: &RunConfig,
    lambdas: &[f64],
    baselines: bool,
    log: &mut dyn FnMut(&str, &StepMetrics) -> Result<()>,
) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("empty lambda list".into()));
    }
    let mut runs = Vec::new();
    for &l in lambdas {
        let mut r = sub_run(base, &format!("lambda_{l}"));
        r.train.lambda_text = l;
        r.train.tasks = TaskSet::Unified;
        runs.push(train_and_evaluate::<T>(&r, &format!("lambda={l}"), log)?);
    }
    let (mut t2i_only, mut i2t_only) = (None, None);
    if baselines {
        let mut r = sub_run(base, "t2i_only");
        r.train.tasks = TaskSet::GenOnly;
        t2i_only = Some(train_and_evaluate::<T>(&r, "t2i_only", log)?);
        let mut r = sub_run(base, "i2t_only");
        r.train.tasks = TaskSet::UndOnly;
        r.train.lambda_text = 1.0;
        i2t_only = Some(train_and_evaluate::<T>(&r, "i2t_only", log)?);
    }
    let res = SweepResult {
        lambdas: lambdas.to_vec(),
        runs,
        t2i_only,
        i2t_only,
    };
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("sweep.txt"), res.report())?;
    Ok(res)
}

/// Always-raster training against the annealed random-order schedule.
#[derive(Debug, Clone)]
pub struct OrderComparison {
    pub raster: EvalReport,
    pub annealed: EvalReport,
}

impl OrderComparison {
    /// Whether the annealed schedule's toy-FID is at most the raster one's.
    pub fn random_helped(&self) -> bool {
        self.annealed.toy_fid <= self.raster.toy_fid
    }

    pub fn report(&self) -> String {
        let mut s = table(&[self.raster.clone(), self.annealed.clone()]);
        writeln!(s, "hypothesis=annealed random-order toy_fid <= raster toy_fid").unwrap();
        writeln!(s, "hypothesis_held={}", self.random_helped()).unwrap();
        writeln!(s, "text_acc_difference={}", self.annealed.text_acc - self.raster.text_acc).unwrap();
        s
    }
}

/// Trains an always-raster run next to the annealed one. `annealed` may
/// supply an already evaluated run with the base configuration.
pub fn run_order_comparison<T: Float>(
    base: &RunConfig,
    annealed: Option<EvalReport>,
    log: &mut dyn FnMut(&str, &StepMetrics) -> Result<()>,
) -> Result<OrderComparison> {
    let mut r = sub_run(base, "order_raster");
    r.train.order_schedule = OrderSchedule::Raster;
    let raster = train_and_evaluate::<T>(&r, "order=raster", log)?;
    let annealed = match annealed {
        Some(a) => a,
        None => {
            let mut r = sub_run(base, "order_annealed");
            r.train.order_schedule = OrderSchedule::Annealed;
            train_and_evaluate::<T>(&r, "order=annealed", log)?
        }
    };
    let c = OrderComparison { raster, annealed };
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("order.txt"), c.report())?;
    Ok(c)
}
