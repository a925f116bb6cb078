//! Acceptance criteria. Each test prints one `criterion N ...: PASS|FAIL`
//! line. The long-run criteria (7, 8, 11) read the run directory produced
//! by `unifluid sweep --config configs/default.cfg --order`; set
//! `UNIFLUID_RUNS` to point elsewhere.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use unifluid::backbone::forward;
use unifluid::config::RunConfig;
use unifluid::data::{build_corpus, render, CorpusOptions, Example, SceneSpec, CAPTION_QUESTION};
use unifluid::eval::{
    attr_match, eval_understanding, frechet_distance, generate_for_specs, reference_images, toy_fid, EvalReport,
    FeatureMoments,
};
use unifluid::frontend::Frontend;
use unifluid::heads::{diffusion_loss_grad, diffusion_sample, draw_noise, DiffusionSchedule};
use unifluid::inference::{greedy_decode, sample_latents, Decode, Model};
use unifluid::model::{DiffusionHeadParams, ModelConfig, ModelParams};
use unifluid::optim::{AdamW, AdamWConfig};
use unifluid::pipeline;
use unifluid::sequence::{
    build_generation_sequence, build_understanding_sequence, sample_permutation, OrderMode, Payload,
};
use unifluid::training::{
    grad_check_tiny, order_mode, prepare_examples, und_item, unified_loss, CheckBatch, LatentStats, OrderSchedule,
    TrainConfig, Trainer,
};

/// Writes past the test harness's output capture, so the verdict lines show
/// up in a plain `cargo test` run.
fn verdict(n: u32, name: &str, pass: bool, detail: &str) -> bool {
    use std::io::Write;
    let line = format!("criterion {n} ({name}): {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}

fn runs_dir() -> PathBuf {
    std::env::var_os("UNIFLUID_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../runs/sweep"))
}

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let r = grad_check_tiny(seed, CheckBatch::Mixed).unwrap();
        worst = worst.max(r.max_rel_err());
    }
    let t = start.elapsed();
    let pass = worst < 1e-4 && t < Duration::from_secs(120);
    assert!(verdict(1, "gradient check", pass, &format!("max_rel_err={worst:.3e} time={t:.1?}")));
}

fn random_model(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let fe = Frontend::new(cfg, 17, 29);
    let corpus = build_corpus(0, &CorpusOptions::default());
    let stats = LatentStats::compute(&fe, corpus.train()).unwrap();
    let mut params = ModelParams::<f64>::init(cfg, seed);
    params.perturb(0.1, seed + 1);
    Model::new(cfg.clone(), params, stats, fe).unwrap()
}

fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c02_kv_cache_equivalence() {
    let start = Instant::now();
    let model = random_model(&ModelConfig::default(), 5);
    let specs = SceneSpec::all();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut lat_err, mut logit_err, mut same_ids) = (0.0f64, 0.0f64, true);
    for _ in 0..20 {
        let spec = specs[rng.gen_range(0..specs.len())];
        let ids = model.frontend.vocab.tokenize(&spec.caption()).unwrap();
        for order in [OrderMode::Raster, OrderMode::Random] {
            let perm = sample_permutation(order, model.cfg.n_img(), &mut rng);
            let seed = rng.gen();
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let a = sample_latents(&model, &ids, &perm, &mut r1, Decode::Cached).unwrap();
            let b = sample_latents(&model, &ids, &perm, &mut r2, Decode::Recompute).unwrap();
            lat_err = lat_err.max(max_abs(&a, &b));
        }
        let feats: Vec<Vec<f64>> = model.frontend.features(&render(&spec)).unwrap();
        let q = model.frontend.vocab.tokenize(CAPTION_QUESTION).unwrap();
        let (ia, la) = greedy_decode(&model, &feats, &q, Decode::Cached).unwrap();
        let (ib, lb) = greedy_decode(&model, &feats, &q, Decode::Recompute).unwrap();
        same_ids &= ia == ib;
        logit_err = logit_err.max(max_abs(&la, &lb));
    }
    let t = start.elapsed();
    let pass = lat_err < 1e-5 && logit_err < 1e-5 && same_ids && t < Duration::from_secs(60);
    assert!(verdict(
        2,
        "kv-cache equivalence",
        pass,
        &format!("latent_err={lat_err:.2e} logit_err={logit_err:.2e} time={t:.1?}")
    ));
}

#[test]
fn c03_mask_causality() {
    let start = Instant::now();
    let cfg = ModelConfig {
        max_seq: 64,
        ..ModelConfig::tiny()
    };
    let mut params = ModelParams::<f64>::init(&cfg, 9);
    params.perturb(0.2, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut checked, mut violations) = (0usize, 0usize);
    for k in 0..200 {
        let (stream, mask) = if k % 2 == 0 {
            let prompt: Vec<u32> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(5..cfg.vocab_size as u32)).collect();
            let toks: Vec<Vec<f64>> = (0..cfg.n_img())
                .map(|_| (0..cfg.token_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let mode = if rng.gen_bool(0.5) { OrderMode::Random } else { OrderMode::Raster };
            let perm = sample_permutation(mode, cfg.n_img(), &mut rng);
            build_generation_sequence(&prompt, &toks, &perm, cfg.grid).unwrap()
        } else {
            let feats: Vec<Vec<f64>> = (0..16)
                .map(|_| (0..cfg.d_model).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let q: Vec<u32> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(5..cfg.vocab_size as u32)).collect();
            let a: Vec<u32> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(5..cfg.vocab_size as u32)).collect();
            build_understanding_sequence(&feats, &q, &a).unwrap()
        };
        let base = forward(&cfg, &params.backbone, &stream, &mask).unwrap();
        for _ in 0..3 {
            let j = rng.gen_range(0..stream.len());
            let mut s2 = stream.clone();
            match &mut s2.entries[j].payload {
                Payload::Token(id) => *id = (*id + 7) % cfg.vocab_size as u32,
                Payload::Vector(v) => v.iter_mut().for_each(|x| *x += 0.75),
            }
            let out = forward(&cfg, &params.backbone, &s2, &mask).unwrap();
            for i in 0..stream.len() {
                if !mask.allows(i, j) {
                    checked += 1;
                    if base[i].iter().zip(&out[i]).any(|(a, b)| a.to_bits() != b.to_bits()) {
                        violations += 1;
                    }
                }
            }
        }
    }
    let t = start.elapsed();
    let pass = violations == 0 && checked > 0 && t < Duration::from_secs(120);
    assert!(verdict(
        3,
        "mask causality",
        pass,
        &format!("streams=200 outputs_checked={checked} changed={violations} time={t:.1?}")
    ));
}

fn fit_head(
    token_dim: usize,
    sched: &DiffusionSchedule,
    mut gen: impl FnMut(&mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>),
) -> DiffusionHeadParams<f64> {
    let mut p = DiffusionHeadParams::<f64>::init(token_dim, 2, 16, 64, 21);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        p.tensors(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (steps, batch) = (3000, 64);
    for step in 0..steps {
        let mut g = p.clone();
        g.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        for _ in 0..batch {
            let (x0, z) = gen(&mut rng);
            let draw = draw_noise(sched, token_dim, &mut rng);
            diffusion_loss_grad(&p, sched, &x0, &z, &draw, 1.0 / batch as f64, &mut g);
        }
        let lr = 3e-3 * (1.0 - step as f64 / steps as f64).max(0.05);
        opt.step(p.tensors_mut(), g.tensors(), lr);
    }
    p
}

#[test]
fn c04_diffusion_head_soundness() {
    let start = Instant::now();
    let sched = DiffusionSchedule::cosine(1000, 100).unwrap().with_clip(Some(5.0));
    let sigma = 0.5;
    let mu = |z: &[f64]| vec![1.5 * z[0] - 0.5 * z[1], z[1] + 0.5];
    let p = fit_head(2, &sched, |rng| {
        let z = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let x0 = mu(&z)
            .iter()
            .map(|&m| m + sigma * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        (x0, z)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for z in [vec![0.5, -0.5], vec![-0.8, 0.3]] {
        let xs: Vec<Vec<f64>> = (0..1000).map(|_| diffusion_sample(&p, &sched, &z, &mut rng)).collect();
        for (k, &m) in mu(&z).iter().enumerate() {
            let mean = xs.iter().map(|x| x[k]).sum::<f64>() / 1000.0;
            let var = xs.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / 999.0;
            mean_err = mean_err.max((mean - m).abs());
            var_err = var_err.max((var / (sigma * sigma) - 1.0).abs());
        }
    }
    let w = |z: &[f64]| if z[0] > 0.5 { 0.7 } else { 0.3 };
    let p = fit_head(1, &sched, |rng| {
        let z = if rng.gen_bool(0.5) { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        let centre = if rng.gen_bool(w(&z)) { 1.5 } else { -1.5 };
        (vec![centre + 0.3 * Distribution::<f64>::sample(&StandardNormal, rng)], z)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut weight_err = 0.0f64;
    for z in [vec![1.0, 0.0], vec![0.0, 1.0]] {
        let pos = (0..1000)
            .filter(|_| diffusion_sample(&p, &sched, &z, &mut rng)[0] > 0.0)
            .count() as f64
            / 1000.0;
        weight_err = weight_err.max((pos - w(&z)).abs());
    }
    let t = start.elapsed();
    let pass = mean_err < 0.1 && var_err < 0.25 && weight_err <= 0.1 && t < Duration::from_secs(300);
    assert!(verdict(
        4,
        "diffusion head soundness",
        pass,
        &format!("mean_err={mean_err:.3} var_rel_err={var_err:.3} weight_err={weight_err:.3} time={t:.1?}")
    ));
}

type Mat = Vec<Vec<f64>>;

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

fn mat_inv(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().copied().chain((0..n).map(|j| if i == j { 1.0 } else { 0.0 })).collect())
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= d);
        for r in (0..n).filter(|&r| r != c) {
            let f = m[r][c];
            let pivot = m[c].clone();
            m[r].iter_mut().zip(pivot).for_each(|(v, x)| *v -= f * x);
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// The distance with `(Σ1 Σ2)^{1/2}` from Denman–Beavers iteration.
fn dense_frechet(a: &FeatureMoments, b: &FeatureMoments) -> f64 {
    let d = a.mean.len();
    let square = |c: &[f64]| -> Mat { c.chunks(d).map(<[f64]>::to_vec).collect() };
    let (s1, s2) = (square(&a.cov), square(&b.cov));
    let mut y = mat_mul(&s1, &s2);
    let mut z: Mat = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..80 {
        let (yi, zi) = (mat_inv(&y), mat_inv(&z));
        let half = |p: &Mat, q: &Mat| -> Mat {
            p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(x, y)| 0.5 * (x + y)).collect()).collect()
        };
        let ny = half(&y, &zi);
        z = half(&z, &yi);
        y = ny;
    }
    (0..d)
        .map(|i| (a.mean[i] - b.mean[i]).powi(2) + s1[i][i] + s2[i][i] - 2.0 * y[i][i])
        .sum()
}

#[test]
fn c05_frechet_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut moments = |d: usize| {
        let rows: Vec<Vec<f64>> = (0..3 * d)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0) * 2.0).collect())
            .collect();
        FeatureMoments::from_features(&rows).unwrap()
    };
    let mut worst = 0.0f64;
    for i in 0..20 {
        let d = if i % 2 == 0 { 4 } else { 16 };
        let (a, b) = (moments(d), moments(d));
        worst = worst.max((frechet_distance(&a, &b).unwrap() - dense_frechet(&a, &b)).abs());
    }
    let fe = Frontend::new(&ModelConfig::default(), 17, 29);
    let refs = reference_images();
    let same = toy_fid(&fe, &refs, &refs).unwrap();
    let pass = worst < 1e-6 && same < 1e-6;
    assert!(verdict(5, "frechet oracle", pass, &format!("max_err={worst:.2e} identical_set={same:.2e}")));
}

/// Architecture and schedule for the overfit run; the data are 32 clean
/// training scenes. Raster order matches how the samples are scored, and
/// the larger Adam epsilon stops the late text-loss spikes seen once the
/// loss drops below 1e-6.
fn overfit_setup() -> (ModelConfig, TrainConfig, Vec<Example>) {
    let cfg = ModelConfig::default();
    let tc = TrainConfig {
        lambda_text: 0.5,
        total_steps: 2000,
        lr: 5e-4,
        warmup_frac: 0.05,
        order_schedule: OrderSchedule::Raster,
        adam: AdamWConfig {
            eps: 1e-6,
            ..AdamWConfig::default()
        },
        log_every: 250,
        ..TrainConfig::default()
    };
    let opts = CorpusOptions {
        train_copies: 1,
        noise_sigma: 0.0,
        ..CorpusOptions::default()
    };
    let corpus = build_corpus(0, &opts);
    let ex: Vec<Example> = corpus.train().step_by(3).take(32).cloned().collect();
    (cfg, tc, ex)
}

#[test]
fn c06_overfit_smoke() {
    let start = Instant::now();
    let (cfg, tc, ex) = overfit_setup();
    let fe = Frontend::new(&cfg, 17, 29);
    let stats = LatentStats::compute(&fe, &ex).unwrap();
    let data = prepare_examples(&fe, &stats, &ex).unwrap();
    let mut trainer = Trainer::<f32>::new(cfg.clone(), tc, data.clone(), stats.clone()).unwrap();
    trainer
        .run(|m| {
            println!("  {m}");
            Ok(())
        })
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let items: Vec<_> = data
        .iter()
        .flat_map(|d| (0..d.pairs.len()).map(move |k| (d, k)))
        .map(|(d, k)| und_item::<f32>(d, k, &mut rng).unwrap())
        .collect();
    let l_text = unified_loss(&cfg, &trainer.sched, &trainer.params, &items, 1.0).unwrap().text;
    let model = Model::new(cfg, trainer.params.clone(), stats, fe).unwrap();
    let refs: Vec<&Example> = ex.iter().collect();
    let text = eval_understanding(&model, &refs).unwrap();
    let specs: Vec<SceneSpec> = ex.iter().map(|e| e.spec).collect();
    let (prompts, images) = generate_for_specs(&model, &specs, 11, OrderMode::Raster).unwrap();
    let attr = attr_match(&prompts, &images).unwrap();
    let t = start.elapsed();
    let pass = l_text < 0.1 && text.text_acc == 1.0 && attr.all >= 0.9 && t < Duration::from_secs(900);
    assert!(verdict(
        6,
        "overfit smoke test",
        pass,
        &format!("L_text={l_text:.4} qa_exact={:.3} attr_all={:.3} time={t:.1?}", text.text_acc, attr.all)
    ));
}

fn latest_report(dir: &std::path::Path) -> Option<EvalReport> {
    let entry = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("eval_"))?;
    EvalReport::parse(&std::fs::read_to_string(entry.path()).ok()?).ok()
}

#[test]
fn c09_order_schedule() {
    let tc = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut freqs = Vec::new();
    for (frac, want) in [(0.1, 1.0), (0.45, 0.5), (0.8, 0.0)] {
        let step = (frac * tc.total_steps as f64) as u64;
        let n = 10_000;
        let random = (0..n).filter(|_| order_mode(step, &tc, &mut rng) == OrderMode::Random).count();
        let f = random as f64 / n as f64;
        freqs.push(format!("{frac}:{f:.4}"));
        worst = worst.max((f - want).abs());
    }
    assert!(verdict(9, "order schedule", worst <= 0.02, &format!("freqs=[{}]", freqs.join(" "))));
}

fn tiny_run(dir: &std::path::Path) -> RunConfig {
    let mut run = RunConfig {
        model: ModelConfig {
            max_seq: 64,
            ..ModelConfig::tiny()
        },
        out_dir: dir.to_path_buf(),
        save_every: 5,
        ..RunConfig::default()
    };
    run.train.total_steps = 12;
    run.train.batch_size = 6;
    run.train.log_every = 1;
    run.train.lr = 1e-3;
    run
}

#[test]
fn c10_reproducibility() {
    let d = tempfile::tempdir().unwrap();
    let run = tiny_run(d.path());
    let go = |stop: Option<u64>, resume: Option<&std::path::Path>, log: &mut Vec<String>| {
        pipeline::train::<f64>(&run, resume, stop, |m| {
            log.push(m.to_string());
            Ok(())
        })
        .unwrap()
    };
    let (mut la, mut lb, mut lc) = (Vec::new(), Vec::new(), Vec::new());
    let a = go(None, None, &mut la);
    let b = go(None, None, &mut lb);
    let half = go(Some(7), None, &mut lc);
    let ckpt = d.path().join("half.ufld");
    std::fs::copy(&half.checkpoint, &ckpt).unwrap();
    let c = go(None, Some(&ckpt), &mut lc);
    let same_logs = la == lb;
    let same_crc = a.crc == b.crc;
    let resumed = la == lc && a.crc == c.crc;
    let pass = same_logs && same_crc && resumed && la.len() == 12;
    assert!(verdict(
        10,
        "reproducibility",
        pass,
        &format!(
            "identical_logs={same_logs} identical_crc={same_crc} ({:08x}) resume_equivalent={resumed}",
            a.crc
        )
    ));
}

#[test]
fn c07_full_toy_run() {
    let dir = runs_dir().join("lambda_0.005");
    let Some(r) = latest_report(&dir) else {
        verdict(7, "full toy run", false, &format!("no evaluated run in {}", dir.display()));
        return;
    };
    let ratio = r.toy_fid / r.noise_floor;
    let pass = r.text_acc >= 0.9 && ratio <= 5.0 && r.attr.all >= 0.7;
    verdict(
        7,
        "full toy run",
        pass,
        &format!(
            "checkpoint={} heldout_qa={:.3} toy_fid={:.4} floor={:.4} ratio={ratio:.2} attr_all={:.3}",
            r.checkpoint, r.text_acc, r.toy_fid, r.noise_floor, r.attr.all
        ),
    );
}

#[test]
fn c08_lambda_trade_off() {
    let mut reports = Vec::new();
    for l in ["0.005", "0.1", "1"] {
        match latest_report(&runs_dir().join(format!("lambda_{l}"))) {
            Some(r) => reports.push(r),
            None => {
                verdict(8, "lambda trade-off", false, &format!("missing run lambda_{l}"));
                return;
            }
        }
    }
    let acc: Vec<f64> = reports.iter().map(|r| r.text_acc).collect();
    let fid: Vec<f64> = reports.iter().map(|r| r.toy_fid).collect();
    let ok_acc = unifluid::eval::monotone_with_violations(&acc, true, 1);
    let ok_fid = unifluid::eval::monotone_with_violations(&fid, true, 1);
    print!("{}", unifluid::eval::table(&reports));
    verdict(
        8,
        "lambda trade-off",
        ok_acc && ok_fid,
        &format!("text_acc={acc:?} toy_fid={fid:?}"),
    );
}

#[test]
fn c11_directional_reports() {
    let dir = runs_dir();
    let sweep = std::fs::read_to_string(dir.join("sweep.txt"));
    let order = std::fs::read_to_string(dir.join("order.txt"));
    match (sweep, order) {
        (Ok(s), Ok(o)) => {
            for line in s.lines().chain(o.lines()).filter(|l| !l.starts_with('+')) {
                println!("  {line}");
            }
            let pass = s.contains("unified_vs_t2i_only") && o.contains("hypothesis_held=");
            verdict(11, "directional reports", pass, "(non-blocking)");
        }
        _ => {
            verdict(11, "directional reports", false, &format!("(non-blocking) no reports in {}", dir.display()));
        }
    }
}
