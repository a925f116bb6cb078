//! Glue between a [`RunConfig`] and the library: corpus, frontend, training
//! with checkpoints, and loading a trained model back.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{build_corpus, Corpus};
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::inference::Model;
use crate::io::{self, Checkpoint};
use crate::model::ModelParams;
use crate::optim::AdamW;
use crate::tensor::{Float, Tensor};
use crate::training::{prepare_examples, LatentStats, Prepared, StepMetrics, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.ufld";
pub const METRICS_FILE: &str = "metrics.log";

/// Corpus, frontend and latent statistics derived from a config.
pub struct Workspace {
    pub run: RunConfig,
    pub frontend: Frontend,
    pub corpus: Corpus,
    pub stats: LatentStats,
}

impl Workspace {
    pub fn new(run: &RunConfig) -> Result<Self> {
        let frontend = Frontend::new(&run.model, run.codec_seed, run.enc_seed);
        let corpus = if run.corpus_path.is_empty() {
            build_corpus(run.data_seed, &run.corpus)
        } else {
            Corpus {
                examples: io::read_corpus(fs::File::open(&run.corpus_path)?)?,
            }
        };
        let stats = LatentStats::compute(&frontend, corpus.train())?;
        Ok(Self {
            run: run.clone(),
            frontend,
            corpus,
            stats,
        })
    }

    pub fn train_data(&self) -> Result<Vec<Prepared>> {
        prepare_examples(&self.frontend, &self.stats, self.corpus.train())
    }
}

fn is_wide<T: Float>() -> bool {
    T::NAME == "f64"
}

fn vector<T: Float>(v: &[f64]) -> Tensor<T> {
    Tensor::from_vec(&[v.len()], v.iter().map(|&x| T::of(x)).collect())
}

/// Largest step count a checkpoint can record exactly in an f32 slot.
const MAX_STEP: u64 = 1 << 24;

/// Model, optimizer moments (`adam.m.*`, `adam.v.*`), step and latent
/// statistics (`meta.*`) as one checkpoint.
pub fn make_checkpoint<T: Float>(
    run: &RunConfig,
    params: &ModelParams<T>,
    opt: Option<&AdamW<T>>,
    step: u64,
    stats: &LatentStats,
) -> Result<Checkpoint<T>> {
    if step >= MAX_STEP {
        return Err(Error::Format(format!("step {step} too large to record")));
    }
    let mut tensors = params.to_named();
    if let Some(opt) = opt {
        let names = params.names();
        for (n, m) in names.iter().zip(&opt.m) {
            tensors.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&opt.v) {
            tensors.push((format!("adam.v.{n}"), v.clone()));
        }
        tensors.push(("meta.adam_steps".into(), vector(&[opt.steps as f64])));
    }
    tensors.push(("meta.step".into(), vector(&[step as f64])));
    tensors.push(("meta.latent_mean".into(), vector(&stats.mean)));
    tensors.push(("meta.latent_std".into(), vector(&stats.std)));
    tensors.push(("meta.latent_clip".into(), vector(&[stats.clip])));
    Ok(Checkpoint {
        config: run.to_text(),
        tensors,
    })
}

/// A parsed checkpoint.
pub struct Loaded<T> {
    pub run: RunConfig,
    pub params: ModelParams<T>,
    pub opt: Option<AdamW<T>>,
    pub step: u64,
    pub stats: LatentStats,
    pub crc: u32,
}

fn meta<T: Float>(c: &Checkpoint<T>, name: &str) -> Result<Vec<f64>> {
    Ok(c.get(name)?.data.iter().map(|x| x.as_f64()).collect())
}

fn scalar<T: Float>(c: &Checkpoint<T>, name: &str) -> Result<f64> {
    meta(c, name)?.first().copied().ok_or_else(|| Error::Format(format!("`{name}` is empty")))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Loaded<T>> {
    let bytes = fs::read(path)?;
    let c = Checkpoint::<T>::from_bytes(&bytes)?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let run = RunConfig::parse(&c.config)?;
    let mut params = ModelParams::<T>::init(&run.model, 0);
    params.load_named(&c.tensors)?;
    let names = params.names();
    let opt = if c.get("meta.adam_steps").is_ok() {
        let grab = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            names
                .iter()
                .zip(params.tensors())
                .map(|(n, (_, p))| {
                    let t = c.get(&format!("{prefix}{n}"))?;
                    if t.shape != p.shape {
                        return Err(Error::ShapeMismatch(format!("`{prefix}{n}` has shape {:?}", t.shape)));
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        Some(AdamW {
            config: run.train.adam,
            m: grab("adam.m.")?,
            v: grab("adam.v.")?,
            steps: scalar(&c, "meta.adam_steps")? as u64,
        })
    } else {
        None
    };
    let stats = LatentStats {
        mean: meta(&c, "meta.latent_mean")?,
        std: meta(&c, "meta.latent_std")?,
        clip: scalar(&c, "meta.latent_clip")?,
    };
    if stats.mean.len() != run.model.token_dim || stats.std.len() != run.model.token_dim {
        return Err(Error::ShapeMismatch("latent statistics do not match token_dim".into()));
    }
    Ok(Loaded {
        run,
        params,
        opt,
        step: scalar(&c, "meta.step")? as u64,
        stats,
        crc,
    })
}

/// Loads a checkpoint for inference.
pub fn load_model<T: Float>(path: &Path) -> Result<(Model<T>, Loaded<T>)> {
    let l = load_checkpoint::<T>(path)?;
    let fe = Frontend::new(&l.run.model, l.run.codec_seed, l.run.enc_seed);
    let model = Model::new(l.run.model.clone(), l.params.clone(), l.stats.clone(), fe)?;
    Ok((model, l))
}

/// Where training ended up.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub crc: u32,
    pub step: u64,
    pub last: Option<StepMetrics>,
}

/// Trains from scratch or from `resume`, saving to
/// `<out_dir>/checkpoint.ufld` every `save_every` steps and when stopping.
/// `stop_at` ends the run early without changing any schedule.
pub fn train<T: Float>(
    run: &RunConfig,
    resume: Option<&Path>,
    stop_at: Option<u64>,
    mut log: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    run.validate()?;
    let ws = Workspace::new(run)?;
    let data = ws.train_data()?;
    let mut trainer = match resume {
        None => Trainer::<T>::new(run.model.clone(), run.train.clone(), data, ws.stats.clone())?,
        Some(path) => {
            let l = load_checkpoint::<T>(path)?;
            if l.run.model != run.model || l.run.train.seed != run.train.seed {
                return Err(Error::InvalidConfig("checkpoint was trained with a different model or seed".into()));
            }
            Trainer::resume(run.model.clone(), run.train.clone(), data, l.stats, l.params, l.opt, l.step)?
        }
    };
    fs::create_dir_all(&run.out_dir)?;
    let path = run.out_dir.join(CHECKPOINT_FILE);
    let end = stop_at.unwrap_or(run.train.total_steps).min(run.train.total_steps);
    let save = |t: &Trainer<T>| -> Result<u32> {
        make_checkpoint(run, &t.params, Some(&t.opt), t.step, &t.stats)?.save(&path, is_wide::<T>())
    };
    let mut last = None;
    let mut crc = None;
    while trainer.step < end {
        let next = ((trainer.step / run.save_every) + 1) * run.save_every;
        if let Some(m) = trainer.run_until(next.min(end), &mut log)? {
            last = Some(m);
        }
        crc = Some(save(&trainer)?);
    }
    let crc = match crc {
        Some(c) => c,
        None => save(&trainer)?,
    };
    Ok(TrainOutcome {
        checkpoint: path,
        crc,
        step: trainer.step,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    pub(crate) fn tiny_run(dir: &Path, steps: u64) -> RunConfig {
        let mut run = RunConfig {
            model: ModelConfig {
                max_seq: 64,
                ..ModelConfig::tiny()
            },
            out_dir: dir.to_path_buf(),
            save_every: 3,
            ..RunConfig::default()
        };
        run.train.total_steps = steps;
        run.train.batch_size = 4;
        run.train.log_every = 1;
        run.train.lr = 1e-3;
        run
    }

    #[test]
    fn resume_matches_uninterrupted_run_bitwise() {
        let d = tempfile::tempdir().unwrap();
        let run = tiny_run(d.path(), 8);
        let mut log_a = Vec::new();
        let a = train::<f64>(&run, None, None, |m| Ok(log_a.push(m.to_string()))).unwrap();
        let la = load_checkpoint::<f64>(&a.checkpoint).unwrap();
        assert_eq!(la.step, 8);
        assert_eq!(la.opt.unwrap().steps, 8);

        // the same directory, so the stored configs are identical
        let half = run.clone();
        let mut log_b = Vec::new();
        let b0 = train::<f64>(&half, None, Some(5), |m| Ok(log_b.push(m.to_string()))).unwrap();
        assert_eq!(b0.step, 5);
        let b = train::<f64>(&half, Some(&b0.checkpoint), None, |m| Ok(log_b.push(m.to_string()))).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a.crc, b.crc);
    }

    #[test]
    fn checkpoint_round_trip_preserves_tensors() {
        let d = tempfile::tempdir().unwrap();
        let run = tiny_run(d.path(), 2);
        let out = train::<f32>(&run, None, None, |_| Ok(())).unwrap();
        let l = load_checkpoint::<f32>(&out.checkpoint).unwrap();
        assert_eq!(l.run, run);
        let again = make_checkpoint(&l.run, &l.params, l.opt.as_ref(), l.step, &l.stats).unwrap();
        let p2 = d.path().join("again.ufld");
        assert_eq!(again.save(&p2, false).unwrap(), out.crc);
        assert_eq!(fs::read(&p2).unwrap(), fs::read(&out.checkpoint).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        let run = tiny_run(d.path(), 1);
        let out = train::<f32>(&run, None, None, |_| Ok(())).unwrap();
        let mut c = Checkpoint::<f32>::load(&out.checkpoint).unwrap();
        let mut wrong = run.clone();
        wrong.model.d_ff = 40;
        c.config = wrong.to_text();
        let p = d.path().join("bad.ufld");
        c.save(&p, false).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::ShapeMismatch(_))));
    }
}
