//! Training loop: AdamW with linear warm-up and cosine decay, global-norm
//! gradient clipping, line-delimited JSON metrics and resumable checkpoints.
//!
//! A checkpoint holds everything needed to continue a run bit-for-bit: the
//! run configuration, vocabulary and prompt files as byte records, the step
//! counter, the state of the training random stream, parameters under
//! `param.` and the two AdamW moments under `adam.m.` / `adam.v.`.

pub mod optim;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Container;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::encoders::{encode_image, encode_text, ForwardMode, GroupVit, TokenizedText, Vocab};
use crate::error::{Error, Result};
use crate::objectives::{generate_prompts, temperature_from_param, total_loss, PromptSet};
use crate::params::Bound;
use crate::scalar::Scalar;

pub use optim::{clip_global_norm, learning_rate, AdamW};

/// Version of the training-state layout inside a checkpoint container.
pub const STATE_VERSION: u64 = 1;

/// Stream of the model-initialization generator; training draws use
/// [`TRAIN_STREAM`], epoch shuffles use `SHUFFLE_STREAM_BASE + epoch`.
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub multilabel_image_to_text: Option<f64>,
    pub multilabel_text_to_image: Option<f64>,
    pub tau: f64,
    pub grad_norm: f64,
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: GroupVit<T>,
    pub optimizer: AdamW<T>,
    pub vocab: Vocab,
    pub prompts: PromptSet,
    /// Completed optimizer steps.
    pub step: u64,
    rng: ChaCha8Rng,
}

fn rng_state(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut out: Vec<u64> = seed
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    out.push(rng.get_stream());
    let pos = rng.get_word_pos();
    out.push(pos as u64);
    out.push((pos >> 64) as u64);
    out
}

fn rng_from_state(words: &[u64], path: &Path) -> Result<ChaCha8Rng> {
    if words.len() != 7 {
        return Err(Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            msg: format!("rng state has {} words, expected 7", words.len()),
        });
    }
    let mut seed = [0u8; 32];
    for (i, w) in words[..4].iter().enumerate() {
        seed[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[4]);
    rng.set_word_pos(u128::from(words[5]) | (u128::from(words[6]) << 64));
    Ok(rng)
}

fn text_record<'a>(c: &'a Container, name: &str, path: &Path) -> Result<&'a str> {
    let missing = || Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        msg: format!("missing or non-UTF-8 record {name}"),
    };
    std::str::from_utf8(c.bytes(name).ok_or_else(missing)?).map_err(|_| missing())
}

fn lines(items: &[String]) -> String {
    items.iter().map(|s| format!("{s}\n")).collect()
}

fn parse_lines(text: &str) -> Vec<String> {
    text.lines().filter(|l| !l.is_empty()).map(String::from).collect()
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run: weights drawn from the config seed.
    pub fn new(config: RunConfig, vocab: Vocab, prompts: PromptSet) -> Result<Self> {
        config.validate()?;
        if vocab.len() > config.model.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} is smaller than the vocabulary ({} tokens)",
                config.model.vocab_size,
                vocab.len()
            )));
        }
        prompts.validate()?;
        let seed = config.train.seed;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        init.set_stream(INIT_STREAM);
        let model = GroupVit::new(config.model.clone(), config.loss.temperature_init, &mut init)?;
        let optimizer = AdamW::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Trainer {
            config,
            model,
            optimizer,
            vocab,
            prompts,
            step: 0,
            rng,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert_u64("state.version", &[STATE_VERSION]);
        c.insert_u64("state.step", &[self.step]);
        c.insert_u64("state.rng", &rng_state(&self.rng));
        c.insert_bytes("state.scalar", T::NAME.as_bytes());
        c.insert_bytes("run.config", self.config.to_config_string().as_bytes());
        c.insert_bytes("run.vocab", self.vocab.to_file_string().as_bytes());
        c.insert_bytes("run.templates", lines(&self.prompts.templates).as_bytes());
        let lexicon: Vec<String> = self.prompts.lexicon.iter().cloned().collect();
        c.insert_bytes("run.lexicon", lines(&lexicon).as_bytes());
        self.model.to_container(&mut c);
        self.optimizer.to_container(&mut c);
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            msg,
        };
        match c.u64s("state.version") {
            Some([STATE_VERSION]) => {}
            other => return Err(fmt(format!("unsupported training state version {other:?}"))),
        }
        let scalar = text_record(c, "state.scalar", path)?;
        if scalar != T::NAME {
            return Err(fmt(format!("checkpoint holds {scalar} weights, loading as {}", T::NAME)));
        }
        let config = RunConfig::parse_onto(&RunConfig::desk(), text_record(c, "run.config", path)?)?;
        let vocab = Vocab::parse(text_record(c, "run.vocab", path)?, path)?;
        let templates = parse_lines(text_record(c, "run.templates", path)?);
        let lexicon = parse_lines(text_record(c, "run.lexicon", path)?);
        let prompts = PromptSet::new(&templates, &lexicon, config.loss.k)?;
        let mut t = Trainer::new(config, vocab, prompts)?;
        t.model.load_from(c)?;
        t.optimizer.load_from(c)?;
        t.step = match c.u64s("state.step") {
            Some([s]) => *s,
            _ => return Err(fmt("missing state.step".into())),
        };
        t.rng = rng_from_state(c.u64s("state.rng").unwrap_or(&[]), path)?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }

    fn batch_size(&self, n: usize) -> usize {
        self.config.train.batch_size.min(n)
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        (n / self.batch_size(n).max(1)).max(1) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.steps_per_epoch(n) * self.config.train.epochs as u64
    }

    /// Sample indices of optimizer step `step`: each epoch visits a fresh
    /// permutation, dropping the incomplete last batch.
    fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        let (epoch, within) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(SHUFFLE_STREAM_BASE + epoch);
        order.shuffle(&mut rng);
        let b = self.batch_size(n);
        order[within * b..(within + 1) * b].to_vec()
    }

    /// One optimizer step on the next batch of `data`.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Config("training split is empty".into()));
        }
        let cfg = self.config.model.clone();
        let tc = self.config.train.clone();
        let idx = self.batch_indices(self.step, n);
        let b = idx.len();
        let images = data.images::<T>(&idx)?;

        let mut texts: Vec<TokenizedText> = idx
            .iter()
            .map(|&i| self.vocab.tokenize(&data.samples[i].caption, cfg.max_text_length))
            .collect();
        let k = self.config.loss.k;
        if tc.multilabel {
            let prompts: Vec<Vec<String>> = idx
                .iter()
                .map(|&i| generate_prompts(&data.samples[i].caption, &self.prompts, &mut self.rng))
                .collect();
            for kk in 0..k {
                for p in &prompts {
                    texts.push(self.vocab.tokenize(&p[kk], cfg.max_text_length));
                }
            }
        }

        let mut g = Graph::new();
        let vars: Vec<_> = self.model.params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let bound = self.model.bind_from(Bound::from_vars(&self.model.params, &vars));
        let mode = ForwardMode {
            assign: tc.assign_mode,
            gumbel: tc.gumbel_noise,
        };
        let noise: Option<&mut dyn rand::RngCore> = if tc.gumbel_noise { Some(&mut self.rng) } else { None };
        let (zi, _) = encode_image(&mut g, &images, &bound.vision, &cfg, mode, noise)?;
        let zt_all = encode_text(&mut g, &texts, &bound.text, &cfg)?;
        let zt = g.slice(zt_all, 0, 0, b)?;
        let zp = if tc.multilabel {
            let p = g.shape(zt_all)[1];
            let s = g.slice(zt_all, 0, b, b + k * b)?;
            Some(g.reshape(s, &[k, b, p])?)
        } else {
            None
        };
        let tau = temperature_from_param(&mut g, bound.temperature);
        let loss = total_loss(&mut g, zi, zt, zp, tau)?;
        let value = |v| g.value(v).item().as_f64();
        let loss_value = value(loss.total);
        if !loss_value.is_finite() {
            return Err(Error::Numeric {
                op: "train_step",
                msg: format!("loss is {loss_value} at step {}", self.step),
            });
        }
        let metrics_tau = value(tau);
        let grads = g.backward(loss.total)?;
        let mut grad_list: Vec<_> = self
            .model
            .params
            .iter()
            .zip(&vars)
            .map(|((_, t), &v)| grads.get_or_zeros(v, t.shape()))
            .collect();
        let grad_norm = clip_global_norm(&mut grad_list, tc.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric {
                op: "train_step",
                msg: format!("gradient norm is {grad_norm} at step {}", self.step),
            });
        }
        let spe = self.steps_per_epoch(n);
        let lr = learning_rate(
            tc.learning_rate,
            self.step,
            tc.warmup_epochs as u64 * spe,
            self.total_steps(n),
        );
        self.optimizer.update(&mut self.model.params, &grad_list, lr, tc.weight_decay)?;
        let m = StepMetrics {
            step: self.step,
            epoch: self.step / spe,
            lr,
            loss: loss_value,
            image_to_text: value(loss.image_text.image_to_text),
            text_to_image: value(loss.image_text.text_to_image),
            multilabel_image_to_text: loss.multilabel.map(|l| value(l.image_to_text)),
            multilabel_text_to_image: loss.multilabel.map(|l| value(l.text_to_image)),
            tau: metrics_tau,
            grad_norm,
        };
        self.step += 1;
        Ok(m)
    }

    /// Runs until `stop` steps are complete (or the configured total, if
    /// smaller), appending metrics to `out/metrics.jsonl` and writing
    /// checkpoints every `checkpoint_every` steps plus `out/final.ckpt` at the
    /// end of training.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>, stop: Option<u64>) -> Result<Vec<StepMetrics>> {
        let total = self.total_steps(data.len());
        let stop = stop.map_or(total, |s| s.min(total));
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("metrics.jsonl");
                truncate_log(&p, self.step)?;
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?;
                Some((f, p))
            }
            None => None,
        };
        let every = self.config.train.checkpoint_every as u64;
        let mut all = Vec::new();
        while self.step < stop {
            let m = self.train_step(data)?;
            if let Some((f, p)) = log.as_mut() {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            if let Some(dir) = out {
                if every > 0 && self.step.is_multiple_of(every) && self.step < total {
                    self.save(&checkpoint_path(dir, self.step))?;
                }
            }
            log::debug!("step {} loss {:.4} tau {:.4}", m.step, m.loss, m.tau);
            all.push(m);
        }
        if let Some(dir) = out {
            if self.step == total {
                self.save(&dir.join("final.ckpt"))?;
            }
        }
        Ok(all)
    }
}

/// Drops log lines at or past `step`, left over from a run being resumed.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    let mut dropped = false;
    for line in text.lines() {
        let m: StepMetrics = serde_json::from_str(line).map_err(|e| Error::Format {
            kind: "metrics log",
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if m.step < step {
            kept.push_str(line);
            kept.push('\n');
        } else {
            dropped = true;
        }
    }
    if dropped {
        std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Loads only the model from a training checkpoint, converting weights to `T`.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(GroupVit<T>, RunConfig, Vocab, Vec<String>)> {
    let c = Container::load(path)?;
    let config = RunConfig::parse_onto(&RunConfig::desk(), text_record(&c, "run.config", path)?)?;
    let vocab = Vocab::parse(text_record(&c, "run.vocab", path)?, path)?;
    let templates = parse_lines(text_record(&c, "run.templates", path)?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = GroupVit::new(config.model.clone(), config.loss.temperature_init, &mut rng)?;
    model.load_from(&c)?;
    Ok((model, config, vocab, templates))
}
