//! Pipeline stages. Each stage writes into `output_dir/<stage>/<key>/`,
//! where the key digests everything that determines its outputs, and skips
//! work whose artifacts already exist.

use std::io::Write;
use std::path::{Path, PathBuf};

use layerprune::baselines::{
    calibration_loss, mse_prune, oracle_prune, random_search, sensitivity_prune, similarity_prune, write_scores_csv,
    CalibrationSet, RandomSpace,
};
use layerprune::checkpoint::{Checkpoint, CheckpointMeta};
use layerprune::distill::{block_alignment, distill_finetune, finetune, write_distill_log};
use layerprune::eval::{activation_stats, eval_loss, sample_quality, throughput_bench, EvalReport, Histogram};
use layerprune::mask::PruneDecision;
use layerprune::recover::{apply_decision, learn_pruning, write_learn_log};
use layerprune::train::train_base;
use layerprune::{DiffusionTask, Error};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{digest, ExperimentConfig, PruneMethod, RandomSpaceKind, RecoverMethod};
use crate::CliError;

/// Resolved configuration for one seed.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    /// Pruning source and teacher; the configured base model when `None`.
    pub source: Option<PathBuf>,
}

/// Written next to each decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub source_hash: String,
    pub decision: PruneDecision,
    #[serde(with = "layerprune::eval::nonfinite")]
    pub calibration_loss: f64,
    /// Per-layer metric behind a metric baseline.
    pub layer_scores: Option<Vec<f64>>,
    /// Learned mask logits, one row per block.
    pub logits: Option<Vec<Vec<f64>>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    write_atomic(path, &ckpt.to_bytes()?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn note(stage: &str, msg: impl std::fmt::Display) {
    eprintln!("[{stage}] {msg}");
}

impl Run {
    pub fn new(cfg: ExperimentConfig, seed: u64) -> Self {
        Self { cfg, seed, source: None }
    }

    pub fn task(&self) -> Result<DiffusionTask, CliError> {
        Ok(DiffusionTask::new(self.cfg.task.clone())?)
    }

    fn dir(&self, stage: &str, key: &str) -> PathBuf {
        self.cfg.output_dir.join(stage).join(key)
    }

    pub fn base_key(&self) -> String {
        digest(&json!({
            "stage": "train-base",
            "model": self.cfg.model,
            "task": self.cfg.task,
            "train": self.cfg.train,
            "seed": self.seed,
        }))
    }

    pub fn base_dir(&self) -> PathBuf {
        self.dir("train-base", &self.base_key())
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.base_dir().join("checkpoint.tfck")
    }

    fn source_path(&self) -> PathBuf {
        self.source.clone().unwrap_or_else(|| self.base_checkpoint())
    }

    /// Identity of the pruning source: its config key, or a file digest for
    /// an explicit checkpoint.
    fn source_hash(&self) -> Result<String, CliError> {
        match &self.source {
            None => Ok(self.base_key()),
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|_| CliError::Missing(p.clone()))?;
                Ok(digest(&json!({ "checkpoint": hex::encode(Sha256::digest(&bytes)) })))
            }
        }
    }

    pub fn prune_key(&self, method: PruneMethod) -> Result<String, CliError> {
        let p = &self.cfg.prune;
        let detail = match method {
            PruneMethod::Learnable => json!({ "learn": p.learn }),
            PruneMethod::Oracle => json!({ "scheme": p.learn.scheme }),
            m if m.is_random() => json!({
                "scheme": p.learn.scheme,
                "calibration": [p.calibration_size, p.calibration_seed],
                "samples": p.random_samples,
                "space": p.random_space,
            }),
            _ => json!({ "scheme": p.learn.scheme, "calibration": [p.calibration_size, p.calibration_seed] }),
        };
        Ok(digest(&json!({
            "stage": method.stage(),
            "method": method.name(),
            "source": self.source_hash()?,
            "task": self.cfg.task,
            "detail": detail,
            "seed": self.seed,
        })))
    }

    pub fn prune_dir(&self, method: PruneMethod) -> Result<PathBuf, CliError> {
        Ok(self.dir(method.stage(), &self.prune_key(method)?))
    }

    pub fn recover_key(&self, method: PruneMethod, recover: RecoverMethod) -> Result<String, CliError> {
        let mut train = serde_json::to_value(&self.cfg.recover.train)?;
        if recover == RecoverMethod::Finetune {
            train = serde_json::to_value(self.cfg.recover.train.plain())?;
        }
        Ok(digest(&json!({
            "stage": recover.stage(),
            "prune": self.prune_key(method)?,
            "train": train,
            "seed": self.seed,
        })))
    }

    pub fn recover_dir(&self, method: PruneMethod, recover: RecoverMethod) -> Result<PathBuf, CliError> {
        Ok(self.dir(recover.stage(), &self.recover_key(method, recover)?))
    }

    pub fn eval_key(&self, method: PruneMethod, recover: RecoverMethod) -> Result<String, CliError> {
        Ok(digest(&json!({
            "stage": "eval",
            "recovered": self.recover_key(method, recover)?,
            "eval": self.cfg.eval,
        })))
    }

    pub fn eval_dir(&self, method: PruneMethod, recover: RecoverMethod) -> Result<PathBuf, CliError> {
        Ok(self.dir("eval", &self.eval_key(method, recover)?))
    }

    /// Trains the base model.
    pub fn train_base(&self) -> Result<PathBuf, CliError> {
        let dir = self.base_dir();
        let ckpt_path = dir.join("checkpoint.tfck");
        if ckpt_path.exists() {
            note("train-base", format_args!("cached {}", ckpt_path.display()));
            return Ok(ckpt_path);
        }
        std::fs::create_dir_all(&dir)?;
        let task = self.task()?;
        let key = self.base_key();
        let trained = train_base(&self.cfg.model, &task, &self.cfg.train, self.seed)?;
        let mut log = csv::Writer::from_writer(Vec::new());
        log.write_record(["step", "loss"])?;
        for (i, l) in trained.losses.iter().enumerate() {
            log.write_record([(i + 1).to_string(), format!("{l:e}")])?;
        }
        let mut bytes = format!("# config_hash={key} seed={}\n", self.seed).into_bytes();
        bytes.extend(log.into_inner().map_err(|e| CliError::Other(e.to_string()))?);
        write_atomic(&dir.join("losses.csv"), &bytes)?;
        let heldout = eval_loss(&trained.ema, &task, self.cfg.eval.seed)?;
        write_json(
            &dir.join("summary.json"),
            &json!({ "config_hash": key, "seed": self.seed, "steps": trained.step, "heldout_loss": heldout }),
        )?;
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                model: self.cfg.model.clone(),
                retained_layers: None,
                step: trained.step,
                seed: self.seed,
                ema_decay: self.cfg.train.ema_decay,
                kind: "base".into(),
                config_hash: key,
            },
            model: trained.model,
            ema: Some(trained.ema),
            mask_logits: None,
        };
        save_checkpoint(&ckpt_path, &ckpt)?;
        note("train-base", format_args!("seed {} held-out {heldout:.5} -> {}", self.seed, ckpt_path.display()));
        Ok(ckpt_path)
    }

    /// Runs a pruning method and stores the decision plus the shrunken model.
    pub fn prune(&self, method: PruneMethod) -> Result<PathBuf, CliError> {
        let dir = self.prune_dir(method)?;
        let record_path = dir.join("decision.json");
        if record_path.exists() {
            note(method.stage(), format_args!("cached {}", record_path.display()));
            return Ok(record_path);
        }
        let source = load_checkpoint(&self.source_path())?;
        let model = source.eval_model();
        std::fs::create_dir_all(&dir)?;
        let task = self.task()?;
        let key = self.prune_key(method)?;
        let keep = self.cfg.keep()?;
        let scheme = self.cfg.scheme()?;
        let provenance = format!("config_hash={key} seed={} method={}", self.seed, method.name());
        let calib = CalibrationSet::new(&task, self.cfg.prune.calibration_size, self.cfg.prune.calibration_seed);

        let (decision, layer_scores, logits, logit_tensor) = match method {
            PruneMethod::Learnable => {
                let out = learn_pruning(model, &task, &self.cfg.prune.learn, self.seed)?;
                write_learn_log(dir.join("learn_log.csv"), &provenance, &out.log)?;
                let rows = out.distribution.probabilities().len();
                let logits: Vec<Vec<f64>> = (0..rows).map(|r| out.distribution.logits.row(r).to_vec()).collect();
                (out.decision, None, Some(logits), Some(out.distribution.logits.clone()))
            }
            PruneMethod::Oracle => (PruneDecision::global(&oracle_prune(model.depth(), keep)?), None, None, None),
            PruneMethod::Sensitivity | PruneMethod::Similarity | PruneMethod::Mse => {
                let scored = match method {
                    PruneMethod::Sensitivity => sensitivity_prune(model, &calib, keep)?,
                    PruneMethod::Similarity => similarity_prune(model, &calib, keep)?,
                    _ => mse_prune(model, &calib, keep)?,
                };
                (PruneDecision::global(&scored.gates), Some(scored.scores), None, None)
            }
            _ => {
                let space = match self.cfg.prune.random_space {
                    RandomSpaceKind::Keep => RandomSpace::Keep(keep),
                    RandomSpaceKind::Scheme => RandomSpace::Scheme(scheme),
                };
                let search = random_search(model, &calib, self.cfg.prune.random_samples, space, self.seed)?;
                write_scores_csv(dir.join("scores.csv"), &provenance, &search.scores)?;
                let losses: Vec<f64> = search.scores.iter().map(|s| s.calibration_loss).collect();
                write_json(&dir.join("histogram.json"), &Histogram::new(&losses, 40)?)?;
                let pick = match method {
                    PruneMethod::MinLoss => search.min,
                    PruneMethod::MedianLoss => search.median,
                    _ => search.max,
                };
                (PruneDecision::global(&search.scores[pick].gates), None, None, None)
            }
        };
        let calibration = calibration_loss(model, &decision.gates(), &calib)?;
        let pruned = apply_decision(model, &decision)?;
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                model: pruned.config.clone(),
                retained_layers: Some(decision.retained_layers.clone()),
                step: 0,
                seed: self.seed,
                ema_decay: 0.0,
                kind: format!("pruned-{}", method.name()),
                config_hash: key.clone(),
            },
            model: pruned,
            ema: None,
            mask_logits: logit_tensor,
        };
        save_checkpoint(&dir.join("pruned.tfck"), &ckpt)?;
        let record = DecisionRecord {
            method: method.name().into(),
            seed: self.seed,
            config_hash: key,
            source_hash: self.source_hash()?,
            decision,
            calibration_loss: calibration,
            layer_scores,
            logits,
        };
        write_json(&record_path, &record)?;
        note(
            method.stage(),
            format_args!("{} seed {} kept {:?} -> {}", method.name(), self.seed, record.decision.retained_layers, record_path.display()),
        );
        Ok(record_path)
    }

    pub fn decision(&self, method: PruneMethod) -> Result<DecisionRecord, CliError> {
        read_json(&self.prune_dir(method)?.join("decision.json"))
    }

    /// Recovers the pruned model of `method`.
    pub fn recover(&self, method: PruneMethod, recover: RecoverMethod) -> Result<PathBuf, CliError> {
        let dir = self.recover_dir(method, recover)?;
        let ckpt_path = dir.join("checkpoint.tfck");
        if ckpt_path.exists() {
            note(recover.stage(), format_args!("cached {}", ckpt_path.display()));
            return Ok(ckpt_path);
        }
        let pdir = self.prune_dir(method)?;
        let record: DecisionRecord = read_json(&pdir.join("decision.json"))?;
        let student = load_checkpoint(&pdir.join("pruned.tfck"))?.model;
        let task = self.task()?;
        let cfg = &self.cfg.recover.train;
        let key = self.recover_key(method, recover)?;
        let out = match recover {
            RecoverMethod::Finetune => finetune(student, &task, cfg, self.seed)?,
            RecoverMethod::Distill => {
                let teacher = load_checkpoint(&self.source_path())?;
                let teacher = teacher.eval_model();
                let alignment = match block_alignment(teacher.depth(), self.cfg.scheme()?, &record.decision) {
                    Ok(a) => Some(a),
                    Err(Error::RepKdUnavailable) => {
                        note("distill", "global decision: hidden-state distillation disabled, output distillation only");
                        None
                    }
                    Err(e) => return Err(e.into()),
                };
                distill_finetune(student, teacher, alignment.as_ref(), &task, cfg, self.seed)?
            }
        };
        std::fs::create_dir_all(&dir)?;
        let provenance = format!("config_hash={key} seed={}", self.seed);
        write_distill_log(dir.join("log.csv"), &provenance, &out.log)?;
        let heldout = eval_loss(&out.ema, &task, self.cfg.eval.seed)?;
        write_json(
            &dir.join("summary.json"),
            &json!({ "config_hash": key, "seed": self.seed, "steps": out.step, "heldout_loss": heldout }),
        )?;
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                model: out.model.config.clone(),
                retained_layers: Some(record.decision.retained_layers.clone()),
                step: out.step,
                seed: self.seed,
                ema_decay: cfg.ema_decay,
                kind: recover.stage().into(),
                config_hash: key,
            },
            model: out.model,
            ema: Some(out.ema),
            mask_logits: None,
        };
        save_checkpoint(&ckpt_path, &ckpt)?;
        note(recover.stage(), format_args!("{} seed {} held-out {heldout:.5} -> {}", method.name(), self.seed, ckpt_path.display()));
        Ok(ckpt_path)
    }

    /// Evaluates a checkpoint into a report.
    pub fn evaluate(&self, ckpt: &Checkpoint, model_id: &str, config_hash: &str) -> Result<EvalReport, CliError> {
        let task = self.task()?;
        let e = &self.cfg.eval;
        let model = ckpt.eval_model();
        let heldout = task.heldout_batch(e.seed);
        let act = heldout.slice(0..e.activation_batch.min(heldout.len()));
        let throughput = if e.throughput {
            let bench = throughput_bench(&layerprune::eval::BenchConfig {
                depths: vec![model.depth()],
                model: model.config.clone(),
                ..self.cfg.bench.clone()
            })?;
            Some(bench.rows[0].its)
        } else {
            None
        };
        let mut report = EvalReport {
            model_id: model_id.into(),
            depth: model.depth(),
            parameter_count: model.parameter_count(),
            heldout_loss: eval_loss(model, &task, e.seed)?,
            sliced_wasserstein: sample_quality(model, &task, e.samples, e.sample_steps, self.seed)?,
            throughput,
            activations: activation_stats(model, &model.batch_input(&act, &task.schedule))?,
            task: self.cfg.task.clone(),
            config_hash: config_hash.into(),
            seed: self.seed,
            non_finite: vec![],
        };
        report.flag_non_finite();
        Ok(report)
    }

    /// Evaluates the recovered model of `method`.
    pub fn eval(&self, method: PruneMethod, recover: RecoverMethod) -> Result<PathBuf, CliError> {
        let dir = self.eval_dir(method, recover)?;
        let path = dir.join("report.json");
        if path.exists() {
            note("eval", format_args!("cached {}", path.display()));
            return Ok(path);
        }
        let ckpt = load_checkpoint(&self.recover_dir(method, recover)?.join("checkpoint.tfck"))?;
        let key = self.eval_key(method, recover)?;
        let report = self.evaluate(&ckpt, &format!("{}-{}-seed{}", method.name(), recover.stage(), self.seed), &key)?;
        std::fs::create_dir_all(&dir)?;
        write_json(&path, &report)?;
        note("eval", format_args!("held-out {:.5} SW {:.5} -> {}", report.heldout_loss, report.sliced_wasserstein, path.display()));
        Ok(path)
    }
}

/// One comparison-table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub seed: u64,
    pub retained: String,
    pub calibration_loss: f64,
    pub heldout_loss: f64,
    pub sliced_wasserstein: f64,
}

pub fn write_comparison(path: &Path, config_hash: &str, rows: &[ComparisonRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let mut bytes = format!("# config_hash={config_hash}\n").into_bytes();
    bytes.extend(w.into_inner().map_err(|e| CliError::Other(e.to_string()))?);
    write_atomic(path, &bytes)
}

pub fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    read_json(path)
}
