//! Datasets, prompts, finetuning runs and evaluation.
//!
//! Prompt template (fixed):
//!
//! ```text
//! [{context}\n]Q: {input}\nA:
//! ```
//!
//! A one-shot prompt prefixes a complete solved example followed by a blank
//! line. Answers are the gold output followed by `\n`, which also stops
//! greedy decoding.

mod data;
mod metrics;

pub use data::*;
pub use metrics::*;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora;
use crate::model::{self, decode_tokens, encode_text, ArchConfig, Example, LoraConfig, ToyModel};
use crate::optim::{default_freeze_step, AdamConfig};
use crate::parallel::{self, DdpStats, OptimizerKind, PipelinePlan, WorkerGroup};
use crate::quant::QuantConfig;

/// Ends every answer and stops generation.
pub const ANSWER_END: &str = "\n";

pub fn assemble_prompt(rec: &TaskRecord, one_shot: Option<&TaskRecord>) -> String {
    let mut out = String::new();
    if let Some(ex) = one_shot {
        out.push_str(&single_prompt(ex));
        out.push_str(&ex.output);
        out.push_str("\n\n");
    }
    out.push_str(&single_prompt(rec));
    out
}

fn single_prompt(rec: &TaskRecord) -> String {
    match &rec.context {
        Some(c) => format!("{c}\nQ: {}\nA: ", rec.input),
        None => format!("Q: {}\nA: ", rec.input),
    }
}

/// Next-token example for a record. Over-long prompts lose tokens from the
/// front so the answer always fits in `max_seq`.
pub fn training_example(rec: &TaskRecord, max_seq: usize, mask_prompt: bool) -> Result<Example> {
    let mut prompt = encode_text(&assemble_prompt(rec, None));
    let answer = encode_text(&format!("{}{ANSWER_END}", rec.output));
    if answer.len() > max_seq {
        return Err(Error::Input(format!(
            "answer of {} tokens exceeds max_seq {max_seq}",
            answer.len()
        )));
    }
    let budget = max_seq + 1 - answer.len();
    if prompt.len() > budget {
        prompt.drain(..prompt.len() - budget);
    }
    let mut ex = Example::from_prompt_answer(&prompt, &answer);
    if !mask_prompt {
        let seq: Vec<usize> = prompt.iter().chain(&answer).copied().collect();
        ex.targets = seq[1..].iter().map(|&t| Some(t)).collect();
    }
    Ok(ex)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Adam,
    ZeroOneAdam,
}

/// Everything a run needs. Serialized form is the CLI config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: String,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// 16 keeps a BF16 base; 8 uses int8 absmax; 4 uses NF4.
    pub bits: u8,
    pub block_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub workers: usize,
    pub pipeline_stages: usize,
    pub micro_batches: usize,
    pub optimizer: OptimizerChoice,
    /// Defaults to a quarter of the run's optimizer steps.
    pub freeze_step: Option<u64>,
    pub one_shot: bool,
    pub mask_prompt: bool,
    pub data: Vec<PathBuf>,
    pub eval_data: Vec<PathBuf>,
    pub label_map: BTreeMap<String, String>,
    pub classes: Option<Vec<String>>,
    pub max_new_tokens: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: "toy".into(),
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
            bits: 8,
            block_size: 64,
            seed: 0,
            lr: 1e-4,
            epochs: 1,
            batch_size: 8,
            grad_accum: 1,
            workers: 1,
            pipeline_stages: 1,
            micro_batches: 4,
            optimizer: OptimizerChoice::ZeroOneAdam,
            freeze_step: None,
            one_shot: false,
            mask_prompt: true,
            data: Vec::new(),
            eval_data: Vec::new(),
            label_map: BTreeMap::new(),
            classes: None,
            max_new_tokens: 8,
            out: PathBuf::from("runs/latest"),
        }
    }
}

impl RunConfig {
    pub fn quant(&self) -> Result<Option<QuantConfig>> {
        Ok(match self.bits {
            16 => None,
            8 => Some(QuantConfig::new(
                8,
                self.block_size,
                crate::quant::CodebookId::IntAbsmax,
            )?),
            4 => Some(QuantConfig::new(
                4,
                self.block_size,
                crate::quant::CodebookId::Nf4,
            )?),
            b => return Err(Error::Config(format!("bits must be 4, 8 or 16, got {b}"))),
        })
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
        }
    }

    pub fn build_model(&self) -> Result<ToyModel> {
        model::build_model(
            &ArchConfig::preset(&self.arch)?,
            self.quant()?,
            self.lora(),
            self.seed,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 || self.workers == 0 {
            return Err(Error::Config(
                "batch_size, grad_accum and workers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub worker_hours: f64,
    pub bits_transmitted: u64,
}

#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub model: ToyModel,
    pub epochs: Vec<EpochRecord>,
    pub stats: DdpStats,
    pub adapter_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Loads and label-maps every dataset in `paths`, then mixes them with
/// `seed`. One path is single-task finetuning.
pub fn load_tasks(
    paths: &[PathBuf],
    label_map: &BTreeMap<String, String>,
    seed: u64,
) -> Result<Vec<TaskRecord>> {
    let mut sets = Vec::with_capacity(paths.len());
    for p in paths {
        let mut recs = load_jsonl(p)?;
        apply_label_map(&mut recs, label_map);
        sets.push(recs);
    }
    Ok(mix_tasks(sets, seed))
}

fn load_eval(paths: &[PathBuf], label_map: &BTreeMap<String, String>) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for p in paths {
        let mut recs = load_jsonl(p)?;
        apply_label_map(&mut recs, label_map);
        out.extend(recs);
    }
    Ok(out)
}

/// Optimizer-step batches over `n` shuffled examples; a trailing batch too
/// small to give every worker an example is folded into the previous one.
fn batches(n: usize, per_step: usize, workers: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if n < workers {
        return Err(Error::Sharding { batch: n, workers });
    }
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(per_step)
        .map(|s| s..(s + per_step).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < workers) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    Ok(out)
}

/// Finetunes adapters on `records` from a freshly built model. Does not touch
/// the filesystem; see [`run_finetune`].
pub fn train(
    config: &RunConfig,
    records: &[TaskRecord],
    eval_set: &[TaskRecord],
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<(ToyModel, Vec<EpochRecord>, DdpStats)> {
    config.validate()?;
    let model = config.build_model().map_err(|e| e.in_stage("build"))?;
    if config.epochs == 0 {
        return Ok((model, Vec::new(), DdpStats::default()));
    }
    let examples: Vec<Example> = records
        .iter()
        .map(|r| training_example(r, model.arch.max_seq, config.mask_prompt))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("prepare"))?;
    let n = examples.len();
    let per_step = config.batch_size * config.grad_accum;
    let plan = batches(n, per_step, config.workers).map_err(|e| e.in_stage("prepare"))?;
    let total_steps = (plan.len() * config.epochs) as u64;
    let kind = match config.optimizer {
        OptimizerChoice::Adam => OptimizerKind::Adam,
        OptimizerChoice::ZeroOneAdam => OptimizerKind::ZeroOneAdam {
            freeze_step: Some(
                config
                    .freeze_step
                    .unwrap_or_else(|| default_freeze_step(total_steps)),
            ),
        },
    };
    let mut group = WorkerGroup::new(
        &model,
        config.workers,
        kind,
        AdamConfig::with_lr(config.lr),
        config.seed,
    )
    .map_err(|e| e.in_stage("build"))?;

    let mut records_out = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        crate::numerics::Rng::derived(config.seed, data::SHUFFLE_STREAM + 1 + epoch as u64)
            .shuffle(&mut order);
        let mut loss_sum = 0.0;
        for range in &plan {
            let batch: Vec<(u64, Example)> = order[range.clone()]
                .iter()
                .map(|&i| ((epoch * n + i) as u64, examples[i].clone()))
                .collect();
            let loss = group
                .ddp_step(&batch)
                .map_err(|e| e.in_stage(format!("train epoch {}", epoch + 1)))?;
            loss_sum += loss * batch.len() as f64;
        }
        let (accuracy, weighted_f1) = if eval_set.is_empty() {
            (None, None)
        } else {
            let opts = EvalOptions::from_config(config);
            let r = run_eval(group.model(), eval_set, &opts).map_err(|e| e.in_stage("eval"))?;
            (Some(r.accuracy), r.weighted_f1)
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / n as f64,
            accuracy,
            weighted_f1,
            worker_hours: group.stats.worker_hours,
            bits_transmitted: group.stats.bits_transmitted,
        };
        on_epoch(&rec)?;
        records_out.push(rec);
    }
    let stats = group.stats;
    Ok((group.into_model(), records_out, stats))
}

/// Loads the configured datasets, trains, and writes `adapter.flra`,
/// `model.flck`, `metrics.jsonl` and `config.json` under `config.out`.
pub fn run_finetune(config: &RunConfig) -> Result<RunArtifact> {
    if config.data.is_empty() {
        return Err(Error::Config("no training data (--data)".into()));
    }
    let records =
        load_tasks(&config.data, &config.label_map, config.seed).map_err(|e| e.in_stage("load"))?;
    let eval_set =
        load_eval(&config.eval_data, &config.label_map).map_err(|e| e.in_stage("load"))?;

    let out = &config.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("save"))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut log =
        File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e).in_stage("save"))?;
    let (model, epochs, stats) = train(config, &records, &eval_set, |rec| {
        let line = serde_json::to_string(rec).expect("epoch record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e).in_stage("save"))
    })?;

    let adapter_path = out.join("adapter.flra");
    let checkpoint_path = out.join("model.flck");
    let save = || -> Result<()> {
        lora::save_adapters(&model.adapters(), &adapter_path)?;
        model::save_checkpoint(&model, &checkpoint_path)?;
        let cfg_path = out.join("config.json");
        let text = serde_json::to_string_pretty(config).expect("config serializes");
        fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))
    };
    save().map_err(|e| e.in_stage("save"))?;
    Ok(RunArtifact {
        model,
        epochs,
        stats,
        adapter_path,
        checkpoint_path,
        metrics_path,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOptions {
    pub one_shot: bool,
    pub max_new_tokens: usize,
    pub classes: Option<Vec<String>>,
    pub pipeline: Option<PipelinePlan>,
}

impl EvalOptions {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            one_shot: c.one_shot,
            max_new_tokens: c.max_new_tokens,
            classes: c.classes.clone(),
            pipeline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n: usize,
    pub accuracy: f64,
    pub weighted_f1: Option<f64>,
    pub per_class: BTreeMap<String, ClassStats>,
    pub predictions: Vec<String>,
    pub latency_seconds: Vec<f64>,
    pub mean_latency_seconds: f64,
    /// `(example index, message)` for examples whose decoding failed.
    pub errors: Vec<(usize, String)>,
}

/// Sorted distinct gold labels when they repeat enough to look like a
/// classification task (at most half as many classes as examples).
pub fn infer_classes(golds: &[String]) -> Option<Vec<String>> {
    let set: BTreeSet<&String> = golds.iter().collect();
    (!golds.is_empty() && set.len() * 2 <= golds.len()).then(|| set.into_iter().cloned().collect())
}

/// The first other record of the same task, used as the solved example.
pub fn one_shot_example(records: &[TaskRecord], i: usize) -> Option<&TaskRecord> {
    records
        .iter()
        .enumerate()
        .find(|(j, r)| *j != i && r.task_id == records[i].task_id)
        .map(|(_, r)| r)
}

/// Greedy decoding for a batch of prompts. With a pipeline plan, every
/// decoding step runs the active sequences through the pipeline.
pub fn generate_batch(
    model: &ToyModel,
    prompts: &[Vec<usize>],
    max_new: usize,
    plan: Option<&PipelinePlan>,
) -> Result<Vec<Vec<usize>>> {
    let stop = encode_text(ANSWER_END)[0];
    let Some(plan) = plan else {
        return prompts
            .iter()
            .map(|p| model.generate(p, max_new, Some(stop)))
            .collect();
    };
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    let mut outs: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let windows: Vec<Vec<usize>> = active
            .iter()
            .map(|&i| seqs[i][seqs[i].len().saturating_sub(model.arch.max_seq)..].to_vec())
            .collect();
        let step_plan = PipelinePlan {
            stages: plan.stages.clone(),
            micro_batches: plan.micro_batches.min(windows.len()),
        };
        let (logits, _) = parallel::pipeline_forward(model, &step_plan, &windows)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, l) in active.iter().zip(&logits) {
            let next = model::argmax(l.row(l.rows() - 1));
            outs[i].push(next);
            if next != stop {
                seqs[i].push(next);
                still.push(i);
            }
        }
        active = still;
    }
    Ok(outs)
}

fn strip_stop(mut tokens: Vec<usize>) -> String {
    let stop = encode_text(ANSWER_END)[0];
    if tokens.last() == Some(&stop) {
        tokens.pop();
    }
    decode_tokens(&tokens)
}

/// Greedy-decodes an answer for every record and scores it.
pub fn run_eval(
    model: &ToyModel,
    records: &[TaskRecord],
    opts: &EvalOptions,
) -> Result<EvalResult> {
    let prompts: Vec<Vec<usize>> = (0..records.len())
        .map(|i| {
            let shot = if opts.one_shot {
                one_shot_example(records, i)
            } else {
                None
            };
            encode_text(&assemble_prompt(&records[i], shot))
        })
        .collect();

    let mut predictions = Vec::with_capacity(records.len());
    let mut latency = Vec::with_capacity(records.len());
    let mut errors = Vec::new();
    if let Some(plan) = &opts.pipeline {
        let start = Instant::now();
        let outs = generate_batch(model, &prompts, opts.max_new_tokens, Some(plan))?;
        let each = start.elapsed().as_secs_f64() / records.len().max(1) as f64;
        for o in outs {
            predictions.push(strip_stop(o));
            latency.push(each);
        }
    } else {
        for (i, p) in prompts.iter().enumerate() {
            let start = Instant::now();
            match generate_batch(model, std::slice::from_ref(p), opts.max_new_tokens, None) {
                Ok(mut o) => predictions.push(strip_stop(o.pop().expect("one output"))),
                Err(e) => {
                    errors.push((i, e.to_string()));
                    predictions.push(String::new());
                }
            }
            latency.push(start.elapsed().as_secs_f64());
        }
    }

    let golds: Vec<String> = records.iter().map(|r| r.output.clone()).collect();
    let acc = accuracy(&predictions, &golds)?;
    let classes = opts.classes.clone().or_else(|| infer_classes(&golds));
    let (weighted, per_class) = match classes {
        Some(c) => {
            let r = weighted_f1(&predictions, &golds, &c)?;
            (Some(r.weighted_f1), r.per_class)
        }
        None => (None, BTreeMap::new()),
    };
    let mean_latency = if latency.is_empty() {
        0.0
    } else {
        latency.iter().sum::<f64>() / latency.len() as f64
    };
    Ok(EvalResult {
        n: records.len(),
        accuracy: acc,
        weighted_f1: weighted,
        per_class,
        predictions,
        latency_seconds: latency,
        mean_latency_seconds: mean_latency,
        errors,
    })
}

/// Reads a run's `config.json` and rebuilds its model with the saved adapter.
pub fn load_run(dir: &Path) -> Result<(RunConfig, ToyModel)> {
    let cfg_path = dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
    let model = model::load_checkpoint(dir.join("model.flck"))?;
    Ok((config, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(input: &str, output: &str) -> TaskRecord {
        TaskRecord {
            input: input.into(),
            output: output.into(),
            task_id: "t".into(),
            context: None,
        }
    }

    #[test]
    fn prompt_template() {
        let r = rec("abc", "buy");
        assert_eq!(assemble_prompt(&r, None), "Q: abc\nA: ");
        let shot = rec("x+y", "sell");
        assert_eq!(
            assemble_prompt(&r, Some(&shot)),
            "Q: x+y\nA: sell\n\nQ: abc\nA: "
        );
        let mut c = r.clone();
        c.context = Some("ctx".into());
        assert_eq!(assemble_prompt(&c, None), "ctx\nQ: abc\nA: ");
    }

    #[test]
    fn example_fits_window() {
        let r = rec(&"z".repeat(200), "hold");
        let ex = training_example(&r, 64, true).unwrap();
        assert_eq!(ex.tokens.len(), 64);
        assert_eq!(ex.targets.iter().filter(|t| t.is_some()).count(), 5);
        assert_eq!(ex.targets.last().unwrap(), &Some(b'\n' as usize));
    }

    #[test]
    fn batch_folding() {
        assert_eq!(batches(10, 4, 1).unwrap(), vec![0..4, 4..8, 8..10]);
        assert_eq!(batches(9, 4, 2).unwrap(), vec![0..4, 4..9]);
        assert!(batches(1, 4, 2).is_err());
    }

    #[test]
    fn class_inference() {
        let g: Vec<String> = ["a", "b", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            infer_classes(&g),
            Some(vec!["a".to_string(), "b".to_string()])
        );
        let g: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(infer_classes(&g), None);
    }
}
