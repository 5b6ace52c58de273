use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use finlora::harness::{self, EvalOptions, RunConfig, TaskRecord};
use finlora::model::{decode_tokens, encode_text, ArchConfig, ToyModel};
use finlora::parallel::plan_pipeline;
use finlora::planner;

#[derive(Parser)]
#[command(
    name = "finlora",
    version,
    about = "QLoRA finetuning on a toy decoder, plus a memory planner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trainable parameter counts and weight storage for a preset.
    Plan(Common),
    /// Finetune adapters and write a run directory.
    Train(Common),
    /// Score a run (or the untrained base with --base) on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory to load; defaults to --out.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Evaluate the freshly built model instead of a trained run.
        #[arg(long)]
        base: bool,
    },
    /// Greedy answers for prompts given with --prompt or on stdin.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        prompt: Vec<String>,
    },
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Args)]
struct Common {
    /// JSON run config; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset path; repeat for multi-task finetuning.
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long)]
    eval_data: Vec<PathBuf>,
    #[arg(long)]
    one_shot: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    pipeline_stages: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { c.$f = v.clone(); })*};
        }
        set!(
            arch,
            rank,
            bits,
            seed,
            workers,
            pipeline_stages,
            out,
            lr,
            epochs,
            batch_size,
            max_new_tokens
        );
        if !self.data.is_empty() {
            c.data = self.data.clone();
        }
        if !self.eval_data.is_empty() {
            c.eval_data = self.eval_data.clone();
        }
        if self.one_shot {
            c.one_shot = true;
        }
        Ok(c)
    }
}

fn plan(common: &Common) -> Result<()> {
    let c = common.resolve()?;
    let arch = ArchConfig::preset(&c.arch)?;
    let report = planner::plan(&arch, c.rank, c.bits)?;
    print!("{}", report.to_text());
    let json = serde_json::to_string(&report)?;
    println!("{json}");
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(
            out.join("plan.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let c = common.resolve()?;
    let art = harness::run_finetune(&c)?;
    for e in &art.epochs {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "epoch {:>3}  loss {:.4}  acc {}  wf1 {}  worker-h {:.2e}  bits {}",
            e.epoch,
            e.loss,
            opt(e.accuracy),
            opt(e.weighted_f1),
            e.worker_hours,
            e.bits_transmitted
        );
    }
    println!("adapter    {}", art.adapter_path.display());
    println!("checkpoint {}", art.checkpoint_path.display());
    println!("metrics    {}", art.metrics_path.display());
    Ok(())
}

fn load_model(c: &RunConfig, run: Option<&Path>, base: bool) -> Result<(RunConfig, ToyModel)> {
    if base {
        return Ok((c.clone(), c.build_model()?));
    }
    let dir = run.unwrap_or(&c.out);
    harness::load_run(dir).with_context(|| format!("loading run {}", dir.display()))
}

fn eval_options(c: &RunConfig, model: &ToyModel) -> Result<EvalOptions> {
    let mut opts = EvalOptions::from_config(c);
    if c.pipeline_stages > 1 {
        opts.pipeline = Some(plan_pipeline(
            model.layers.len(),
            c.pipeline_stages,
            c.micro_batches,
        )?);
    }
    Ok(opts)
}

fn eval(common: &Common, run: Option<&Path>, base: bool) -> Result<()> {
    let c = common.resolve()?;
    let (saved, model) = load_model(&c, run, base)?;
    let paths = if !common.data.is_empty() {
        common.data.clone()
    } else if !c.eval_data.is_empty() {
        c.eval_data.clone()
    } else {
        saved.eval_data.clone()
    };
    if paths.is_empty() {
        bail!("no evaluation data (--data or eval_data in the config)");
    }
    let mut records = Vec::new();
    for p in &paths {
        let mut r = harness::load_jsonl(p)?;
        harness::apply_label_map(&mut r, &c.label_map);
        records.extend(r);
    }
    let result = harness::run_eval(&model, &records, &eval_options(&c, &model)?)?;
    println!("examples      {}", result.n);
    println!("accuracy      {:.4}", result.accuracy);
    match result.weighted_f1 {
        Some(f) => println!("weighted F1   {f:.4}"),
        None => println!("weighted F1   - (answers are not class labels)"),
    }
    println!("mean latency  {:.4} s", result.mean_latency_seconds);
    if !result.errors.is_empty() {
        println!("errors        {}", result.errors.len());
    }
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(
            out.join("eval.json"),
            serde_json::to_string_pretty(&result)?,
        )?;
    }
    Ok(())
}

fn infer(common: &Common, run: Option<&Path>, prompts: &[String]) -> Result<()> {
    let c = common.resolve()?;
    let (_, model) = load_model(&c, run, false)?;
    let inputs: Vec<String> = if prompts.is_empty() {
        io::stdin()
            .lock()
            .lines()
            .collect::<io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|l| !l.trim().is_empty())
            .collect()
    } else {
        prompts.to_vec()
    };
    let opts = eval_options(&c, &model)?;
    let encoded: Vec<Vec<usize>> = inputs
        .iter()
        .map(|input| {
            let rec = TaskRecord {
                input: input.clone(),
                output: String::new(),
                task_id: String::new(),
                context: None,
            };
            encode_text(&harness::assemble_prompt(&rec, None))
        })
        .collect();
    let outs = harness::generate_batch(
        &model,
        &encoded,
        opts.max_new_tokens,
        opts.pipeline.as_ref(),
    )?;
    for out in outs {
        println!(
            "{}",
            decode_tokens(&out).trim_end_matches(harness::ANSWER_END)
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan(c) => plan(c),
        Command::Train(c) => train(c),
        Command::Eval { common, run, base } => eval(common, run.as_deref(), *base),
        Command::Infer {
            common,
            run,
            prompt,
        } => infer(common, run.as_deref(), prompt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
