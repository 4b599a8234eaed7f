use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sgst::checkpoint::{load_checkpoint, save_checkpoint};
use sgst::data::{
    encode_graph, generate_synthetic, read_dataset, write_dataset, Example, SyntheticSpec, Vocabs,
};
use sgst::graph::{parse_scene_graph, validate_dag, DagReport, SceneGraph};
use sgst::inference::{beam_search, greedy_decode, Hypothesis};
use sgst::metrics::{bleu4, cider, length_stats};
use sgst::model::{AlphaMode, Model, ModelConfig};
use sgst::train::{train, TrainConfig};
use sgst::vocab::{tokenize, EOS};

/// Sparse graph-to-sequence transformer: synthesize data, train, decode, score.
#[derive(Parser)]
#[command(name = "sgst", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic graph/paragraph dataset as JSON lines.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Decode every graph of a dataset.
    Generate(GenerateArgs),
    /// Score generations against dataset references.
    Eval(EvalArgs),
    /// Summarize a checkpoint or a scene-graph file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of examples.
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with "objects", "attributes" and "predicates" label lists.
    #[arg(long)]
    pools: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics log path; defaults to the checkpoint path plus ".metrics.jsonl".
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Shorthand for `--preset paper`.
    #[arg(long, conflicts_with = "preset")]
    paper_scale: bool,
    /// softmax, fixed:<value> or learned.
    #[arg(long, default_value = "fixed:1.5")]
    alpha: AlphaMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Target tokens per batch.
    #[arg(long)]
    batch_tokens: Option<usize>,
    /// Cap on optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Stop once an epoch's mean loss reaches this value.
    #[arg(long)]
    target_loss: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset whose graphs are decoded (JSON lines).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output generations (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Beam width.
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
    /// Maximum generated tokens, EOS included.
    #[arg(long, default_value_t = 128)]
    max_len: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Generations written by `generate`.
    #[arg(long)]
    generations: PathBuf,
    /// Dataset holding the reference paragraphs.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, required_unless_present = "graph")]
    checkpoint: Option<PathBuf>,
    /// A single scene-graph JSON document.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Generation {
    graph_id: usize,
    tokens: Vec<String>,
    log_prob: f64,
    finished: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("SGST_THREADS") {
        let n: usize = threads
            .parse()
            .with_context(|| format!("SGST_THREADS={threads} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn load_data(path: &Path) -> Result<Vec<sgst::data::Record>> {
    ensure!(path.exists(), "dataset {} does not exist", path.display());
    read_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    if let Some(p) = &a.pools {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        spec = spec.with_pools(&bytes)?;
    }
    let records = generate_synthetic(&spec, a.count)?;
    write_dataset(&a.out, &records)?;
    let vocabs = Vocabs::build(&records);
    println!(
        "{}",
        serde_json::json!({"count": records.len(), "vocab_size": vocabs.tokens.len()})
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let records = load_data(&a.data)?;
    ensure!(!records.is_empty(), "dataset {} is empty", a.data.display());
    let vocabs = Vocabs::build(&records);
    let preset = if a.paper_scale {
        Preset::Paper
    } else {
        a.preset
    };
    let (mut config, mut tc) = match preset {
        Preset::Desk => (
            ModelConfig::desk(vocabs.labels.len(), vocabs.tokens.len()),
            TrainConfig::desk(),
        ),
        Preset::Paper => (
            ModelConfig::paper(vocabs.labels.len(), vocabs.tokens.len()),
            TrainConfig::paper(),
        ),
    };
    config.alpha = a.alpha;
    let longest = records
        .iter()
        .map(|r| tokenize(&r.paragraph).count() + 1)
        .max()
        .unwrap_or(1);
    config.max_tokens = config.max_tokens.max(longest);
    tc.seed = a.seed;
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_tokens = a.batch_tokens.unwrap_or(tc.batch_tokens);
    tc.max_steps = a.max_steps.or(tc.max_steps);
    tc.schedule.peak = a.lr.unwrap_or(tc.schedule.peak);
    tc.schedule.warmup = a.warmup.unwrap_or(tc.schedule.warmup);
    tc.target_loss = a.target_loss.or(tc.target_loss);

    let examples: Vec<Example> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Example::encode(r, &vocabs, config.neighborhood).with_context(|| format!("example {i}"))
        })
        .collect::<Result<_>>()?;
    let mut model = Model::new(config, a.seed)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.checkpoint.clone().into_os_string();
        p.push(".metrics.jsonl");
        p.into()
    });
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let report = train(&mut model, &examples, &tc, |record| {
        serde_json::to_writer(&mut log, record)?;
        log.write_all(b"\n")?;
        Ok(())
    })
    .context("training aborted")?;
    log.flush()?;
    fs::write(&a.checkpoint, save_checkpoint(&model, &vocabs)?)?;
    println!(
        "{}",
        serde_json::json!({
            "steps": report.steps,
            "epochs": report.epochs,
            "final_loss": report.final_loss,
            "checkpoint": a.checkpoint,
            "log": log_path,
        })
    );
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(Model, Vocabs)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(load_checkpoint(&bytes)?)
}

fn generate(a: GenerateArgs) -> Result<()> {
    ensure!(a.beam >= 1, "--beam must be at least 1");
    let (model, vocabs) = read_checkpoint(&a.checkpoint)?;
    let records = load_data(&a.data)?;
    for (i, r) in records.iter().enumerate() {
        let unknown = vocabs.unknown_labels(&r.graph);
        if !unknown.is_empty() {
            log::warn!("graph {i}: labels {unknown:?} not in the checkpoint vocabulary, using UNK");
        }
    }
    let outputs: Vec<Hypothesis> = records
        .par_iter()
        .map(|r| {
            let input = encode_graph(&r.graph, &vocabs, model.config.neighborhood)?;
            if a.greedy {
                greedy_decode(&model, &input, a.max_len)
            } else {
                beam_search(&model, &input, a.beam, a.max_len)
            }
        })
        .collect::<sgst::Result<_>>()?;
    let mut out = BufWriter::new(fs::File::create(&a.out)?);
    for (graph_id, h) in outputs.into_iter().enumerate() {
        let tokens = h
            .tokens
            .iter()
            .filter(|&&t| t != EOS)
            .map(|&t| vocabs.tokens.token(t).to_string())
            .collect();
        serde_json::to_writer(
            &mut out,
            &Generation {
                graph_id,
                tokens,
                log_prob: h.log_prob,
                finished: h.finished,
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let records = load_data(&a.data)?;
    let file = fs::File::open(&a.generations)
        .with_context(|| format!("reading {}", a.generations.display()))?;
    let mut generations: Vec<Generation> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        generations.push(
            serde_json::from_str(&line).with_context(|| format!("generations line {}", i + 1))?,
        );
    }
    let mut seen = vec![false; records.len()];
    for g in &generations {
        if g.graph_id >= records.len() {
            bail!(
                "generation for graph_id {} has no reference ({} references)",
                g.graph_id,
                records.len()
            );
        }
        ensure!(
            !seen[g.graph_id],
            "graph_id {} appears twice in the generations",
            g.graph_id
        );
        seen[g.graph_id] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        bail!("reference {missing} has no generation");
    }
    let candidates: Vec<Vec<String>> = generations.iter().map(|g| g.tokens.clone()).collect();
    let references: Vec<Vec<String>> = generations
        .iter()
        .map(|g| tokenize(&records[g.graph_id].paragraph).collect())
        .collect();
    let ref_sets: Vec<Vec<Vec<String>>> = references.iter().map(|r| vec![r.clone()]).collect();
    let lengths: Vec<usize> = candidates.iter().map(Vec::len).collect();
    let (avg_len, std_len) = length_stats(&lengths);
    println!(
        "{}",
        serde_json::json!({
            "bleu4": bleu4(&candidates, &references)?,
            "cider": cider(&candidates, &ref_sets)?,
            "avg_len": avg_len,
            "std_len": std_len,
        })
    );
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    if let Some(path) = &a.checkpoint {
        let (model, vocabs) = read_checkpoint(path)?;
        let tensors: Vec<serde_json::Value> = model
            .params
            .iter()
            .map(|(name, t)| serde_json::json!({"name": name, "shape": t.shape()}))
            .collect();
        println!(
            "{}",
            serde_json::json!({
                "config": model.config,
                "parameters": model.params.scalar_count(),
                "alphas": model.alphas()?,
                "label_vocab": vocabs.labels.len(),
                "token_vocab": vocabs.tokens.len(),
                "tensors": tensors,
            })
        );
    }
    if let Some(path) = &a.graph {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let raw = parse_scene_graph(&bytes)?;
        let graph = SceneGraph::from_raw(&raw)?;
        let mask = graph.neighborhood_mask(Default::default());
        let vertices: Vec<serde_json::Value> = graph
            .vertices()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let neighbors: Vec<usize> = (0..graph.len()).filter(|&j| mask.get(i, j)).collect();
                serde_json::json!({"rank": i, "kind": v.kind, "label": v.label, "neighbors": neighbors})
            })
            .collect();
        let order = match validate_dag(&graph) {
            DagReport::Acyclic(order) => order,
            DagReport::Cycle(c) => bail!("rewritten graph has a cycle through {c:?}"),
        };
        println!(
            "{}",
            serde_json::json!({"vertices": vertices, "edges": graph.edge_count(), "topological_order": order})
        );
    }
    Ok(())
}
