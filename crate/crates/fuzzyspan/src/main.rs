use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{ArgAction, Parser, Subcommand};
use serde_json::json;

use fuzzyspan::corpus::{self, Split};
use fuzzyspan::metrics::records_to_csv;
use fuzzyspan::train::{
    self, grad_check, resolve_config, run_ablation, run_low_resource, run_sweep, steps_to_reach,
    RunConfig, TrainOutcome,
};
use fuzzyspan::Checkpoint;

#[derive(Parser)]
#[command(name = "fuzzyspan", version, about = "Fuzzy span extraction experiments")]
struct Cli {
    /// TOML config file; keys it omits fall back to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the run seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for commands that train several models.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Config override as a dotted path, e.g. corpus.jitter_prob=0.3.
    /// Repeatable; wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, action = ArgAction::Append)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates the synthetic corpus and writes it as JSONL.
    GenData,
    /// Trains one model; writes metrics.csv, summary.json, checkpoint.json,
    /// and attention_dump.json.
    Train,
    /// Evaluates a checkpoint on the test split of the configured corpus.
    Eval {
        /// Defaults to <out>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains the four feature arms (baseline, fsl, fsa, full) on one
    /// shared corpus with seeds {seed, seed+1, seed+2}.
    Ablate,
    /// One-factor-at-a-time sweep over l_span, d, the attenuation variant,
    /// and the side mode; the variant axis runs three seeds.
    Sweep,
    /// Trains baseline and full arms on nested 1/5/25/100% train subsets.
    LowResource,
    /// Compares analytic gradients with central differences.
    GradCheck,
    /// Writes the span attention matrices of a checkpoint on one example.
    DumpAttention {
        /// Defaults to <out>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .context("rayon pool")?;

    let file_body = match &cli.config {
        Some(path) => {
            Some(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
        }
        None => None,
    };
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    let (cfg, rendered) = resolve_config(file_body.as_deref(), &sets)?;
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;
    fs::write(cli.out.join("config.resolved.toml"), &rendered).context("writing resolved config")?;

    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, &cli.out),
        Command::Train => cmd_train(&cfg, &cli.out),
        Command::Eval { checkpoint } => cmd_eval(&cfg, &cli.out, checkpoint),
        Command::Ablate => cmd_ablate(&cfg, &cli.out),
        Command::Sweep => cmd_sweep(&cfg, &cli.out),
        Command::LowResource => cmd_low_resource(&cfg, &cli.out),
        Command::GradCheck => cmd_grad_check(&cfg, &cli.out),
        Command::DumpAttention { checkpoint } => cmd_dump_attention(&cfg, &cli.out, checkpoint),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    fs::write(path, format!("{:#}\n", value)).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let examples = corpus::generate(&cfg.corpus)?;
    let path = out.join("corpus.jsonl");
    corpus::write_jsonl(&path, &examples)?;
    let count = |s: Split| examples.iter().filter(|e| e.split == s).count();
    println!(
        "wrote {} examples ({} train / {} dev / {} test) to {}",
        examples.len(),
        count(Split::Train),
        count(Split::Dev),
        count(Split::Test),
        path.display()
    );
    Ok(())
}

fn summary_value(outcome: &TrainOutcome) -> serde_json::Value {
    json!({
        "steps": outcome.steps,
        "best_step": outcome.best_step,
        "best_dev_f1": outcome.best_dev_f1,
        "test": {
            "precision": outcome.test_precision,
            "recall": outcome.test_recall,
            "f1": outcome.test_f1,
        },
        "head_l": outcome.head_l,
    })
}

/// Attention matrices of the dev-best model on the first dev example.
fn dump_attention_for(
    model: &fuzzyspan::SpanModel,
    cfg: &RunConfig,
    path: &Path,
) -> anyhow::Result<()> {
    let Some(fsa) = model.fsa.as_ref() else {
        bail!("model has no span attention layer to dump");
    };
    let examples = corpus::generate(&cfg.corpus)?;
    let example = examples
        .iter()
        .find(|e| e.split == Split::Dev)
        .or(examples.first())
        .context("corpus is empty")?;
    let encoded = model.encode(&example.tokens, 0)?;
    let dump = fsa.attention_dump(&encoded)?;
    let value = serde_json::to_value(&dump)?;
    write_json(path, &json!({ "tokens": example.tokens, "type": 0, "attention": value }))
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let outcome = train::train(cfg)?;
    fs::write(out.join("metrics.csv"), records_to_csv(&outcome.records)?)?;
    outcome.best.save(&out.join("checkpoint.json"))?;
    write_json(&out.join("summary.json"), &summary_value(&outcome))?;
    let best_model = outcome.best.restore()?;
    if best_model.fsa.is_some() {
        dump_attention_for(&best_model, cfg, &out.join("attention_dump.json"))?;
    }
    println!(
        "trained {} steps; best dev F1 {:.4} at step {}; test F1 {:.4}",
        outcome.steps, outcome.best_dev_f1, outcome.best_step, outcome.test_f1
    );
    if !outcome.head_l.is_empty() {
        let spans: Vec<String> = outcome.head_l.iter().map(|l| format!("{l:.2}")).collect();
        println!("final head spans l = [{}]", spans.join(", "));
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<PathBuf>) -> anyhow::Result<()> {
    let path = checkpoint.unwrap_or_else(|| out.join("checkpoint.json"));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let model = ck.restore()?;
    let examples = corpus::generate(&cfg.corpus)?;
    let items = train::items_for_split(
        &examples,
        Split::Test,
        cfg.corpus.type_count,
        &cfg.fuzzy,
    )?;
    let (p, r, f1) = train::evaluate(
        &model,
        &items,
        cfg.decode_threshold,
        ck.fsa_template.l_span,
    )?;
    write_json(
        &out.join("eval.json"),
        &json!({ "precision": p, "recall": r, "f1": f1 }),
    )?;
    println!("test precision {p:.4} recall {r:.4} F1 {f1:.4}");
    Ok(())
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

fn write_run_metrics(out: &Path, label: &str, outcome: &TrainOutcome) -> anyhow::Result<()> {
    let dir = out.join("runs").join(slug(label));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.csv"), records_to_csv(&outcome.records)?)?;
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
    let runs = run_ablation(cfg, &seeds)?;
    let mut rows = Vec::new();
    println!("{:<10} {:>6} {:>9} {:>9} {:>14}", "arm", "seed", "dev_f1", "test_f1", "steps_to_0.8");
    for run in &runs {
        let label = format!("{}_seed{}", run.arm, run.seed);
        write_run_metrics(out, &label, &run.outcome)?;
        let reach = steps_to_reach(&run.outcome.records, 0.8);
        println!(
            "{:<10} {:>6} {:>9.4} {:>9.4} {:>14}",
            run.arm.name(),
            run.seed,
            run.outcome.best_dev_f1,
            run.outcome.test_f1,
            reach.map_or("-".into(), |s| s.to_string()),
        );
        rows.push(json!({
            "arm": run.arm.name(),
            "seed": run.seed,
            "best_dev_f1": run.outcome.best_dev_f1,
            "test_f1": run.outcome.test_f1,
            "steps": run.outcome.steps,
            "steps_to_f1_0_8": reach,
            "head_l": run.outcome.head_l,
        }));
    }
    write_json(&out.join("ablation.json"), &json!(rows))
}

fn cmd_sweep(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
    let runs = run_sweep(cfg, &seeds)?;
    let mut rows = Vec::new();
    let mut axis = "";
    for run in &runs {
        if run.axis != axis {
            axis = run.axis;
            println!("axis {axis}:");
        }
        let label = format!("{}_seed{}", run.setting, run.seed);
        write_run_metrics(out, &label, &run.outcome)?;
        println!(
            "  {:<22} seed {:<4} dev F1 {:.4}  test F1 {:.4}",
            run.setting, run.seed, run.outcome.best_dev_f1, run.outcome.test_f1
        );
        rows.push(json!({
            "axis": run.axis,
            "setting": run.setting,
            "seed": run.seed,
            "best_dev_f1": run.outcome.best_dev_f1,
            "test_f1": run.outcome.test_f1,
            "head_l": run.outcome.head_l,
        }));
    }
    write_json(&out.join("sweep.json"), &json!(rows))
}

fn cmd_low_resource(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let fractions = [0.01, 0.05, 0.25, 1.0];
    let runs = run_low_resource(cfg, &fractions, &[cfg.seed])?;
    let mut rows = Vec::new();
    println!("{:>9} {:<10} {:>6} {:>9}", "fraction", "arm", "seed", "test_f1");
    for run in &runs {
        let label = format!("frac{}_{}_seed{}", run.fraction, run.arm, run.seed);
        write_run_metrics(out, &label, &run.outcome)?;
        println!(
            "{:>9} {:<10} {:>6} {:>9.4}",
            run.fraction,
            run.arm.name(),
            run.seed,
            run.outcome.test_f1
        );
        rows.push(json!({
            "fraction": run.fraction,
            "arm": run.arm.name(),
            "seed": run.seed,
            "test_f1": run.outcome.test_f1,
        }));
    }
    write_json(&out.join("low_resource.json"), &json!(rows))
}

fn cmd_grad_check(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let reports = grad_check(cfg, 4, 1e-4)?;
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    println!("{:<24} {:>8} {:>12}", "group", "checked", "max_rel_err");
    for r in &reports {
        println!("{:<24} {:>8} {:>12.3e}", r.name, r.checked, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
        rows.push(json!({
            "group": r.name,
            "checked": r.checked,
            "max_rel_err": r.max_rel_err,
        }));
    }
    write_json(&out.join("grad_check.json"), &json!(rows))?;
    if worst > 1e-3 {
        bail!("worst relative error {worst:.3e} exceeds 1e-3");
    }
    println!("all groups within 1e-3");
    Ok(())
}

fn cmd_dump_attention(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<PathBuf>,
) -> anyhow::Result<()> {
    let path = checkpoint.unwrap_or_else(|| out.join("checkpoint.json"));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let model = ck.restore()?;
    let dest = out.join("attention_dump.json");
    dump_attention_for(&model, cfg, &dest)?;
    println!("wrote {}", dest.display());
    Ok(())
}
