//! Command-line front end. All artifacts live under one output root:
//!
//! ```text
//! <out>/data/                  tuning/evaluation dataset
//! <out>/data_pretrain/         pre-training dataset
//! <out>/backbone.ck            pre-trained backbone
//! <out>/tune/seed_<s>/         model.ck, steps.jsonl, run_record.json
//! <out>/reports/               <protocol>.json / .csv
//! <out>/ablate/<axis>/         cells/, table.csv, table.json, summary.csv
//! ```

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{default_out_root, ExperimentConfig};
use crate::data::{generate_dataset, load_dataset, make_split, save_dataset_with, sha256_hex, Dataset};
use crate::encoders::Backbone;
use crate::error::{Error, Result};
use crate::eval::{ablation_grid, ablation_sweep, evaluate, AblationAxis, Protocol, SeedSummary, SweepContext};
use crate::train::{pretrain, TuneState};
use crate::verify::{format_table, run_suite};

#[derive(Debug, Parser)]
#[command(name = "stylepro", version, about = "Style-guided prompt tuning on a miniature dual encoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path override applied after the config file, e.g. tune.epochs=5. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root [default: $STYLEPRO_OUT, else ./runs]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print per-step progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain datasets.
    GenData {
        /// Seed of the tuning/evaluation dataset [default: 200]
        #[arg(long)]
        seed: Option<u64>,
        /// Samples per (domain, class) cell [default: 24]
        #[arg(long)]
        samples_per_cell: Option<usize>,
    },
    /// Contrastively pre-train the backbone on the source domains.
    Pretrain {
        /// Epochs [default: 30]
        #[arg(long)]
        epochs: Option<usize>,
        /// Adam learning rate [default: 0.001]
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Seed of the backbone initialization and batch order [default: 0]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tune prompts and style bases on the frozen backbone.
    Tune(TuneArgs),
    /// Evaluate tuned checkpoints for every configured seed.
    Eval {
        /// base_to_novel or domain_generalization [default: domain_generalization]
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Run an ablation sweep (train + evaluate per cell and seed).
    Ablate {
        /// loss-terms, style-layer, n-bases or augmentation [default: loss-terms]
        #[arg(long)]
        axis: Option<String>,
    },
    /// Print the learned style bases of a tuned checkpoint as CSV.
    InspectBank {
        /// Which tuned seed to inspect [default: 0]
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Run the oracle, gradient and invariant suite and print a pass/fail table.
    Verify,
}

#[derive(Debug, Args)]
struct TuneArgs {
    /// Tune only this seed [default: every seed in eval.seeds, 0-4]
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs [default: 25]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 4]
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD learning rate [default: 0.0025]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Image-embedding alignment weight [default: 15]
    #[arg(long)]
    lambda_f: Option<f64>,
    /// Text-embedding alignment weight [default: 25]
    #[arg(long)]
    lambda_g: Option<f64>,
    /// Style-diversity weight [default: 0.005]
    #[arg(long)]
    lambda1: Option<f64>,
    /// Content-consistency weight [default: 0.2]
    #[arg(long)]
    lambda2: Option<f64>,
    /// Number of style bases [default: 12]
    #[arg(long)]
    n_bases: Option<usize>,
    /// Vision layer whose output is style-shifted [default: 2]
    #[arg(long)]
    style_layer: Option<usize>,
    /// Prompt depth; clipped to the layer count [default: 3]
    #[arg(long)]
    prompt_depth: Option<usize>,
    /// Continue from the seed's saved checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop (and checkpoint) once this many total steps have run.
    #[arg(long, value_name = "STEPS")]
    stop_after: Option<usize>,
}

impl TuneArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut add = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{key}={v}"));
            }
        };
        add("tune.epochs", self.epochs.map(|v| v.to_string()));
        add("tune.batch_size", self.batch_size.map(|v| v.to_string()));
        add("tune.learning_rate", self.learning_rate.map(float));
        add("tune.momentum", self.momentum.map(float));
        add("tune.weights.lambda_f", self.lambda_f.map(float));
        add("tune.weights.lambda_g", self.lambda_g.map(float));
        add("tune.weights.lambda1", self.lambda1.map(float));
        add("tune.weights.lambda2", self.lambda2.map(float));
        add("tune.n_bases", self.n_bases.map(|v| v.to_string()));
        add("tune.style_layer", self.style_layer.map(|v| v.to_string()));
        add("tune.prompt_depth", self.prompt_depth.map(|v| v.to_string()));
        o
    }
}

/// TOML float literal (always with a decimal point or exponent).
fn float(v: f64) -> String {
    format!("{v:?}")
}

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
    verbose: u8,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }
    fn pretrain_data_dir(&self) -> PathBuf {
        self.out.join("data_pretrain")
    }
    fn backbone_path(&self) -> PathBuf {
        self.out.join("backbone.ck")
    }
    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join("tune").join(format!("seed_{seed}"))
    }

    fn provenance(&self, seed: u64) -> serde_json::Value {
        json!({ "config": self.config.to_json(), "seed": seed })
    }

    fn load_data(&self) -> Result<Dataset> {
        load_dataset(&self.data_dir()).map_err(|e| match e {
            Error::MissingPrerequisite(m) => Error::MissingPrerequisite(format!("{m}; run `stylepro gen-data` first")),
            other => other,
        })
    }

    fn load_backbone(&self) -> Result<Backbone> {
        let path = self.backbone_path();
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "backbone checkpoint {} not found; run `stylepro pretrain` first",
                path.display()
            )));
        }
        let backbone = Checkpoint::load(&path)?.backbone()?;
        if backbone.config != self.config.encoder {
            return Err(Error::Compatibility(format!(
                "backbone {} was built with a different encoder config",
                path.display()
            )));
        }
        Ok(backbone)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let spec = ctx.config.dataset_spec()?;
    let pre_spec = ctx.config.pretrain_dataset_spec()?;
    for (spec, dir) in [(spec, ctx.data_dir()), (pre_spec, ctx.pretrain_data_dir())] {
        let ds = generate_dataset(&spec)?;
        save_dataset_with(&ds, &dir, ctx.provenance(spec.seed))?;
        println!("wrote {} samples to {} (seed {})", ds.samples.len(), dir.display(), spec.seed);
    }
    Ok(())
}

fn run_pretrain(ctx: &Ctx) -> Result<()> {
    let dir = ctx.pretrain_data_dir();
    let ds = load_dataset(&dir).map_err(|e| match e {
        Error::MissingPrerequisite(m) => Error::MissingPrerequisite(format!("{m}; run `stylepro gen-data` first")),
        other => other,
    })?;
    let manifest_sha = sha256_hex(&fs::read(dir.join(crate::data::MANIFEST_FILE)).map_err(|e| Error::io(&dir, e))?);
    let cfg = &ctx.config.pretrain;
    let verbose = ctx.verbose;
    let outcome = pretrain(cfg, &ctx.config.encoder, &ds, &ctx.config.split.source_domains, |s| {
        if verbose > 0 {
            eprintln!("step {:>5} epoch {:>3} loss {:.4} temperature {:.4}", s.step, s.epoch, s.loss, s.temperature);
        }
    })?;
    let mut provenance = ctx.provenance(cfg.seed);
    provenance["dataset_manifest_sha256"] = json!(manifest_sha);
    Checkpoint::for_backbone(&outcome.backbone, provenance).save(&ctx.backbone_path())?;
    let log: String = outcome
        .steps
        .iter()
        .map(|s| serde_json::to_string(s).expect("plain record") + "\n")
        .collect();
    write_text(&ctx.out.join("pretrain_log.jsonl"), &log)?;
    let last = outcome.steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
    println!(
        "pre-trained {} steps, final loss {last:.4}; backbone {} (checksum {})",
        outcome.steps.len(),
        ctx.backbone_path().display(),
        &outcome.backbone.checksum()[..16]
    );
    Ok(())
}

fn tune_seed(ctx: &Ctx, args: &TuneArgs, seed: u64, backbone: &Backbone, ds: &Dataset) -> Result<()> {
    let split = make_split(ds, &ctx.config.split_spec(seed))?;
    let config = ctx.config.tune_config(seed);
    let dir = ctx.seed_dir(seed);
    let ck_path = dir.join("model.ck");
    let mut state = if args.resume && ck_path.exists() {
        let state = TuneState::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
        if state.config != config {
            return Err(Error::Configuration(format!(
                "{} was produced with a different tune config; rerun without --resume",
                ck_path.display()
            )));
        }
        if state.backbone_checksum != backbone.checksum() {
            return Err(Error::Compatibility(format!(
                "{} was tuned on a different backbone",
                ck_path.display()
            )));
        }
        if state.is_finished() {
            println!(
                "notice: seed {seed} already finished ({} steps); nothing to resume",
                state.total_steps()
            );
            return Ok(());
        }
        println!("resuming seed {seed} at step {}", state.next_step);
        state
    } else {
        if args.resume {
            println!("notice: no checkpoint for seed {seed}; starting from scratch");
        }
        TuneState::new(&config, backbone, ds, &split)?
    };
    let start = Instant::now();
    let verbose = ctx.verbose;
    let taken = state.run(ds, &split, args.stop_after, |r| {
        if verbose > 0 {
            eprintln!(
                "seed {seed} step {:>5} epoch {:>3} total {:.4} ce {:.4}",
                r.step, r.epoch, r.total, r.ce
            );
        }
    })?;
    let mut provenance = ctx.provenance(seed);
    provenance["backbone_checksum"] = json!(state.backbone_checksum);
    state.to_checkpoint(provenance)?.save(&ck_path)?;
    let record = state.run_record(start.elapsed().as_secs_f64());
    write_text(&dir.join("steps.jsonl"), &record.steps_jsonl())?;
    write_text(&dir.join("run_record.json"), &to_json(&record)?)?;
    println!(
        "seed {seed}: ran {taken} steps ({}/{}){}; checkpoint {}",
        state.next_step,
        state.total_steps(),
        if state.is_finished() { "" } else { ", stopped early" },
        ck_path.display()
    );
    Ok(())
}

fn run_tune(ctx: &Ctx, args: &TuneArgs) -> Result<()> {
    let backbone = ctx.load_backbone()?;
    let ds = ctx.load_data()?;
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => ctx.config.eval.seeds.clone(),
    };
    for seed in seeds {
        tune_seed(ctx, args, seed, &backbone, &ds)?;
    }
    Ok(())
}

fn load_tuned(ctx: &Ctx, seed: u64) -> Result<Checkpoint> {
    let path = ctx.seed_dir(seed).join("model.ck");
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "tuned checkpoint {} not found; run `stylepro tune` first",
            path.display()
        )));
    }
    Checkpoint::load(&path)
}

fn run_eval(ctx: &Ctx) -> Result<()> {
    let ds = ctx.load_data()?;
    let protocol = ctx.config.eval.protocol;
    let mut reports = Vec::new();
    for &seed in &ctx.config.eval.seeds {
        let ck = load_tuned(ctx, seed)?;
        let state = TuneState::from_checkpoint(&ck)?;
        if !state.is_finished() {
            return Err(Error::MissingPrerequisite(format!(
                "seed {seed} stopped at step {} of {}; finish it with `stylepro tune --resume`",
                state.next_step,
                state.total_steps()
            )));
        }
        let split = make_split(&ds, &ctx.config.split_spec(seed))?;
        let provenance = json!({ "seed": seed, "tuned_with": ck.header.provenance });
        reports.push(evaluate(protocol, &state.model, &ds, &split, provenance)?);
    }
    let summary = SeedSummary::new(protocol, ctx.config.eval.seeds.clone(), reports, ctx.provenance(ctx.config.eval.seeds[0]))?;
    let dir = ctx.out.join("reports");
    summary.write(&dir, &protocol.to_string())?;
    for (k, m) in &summary.metrics {
        println!("{k:<16} {:>7.2} ± {:.2}  (n={})", m.mean, m.std, m.n);
    }
    println!("report: {}", dir.join(format!("{protocol}.json")).display());
    Ok(())
}

fn run_ablate(ctx: &Ctx) -> Result<()> {
    let backbone = ctx.load_backbone()?;
    let ds = ctx.load_data()?;
    let axis = ctx.config.ablate.axis;
    let cells = ablation_grid(axis, &ctx.config.tune, ctx.config.encoder.layers);
    let sweep = SweepContext {
        backbone: &backbone,
        dataset: &ds,
        split: ctx.config.split_spec(0),
    };
    let dir = ctx.out.join("ablate").join(axis.to_string());
    let mut table = ablation_sweep(axis, &cells, &ctx.config.ablate.seeds, &sweep, Some(&dir), |row| {
        let show = |k: &str| row.metrics.get(k).map_or("-".to_string(), |v| format!("{v:.2}"));
        println!(
            "{:<24} seed {:>2}  base {:>6} novel {:>6} hm {:>6} target {:>6}",
            row.cell,
            row.seed,
            show("base"),
            show("novel"),
            show("hm"),
            show("target")
        );
    })?;
    table.provenance = ctx.provenance(ctx.config.ablate.seeds[0]);
    write_text(&dir.join("table.csv"), &table.to_csv())?;
    write_text(&dir.join("table.json"), &to_json(&table)?)?;
    let mut summary = String::from("cell,metric,mean,std,n\n");
    for (cell, metrics) in table.summary()? {
        for (k, m) in metrics {
            summary.push_str(&format!("{cell},{k},{},{},{}\n", m.mean, m.std, m.n));
        }
    }
    write_text(&dir.join("summary.csv"), &summary)?;
    println!("table: {}", dir.join("table.csv").display());
    Ok(())
}

fn inspect_bank(ctx: &Ctx, seed: u64, output: Option<&Path>) -> Result<()> {
    let model = load_tuned(ctx, seed)?.model()?;
    let csv = model.bank.to_csv()?;
    match output {
        Some(p) => write_text(p, &csv),
        None => {
            std::io::stdout()
                .write_all(csv.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// Returns whether every check passed.
fn run_verify() -> bool {
    let checks = run_suite(|c| {
        eprint!("{}", format_table(std::slice::from_ref(c)));
    });
    println!("{}", format_table(&checks));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        true
    } else {
        println!("{} of {} checks failed: {}", failed.len(), checks.len(), failed.join("; "));
        false
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let mut overrides = cli.common.overrides.clone();
    match &cli.command {
        Command::GenData { seed, samples_per_cell } => {
            if let Some(s) = seed {
                overrides.push(format!("data.seed={s}"));
            }
            if let Some(n) = samples_per_cell {
                overrides.push(format!("data.samples_per_cell={n}"));
            }
        }
        Command::Pretrain { epochs, learning_rate, seed } => {
            if let Some(e) = epochs {
                overrides.push(format!("pretrain.epochs={e}"));
            }
            if let Some(l) = learning_rate {
                overrides.push(format!("pretrain.learning_rate={}", float(*l)));
            }
            if let Some(s) = seed {
                overrides.push(format!("pretrain.seed={s}"));
            }
        }
        Command::Tune(args) => overrides.extend(args.overrides()),
        Command::Eval { protocol } => {
            if let Some(p) = protocol {
                p.parse::<Protocol>()?;
                overrides.push(format!("eval.protocol={p}"));
            }
        }
        Command::Ablate { axis } => {
            if let Some(a) = axis {
                a.parse::<AblationAxis>()?;
                overrides.push(format!("ablate.axis={a}"));
            }
        }
        Command::InspectBank { .. } | Command::Verify => {}
    }
    if let Command::Verify = cli.command {
        return Ok(if run_verify() { 0 } else { 1 });
    }
    let ctx = Ctx {
        config: ExperimentConfig::load(cli.common.config.as_deref(), &overrides)?,
        out: cli.common.out.clone().unwrap_or_else(default_out_root),
        verbose: cli.common.verbose,
    };
    match &cli.command {
        Command::GenData { .. } => gen_data(&ctx)?,
        Command::Pretrain { .. } => run_pretrain(&ctx)?,
        Command::Tune(args) => run_tune(&ctx, args)?,
        Command::Eval { .. } => run_eval(&ctx)?,
        Command::Ablate { .. } => run_ablate(&ctx)?,
        Command::InspectBank { seed, output } => inspect_bank(&ctx, *seed, output.as_deref())?,
        Command::Verify => unreachable!("handled above"),
    }
    Ok(0)
}

/// Parses `argv`, runs the subcommand and returns the process exit status.
/// Errors print as one `error[<category>]: <message>` line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, ExperimentConfig};
    use crate::train::{PretrainConfig, TuneConfig};
    use clap::CommandFactory;

    /// `[default: X]` from a subcommand flag's help text.
    fn help_default(sub: &str, flag: &str) -> String {
        let cmd = Cli::command();
        let sub = cmd.find_subcommand(sub).unwrap();
        let arg = sub.get_arguments().find(|a| a.get_id() == flag).unwrap();
        let help = arg.get_help().unwrap().to_string();
        let start = help.find("[default: ").unwrap() + "[default: ".len();
        help[start..help.len() - 1].to_string()
    }

    fn num(s: &str) -> f64 {
        s.parse().unwrap()
    }

    #[test]
    fn help_defaults_match_code_defaults() {
        let t = TuneConfig::default();
        let e = ExperimentConfig::default();
        assert_eq!(num(&help_default("tune", "epochs")), t.epochs as f64);
        assert_eq!(num(&help_default("tune", "batch_size")), t.batch_size as f64);
        assert_eq!(num(&help_default("tune", "learning_rate")), t.learning_rate);
        assert_eq!(num(&help_default("tune", "momentum")), t.momentum);
        assert_eq!(num(&help_default("tune", "lambda_f")), t.weights.lambda_f);
        assert_eq!(num(&help_default("tune", "lambda_g")), t.weights.lambda_g);
        assert_eq!(num(&help_default("tune", "lambda1")), t.weights.lambda1);
        assert_eq!(num(&help_default("tune", "lambda2")), t.weights.lambda2);
        assert_eq!(num(&help_default("tune", "n_bases")), t.n_bases as f64);
        assert_eq!(num(&help_default("tune", "style_layer")), t.style_layer as f64);
        assert_eq!(num(&help_default("tune", "prompt_depth")), e.encoder.prompt_depth as f64);
        let p = PretrainConfig::default();
        assert_eq!(num(&help_default("pretrain", "epochs")), p.epochs as f64);
        assert_eq!(num(&help_default("pretrain", "learning_rate")), p.learning_rate);
        assert_eq!(num(&help_default("pretrain", "seed")), p.seed as f64);
        let d = DataConfig::default();
        assert_eq!(num(&help_default("gen-data", "seed")), d.seed as f64);
        assert_eq!(num(&help_default("gen-data", "samples_per_cell")), d.samples_per_cell as f64);
        assert_eq!(help_default("eval", "protocol"), e.eval.protocol.to_string());
        assert_eq!(help_default("ablate", "axis"), e.ablate.axis.to_string());
        assert_eq!(help_default("tune", "seed"), format!("every seed in eval.seeds, 0-{}", e.eval.seeds.len() - 1));
    }

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::try_parse_from(["stylepro", "tune", "--lambda-f", "3", "--n-bases", "4"]).unwrap();
        let Command::Tune(args) = cli.command else { panic!() };
        let cfg = ExperimentConfig::load(None, &args.overrides()).unwrap();
        assert_eq!(cfg.tune.weights.lambda_f, 3.0);
        assert_eq!(cfg.tune.n_bases, 4);
    }
}
