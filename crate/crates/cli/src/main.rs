use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use molclip::data::{generate_synthetic, load_manifest, write_dataset, SyntheticSpec};
use molclip::harness::{
    evaluate, gradient_suite, run_stage, run_strategy, sweep_center_weight, sweep_csv, Checkpoint, PreparedData,
    StrategyId, TrainConfig, METRICS_HEADER, SUITE_EPS, SUITE_TOLERANCE,
};
use molclip::smiles::{canonicalize_str, tokenize};

#[derive(Parser)]
#[command(name = "molclip", version, about = "Video-molecule alignment with metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest.csv + frames/).
    GenData {
        /// key=value spec file; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write checkpoint, metric history and loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split it was trained with.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the CMC curve.
        #[arg(long, default_value = "cmc.csv")]
        cmc_out: PathBuf,
    },
    /// Run a drug-recognition pretraining strategy.
    Strategy {
        #[arg(long)]
        id: StrategyId,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for per-stage outputs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline once per center-loss weight.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated weights.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        data: PathBuf,
        /// CSV file for the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and both encoders.
    Gradcheck,
    /// Print the tokens of each SMILES (arguments or stdin lines).
    Tokenize {
        smiles: Vec<String>,
    },
    /// Print the canonical form of each SMILES (arguments or stdin lines).
    Canonicalize {
        /// Report invalid entries on stderr and continue.
        #[arg(long)]
        skip_invalid: bool,
        smiles: Vec<String>,
    },
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn inputs(args: Vec<String>) -> Result<Vec<String>> {
    if !args.is_empty() {
        return Ok(args);
    }
    let mut lines = Vec::new();
    for line in io::stdin().lock().lines() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() {
            lines.push(t.to_string());
        }
    }
    Ok(lines)
}

fn parse_weights(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|w| w.trim().parse::<f64>().with_context(|| format!("bad weight {w:?}")))
        .collect()
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::GenData { spec, out: dir } => {
            let spec = match spec {
                None => SyntheticSpec::default(),
                Some(p) => SyntheticSpec::parse(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
            };
            let samples = generate_synthetic(&spec)?;
            write_dataset(&dir, &samples)?;
            writeln!(out, "wrote {} samples to {}", samples.len(), dir.display())?;
        }
        Command::Train { config, data, init, out: dir } => {
            let cfg = read_config(Some(&config))?;
            let samples = load_manifest(&data)?;
            let prepared = PreparedData::from_config(&samples, &cfg)?;
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let stage = run_stage(&cfg, &prepared, init.as_ref())?;
            stage.write_to(&dir)?;
            writeln!(out, "{METRICS_HEADER}")?;
            writeln!(out, "{}", stage.final_metrics().csv_line())?;
        }
        Command::Eval { ckpt, data, cmc_out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let samples = load_manifest(&data)?;
            let prepared = PreparedData::from_config(&samples, &ck.config)?;
            let r = evaluate(&ck.model, &prepared, ck.config.stage.label_kind(), &ck.config)?;
            writeln!(out, "accuracy,rank1,rank5,rank10,map")?;
            writeln!(out, "{},{},{},{},{}", r.accuracy, r.rank1, r.rank5, r.rank10, r.map)?;
            let mut cmc = String::from("rank,cmc\n");
            for (k, v) in r.cmc.iter().enumerate() {
                cmc.push_str(&format!("{},{v}\n", k + 1));
            }
            fs::write(&cmc_out, cmc).with_context(|| format!("writing {}", cmc_out.display()))?;
        }
        Command::Strategy { id, data, config, out: dir } => {
            let cfg = read_config(config.as_deref())?;
            let samples = load_manifest(&data)?;
            let prepared = PreparedData::from_config(&samples, &cfg)?;
            let report = run_strategy(id, &cfg, &prepared)?;
            if let Some(dir) = dir {
                for (i, stage) in report.stages.iter().enumerate() {
                    stage.write_to(&dir.join(format!("stage{}", i + 1)))?;
                }
            }
            let m = report.drug_metrics();
            writeln!(out, "strategy,rank1,map,accuracy")?;
            writeln!(out, "{id},{},{},{}", m.rank1, m.map, m.accuracy)?;
        }
        Command::Sweep { config, weights, data, out: file } => {
            let cfg = read_config(Some(&config))?;
            let weights = match weights {
                Some(w) => parse_weights(&w)?,
                None => molclip::harness::DEFAULT_SWEEP_WEIGHTS.to_vec(),
            };
            let samples = load_manifest(&data)?;
            let prepared = PreparedData::from_config(&samples, &cfg)?;
            let rows = sweep_center_weight(&cfg, &weights, &prepared)?;
            let table = sweep_csv(&rows);
            write!(out, "{table}")?;
            if let Some(f) = file {
                fs::write(&f, &table).with_context(|| format!("writing {}", f.display()))?;
            }
        }
        Command::Gradcheck => {
            let cases = gradient_suite()?;
            let mut ok = true;
            for c in &cases {
                let status = if c.passed() { "PASS" } else { "FAIL" };
                ok &= c.passed();
                writeln!(out, "{status} {:<32} max_rel_error={:.3e}", c.name, c.max_rel_error)?;
            }
            writeln!(out, "eps={SUITE_EPS:e} tolerance={SUITE_TOLERANCE:e}")?;
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Tokenize { smiles } => {
            for s in inputs(smiles)? {
                let toks = tokenize(&s).with_context(|| format!("tokenizing {s:?}"))?;
                let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
                writeln!(out, "{}", texts.join(" "))?;
            }
        }
        Command::Canonicalize { skip_invalid, smiles } => {
            let mut failed = 0usize;
            for s in inputs(smiles)? {
                match canonicalize_str(&s) {
                    Ok(c) => writeln!(out, "{c}")?,
                    Err(e) if skip_invalid => {
                        failed += 1;
                        eprintln!("skipping {s:?}: {e}");
                    }
                    Err(e) => bail!("{s:?}: {e}"),
                }
            }
            if failed > 0 {
                eprintln!("{failed} invalid entries skipped");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
