//! `qe`: generate the synthetic benchmark, train and evaluate question
//! encoders, check gradients and assemble report tables.
//!
//! Every failure prints exactly one line `error[CODE]: message` on stderr
//! and exits nonzero (2 for usage and parse problems, 1 otherwise).

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qe_core::bench::{evaluate, pair_metrics, two_decimals, write_dataset, MetricsRecord, ModelPredictor, ProbeMode, Split};
use qe_core::experiment::{
    emit_report, gradcheck_configs, gradient_check, load_dataset, parse_report_csv, run_experiment,
    ExperimentConfig, ReportFormat,
};
use qe_core::vqa::read_checkpoint;
use qe_core::Error;

/// Overrides the output directory of the config file (explicit `--out-dir` still wins).
const OUT_DIR_ENV: &str = "QE_OUT_DIR";

#[derive(Parser)]
#[command(name = "qe", version, about = "Question-encoder experiments on a synthetic VQA benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/id-test/ood-test dataset and write it as TSV.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Destination file (default: <out-dir>/dataset.tsv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train one (config, seed) cell; writes a checkpoint and appends to rows.csv.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on one split under one probe mode.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, id-test or ood-test.
        #[arg(long, default_value = "id-test")]
        split: String,
        /// full-q or qtype.
        #[arg(long, default_value = "full-q")]
        probe: String,
    },
    /// Finite-difference check of the full model for the configured encoder.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Check every encoder configuration instead of the configured one.
        #[arg(long)]
        all: bool,
        /// Width used for d_w, d_a and d_q during the check.
        #[arg(long, default_value_t = 8)]
        width: usize,
        /// Question length.
        #[arg(long, default_value_t = 6)]
        len: usize,
        /// Fail when the max relative error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Merge row files into a CSV or text table.
    Report {
        /// rows.csv files written by `train`.
        #[arg(required = true)]
        rows: Vec<PathBuf>,
        #[arg(long, default_value = "table")]
        format: String,
        /// Median over seeds per (variant, knobs).
        #[arg(long)]
        aggregate: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the resolved configuration as canonical key=value text.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Configuration sources, applied in order: variant defaults, `--config`
/// file, `QE_OUT_DIR`, the typed flags below, then `--set` pairs.
#[derive(Args)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set encoder.window=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// gru, bigru, transformer or gat.
    #[arg(long)]
    variant: Option<String>,
    /// last or sum (recurrent encoders).
    #[arg(long)]
    aggregation: Option<String>,
    /// learned, none or conv1d (transformer).
    #[arg(long)]
    pos_enc: Option<String>,
    /// copy or split.
    #[arg(long)]
    mha_mode: Option<String>,
    /// concat or sdpa (gat).
    #[arg(long)]
    score_mode: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Convolution window.
    #[arg(long)]
    window: Option<usize>,
    /// Sets d_w, d_a and d_q together.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    id_test_count: Option<usize>,
    #[arg(long)]
    ood_test_count: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Read the dataset from this file instead of generating it.
    #[arg(long)]
    data_file: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Model initialization and batch-order seed.
    #[arg(long)]
    seed: Option<u64>,
    /// model or frequency.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn pairs(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let s = |x: &Option<String>| x.clone();
        let n = |x: Option<usize>| x.map(|v| v.to_string());
        let f = |x: Option<f64>| x.map(|v| v.to_string());
        let p = |x: &Option<PathBuf>| x.as_ref().map(|v| v.display().to_string());
        put("encoder.variant", s(&self.variant));
        put("encoder.aggregation", s(&self.aggregation));
        put("encoder.pos_enc", s(&self.pos_enc));
        put("encoder.mha_mode", s(&self.mha_mode));
        put("encoder.score_mode", s(&self.score_mode));
        put("encoder.layers", n(self.layers));
        put("encoder.heads", n(self.heads));
        put("encoder.window", n(self.window));
        for k in ["encoder.d_w", "encoder.d_a", "encoder.d_q"] {
            put(k, n(self.dims));
        }
        put("prior.rho", f(self.rho));
        put("world.noise_sigma", f(self.noise_sigma));
        put("data.train", n(self.train_count));
        put("data.id_test", n(self.id_test_count));
        put("data.ood_test", n(self.ood_test_count));
        put("data.seed", self.data_seed.map(|v| v.to_string()));
        put("data.file", p(&self.data_file));
        put("train.lr", f(self.lr));
        put("train.batch_size", n(self.batch_size));
        put("train.epochs", n(self.epochs));
        put("train.weight_decay", f(self.weight_decay));
        put("run.seed", self.seed.map(|v| v.to_string()));
        put("run.mode", s(&self.mode));
        put("run.out_dir", p(&self.out_dir));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Resolves the configuration; `out_dir_env` is the value of `QE_OUT_DIR`.
    fn resolve(&self, out_dir_env: Option<String>) -> Result<ExperimentConfig, Failure> {
        let mut text = match &self.config {
            Some(path) => read_text(path)?,
            None => String::new(),
        };
        text.push('\n');
        if let Some(dir) = out_dir_env.filter(|d| !d.is_empty()) {
            text.push_str(&format!("run.out_dir={dir}\n"));
        }
        for (k, v) in self.pairs()? {
            text.push_str(&format!("{k}={v}\n"));
        }
        let cfg = ExperimentConfig::from_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Failure {
    code: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: String) -> Self {
        Self { code: "E_USAGE", message }
    }

    fn exit_code(&self) -> u8 {
        match self.code {
            "E_USAGE" | "E_PARSE" => 2,
            _ => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure {
        code: "E_IO",
        message: format!("{}: {e}", path.display()),
    })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| Failure {
        code: "E_IO",
        message: format!("{}: {e}", path.display()),
    })
}

fn print_record(r: &MetricsRecord) {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    println!("split={}", r.split);
    println!("probe={}", r.probe);
    println!("total={}", r.total);
    println!("correct={}", r.correct);
    println!("accuracy={}", r.accuracy);
    for (t, a) in r.per_type.iter().enumerate() {
        println!("type{t}_accuracy={}", opt(*a));
    }
    println!("pct_acc={}", opt(r.pct_acc));
    println!("delta_gap={}", opt(r.delta_gap));
}

fn run(cli: Cli) -> Result<(), Failure> {
    let env = || std::env::var(OUT_DIR_ENV).ok();
    match cli.command {
        Command::GenData { cfg, output } => {
            let cfg = cfg.resolve(env())?;
            let path = output
                .or_else(|| cfg.out_dir.as_ref().map(|d| d.join("dataset.tsv")))
                .ok_or_else(|| Failure::usage("gen-data needs --output or an output directory".into()))?;
            let data = load_dataset(&ExperimentConfig { data_file: None, ..cfg })?;
            let mut w = create(&path)?;
            write_dataset(&mut w, &data)?;
            w.flush()?;
            println!("wrote {} samples to {}", data.iter().count(), path.display());
        }
        Command::Train { cfg } => {
            let mut cfg = cfg.resolve(env())?;
            cfg.out_dir.get_or_insert_with(|| PathBuf::from("runs"));
            let out = run_experiment(&cfg)?;
            let r = &out.row;
            // truncated like the report table
            let opt = |x: Option<f64>| x.map(|v| format!("{:.2}", two_decimals(v))).unwrap_or_else(|| "-".into());
            println!(
                "{}/{} seed={} id_acc={} ood_acc={} pct_acc={} delta_gap={} seconds={:.1}",
                r.variant,
                r.knobs,
                r.seed,
                opt(Some(r.id_acc)),
                opt(Some(r.ood_acc)),
                opt(r.pct_acc),
                opt(r.delta_gap),
                r.seconds
            );
            if let Some(p) = &out.checkpoint {
                println!("checkpoint={}", p.display());
            }
            if let Some(d) = &cfg.out_dir {
                println!("rows={}", d.join("rows.csv").display());
            }
        }
        Command::Eval {
            cfg,
            checkpoint,
            split,
            probe,
        } => {
            let cfg = cfg.resolve(env())?;
            let split: Split = split.parse()?;
            let probe: ProbeMode = probe.parse()?;
            let file = fs::File::open(&checkpoint).map_err(|e| Failure {
                code: "E_IO",
                message: format!("{}: {e}", checkpoint.display()),
            })?;
            let (model, store) = read_checkpoint(&mut BufReader::new(file))?.restore()?;
            let data = load_dataset(&cfg)?;
            let num_types = cfg.world.question_types().len();
            let predictor = ModelPredictor { model: &model, store: &store };
            let samples = data.split(split);
            let mut full = evaluate(&predictor, samples, ProbeMode::FullQ, num_types)?;
            let mut qtype = evaluate(&predictor, samples, ProbeMode::QTypeOnly, num_types)?;
            let _ = pair_metrics(&mut full, &mut qtype);
            print_record(if probe == ProbeMode::FullQ { &full } else { &qtype });
        }
        Command::Gradcheck {
            cfg,
            all,
            width,
            len,
            tol,
        } => {
            let cfg = cfg.resolve(env())?;
            let configs = if all {
                gradcheck_configs(width)
            } else {
                let mut e = cfg.encoder.with_dims(width);
                e.vocab_size = 16;
                e.max_len = e.max_len.max(len);
                vec![e]
            };
            let mut worst = 0.0f64;
            for e in &configs {
                let rep = gradient_check(e, len, cfg.seed)?;
                println!(
                    "{} max_rel_error={:.3e} worst={}[{}] coords={}",
                    e.label(),
                    rep.max_rel_error,
                    rep.worst_param,
                    rep.worst_index,
                    rep.coords_checked
                );
                worst = worst.max(rep.max_rel_error);
            }
            if worst > tol {
                return Err(Failure {
                    code: "E_GRADCHECK",
                    message: format!("max relative error {worst:.3e} exceeds {tol:e}"),
                });
            }
        }
        Command::Report {
            rows,
            format,
            aggregate,
            output,
        } => {
            let format: ReportFormat = format.parse()?;
            let mut all = Vec::new();
            for p in &rows {
                all.extend(parse_report_csv(&read_text(p)?)?);
            }
            let text = emit_report(&all, format, aggregate)?;
            match output {
                Some(p) => {
                    let mut w = create(&p)?;
                    w.write_all(text.as_bytes())?;
                    w.flush()?;
                }
                None => print!("{text}"),
            }
        }
        Command::ShowConfig { cfg } => print!("{}", cfg.resolve(env())?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let reason: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("tip:"))
                .collect();
            eprintln!("error[E_USAGE]: {}", reason.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.message.replace('\n', " "));
            ExitCode::from(f.exit_code())
        }
    }
}
