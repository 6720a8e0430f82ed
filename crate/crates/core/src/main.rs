use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dualadapt::config::read_pairs;
use dualadapt::metrics::{predict, report};
use dualadapt::parallel::{with_threads, Execution};
use dualadapt::synth::{generate_split, SynthConfig};
use dualadapt::tensor_store::{
    load_dataset, read_container, records_to_container, write_container, NamedTensor,
    TensorContainer,
};
use dualadapt::trainer::{resume, train, Output, TrainConfig, TrainState};
use dualadapt::{Error, Result};

#[derive(Parser)]
#[command(name = "dualadapt", version, about = "Dual-adapter zero-shot anomaly detection on precomputed embeddings")]
struct Cli {
    /// Worker threads (1 keeps everything on the calling thread).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test features and a text bank.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters and router; writes checkpoints and epochs.csv.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class I-AUC, P-AUC and Pixel-F1.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Anomaly maps and image scores for every record.
    Score {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write each map as an 8-bit PGM image here.
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
    },
    /// List the metadata and entries of a container.
    Inspect { file: PathBuf },
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_pairs(&read_pairs(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let state = TrainState::from_container(&read_container(path)?)?;
    let config = state.config()?;
    Ok((state, config))
}

fn run(cli: Cli) -> Result<()> {
    let exec = Execution::for_threads(cli.threads);
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = match config {
                Some(p) => SynthConfig::from_pairs(&read_pairs(p)?)?,
                None => SynthConfig::default(),
            };
            fs::create_dir_all(&out)?;
            let (train_set, bank) = generate_split(&cfg, 0)?;
            let (test_set, _) = generate_split(&cfg, 1)?;
            write_container(out.join("train.avaf"), &records_to_container(&train_set))?;
            write_container(out.join("test.avaf"), &records_to_container(&test_set))?;
            write_container(out.join("text.avaf"), &bank.to_container())?;
            println!(
                "wrote {} train and {} test records for {} classes to {}",
                train_set.len(),
                test_set.len(),
                bank.len(),
                out.display()
            );
        }
        Command::Train {
            features,
            text,
            config,
            out,
            resume: from,
        } => {
            let cfg = train_config(config.as_deref())?;
            let (records, bank) = load_dataset(&features, &text)?;
            let output = Output { dir: Some(out.clone()) };
            let outcome = with_threads(cli.threads, || match &from {
                Some(ckpt) => resume(ckpt, &cfg, &records, &bank, &output, exec),
                None => train(&cfg, &records, &bank, &output, exec),
            })?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "epoch {}: total {:.6}, mean w_n (normal) {:.3}, mean w_a (anomalous) {:.3}",
                    last.epoch, last.loss.total, last.mean_wn_normal, last.mean_wa_anomaly
                );
            }
            println!("checkpoint: {}", Output::final_path(&out).display());
        }
        Command::Eval {
            features,
            text,
            checkpoint,
            report: report_path,
        } => {
            let (state, cfg) = load_checkpoint(&checkpoint)?;
            let (records, bank) = load_dataset(&features, &text)?;
            let preds = with_threads(cli.threads, || predict(&records, &state.params, &bank, cfg.tau, exec))?;
            let rep = report(&records, &preds, &bank)?;
            fs::write(&report_path, rep.to_csv())?;
            print!("{}", rep.to_table());
        }
        Command::Score {
            features,
            text,
            checkpoint,
            out,
            pgm_dir,
        } => {
            let (state, cfg) = load_checkpoint(&checkpoint)?;
            let (records, bank) = load_dataset(&features, &text)?;
            let preds = with_threads(cli.threads, || predict(&records, &state.params, &bank, cfg.tau, exec))?;
            let mut c = TensorContainer::with_kind("predictions");
            c.metadata.insert("count".into(), preds.len().to_string());
            for (i, p) in preds.iter().enumerate() {
                let (h, w) = p.map.dim();
                let map: Vec<f64> = p.map.iter().copied().collect();
                c.push(NamedTensor::from_f64_as_f32(format!("img{i}/pred_map"), &[h, w], &map));
                c.push(NamedTensor::from_f64_as_f32(format!("img{i}/score"), &[1], &[p.score]));
                c.push(NamedTensor::from_f64_as_f32(format!("img{i}/routing"), &[2], &[p.w_n, p.w_a]));
            }
            write_container(&out, &c)?;
            if let Some(dir) = pgm_dir {
                fs::create_dir_all(&dir)?;
                for (i, p) in preds.iter().enumerate() {
                    write_pgm(&dir.join(format!("img{i}.pgm")), &p.map)?;
                }
            }
            println!("scored {} records into {}", preds.len(), out.display());
        }
        Command::Inspect { file } => {
            let c = read_container(&file)?;
            let mut stdout = std::io::stdout().lock();
            for (k, v) in &c.metadata {
                if v.contains('\n') {
                    writeln!(stdout, "meta {k}: ({} lines)", v.lines().count())?;
                } else {
                    writeln!(stdout, "meta {k}: {v}")?;
                }
            }
            for e in &c.entries {
                writeln!(stdout, "{}  {:?}  {:?}", e.name, e.dtype, e.dims)?;
            }
            writeln!(stdout, "{} entries", c.entries.len())?;
        }
    }
    Ok(())
}

fn write_pgm(path: &Path, map: &ndarray::Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(Error::from)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
