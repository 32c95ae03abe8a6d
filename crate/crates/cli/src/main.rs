//! `dcnet`: run detect-and-correct experiments from flat key/value configs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dcnet::config::ExperimentConfig;
use dcnet::gmm::{clean_pdf, noisy_pdf, NoiseFlags};
use dcnet::nn::Model;
use dcnet::pipeline::{self, Report, StageInputs, StageRecord};
use dcnet::pretrain::{aggregate_losses, LossHistory};
use dcnet::transition::TransitionMatrix;
use dcnet::Error;

#[derive(Parser)]
#[command(name = "dcnet", version, about = "Detect-and-correct training under label noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Experiment seed; applied last.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Both stages, evaluation and report.
    Run(Common),
    /// Stage one only: pre-training, detection and T initialization.
    Pretrain(Common),
    /// Stage two from the outputs of `pretrain`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `pretrain`; defaults to --out.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Corrupt the training labels and write them out.
    InjectNoise(Common),
    /// Histogram and fitted densities for plotting the loss separation.
    FigureData {
        #[arg(long)]
        losses: PathBuf,
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the headline numbers of a report.
    Report { path: PathBuf },
    /// Welch's t-test from summary statistics given as MEAN,SD,N.
    Welch {
        #[arg(long, value_name = "MEAN,SD,N")]
        a: String,
        #[arg(long, value_name = "MEAN,SD,N")]
        b: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("dcnet: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("dcnet: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Run(c) => cmd_run(&c),
        Command::Pretrain(c) => cmd_pretrain(&c),
        Command::Train { common, from } => {
            let from = from.unwrap_or_else(|| common.out.clone());
            cmd_train(&common, &from)
        }
        Command::InjectNoise(c) => cmd_inject_noise(&c),
        Command::FigureData { losses, gmm, bins, out } => cmd_figure_data(&losses, &gmm, bins, &out),
        Command::Report { path } => cmd_report(&path),
        Command::Welch { a, b } => cmd_welch(&a, &b),
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("config file {} not found", path.display())));
            }
            ExperimentConfig::from_file(path)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(dir: &Path) -> Result<&Path, Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| {
        Failure::Runtime(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn cmd_run(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let dir = out_dir(&c.out)?;
    let run = pipeline::execute(&cfg)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    if let Some(s) = &run.stage_one {
        s.t_init.write_csv(dir.join("t_init.csv"))?;
        s.history.write_csv(dir.join("losses.csv"))?;
        s.flags.write_csv(dir.join("flags.csv"))?;
        s.record.write_json(dir.join("gmm.json"))?;
        run.outcome.t_final.write_csv(dir.join("t_final.csv"))?;
    }
    run.report.write_json(dir.join("report.json"))?;
    print_summary(&run.report);
    Ok(())
}

fn cmd_pretrain(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let dir = out_dir(&c.out)?;
    let data = pipeline::prepare_data(&cfg).map_err(|e| e.in_stage("data"))?;
    let s = pipeline::run_pretrain_stage(&cfg, &data.train)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    s.model.save(dir.join("model.bin"))?;
    s.flags.write_csv(dir.join("flags.csv"))?;
    s.t_init.write_csv(dir.join("t_init.csv"))?;
    s.history.write_csv(dir.join("losses.csv"))?;
    s.record.write_json(dir.join("gmm.json"))?;
    println!(
        "flagged {} of {} samples ({:.4}){}",
        s.flags.count(),
        s.flags.len(),
        s.flags.fraction(),
        if s.record.degenerate { "; mixture degenerate" } else { "" }
    );
    for n in &s.record.notices {
        println!("notice: {n}");
    }
    Ok(())
}

fn cmd_train(c: &Common, from: &Path) -> Outcome {
    let cfg = load_config(c)?;
    if cfg.ablation.baseline_ce {
        return Err(Failure::Usage("baseline_ce has no stage one; use `run`".into()));
    }
    let inputs = ["model.bin", "flags.csv", "t_init.csv", "gmm.json"];
    if let Some(missing) = inputs.iter().find(|f| !from.join(f).is_file()) {
        return Err(Failure::Usage(format!(
            "{} not found; run `dcnet pretrain` first",
            from.join(missing).display()
        )));
    }
    let start = Instant::now();
    let data = pipeline::prepare_data(&cfg).map_err(|e| e.in_stage("data"))?;
    let model = Model::load(from.join("model.bin"))?;
    let flags = NoiseFlags::read_csv(from.join("flags.csv"))?;
    let t_init = TransitionMatrix::read_csv(from.join("t_init.csv"))?;
    let record = StageRecord::read_json(from.join("gmm.json"))?;
    let pretrain_accuracy = pipeline::evaluate(&model, &data.test).map_err(|e| e.in_stage("evaluate"))?;
    let outcome = pipeline::train_detect_correct(&cfg, model, &data.train, &flags, &t_init)?;
    let stage = StageInputs {
        record: &record,
        flags: &flags,
        t_init: &t_init,
        pretrain_accuracy: Some(pretrain_accuracy),
    };
    let report = pipeline::build_report(&cfg, &data, Some(stage), &outcome, start.elapsed().as_secs_f64())?;
    let dir = out_dir(&c.out)?;
    outcome.t_final.write_csv(dir.join("t_final.csv"))?;
    report.write_json(dir.join("report.json"))?;
    print_summary(&report);
    Ok(())
}

fn cmd_inject_noise(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let dir = out_dir(&c.out)?;
    let data = pipeline::prepare_data(&cfg).map_err(|e| e.in_stage("data"))?;
    let train = &data.train;
    let label = cfg.data.label_column.as_str();
    dcnet::data::write_csv(train, dir.join("train_noisy.csv"), label)?;
    dcnet::data::write_csv(&data.test, dir.join("test.csv"), label)?;
    let path = dir.join("noise.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    w.write_record(["sample_index", "clean_label", "observed_label", "flipped"])
        .map_err(Error::from)?;
    let clean = train.clean_labels().expect("noise injection keeps clean labels");
    for (i, (&y, &o)) in clean.iter().zip(train.observed_labels()).enumerate() {
        w.write_record([i.to_string(), y.to_string(), o.to_string(), u8::from(y != o).to_string()])
            .map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::Io { path, source: e })?;
    data.truth.write_csv(dir.join("t_true.csv"))?;
    let flipped = train.flip_mask().map_or(0, |m| m.iter().filter(|&&f| f).count());
    println!("flipped {flipped} of {} training labels", train.len());
    Ok(())
}

fn cmd_figure_data(losses: &Path, gmm: &Path, bins: usize, out: &Path) -> Outcome {
    for p in [losses, gmm] {
        if !p.is_file() {
            return Err(Failure::Usage(format!("{} not found", p.display())));
        }
    }
    if bins == 0 {
        return Err(Failure::Usage("--bins must be positive".into()));
    }
    let history = LossHistory::read_csv(losses)?;
    let record = StageRecord::read_json(gmm)?;
    let summary = aggregate_losses(&history, record.burn_in)?;
    let values = summary.values();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len() as f64;
    let g = record.gmm.map(|r| (r.gmm(), r.t));
    let dir = out_dir(out)?;
    let path = dir.join("figure_data.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    w.write_record([
        "bin", "left", "right", "center", "count", "density", "clean_pdf", "noisy_pdf", "threshold",
    ])
    .map_err(Error::from)?;
    for (i, &count) in counts.iter().enumerate() {
        let left = lo + width * i as f64;
        let right = lo + width * (i + 1) as f64;
        let center = 0.5 * (left + right);
        let (cp, np, t) = match &g {
            Some((g, t)) => (
                format!("{:?}", clean_pdf(g, center)),
                format!("{:?}", noisy_pdf(g, center)),
                format!("{t:?}"),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            i.to_string(),
            format!("{left:?}"),
            format!("{right:?}"),
            format!("{center:?}"),
            count.to_string(),
            format!("{:?}", count as f64 / (n * width)),
            cp,
            np,
            t,
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn cmd_report(path: &Path) -> Outcome {
    if !path.is_file() {
        return Err(Failure::Usage(format!("{} not found", path.display())));
    }
    print_summary(&Report::read_json(path)?);
    Ok(())
}

fn parse_stats(s: &str) -> Result<(f64, f64, usize), Failure> {
    let bad = || Failure::Usage(format!("expected MEAN,SD,N, got {s:?}"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
    ))
}

fn cmd_welch(a: &str, b: &str) -> Outcome {
    let (ma, sa, na) = parse_stats(a)?;
    let (mb, sb, nb) = parse_stats(b)?;
    let w = pipeline::welch_t_test(ma, sa, na, mb, sb, nb).map_err(|e| Failure::Usage(e.to_string()))?;
    println!("t = {:.4}, df = {:.3}, p = {:.4}", w.t, w.df, w.p_value);
    Ok(())
}

fn print_summary(r: &Report) {
    println!("accuracy {:.4}", r.accuracy);
    if let Some(a) = r.pretrain_accuracy {
        println!("stage-one accuracy {a:.4}");
    }
    if let Some(d) = &r.detection {
        println!(
            "detection: precision {:.4} recall {:.4} f1 {:.4} balanced accuracy {:.4}",
            d.precision, d.recall, d.f1, d.balanced_accuracy
        );
    }
    if let Some(g) = &r.gmm {
        println!(
            "mixture: lambda {:.4} mu1 {:.4} var1 {:.4} mu2 {:.4} var2 {:.4} t {:.4}",
            g.lambda, g.mu1, g.sigma1_sq, g.mu2, g.sigma2_sq, g.t
        );
    }
    if let (Some(a), Some(b)) = (r.t_init_error, r.t_final_error) {
        println!("transition error: initial {a:.4} final {b:.4}");
    }
    for n in &r.notices {
        println!("notice: {n}");
    }
    println!("{:.1} s", r.seconds);
}
