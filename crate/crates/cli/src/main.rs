use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use midout::caption::{concat_features, ToyScene, Vocab};
use midout::config::{RunConfig, Task};
use midout::decoding::{Family, SelfAttnVariant};
use midout::denoise::DenoiseSample;
use midout::experiments::{self, CsvRow, EXPERIMENTS};
use midout::jsonl::read_jsonl;
use midout::pipeline::{self, Dataset, Model};
use midout::Error;

const USAGE_ERROR: u8 = 1;
const ACCEPTANCE_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "midout", version, about = "Middle-out decoding: data, training, evaluation and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.jsonl and test.jsonl for a task.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing a checkpoint and a loss CSV.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Directory with train.jsonl and test.jsonl; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Loss curve CSV (step,loss).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the test split and write a metric CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Metric CSV; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print generated sequences for test inputs.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-lines file of scenes or de-noising samples.
        #[arg(long)]
        input: PathBuf,
        /// Line of the input file to use; all lines when absent.
        #[arg(long)]
        index: Option<usize>,
        /// Append this scene's frames after the first one (captioning only).
        #[arg(long, requires = "index")]
        concat: Option<usize>,
        /// Seed word for middle-out or oracle decoding.
        #[arg(long)]
        middle_word: Option<String>,
        /// Beam width; the config's value when absent.
        #[arg(long)]
        beam: Option<usize>,
        /// Number of ranked captions to print per input.
        #[arg(long, default_value_t = 1)]
        show: usize,
    },
    /// Run a named experiment over three seeds and judge it.
    Experiment {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(EXPERIMENTS))]
        name: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// First of the three seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Summary CSV; `<name>.csv` when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    model: Option<Family>,
    #[arg(long)]
    self_attention: Option<SelfAttnVariant>,
    /// Baseline captioner that sees the middle word.
    #[arg(long)]
    oracle_word: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.task {
            c.task = t;
        }
        if let Some(m) = self.model {
            c.model = m;
        }
        if self.self_attention.is_some() {
            c.self_attention = self.self_attention;
        }
        c.oracle_word |= self.oracle_word;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

enum Failure {
    Usage(String),
    Acceptance,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(USAGE_ERROR)
        }
        Err(Failure::Acceptance) => ExitCode::from(ACCEPTANCE_FAILURE),
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { run, out } => {
            let config = run.resolve()?;
            Dataset::generate(&config).write(&out)?;
            println!("wrote {} and {}", out.join("train.jsonl").display(), out.join("test.jsonl").display());
        }
        Command::Train { run, data, checkpoint, loss_csv, quiet } => {
            let config = run.resolve()?;
            let data = data.or_else(|| config.paths.data.clone());
            let checkpoint = checkpoint.or_else(|| config.paths.checkpoint.clone()).unwrap_or_else(|| "model.ckpt".into());
            let loss_csv = loss_csv.unwrap_or_else(|| output_dir(&config).join("loss.csv"));
            let dataset = Dataset::load_or_generate(&config, data.as_deref())?;
            let (model, losses) = pipeline::train(&config, &dataset, |step, loss| {
                if !quiet && step % 500 == 0 {
                    eprintln!("step {step} loss {loss:.6}");
                }
            })?;
            model.save(&config, &checkpoint)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write_file(&loss_csv, &csv)?;
            println!("wrote {} and {}", checkpoint.display(), loss_csv.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let (config, model) = Model::load(&checkpoint)?;
            let data = data.or_else(|| config.paths.data.clone());
            let dataset = Dataset::load_or_generate(&config, data.as_deref())?;
            let rows = model.evaluate(&config, &dataset)?;
            let csv = experiments::csv_string(&rows);
            if let Some(p) = out {
                write_file(&p, &csv)?;
            }
            print!("{csv}");
        }
        Command::Generate { checkpoint, input, index, concat, middle_word, beam, show } => {
            let (config, model) = Model::load(&checkpoint)?;
            match config.task {
                Task::Denoise => {
                    if concat.is_some() || middle_word.is_some() {
                        return Err(Failure::Usage("--concat and --middle-word apply to captioning only".into()));
                    }
                    let samples: Vec<DenoiseSample> = read_jsonl(&input)?;
                    let samples = pick(&samples, index)?;
                    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
                    for seq in model.denoise(&inputs)? {
                        println!("{}", seq.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
                    }
                }
                Task::Caption => {
                    let c = config.caption_config();
                    let vocab = Vocab::new(&c);
                    let middle = match &middle_word {
                        Some(w) => Some(vocab.id(w).ok_or_else(|| Failure::Usage(format!("middle word {w:?} is not in the vocabulary")))?),
                        None => None,
                    };
                    if middle.is_some() && config.model == Family::Baseline && !config.oracle_word {
                        return Err(Failure::Usage("the plain baseline takes no middle word".into()));
                    }
                    let scenes: Vec<ToyScene> = read_jsonl(&input)?;
                    let picked = pick(&scenes, index)?;
                    let features: Vec<Vec<Vec<f64>>> = match concat {
                        Some(j) => {
                            let other = scenes.get(j).ok_or_else(|| Failure::Usage(format!("--concat {j} is past the end of the input")))?;
                            vec![concat_features(&picked[0], other)]
                        }
                        None => picked.iter().map(|s| s.features.clone()).collect(),
                    };
                    let beam = beam.unwrap_or(c.beam_size);
                    if beam == 0 {
                        return Err(Failure::Usage("--beam must be at least 1".into()));
                    }
                    for f in &features {
                        for h in model.caption(&config, f, middle, beam)?.iter().take(show) {
                            println!("{}", vocab.render(&h.tokens()));
                        }
                    }
                }
            }
        }
        Command::Experiment { name, config, seed, out, quiet } => {
            let config = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let progress = |m: &str| {
                if !quiet {
                    eprintln!("{m}");
                }
            };
            let result = experiments::run_experiment(&name, &config.denoise, &config.caption, seed, &progress)?;
            let out = out.unwrap_or_else(|| output_dir(&config).join(format!("{name}.csv")));
            write_file(&out, &experiments::csv_string(&result.rows))?;
            print!("{}", table(&result.rows));
            print!("{}", result.verdict.render());
            if !result.verdict.passed() {
                return Err(Failure::Acceptance);
            }
        }
    }
    Ok(())
}

fn output_dir(config: &RunConfig) -> PathBuf {
    config.paths.output.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pick<T: Clone>(items: &[T], index: Option<usize>) -> Result<Vec<T>, Failure> {
    match index {
        None => Ok(items.to_vec()),
        Some(i) => items
            .get(i)
            .map(|x| vec![x.clone()])
            .ok_or_else(|| Failure::Usage(format!("--index {i} is past the end of the input ({} lines)", items.len()))),
    }
}

/// Plain-text rendering of metric rows with aligned columns.
fn table(rows: &[CsvRow]) -> String {
    let cells: Vec<[String; 4]> =
        rows.iter().map(|r| [r.model.clone(), r.metric.clone(), format!("{:.6}", r.value), r.seed.to_string()]).collect();
    let head = ["model", "metric", "value", "seed"];
    let width: Vec<usize> = (0..4).map(|i| cells.iter().map(|c| c[i].len()).chain([head[i].len()]).max().unwrap_or(0)).collect();
    let line = |c: [&str; 4]| format!("{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}\n", c[0], c[1], c[2], c[3], w0 = width[0], w1 = width[1], w2 = width[2], w3 = width[3]);
    let mut out = line(head);
    for c in &cells {
        out.push_str(&line([&c[0], &c[1], &c[2], &c[3]]));
    }
    out
}
