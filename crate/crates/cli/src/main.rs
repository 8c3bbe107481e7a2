//! `groupvit` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or malformed files, mismatched shapes), 3 numeric error
//! (non-finite loss or gradients).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use groupvit::checkpoint::{Container, Record};
use groupvit::config::{AssignMode, RunConfig};
use groupvit::data::pnm::Pnm;
use groupvit::data::{self, generate_split, Dataset, SceneConfig};
use groupvit::encoders::Vocab;
use groupvit::objectives::{PromptSet, DEFAULT_TEMPLATES};
use groupvit::train::{load_model, Trainer};
use groupvit::zeroshot::{evaluate, labeling_temperature, segment_batch, ClassEmbeddingTable, EvalOptions};
use groupvit::{Error, Scalar};

#[derive(Parser)]
#[command(name = "groupvit", version, about = "Text-supervised grouping transformer for zero-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes split (images, masks, captions, vocabulary).
    Generate(GenerateArgs),
    /// Train on a split, writing metrics.jsonl and checkpoints to --out.
    Train(TrainArgs),
    /// Zero-shot segmentation scores of a checkpoint on a split with masks.
    Eval(EvalArgs),
    /// Segment one image and write the class mask and per-stage group maps.
    Segment(SegmentArgs),
    /// Print the records of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Soft,
    Hard,
}

impl From<Mode> for AssignMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Soft => AssignMode::Soft,
            Mode::Hard => AssignMode::Hard,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training split written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` overrides applied on top of --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Resume from a training checkpoint; the run configuration stored in it is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split with masks.
    #[arg(long)]
    data: PathBuf,
    /// Class list, one name per line; defaults to the split's classes.txt.
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Random-labeling trials of the baseline.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM image of the model's input size.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Number of grouping stages to draw group maps for (default: all).
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GROUPVIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => match a.precision {
            Precision::F32 => train::<f32>(a),
            Precision::F64 => train::<f64>(a),
        },
        Command::Eval(a) => match a.precision {
            Precision::F32 => eval::<f32>(a),
            Precision::F64 => eval::<f64>(a),
        },
        Command::Segment(a) => match a.precision {
            Precision::F32 => segment::<f32>(a),
            Precision::F64 => segment::<f64>(a),
        },
        Command::InspectCheckpoint(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric { .. } => 3,
        Error::Io { .. } | Error::Format { .. } | Error::Dimension { .. } | Error::Shape { .. } | Error::Domain { .. } => 2,
    }
}

fn generate(a: GenerateArgs) -> groupvit::Result<()> {
    let cfg = SceneConfig::for_size(a.image_size);
    generate_split(&a.out, a.n, a.seed, &cfg)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

/// Templates and lexicon: config paths first, then the split's files, then
/// the built-in defaults.
fn prompt_files(cfg: &RunConfig, data_dir: &Path) -> groupvit::Result<PromptSet> {
    let pick = |configured: &Option<PathBuf>, name: &str| -> Option<PathBuf> {
        configured.clone().or_else(|| {
            let p = data_dir.join(name);
            p.exists().then_some(p)
        })
    };
    match (pick(&cfg.loss.templates, "templates.txt"), pick(&cfg.loss.lexicon, "lexicon.txt")) {
        (Some(t), Some(l)) => PromptSet::load(&t, &l, cfg.loss.k),
        (t, l) => {
            let templates = match t {
                Some(p) => read_lines(&p)?,
                None => DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            };
            let lexicon = match l {
                Some(p) => read_lines(&p)?,
                None => data::lexicon(),
            };
            PromptSet::new(&templates, &lexicon, cfg.loss.k)
        }
    }
}

fn read_lines(path: &Path) -> groupvit::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn train<T: Scalar>(a: TrainArgs) -> groupvit::Result<()> {
    let data = Dataset::load(&a.data)?;
    let mut trainer = match &a.checkpoint {
        Some(p) => Trainer::<T>::load(p)?,
        None => {
            let base = match a.preset {
                Preset::Desk => RunConfig::desk(),
                Preset::Full => RunConfig::full(),
            };
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p, &base)?,
                None => base,
            };
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(m) = a.mode {
                cfg.train.assign_mode = m.into();
            }
            let vocab_path = a.data.join("vocab.txt");
            let vocab = if vocab_path.exists() {
                Vocab::load(&vocab_path)?
            } else {
                data::vocabulary()
            };
            let prompts = prompt_files(&cfg, &a.data)?;
            Trainer::<T>::new(cfg, vocab, prompts)?
        }
    };
    let start = trainer.step;
    let metrics = trainer.run(&data, Some(&a.out), None)?;
    if let Some(last) = metrics.last() {
        println!(
            "trained steps {}..{} loss {:.4} tau {:.4}; checkpoint {}",
            start,
            trainer.step,
            last.loss,
            last.tau,
            a.out.join("final.ckpt").display()
        );
    } else {
        println!("nothing to do: checkpoint is already at step {}", trainer.step);
    }
    Ok(())
}

struct Loaded<T> {
    model: groupvit::encoders::GroupVit<T>,
    config: RunConfig,
    table: ClassEmbeddingTable<T>,
    class_names: Vec<String>,
}

fn load_for_inference<T: Scalar>(checkpoint: &Path, classes: Option<&Path>) -> groupvit::Result<Loaded<T>> {
    let (model, config, vocab, templates) = load_model::<T>(checkpoint)?;
    let class_names = match classes {
        Some(p) => data::load_class_list(p)?,
        None => data::class_names(),
    };
    let background = class_names
        .iter()
        .position(|c| c == data::BACKGROUND)
        .ok_or_else(|| Error::Config(format!("class list has no {:?} entry", data::BACKGROUND)))?;
    let table = ClassEmbeddingTable::build(&model, &vocab, &class_names, &templates, background)?;
    Ok(Loaded {
        model,
        config,
        table,
        class_names,
    })
}

fn eval<T: Scalar>(a: EvalArgs) -> groupvit::Result<()> {
    let data = Dataset::load(&a.data)?;
    let classes = a.classes.clone().or_else(|| {
        let p = a.data.join("classes.txt");
        p.exists().then_some(p)
    });
    let l = load_for_inference::<T>(&a.checkpoint, classes.as_deref())?;
    let opts = EvalOptions {
        threshold: a.threshold.unwrap_or(l.config.eval.threshold),
        label_temperature: l.config.eval.label_temperature,
        baseline_trials: a.trials,
        seed: a.seed,
        ..EvalOptions::default()
    };
    let report = evaluate(&l.model, &data, &l.table, &l.class_names, &opts)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = &a.out {
        std::fs::write(p, &text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

/// Distinct colors for group and class indices.
fn palette(i: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [170, 110, 40],
    ];
    let c = BASE[i % BASE.len()];
    let shade = (i / BASE.len()) as u8;
    [c[0].wrapping_sub(shade * 40), c[1].wrapping_sub(shade * 40), c[2].wrapping_sub(shade * 40)]
}

fn color_map(indices: &[usize], width: usize, height: usize, color: impl Fn(usize) -> [u8; 3]) -> Pnm {
    Pnm::rgb(width, height, indices.iter().flat_map(|&i| color(i)).collect())
}

fn segment<T: Scalar>(a: SegmentArgs) -> groupvit::Result<()> {
    let l = load_for_inference::<T>(&a.checkpoint, a.classes.as_deref())?;
    let img = Pnm::load(&a.image)?;
    if img.channels != 3 {
        return Err(Error::Format {
            kind: "image",
            path: a.image.clone(),
            msg: "expected a color (P6) image".into(),
        });
    }
    let input = data::image_tensor::<T>(&img.data, img.width, img.height).reshape(&[1, img.height, img.width, 3])?;
    let threshold = a.threshold.unwrap_or(l.config.eval.threshold);
    let tau = labeling_temperature(&l.model, l.config.eval.label_temperature);
    let seg = segment_batch(&l.model, &input, &l.table, tau, threshold)?.remove(0);
    let n_stages = seg.stages.len();
    let stages = a.stages.unwrap_or(n_stages);
    if stages == 0 || stages > n_stages {
        return Err(Error::Config(format!("--stages must lie in 1..={n_stages}, got {stages}")));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let r = &seg.result;
    let mask: Vec<u8> = r.labels.iter().map(|&c| c as u8).collect();
    Pnm::gray(r.width, r.height, mask).save(&a.out.join("mask.pgm"))?;
    let bg = l.table.background;
    color_map(&r.labels, r.width, r.height, |c| if c == bg { [0, 0, 0] } else { palette(c) })
        .save(&a.out.join("mask.ppm"))?;
    for s in 1..=stages {
        let map = seg.stage_group_map(s)?;
        color_map(&map, r.width, r.height, palette).save(&a.out.join(format!("groups-stage{s}.ppm")))?;
    }
    for (g, (&label, &conf)) in seg.group_labels.labels.iter().zip(&seg.group_labels.confidences).enumerate() {
        let pixels = r.group_map.iter().filter(|&&x| x == g).count();
        println!("group\t{g}\t{}\tp={conf:.4}\tpixels={pixels}", l.class_names[label]);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> groupvit::Result<()> {
    let c = Container::load(&a.checkpoint)?;
    let mut params = 0usize;
    for (name, rec) in &c.records {
        match rec {
            Record::F64(t) => {
                if name.starts_with("param.") {
                    params += t.numel();
                }
                println!("{name}\ttensor\t{:?}", t.shape());
            }
            Record::U64 { shape, values } => {
                if values.len() <= 8 {
                    println!("{name}\tu64\t{shape:?}\t{values:?}");
                } else {
                    println!("{name}\tu64\t{shape:?}");
                }
            }
            Record::Bytes(b) => println!("{name}\tbytes\t[{}]", b.len()),
        }
    }
    println!("parameters\t{params}");
    Ok(())
}
