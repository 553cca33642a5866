//! `ahem`: synthetic data generation, training, evaluation, augmentation
//! previews and multiply-add profiling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use ahem_core::data::generate_synthetic;
use ahem_core::eval::{run_trials, EvalProtocol};
use ahem_core::imaging::{apply_augmentation, read_ppm, sample_augmentation, write_ppm, PolicyPreset};
use ahem_core::model::{madds_per_layer, read_checkpoint};
use ahem_core::rng::{stream, tag};
use ahem_core::trainer::{flip_only_rate, pre_decay_window, train};
use ahem_core::{ArchSpec, Corpus, SyntheticSpec, TrainConfig, TrainMode};

#[derive(Parser)]
#[command(name = "ahem", version, about = "Augmented hard example mining for person re-identification")]
#[command(subcommand_required = true, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-domain identity corpus as PPM files.
    GenData {
        /// key=value spec file; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Train on every domain under --data.
    Train {
        /// key=value training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
    },
    /// Single-shot CMC of a checkpoint on a held-out dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ranks: Vec<usize>,
        /// Probe identities per trial; all identities when omitted.
        #[arg(long)]
        probe_ids: Option<usize>,
        /// Gallery identities per trial; all identities when omitted.
        #[arg(long)]
        gallery_ids: Option<usize>,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write randomly augmented copies of one PPM image plus a parameter log.
    AugmentPreview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer and total multiply-adds of an architecture.
    Profile {
        /// Architecture text file; overrides --preset.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ArchPreset::Reference)]
        preset: ArchPreset,
        #[arg(long, default_value_t = 1.0)]
        width_mult: f64,
        /// Classifier size for the mobilenet-v2 preset, embedding size for reference.
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Augment,
    Mining,
    #[value(name = "augment_mining")]
    AugmentMining,
    #[value(name = "aug_mining_select")]
    AugMiningSelect,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => TrainMode::Baseline,
            ModeArg::Augment => TrainMode::Augment,
            ModeArg::Mining => TrainMode::Mining,
            ModeArg::AugmentMining => TrainMode::AugmentMining,
            ModeArg::AugMiningSelect => TrainMode::AugMiningSelect,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Weak,
    Moderate,
    Strong,
}

impl From<PolicyArg> for PolicyPreset {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Weak => PolicyPreset::Weak,
            PolicyArg::Moderate => PolicyPreset::Moderate,
            PolicyArg::Strong => PolicyPreset::Strong,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchPreset {
    Reference,
    #[value(name = "mobilenet-v2")]
    MobilenetV2,
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist or is not a file", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} {} does not exist or is not a directory", path.display());
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Honors `AHEM_THREADS`; returns whether work may use more than one thread.
fn configure_threads() -> Result<bool> {
    let Ok(value) = std::env::var("AHEM_THREADS") else {
        return Ok(rayon::current_num_threads() > 1);
    };
    let threads: usize = value.trim().parse().with_context(|| format!("AHEM_THREADS={value:?} is not a thread count"))?;
    if threads == 0 {
        bail!("AHEM_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring the thread pool")?;
    Ok(threads > 1)
}

fn gen_data(spec: Option<PathBuf>, out: PathBuf, seed: u64) -> Result<()> {
    let mut spec = match &spec {
        Some(path) => {
            require_file(path, "spec")?;
            read_text(path)?.parse::<SyntheticSpec>().with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticSpec::default(),
    };
    spec.seed = seed;
    generate_synthetic(&spec, &out).with_context(|| format!("generating data under {}", out.display()))?;
    eprintln!(
        "wrote {} domain(s) x {} identities x {} images to {}",
        spec.domains,
        spec.identities_per_domain,
        spec.images_per_identity,
        out.display()
    );
    Ok(())
}

fn train_cmd(
    config: Option<PathBuf>,
    data: PathBuf,
    out: PathBuf,
    seed: u64,
    mode: Option<ModeArg>,
    policy: Option<PolicyArg>,
    parallel: bool,
) -> Result<()> {
    let mut cfg = match &config {
        Some(path) => {
            require_file(path, "config")?;
            read_text(path)?.parse::<TrainConfig>().with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    require_dir(&data, "data directory")?;
    cfg.seed = seed;
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    if let Some(p) = policy {
        cfg.policy = p.into();
    }
    let outcome = train(&cfg, &data, &out, parallel).context("training")?;
    let path = out.join("config.txt");
    fs::write(&path, cfg.to_string()).with_context(|| format!("writing {}", path.display()))?;
    let last = outcome.records.last();
    eprintln!(
        "{} iterations, final L_total {}, checkpoints in {}",
        outcome.records.len(),
        last.map_or("n/a".into(), |r| r.l_total.to_string()),
        out.display()
    );
    if let Ok(rate) = flip_only_rate(&outcome.records, pre_decay_window(&outcome.records, &cfg)) {
        eprintln!("pre-decay flip-only selection rate {rate:.4}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    checkpoint: PathBuf,
    data: PathBuf,
    seed: u64,
    trials: usize,
    ranks: Vec<usize>,
    probe_ids: Option<usize>,
    gallery_ids: Option<usize>,
    out: Option<PathBuf>,
    parallel: bool,
) -> Result<()> {
    require_file(&checkpoint, "checkpoint")?;
    require_dir(&data, "data directory")?;
    let ckpt = read_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (h, w) = ckpt.params.input_size();
    let corpus = Corpus::load(&data, h, w).with_context(|| format!("loading {}", data.display()))?;
    let gallery = gallery_ids.unwrap_or(corpus.num_classes());
    let protocol = EvalProtocol { probe_id_count: probe_ids.unwrap_or(gallery), gallery_id_count: gallery, trials, ranks, seed };
    let report = run_trials(&ckpt.params, &corpus, &protocol, parallel).context("evaluating")?;
    let csv = report.to_csv();
    match &out {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    for (r, a) in report.mean.ranks.iter().zip(&report.mean.accuracies) {
        eprintln!("rank-{r}: {:.2}%", a * 100.0);
    }
    Ok(())
}

fn preview(image: PathBuf, policy: PolicyArg, count: usize, seed: u64, out: PathBuf) -> Result<()> {
    require_file(&image, "image")?;
    let source = read_ppm(&image).with_context(|| format!("reading {}", image.display()))?;
    let preset = PolicyPreset::from(policy);
    let policy = preset.policy();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut log = String::from("file,top,bottom,left,right,flip,degrees,hue_shift,sat_scale,val_scale\n");
    for i in 0..count {
        let mut rng = stream(seed, &[tag::PREVIEW, i as u64]);
        let p = sample_augmentation(&policy, &mut rng);
        let augmented = apply_augmentation(&source, &p).with_context(|| format!("augmenting copy {i}"))?;
        let name = format!("preview_{i:03}.ppm");
        let path = out.join(&name);
        write_ppm(&path, &augmented).with_context(|| format!("writing {}", path.display()))?;
        let o = p.offsets;
        log.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{},{}\n",
            o.top, o.bottom, o.left, o.right, p.flip, p.degrees, p.hue_shift, p.sat_scale, p.val_scale
        ));
    }
    let path = out.join("params.csv");
    fs::write(&path, log).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {count} {preset} previews to {}", out.display());
    Ok(())
}

fn profile(arch: Option<PathBuf>, preset: ArchPreset, width_mult: f64, classes: usize, height: usize, width: usize) -> Result<()> {
    let spec = match &arch {
        Some(path) => {
            require_file(path, "architecture")?;
            read_text(path)?.parse::<ArchSpec>().with_context(|| format!("parsing {}", path.display()))?
        }
        None => match preset {
            ArchPreset::Reference => ArchSpec::reference(classes),
            ArchPreset::MobilenetV2 => ArchSpec::mobilenet_v2(width_mult, classes),
        },
    };
    let layers = madds_per_layer(&spec, height, width).context("profiling")?;
    let mut total = 0u64;
    println!("layer\toutput\tmadds");
    for (i, (layer, shape, madds)) in layers.iter().enumerate() {
        println!("{i}: {layer}\t{shape:?}\t{madds}");
        total += madds;
    }
    println!("total\t{total}\t({:.1}M)", total as f64 / 1e6);
    Ok(())
}

fn run(command: Command) -> Result<()> {
    let parallel = configure_threads()?;
    match command {
        Command::GenData { spec, out, seed } => gen_data(spec, out, seed),
        Command::Train { config, data, out, seed, mode, policy } => train_cmd(config, data, out, seed, mode, policy, parallel),
        Command::Eval { checkpoint, data, seed, trials, ranks, probe_ids, gallery_ids, out } => {
            eval_cmd(checkpoint, data, seed, trials, ranks, probe_ids, gallery_ids, out, parallel)
        }
        Command::AugmentPreview { image, policy, count, seed, out } => preview(image, policy, count, seed, out),
        Command::Profile { arch, preset, width_mult, classes, height, width } => {
            profile(arch, preset, width_mult, classes, height, width)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
