//! Command-line surface: dataset synthesis, training, evaluation, single
//! image inference, model accounting and gradient checking.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use cgnet::data::{self, gen_synthetic, Manifest};
use cgnet::eval::{evaluate, predict};
use cgnet::model::Network;
use cgnet::train::{run_gradcheck, train_loop, AdamState, CheckpointSink};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "cgnet",
    about = "Context-guided semantic segmentation on the CPU",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Cmd {
    /// Generate a deterministic synthetic dataset
    Synth(SynthArgs),
    /// Train a model on a manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest
    Eval(EvalArgs),
    /// Segment a single image
    Infer(InferArgs),
    /// Print parameter and FLOP accounting for a configuration
    Info(InfoArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

/// Network structure overrides (defaults follow the full-scale model:
/// M=3, N=21, channels 32,64,128, dilations 2,4, PReLU, global residual).
#[derive(Args, Default)]
struct NetFlags {
    /// number of classes K [default: 19, or the manifest value]
    #[arg(long)]
    classes: Option<usize>,
    /// blocks in stage 2 [default: 3]
    #[arg(long = "M")]
    m: Option<usize>,
    /// blocks in stage 3 [default: 21]
    #[arg(long = "N")]
    n: Option<usize>,
    /// stage widths, e.g. 32,64,128
    #[arg(long)]
    channels: Option<String>,
    /// dilation rates of stages 2,3 [default: 2,4]
    #[arg(long)]
    dilations: Option<String>,
    /// disable input injection (ablation)
    #[arg(long)]
    no_injection: bool,
    /// surrounding-context placement: none|single|full [default: full]
    #[arg(long)]
    sur_mode: Option<String>,
    /// disable the global-context gate (ablation)
    #[arg(long)]
    no_glo: bool,
    /// gate bottleneck divisor [default: 16]
    #[arg(long)]
    glo_reduction: Option<usize>,
    /// residual connection: none|lrl|grl [default: grl]
    #[arg(long)]
    residual: Option<String>,
    /// activation: relu|prelu [default: prelu]
    #[arg(long)]
    activation: Option<String>,
    /// insert the pointwise inter-channel conv (ablation) [default: off]
    #[arg(long)]
    interchannel_1x1: bool,
}

#[derive(Args, Default)]
struct TrainFlags {
    /// base learning rate [default: 0.001]
    #[arg(long)]
    base_lr: Option<f64>,
    /// poly schedule exponent [default: 0.9]
    #[arg(long)]
    power: Option<f64>,
    /// total iterations [default: 60000]
    #[arg(long)]
    max_iter: Option<usize>,
    /// batch size [default: 14]
    #[arg(long)]
    batch_size: Option<usize>,
    /// ADAM beta1 [default: 0.9]
    #[arg(long)]
    beta1: Option<f64>,
    /// ADAM beta2 [default: 0.999]
    #[arg(long)]
    beta2: Option<f64>,
    /// L2 weight decay [default: 0.0005]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// ADAM epsilon [default: 1e-8]
    #[arg(long)]
    adam_eps: Option<f64>,
    /// master seed [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// training crop size [default: 680]
    #[arg(long)]
    crop: Option<usize>,
    /// augmentation scale set [default: 0.5,0.75,1,1.5,1.75,2]
    #[arg(long)]
    scales: Option<String>,
    /// per-channel means r,g,b or 'auto' [default: auto]
    #[arg(long)]
    means: Option<String>,
    /// label excluded from the loss [default: 255]
    #[arg(long)]
    ignore_index: Option<u8>,
    /// loss reduction: mean|sum [default: mean]
    #[arg(long)]
    loss_reduction: Option<String>,
    /// checkpoint every this many iterations, 0 = only final [default: 0]
    #[arg(long)]
    checkpoint_interval: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// generator seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// number of image/label pairs
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// square image size, multiple of 8
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// class count, 3..=8
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// training manifest
    #[arg(long)]
    manifest: PathBuf,
    /// output directory for log and checkpoints
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// resume from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    net: NetFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// override the checkpoint's normalization means, r,g,b
    #[arg(long)]
    means: Option<String>,
    /// class -> category map file for category mIoU
    #[arg(long)]
    category_map: Option<PathBuf>,
    /// emit machine-readable CSV instead of the text report
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// input P6 image
    #[arg(long)]
    image: PathBuf,
    /// output P5 label map
    #[arg(long)]
    out: PathBuf,
    /// optional color-mapped P6 output (class i at hue i/K)
    #[arg(long)]
    color: Option<PathBuf>,
}

#[derive(Args)]
struct InfoArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// input size WxH for the FLOP estimate
    #[arg(long, default_value = "640x360")]
    input: String,
    #[command(flatten)]
    net: NetFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    /// kernel tolerance; the end-to-end model check runs at 10x
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn main() {
    cgnet::parallel::init_from_env();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Info(a) => cmd_info(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Tracks explicitly set keys so manifest-derived defaults only fill gaps.
struct ConfigBuilder {
    cfg: RunConfig,
    set_keys: HashSet<String>,
}

impl ConfigBuilder {
    fn new() -> Self {
        ConfigBuilder {
            cfg: RunConfig::default(),
            set_keys: HashSet::new(),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.cfg.set(key, value)?;
        self.set_keys.insert(key.to_string());
        Ok(())
    }

    fn load_file(&mut self, path: &Path) -> Result<()> {
        // parse once for values, then record which keys appeared
        self.cfg.load_file(path)?;
        let text = std::fs::read_to_string(path)?;
        for raw in text.lines() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if let Some((key, _)) = line.split_once('=') {
                self.set_keys.insert(key.trim().to_string());
            }
        }
        Ok(())
    }

    fn apply_net_flags(&mut self, f: &NetFlags) -> Result<()> {
        if let Some(v) = f.classes {
            self.set("classes", &v.to_string())?;
        }
        if let Some(v) = f.m {
            self.set("m", &v.to_string())?;
        }
        if let Some(v) = f.n {
            self.set("n", &v.to_string())?;
        }
        if let Some(v) = &f.channels {
            self.set("channels", v)?;
        }
        if let Some(v) = &f.dilations {
            self.set("dilations", v)?;
        }
        if f.no_injection {
            self.set("input_injection", "false")?;
        }
        if let Some(v) = &f.sur_mode {
            self.set("sur_mode", v)?;
        }
        if f.no_glo {
            self.set("use_glo", "false")?;
        }
        if let Some(v) = f.glo_reduction {
            self.set("glo_reduction", &v.to_string())?;
        }
        if let Some(v) = &f.residual {
            self.set("residual", v)?;
        }
        if let Some(v) = &f.activation {
            self.set("activation", v)?;
        }
        if f.interchannel_1x1 {
            self.set("interchannel_1x1", "true")?;
        }
        Ok(())
    }

    fn apply_train_flags(&mut self, f: &TrainFlags) -> Result<()> {
        macro_rules! opt {
            ($field:ident, $key:literal) => {
                if let Some(v) = &f.$field {
                    self.set($key, &v.to_string())?;
                }
            };
        }
        opt!(base_lr, "base_lr");
        opt!(power, "power");
        opt!(max_iter, "max_iter");
        opt!(batch_size, "batch_size");
        opt!(beta1, "beta1");
        opt!(beta2, "beta2");
        opt!(weight_decay, "weight_decay");
        opt!(adam_eps, "adam_eps");
        opt!(seed, "seed");
        opt!(crop, "crop");
        opt!(scales, "scales");
        opt!(means, "means");
        opt!(ignore_index, "ignore_index");
        opt!(loss_reduction, "loss_reduction");
        opt!(checkpoint_interval, "checkpoint_interval");
        Ok(())
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    gen_synthetic(a.seed, a.count, a.size, a.classes, &a.out)?;
    println!("{}", a.out.join("manifest.txt").display());
    Ok(())
}

fn parse_means(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| anyhow!("invalid means '{s}'")))
        .collect::<Result<_>>()?;
    if v.len() != 3 {
        bail!("means need exactly three values");
    }
    Ok([v[0], v[1], v[2]])
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &a.config {
        b.load_file(path)?;
    }
    b.apply_net_flags(&a.net)?;
    b.apply_train_flags(&a.train)?;

    let manifest = Manifest::load(&a.manifest)?;
    if !b.set_keys.contains("classes") {
        b.cfg.net.num_classes = manifest.num_classes;
    } else if b.cfg.net.num_classes != manifest.num_classes {
        bail!(
            "configured classes {} but manifest declares {}",
            b.cfg.net.num_classes,
            manifest.num_classes
        );
    }
    let mut cfg = b.cfg;

    if cfg.means_auto {
        cfg.train.means = data::compute_means(&manifest)?;
        cfg.means_auto = false;
    }

    let (mut net, mut state) = match &a.resume {
        Some(ckpt) => {
            let (net, ts) = Network::<f32>::load(ckpt)?;
            cfg.net = net.config().clone();
            cfg.train.means = ts.means;
            (net, AdamState { t: ts.iter })
        }
        None => {
            let mut rng = cgnet::rng::Pcg32::new(cfg.train.seed, 0);
            (
                Network::<f32>::build(cfg.net.clone(), &mut rng)?,
                AdamState::default(),
            )
        }
    };

    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let echo = cfg.echo();
    print!("{echo}");
    std::fs::write(a.out_dir.join("effective.cfg"), &echo)?;

    let dataset = manifest.load_samples()?;
    let log_path = a.out_dir.join("train.log");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("cannot open {}", log_path.display()))?;

    let sink = CheckpointSink {
        dir: Some(a.out_dir.clone()),
    };
    let progress_every = (cfg.train.max_iter / 10).max(1);
    let t0 = std::time::Instant::now();
    train_loop(&mut net, &mut state, &dataset, &cfg.train, &sink, |rec| {
        writeln!(log_file, "{}", rec.to_line()).expect("log write");
        if rec.iter % progress_every == 0 {
            println!("iter {:>6}  lr {:.3e}  loss {:.5}", rec.iter, rec.lr, rec.loss);
        }
    })?;
    println!(
        "trained to iteration {} in {:.1?}; final checkpoint {}",
        state.t,
        t0.elapsed(),
        a.out_dir.join("checkpoint_final.cgn").display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (net, ts) = Network::<f32>::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let means = match &a.means {
        Some(s) => parse_means(s)?,
        None => ts.means,
    };
    let map = match &a.category_map {
        Some(p) => Some(data::load_category_map(p, manifest.num_classes)?),
        None => None,
    };
    let metrics = evaluate(&net, &manifest, &means, map.as_deref())?;
    if a.csv {
        print!("{}", metrics.to_csv());
    } else {
        print!("{}", metrics.to_text());
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (net, ts) = Network::<f32>::load(&a.checkpoint)?;
    let image = data::read_ppm(&a.image)?;
    let dims = image.dims().to_vec();
    let sample = data::Sample {
        labels: data::LabelMap::filled(dims[1], dims[2], 0),
        image,
    };
    let pred = predict(&net, &sample, &ts.means)?;
    data::write_pgm(&a.out, &pred)?;
    if let Some(color_path) = &a.color {
        let k = net.config().num_classes;
        let plane = pred.h * pred.w;
        let mut rgb = vec![0.0f32; 3 * plane];
        for (i, &label) in pred.data.iter().enumerate() {
            let color = cgnet::data::synth::hsv_to_rgb(label as f64 / k as f64, 1.0, 1.0);
            for c in 0..3 {
                rgb[c * plane + i] = color[c] as f32;
            }
        }
        let img = cgnet::tensor::Tensor::from_vec(&[3, pred.h, pred.w], rgb)?;
        data::write_ppm(color_path, &img)?;
    }
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_info(a: InfoArgs) -> Result<()> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &a.config {
        b.load_file(path)?;
    }
    b.apply_net_flags(&a.net)?;
    let cfg = b.cfg;

    let (w, h) = a
        .input
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| anyhow!("--input must look like 640x360"))?;

    let mut rng = cgnet::rng::Pcg32::new(0, 0);
    let net = Network::<f32>::build(cfg.net.clone(), &mut rng)?;
    let params = net.count_params();
    let flops = net.estimate_flops(h, w)?;
    println!(
        "M={} N={} classes={} channels={},{},{}",
        cfg.net.blocks_stage2,
        cfg.net.blocks_stage3,
        cfg.net.num_classes,
        cfg.net.stage_channels[0],
        cfg.net.stage_channels[1],
        cfg.net.stage_channels[2]
    );
    println!("parameters {params} ({:.3} M)", params as f64 / 1e6);
    println!("flops at 3x{w}x{h}: {flops} ({:.2} G)", flops as f64 / 1e9);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(a.tol, a.tol * 10.0)?;
    print!("{}", report.to_text());
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}
