use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use handfi::apps::{self, FingerTrack, GestureHead, HeadConfig, HeadInput};
use handfi::dataset_io::{Checkpoint, Dataset};
use handfi::error::{Error, Result};
use handfi::hand_model::FINGERTIP;
use handfi::kv::KvConfig;
use handfi::mask::HandMask;
use handfi::metrics::{percentile, track_errors};
use handfi::network::HandNet;
use handfi::nn::sigmoid;
use handfi::synth_sim::{self, GestureSet, SimConfig, TrackTemplate};
use handfi::train_harness::{self, Ablation, DomainSchedule, TrainConfig};

#[derive(Parser)]
#[command(name = "handfi", version, about = "Hand mask and 3D pose from WiFi CSI, with a synthetic channel simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn kv(&self) -> Result<KvConfig> {
        match &self.config {
            Some(p) => KvConfig::load(p),
            None => Ok(KvConfig::new()),
        }
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Argument("this command needs --out".into()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Train a network on one dataset.
    Train(TrainArgs),
    /// Train with the cross-domain alignment term.
    TrainDg(TrainDgArgs),
    /// Report mask and pose metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write predicted masks and poses as a dataset file.
    Infer(EvalArgs),
    /// Fit or apply a gesture head.
    Classify(ClassifyArgs),
    /// Track the index fingertip through a sample stream.
    Track(TrackArgs),
    /// Render a track or a mask as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of samples (ignored with --track).
    #[arg(long, default_value_t = 54)]
    n: usize,
    /// Number of domains.
    #[arg(long, default_value_t = 1)]
    domains: usize,
    /// postures, digits or free.
    #[arg(long, default_value = "postures")]
    gestures: GestureSet,
    /// Trace a template with a pointing hand instead of sampling poses.
    #[arg(long)]
    track: Option<TrackTemplate>,
    #[arg(long, default_value_t = 1)]
    loops: usize,
    /// Frames per loop.
    #[arg(long, default_value_t = 40)]
    steps: usize,
    /// Template size in pose units.
    #[arg(long, default_value_t = synth_sim::DEFAULT_TRACK_SIZE)]
    size: f64,
    /// Domain index used for tracking streams.
    #[arg(long, default_value_t = 0)]
    domain: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// A, D, E, F, G or H; overrides the config.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Also write the training log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDgArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Weight of the alignment term; overrides the config.
    #[arg(long)]
    zeta: Option<f64>,
    /// Domain id left out of training.
    #[arg(long)]
    holdout: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    common: Common,
    /// Backbone checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Head to apply; without it a head is fitted and written to --out.
    #[arg(long)]
    head: Option<PathBuf>,
    /// Fraction held out when fitting.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Moving-average window; 1 disables smoothing.
    #[arg(long, default_value_t = 3)]
    window: usize,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Track files (`t x y z` lines); may repeat.
    #[arg(long)]
    track: Vec<PathBuf>,
    /// Dataset whose mask to draw (with --index).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Projection plane for tracks: xy, xz or yz.
    #[arg(long, default_value = "xy")]
    view: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}

/// Single machine-readable line: `error: kind=<kind> [offset=.. record=..] message="..."`.
fn error_line(e: &Error) -> String {
    let mut s = format!("error: kind={}", e.kind());
    let msg = match e {
        Error::Parse { offset, record, message } => {
            let _ = write!(s, " offset={offset}");
            if let Some(r) = record {
                let _ = write!(s, " record={r}");
            }
            message.clone()
        }
        other => other.to_string(),
    };
    let _ = write!(s, " message={msg:?}");
    s
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::TrainDg(a) => train_dg(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Classify(a) => classify(a),
        Command::Track(a) => track(a),
        Command::Plot(a) => plot(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let kv = a.common.kv()?;
    let sim = SimConfig::from_kv(&kv)?;
    let seed = a.common.seed.or(kv.parse_opt("seed")?).unwrap_or(0);
    let domains = synth_sim::default_domains(a.domains);
    let data = match a.track {
        None => synth_sim::generate_dataset(a.n, &domains, a.gestures, seed, &sim)?,
        Some(t) => {
            let d = domains
                .get(a.domain)
                .ok_or_else(|| Error::Argument(format!("domain {} outside 0..{}", a.domain, a.domains)))?;
            synth_sim::tracking_dataset(t, a.loops, a.steps, a.size, d, seed, &sim)?.0
        }
    };
    data.write(a.common.out()?)?;
    println!("samples={} out={}", data.len(), a.common.out()?.display());
    Ok(())
}

/// Config from file and flags; network input sizes default to the data's.
fn train_config(common: &Common, args: &TrainArgs, data: &Dataset) -> Result<TrainConfig> {
    let mut kv = common.kv()?;
    let m = &data.meta;
    for (key, v) in [
        ("network.subcarriers", m.subcarriers),
        ("network.packets", m.packets),
        ("network.antennas", m.antennas),
        ("network.mask_side", m.mask_side),
    ] {
        if kv.get(key).is_none() {
            kv.set(key, v);
        }
    }
    let mut cfg = TrainConfig::from_kv(&kv)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if args.ablation.is_some() {
        cfg.ablation = args.ablation;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish_training(args: &TrainArgs, cfg: &TrainConfig, out: &train_harness::TrainOutcome) -> Result<()> {
    let text = out.log.to_text();
    print!("{text}");
    if let Some(p) = &args.log {
        std::fs::write(p, &text)?;
    }
    out.checkpoint(cfg).write(args.common.out()?)
}

fn train(a: TrainArgs) -> Result<()> {
    let out_path = a.common.out()?.to_path_buf();
    let data = Dataset::read(&a.data)?;
    let cfg = train_config(&a.common, &a, &data)?;
    let out = train_harness::train(&data, &cfg)?;
    finish_training(&a, &cfg, &out)?;
    eprintln!("wrote {}", out_path.display());
    Ok(())
}

fn train_dg(a: TrainDgArgs) -> Result<()> {
    let t = &a.train;
    t.common.out()?;
    let mut data = Dataset::read(&t.data)?;
    let mut cfg = train_config(&t.common, t, &data)?;
    if let Some(z) = a.zeta {
        cfg.objective.weights.zeta = z;
        cfg.validate()?;
    }
    if let Some(h) = a.holdout {
        if !data.meta.domains.iter().any(|d| d.id == h) {
            return Err(Error::Argument(format!("no domain {h} in the dataset")));
        }
        data.samples.retain(|s| s.domain != h);
    }
    let mut order: Vec<u32> = data.meta.domains.iter().map(|d| d.id).filter(|&id| Some(id) != a.holdout).collect();
    order.retain(|id| data.samples.iter().any(|s| s.domain == *id));
    let out = train_harness::train_dg(&data, &cfg, &DomainSchedule::new(order)?)?;
    finish_training(t, &cfg, &out)
}

fn load_net(path: &Path) -> Result<HandNet<f32>> {
    Checkpoint::read(path)?.to_network()
}

fn emit(common: &Common, text: &str) -> Result<()> {
    print!("{text}");
    if let Some(p) = &common.out {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::read(&a.model)?;
    let data = Dataset::read(&a.data)?;
    let report = train_harness::evaluate(&ck, &data)?;
    emit(&a.common, &report.to_text())
}

fn infer(a: EvalArgs) -> Result<()> {
    let out_path = a.common.out()?;
    let net = load_net(&a.model)?;
    let mut data = Dataset::read(&a.data)?;
    let side = data.meta.mask_side;
    for chunk in data.samples.chunks_mut(32) {
        let csi: Vec<_> = chunk.iter().map(|s| &s.csi).collect();
        let fwd = net.forward(&net.prepare_input(&csi)?)?;
        for (i, s) in chunk.iter_mut().enumerate() {
            s.pose = fwd.pose_at(i)?;
            s.mask = match &fwd.mask_logits {
                Some(m) => {
                    let probs: Vec<f32> = m.item(i).iter().map(|&v| sigmoid(v)).collect();
                    HandMask::from_probabilities(side, &probs)?
                }
                None => HandMask::zeros(side),
            };
        }
    }
    data.write(out_path)?;
    println!("samples={} out={}", data.len(), out_path.display());
    Ok(())
}

fn head_config(kv: &KvConfig, seed: Option<u64>) -> Result<HeadConfig> {
    let d = HeadConfig::default();
    let h = kv.section("head");
    Ok(HeadConfig {
        input: h.parse_opt::<HeadInput>("input")?.unwrap_or(d.input),
        epochs: h.parse_opt("epochs")?.unwrap_or(d.epochs),
        lr: h.parse_opt("lr")?.unwrap_or(d.lr),
        l2: h.parse_opt("l2")?.unwrap_or(d.l2),
        batch_size: h.parse_opt("batch_size")?.unwrap_or(d.batch_size),
        seed: seed.or(kv.parse_opt("seed")?).unwrap_or(d.seed),
    })
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let net = load_net(&a.model)?;
    let data = Dataset::read(&a.data)?;
    match &a.head {
        None => {
            let out_path = a.common.out()?;
            if !(a.holdout > 0.0 && a.holdout < 1.0) {
                return Err(Error::Argument(format!("holdout {} must lie in (0, 1)", a.holdout)));
            }
            let cfg = head_config(&a.common.kv()?, a.common.seed)?;
            let (fit, test) = apps::holdout(data.len(), a.holdout, cfg.seed);
            let before = apps::weight_hash(&net);
            let head = apps::train_head(&net, &data, &fit, &cfg)?;
            debug_assert_eq!(before, apps::weight_hash(&net));
            let acc = apps::head_accuracy(&net, &head, &data, &test)?;
            head.to_checkpoint().write(out_path)?;
            println!("metric=accuracy value={acc:.6} count={}", test.len());
            Ok(())
        }
        Some(p) => {
            let head = GestureHead::from_checkpoint(&Checkpoint::read(p)?)?;
            let mut text = String::new();
            let (mut hits, mut labeled) = (0, 0);
            for (i, s) in data.samples.iter().enumerate() {
                let c = apps::classify_gesture(&s.csi, &net, &head)?;
                let _ = writeln!(
                    text,
                    "sample={i} class={} name={} p={:.6}",
                    c.class, head.names[c.class], c.probabilities[c.class]
                );
                if let Some(g) = s.gesture {
                    labeled += 1;
                    hits += usize::from(g as usize == c.class);
                }
            }
            if labeled > 0 {
                let _ = writeln!(text, "metric=accuracy value={:.6} count={labeled}", hits as f64 / labeled as f64);
            }
            emit(&a.common, &text)
        }
    }
}

fn track(a: TrackArgs) -> Result<()> {
    let net = load_net(&a.model)?;
    let data = Dataset::read(&a.data)?;
    let csi: Vec<_> = data.samples.iter().map(|s| &s.csi).collect();
    let t = apps::track_finger(&csi, &net, None, a.window)?;
    let truth: Vec<[f64; 3]> = data
        .samples
        .iter()
        .map(|s| {
            let p = s.pose.joint(FINGERTIP);
            [p[0] as f64, p[1] as f64, p[2] as f64]
        })
        .collect();
    let e = track_errors(t.points(), &truth)?;
    let cm = data.meta.cm_per_unit;
    if let Some(p) = &a.common.out {
        std::fs::write(p, t.to_text())?;
    }
    println!(
        "metric=track_p50_cm value={:.6} count={}\nmetric=track_p90_cm value={:.6} count={}",
        percentile(&e, 0.5)? * cm,
        e.len(),
        percentile(&e, 0.9)? * cm,
        e.len()
    );
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let out_path = a.common.out()?;
    let svg = match (&a.data, a.track.is_empty()) {
        (Some(d), true) => {
            let data = Dataset::read(d)?;
            let s = data
                .samples
                .get(a.index)
                .ok_or_else(|| Error::Argument(format!("index {} outside {} samples", a.index, data.len())))?;
            mask_svg(&s.mask)
        }
        (None, false) => {
            let axes = match a.view.as_str() {
                "xy" => (0, 1),
                "xz" => (0, 2),
                "yz" => (1, 2),
                v => return Err(Error::Argument(format!("unknown view `{v}`"))),
            };
            let tracks = a
                .track
                .iter()
                .map(|p| FingerTrack::from_text(&std::fs::read_to_string(p)?))
                .collect::<Result<Vec<_>>>()?;
            track_svg(&tracks, axes)
        }
        _ => return Err(Error::Argument("plot needs either --data or at least one --track".into())),
    };
    std::fs::write(out_path, svg)?;
    Ok(())
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn track_svg(tracks: &[FingerTrack], (ax, ay): (usize, usize)) -> String {
    let pts = tracks.iter().flat_map(|t| t.points().iter());
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in pts {
        lo = [lo[0].min(p[ax]), lo[1].min(p[ay])];
        hi = [hi[0].max(p[ax]), hi[1].max(p[ay])];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let (size, pad) = (400.0, 20.0);
    let map = |p: &[f64; 3]| {
        let x = pad + (p[ax] - lo[0]) / span * (size - 2.0 * pad);
        let y = size - pad - (p[ay] - lo[1]) / span * (size - 2.0 * pad);
        format!("{x:.2},{y:.2}")
    };
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n");
    for (k, t) in tracks.iter().enumerate() {
        let line: Vec<String> = t.points().iter().map(map).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            COLORS[k % COLORS.len()],
            line.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn mask_svg(mask: &HandMask) -> String {
    let n = mask.side();
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {n} {n}\">\n<rect width=\"{n}\" height=\"{n}\" fill=\"black\"/>\n", n * 4);
    for r in 0..n {
        for c in 0..n {
            if mask.get(r, c) {
                let _ = writeln!(s, "<rect x=\"{c}\" y=\"{r}\" width=\"1\" height=\"1\" fill=\"white\"/>");
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
