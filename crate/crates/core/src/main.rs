//! Command-line front end: transfer runs, lightness sweeps, reference
//! recommendation, face-parsing utilities, network generation, and the
//! numerical self-check suite.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use makeup_transfer::convnet::{load_network, random_network, save_network, NetworkTemplate};
use makeup_transfer::error::{Error, Result};
use makeup_transfer::losses::TransferConfig;
use makeup_transfer::manifest::{load_manifest, save_manifest, ManifestInputs, RunManifest};
use makeup_transfer::optim::{lightness_sweep, run_transfer, SweepParam, TransferInputs};
use makeup_transfer::parsing::{
    argmax_labels, labels_to_mask, symmetrize_confidence, weighted_cross_entropy, LabelWeights,
};
use makeup_transfer::warp::load_landmarks;
use makeup_transfer::{imageio, recommend, selfcheck};

#[derive(Parser)]
#[command(
    name = "makeup-transfer",
    about = "Localized makeup transfer by gradient descent over deep features",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an after-makeup image from a before/reference pair.
    Transfer(TransferArgs),
    /// Run one transfer per weight value to grade makeup lightness.
    Sweep(SweepArgs),
    /// Recommend the nearest reference faces from an embedding index.
    Recommend(RecommendArgs),
    /// Face-parsing utilities over confidence maps and labelmaps.
    #[command(subcommand)]
    Parse(ParseCommand),
    /// Run the numerical verification suite.
    Selfcheck(SelfcheckArgs),
    /// Generate a randomly initialized network file.
    GenNetwork(GenNetworkArgs),
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Network weights (JSON, as written by gen-network).
    #[arg(long)]
    network: Option<PathBuf>,
    /// Before-makeup photo (PNG).
    #[arg(long)]
    before: Option<PathBuf>,
    /// Reference makeup photo (PNG).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Labelmap of the before photo (grayscale PNG, pixel value = label id).
    #[arg(long)]
    labels_before: Option<PathBuf>,
    /// Labelmap of the reference photo.
    #[arg(long)]
    labels_ref: Option<PathBuf>,
    /// Eye-region landmarks of the before photo (JSON), needed for eye shadow.
    #[arg(long)]
    landmarks_before: Option<PathBuf>,
    /// Eye-region landmarks of the reference photo.
    #[arg(long)]
    landmarks_ref: Option<PathBuf>,
}

impl InputArgs {
    fn to_manifest_inputs(&self) -> Result<ManifestInputs> {
        let mut missing = Vec::new();
        let mut need = |name: &str, v: &Option<PathBuf>| -> PathBuf {
            match v {
                Some(p) => p.clone(),
                None => {
                    missing.push(format!("--{name}"));
                    PathBuf::new()
                }
            }
        };
        let inputs = ManifestInputs {
            network: need("network", &self.network),
            before: need("before", &self.before),
            reference: need("reference", &self.reference),
            labels_before: need("labels-before", &self.labels_before),
            labels_ref: need("labels-ref", &self.labels_ref),
            landmarks_before: self.landmarks_before.clone(),
            landmarks_ref: self.landmarks_ref.clone(),
        };
        if missing.is_empty() {
            Ok(inputs)
        } else {
            Err(Error::Argument(format!(
                "missing required flags: {}",
                missing.join(", ")
            )))
        }
    }
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Structure-preservation weight.
    #[arg(long)]
    lambda_s: Option<f64>,
    /// Eye-shadow weight.
    #[arg(long)]
    lambda_e: Option<f64>,
    /// Lip style weight.
    #[arg(long)]
    lambda_l: Option<f64>,
    /// Foundation style weight.
    #[arg(long)]
    lambda_f: Option<f64>,
    /// Smoothness weight.
    #[arg(long)]
    tv_weight: Option<f64>,
    /// Smoothness exponent (>= 1).
    #[arg(long)]
    tv_beta: Option<f64>,
    /// Gradient-descent step size.
    #[arg(long)]
    lr: Option<f64>,
    /// Momentum coefficient in [0, 1).
    #[arg(long)]
    momentum: Option<f64>,
    /// Iteration budget.
    #[arg(long)]
    iters: Option<usize>,
    /// Seed recorded with the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated regions to transfer
    /// (eyeshadow_l, eyeshadow_r, foundation, lip_upper, lip_lower).
    #[arg(long, value_delimiter = ',')]
    regions: Option<Vec<String>>,
    /// Comma-separated convolution layers for the style terms.
    #[arg(long, value_delimiter = ',')]
    style_layers: Option<Vec<String>>,
    /// Convolution layer for the content and structure terms.
    #[arg(long)]
    content_layer: Option<String>,
}

impl ConfigArgs {
    fn apply(&self, mut cfg: TransferConfig) -> TransferConfig {
        macro_rules! set {
            ($field:ident, $opt:expr) => {
                if let Some(v) = &$opt {
                    cfg.$field = v.clone();
                }
            };
        }
        set!(lambda_s, self.lambda_s);
        set!(lambda_e, self.lambda_e);
        set!(lambda_l, self.lambda_l);
        set!(lambda_f, self.lambda_f);
        set!(tv_weight, self.tv_weight);
        set!(tv_beta, self.tv_beta);
        set!(learning_rate, self.lr);
        set!(momentum, self.momentum);
        set!(iterations, self.iters);
        set!(seed, self.seed);
        set!(regions, self.regions);
        set!(style_layers, self.style_layers);
        set!(content_layer, self.content_layer);
        cfg
    }
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output PNG path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-iteration loss table (plain text).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Optional run manifest (JSON) written next to the output.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Replay a previous run from its manifest instead of fresh flags.
    #[arg(long, conflicts_with_all = ["network", "before", "reference", "labels_before", "labels_ref"])]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Which weight to sweep: lambda-e, lambda-f or lambda-l.
    #[arg(long)]
    param: String,
    /// Comma-separated positive weight values, strictly ascending.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Directory for per-value outputs and the summary table.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RecommendArgs {
    /// Embedding index: one JSON record per line, each with an "id" and
    /// either an "embedding" vector or raw "fc6"/"fc7" halves.
    #[arg(long)]
    index: PathBuf,
    /// Query record (JSON object in the same format, "id" optional).
    #[arg(long)]
    query: PathBuf,
    /// Number of neighbors to report.
    #[arg(short, default_value_t = 5)]
    k: usize,
}

#[derive(Subcommand)]
enum ParseCommand {
    /// Average a confidence map with its horizontal mirror (swapping
    /// lateral class pairs) to impose facial symmetry.
    Symmetrize {
        /// Confidence map (JSON: classes/height/width/data).
        #[arg(long)]
        confidence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weighted cross-entropy of a confidence map against a labelmap.
    EvalLoss {
        #[arg(long)]
        confidence: PathBuf,
        /// Ground-truth labelmap (grayscale PNG).
        #[arg(long)]
        truth: PathBuf,
        /// Treat the confidences as raw scores and softmax them per pixel.
        #[arg(long)]
        softmax: bool,
        /// Use weight 1 for every label instead of the cosmetic-region
        /// weighting.
        #[arg(long)]
        uniform_weights: bool,
    },
    /// Binary mask of the pixels carrying any of the given label ids. Reads
    /// a labelmap PNG directly, or takes the argmax of a confidence map.
    ToMask {
        #[arg(long, conflicts_with = "confidence")]
        labels: Option<PathBuf>,
        #[arg(long)]
        confidence: Option<PathBuf>,
        /// Comma-separated label ids to include.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u8>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Network to verify; a seeded fixture network is used when omitted.
    #[arg(long)]
    network: Option<PathBuf>,
}

#[derive(Args)]
struct GenNetworkArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Architecture: "default" (five conv/relu/pool blocks) or "tiny".
    #[arg(long, default_value = "default")]
    template: String,
    /// Input channel count.
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error:{}: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Transfer(args) => cmd_transfer(args)?,
        Command::Sweep(args) => cmd_sweep(args)?,
        Command::Recommend(args) => cmd_recommend(args)?,
        Command::Parse(args) => cmd_parse(args)?,
        Command::Selfcheck(args) => return cmd_selfcheck(args),
        Command::GenNetwork(args) => cmd_gen_network(args)?,
    }
    Ok(ExitCode::SUCCESS)
}

struct LoadedRun {
    net: makeup_transfer::convnet::NetworkSpec,
    before: makeup_transfer::tensor::Tensor,
    reference: makeup_transfer::tensor::Tensor,
    labels_before: makeup_transfer::parsing::Labelmap,
    labels_ref: makeup_transfer::parsing::Labelmap,
    landmarks_before: Option<makeup_transfer::warp::FaceLandmarks>,
    landmarks_ref: Option<makeup_transfer::warp::FaceLandmarks>,
    manifest_inputs: ManifestInputs,
}

fn load_run(inputs: &ManifestInputs) -> Result<LoadedRun> {
    Ok(LoadedRun {
        net: load_network(&inputs.network)?,
        before: imageio::load_image(&inputs.before)?,
        reference: imageio::load_image(&inputs.reference)?,
        labels_before: imageio::load_labelmap(&inputs.labels_before)?,
        labels_ref: imageio::load_labelmap(&inputs.labels_ref)?,
        landmarks_before: inputs
            .landmarks_before
            .as_deref()
            .map(load_landmarks)
            .transpose()?,
        landmarks_ref: inputs
            .landmarks_ref
            .as_deref()
            .map(load_landmarks)
            .transpose()?,
        manifest_inputs: inputs.clone(),
    })
}

impl LoadedRun {
    fn transfer_inputs(&self) -> TransferInputs<'_> {
        TransferInputs {
            labels_before: &self.labels_before,
            labels_ref: &self.labels_ref,
            landmarks_before: self.landmarks_before.as_ref(),
            landmarks_ref: self.landmarks_ref.as_ref(),
        }
    }
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let (run, cfg, out) = match &args.from_manifest {
        Some(path) => {
            let manifest = load_manifest(path)?;
            let out = args.out.clone().unwrap_or_else(|| manifest.output.clone());
            (
                load_run(&manifest.inputs)?,
                args.config.apply(manifest.config),
                out,
            )
        }
        None => {
            let out = args.out.clone().ok_or_else(|| {
                Error::Argument("--out is required without --from-manifest".into())
            })?;
            (
                load_run(&args.inputs.to_manifest_inputs()?)?,
                args.config.apply(TransferConfig::default()),
                out,
            )
        }
    };
    let outcome = run_transfer(
        &run.net,
        &run.before,
        &run.reference,
        &run.transfer_inputs(),
        &cfg,
    )?;
    for w in &outcome.trace.warnings {
        eprintln!("warning: {w}");
    }
    imageio::save_image(&outcome.image, &out)?;
    if let Some(path) = &args.trace {
        std::fs::write(path, outcome.trace.to_table()).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
    }
    if let Some(path) = &args.manifest {
        let manifest =
            RunManifest::from_trace(cfg, run.manifest_inputs.clone(), out.clone(), &outcome.trace)?;
        save_manifest(&manifest, path)?;
    }
    if let Some(last) = outcome.trace.rows.last() {
        println!("final total {:.12e} after {} iterations", last.total, outcome.trace.rows.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Filesystem-safe rendering of a sweep value (0.5 -> "0p5").
fn value_slug(v: f64) -> String {
    format!("{v}").replace('.', "p").replace('-', "m")
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let param: SweepParam = args.param.parse()?;
    let run = load_run(&args.inputs.to_manifest_inputs()?)?;
    let cfg = args.config.apply(TransferConfig::default());
    let runs = lightness_sweep(
        &run.net,
        &run.before,
        &run.reference,
        &run.transfer_inputs(),
        &cfg,
        param,
        &args.values,
    )?;
    std::fs::create_dir_all(&args.out_dir).map_err(|source| Error::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    let mut summary = format!("# {param} swept-term-loss output\n");
    for sweep_run in &runs {
        let name = format!("sweep-{param}-{}.png", value_slug(sweep_run.value));
        let path = args.out_dir.join(&name);
        imageio::save_image(&sweep_run.image, &path)?;
        summary.push_str(&format!(
            "{} {:.12e} {name}\n",
            sweep_run.value, sweep_run.term_value
        ));
        println!(
            "{param} = {}: swept-term loss {:.6e} -> {}",
            sweep_run.value,
            sweep_run.term_value,
            path.display()
        );
    }
    let summary_path = args.out_dir.join("summary.txt");
    std::fs::write(&summary_path, summary).map_err(|source| Error::Io {
        path: summary_path,
        source,
    })?;
    Ok(())
}

fn cmd_recommend(args: RecommendArgs) -> Result<()> {
    let index = recommend::load_index(&args.index)?;
    let text = std::fs::read_to_string(&args.query).map_err(|source| Error::Io {
        path: args.query.clone(),
        source,
    })?;
    // accept the index record format, with the id optional for queries
    let patched = patch_query_id(text.trim());
    let query = recommend::parse_record(&patched).map_err(|detail| Error::Parse {
        path: args.query.clone(),
        detail,
    })?;
    for (id, dist) in recommend::knn_query(&index, &query.vector, args.k)? {
        println!("{id}\t{dist:.12e}");
    }
    Ok(())
}

fn patch_query_id(text: &str) -> String {
    if text.contains("\"id\"") {
        text.to_string()
    } else if let Some(rest) = text.trim_start().strip_prefix('{') {
        format!("{{\"id\":\"query\",{rest}")
    } else {
        text.to_string()
    }
}

fn cmd_parse(cmd: ParseCommand) -> Result<()> {
    match cmd {
        ParseCommand::Symmetrize { confidence, out } => {
            let conf = imageio::load_confidence(&confidence)?;
            imageio::save_confidence(&symmetrize_confidence(&conf), &out)?;
            println!("wrote {}", out.display());
        }
        ParseCommand::EvalLoss {
            confidence,
            truth,
            softmax,
            uniform_weights,
        } => {
            let conf = imageio::load_confidence(&confidence)?;
            let truth = imageio::load_labelmap(&truth)?;
            let weights = if uniform_weights {
                LabelWeights::uniform()
            } else {
                LabelWeights::defaults()
            };
            let eval = weighted_cross_entropy(&conf, &truth, &weights, softmax)?;
            if eval.clamped {
                eprintln!("warning: zero probabilities clamped during the loss");
            }
            println!("loss {:.12e}", eval.loss);
        }
        ParseCommand::ToMask {
            labels,
            confidence,
            ids,
            out,
        } => {
            let labelmap = match (labels, confidence) {
                (Some(path), None) => imageio::load_labelmap(&path)?,
                (None, Some(path)) => argmax_labels(&imageio::load_confidence(&path)?)?,
                _ => {
                    return Err(Error::Argument(
                        "exactly one of --labels or --confidence must be given".into(),
                    ))
                }
            };
            if ids.is_empty() {
                return Err(Error::Argument("--ids must list at least one label".into()));
            }
            let wanted: BTreeSet<u8> = ids.into_iter().collect();
            let mask = labels_to_mask(&labelmap, &wanted)?;
            imageio::save_mask(&mask, &out)?;
            println!("wrote {} ({} pixels on)", out.display(), mask.count());
        }
    }
    Ok(())
}

fn cmd_selfcheck(args: SelfcheckArgs) -> Result<ExitCode> {
    let net = args.network.as_deref().map(load_network).transpose()?;
    let results = selfcheck::run_all(net.as_ref());
    let mut failed = 0usize;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed}/{} checks failed", results.len());
        return Ok(ExitCode::from(3));
    }
    println!("all {} checks passed", results.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_network(args: GenNetworkArgs) -> Result<()> {
    let template = match args.template.as_str() {
        "default" => {
            let mut t = NetworkTemplate::desk_default();
            t.input_channels = args.channels;
            t
        }
        "tiny" => NetworkTemplate::tiny(args.channels),
        other => {
            return Err(Error::Argument(format!(
                "unknown template '{other}' (expected 'default' or 'tiny')"
            )))
        }
    };
    let net = random_network(&template, args.seed)?;
    save_network(&net, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
