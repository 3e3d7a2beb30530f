//! `lipcert` — command-line entry point wiring datasets, architectures,
//! training, certification, attacks, constructions, and the theory
//! verification suites into reproducible jobs.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, bad config, missing
//! files), 2 runtime error (e.g. non-finite loss abort), 3 verification
//! failure (a theory suite or construction check did not hold).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lipcert::certify::{evaluate, PgdConfig};
use lipcert::constructions::{
    batcher_schedule, boolean_to_linf_net, boolean_to_maxmin_net, build_pair_set,
    groupsort_to_sortnet, impossibility_witness, linfnet_to_sortnet, maxmin_order_statistic_net,
    maxmin_sorting_net, order_statistic_linf_net, tight_linear_orderstat, tight_symmetric_net,
    verify_sum_inequality, BooleanFunction, SymmetricBooleanFunction, WitnessKind,
};
use lipcert::data::{gen_boolean_dataset, load_mnist, normalize, BooleanMode, LabeledDataset};
use lipcert::network::eval::{forward, EvalOpts, MaskPlan};
use lipcert::network::io as model_io;
use lipcert::numeric::l1_norm;
use lipcert::training::{fit, metrics_csv, ntk_init, TrainConfig};
use lipcert::{ActKind, Error, Layer, Network, RandomSource, SortWeights, Tensor};

// ---------------------------------------------------------------------------
// Exit-code mapping
// ---------------------------------------------------------------------------

/// Command failures, grouped by the exit code they map to.
enum Failure {
    /// Bad invocation or bad input files → exit 1.
    Usage(String),
    /// The job itself failed (e.g. training diverged) → exit 2.
    Runtime(String),
    /// A theory/construction check did not hold → exit 3.
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            // Problems with what the user supplied: flags, config files,
            // dataset/model files.
            Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::Io { .. }
            | Error::BadIdxMagic { .. }
            | Error::BadMagic(_)
            | Error::UnsupportedVersion(..)
            | Error::Truncated { .. }
            | Error::CountMismatch { .. } => Failure::Usage(e.to_string()),
            // Everything else happened while the job ran.
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Print a line to stdout, ignoring broken-pipe errors (e.g. `… | head`).
fn say(msg: impl std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{msg}");
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

// ---------------------------------------------------------------------------
// CLI surface
// ---------------------------------------------------------------------------

/// Train, certify, attack, and verify ℓ∞-Lipschitz networks.
#[derive(Parser)]
#[command(name = "lipcert", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Certify a trained model's robust accuracy at a given radius.
    Certify(EvalArgs),
    /// Run a PGD attack against a trained model.
    Attack(AttackArgs),
    /// Build one of the constructive networks and verify it.
    Construct(ConstructArgs),
    /// Run the executable theory suites.
    VerifyTheory(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to a JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed (single randomness root for the run).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file produced by `train` or `construct`.
    #[arg(long)]
    model: PathBuf,
    /// Path to a JSON dataset descriptor.
    #[arg(long)]
    dataset: PathBuf,
    /// Perturbation radius in raw input units (rescaled by the dataset's
    /// normalization std, if any).
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    /// Where to write the per-sample report CSV.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Truncation order for SortNet order-statistic weights (default exact).
    #[arg(long)]
    k_trunc: Option<usize>,
    /// Randomness root.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// PGD iteration count.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// PGD step size (default ε/25).
    #[arg(long)]
    step_size: Option<f64>,
    /// Number of random restarts.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConstructKind {
    /// Two-layer net computing a Boolean function exactly on {0,1}^d.
    Boolean,
    /// Net computing the k-th largest input coordinate.
    Orderstat,
    /// MaxMin sorting network (descending) on a declared box.
    Sortingnet,
    /// Margin-1/d classifier for a symmetric Boolean dataset.
    TightSymmetric,
    /// Best-possible linear order-statistic approximator.
    TightLinear,
    /// Convert a GroupSort/MaxMin or ℓ∞-distance model to a SortNet.
    Convert,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConstructFamily {
    /// ℓ∞-distance layers.
    Linf,
    /// Constrained affine + MaxMin layers.
    Maxmin,
}

#[derive(Args)]
struct ConstructArgs {
    #[arg(long, value_enum)]
    kind: ConstructKind,
    /// Input dimension (Boolean arity / number of wires).
    #[arg(long)]
    d: Option<usize>,
    /// Order-statistic rank (1 = largest).
    #[arg(long)]
    k: Option<usize>,
    /// Builtin Boolean function: and, or, xor, parity, majority, threshold-T.
    #[arg(long)]
    builtin: Option<String>,
    /// Truth-table text file (a length-2^d string of 0/1 characters).
    #[arg(long)]
    table: Option<PathBuf>,
    /// Architecture family for boolean/orderstat constructions.
    #[arg(long, value_enum, default_value_t = ConstructFamily::Linf)]
    family: ConstructFamily,
    /// Half-width B of the declared input box [−B, B]^d (orderstat,
    /// sortingnet, convert).
    #[arg(long, default_value_t = 1.0)]
    bound: f64,
    /// Source model for `--kind convert`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Where to write the constructed model file.
    #[arg(long)]
    output: Option<PathBuf>,
    /// For scalar Boolean constructions: append a constrained affine layer
    /// mapping f ↦ (1 − f, f), turning the net into a margin-1 two-logit
    /// classifier usable with `certify`/`attack`.
    #[arg(long, default_value_t = false)]
    logits: bool,
    /// Randomness root for sampled verification.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    All,
    Props,
    Impossibility,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
    /// Randomness root for the sampled checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Testing hook: sabotage the named check (e.g. flip a constructed
    /// weight sign) to confirm the suite detects and names the broken op.
    #[arg(long)]
    inject_bug: Option<String>,
}

// ---------------------------------------------------------------------------
// Run configuration (JSON, lossless round-trip, unknown keys rejected)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    train: TrainConfig,
    architecture: ArchSpec,
    dataset: DatasetSpec,
    output: OutputSpec,
}

/// Architecture descriptor. `widths` lists hidden-layer widths; an output
/// layer matching the dataset's class count is appended automatically.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
enum ArchSpec {
    /// Stack of SortNet layers with geometric weights.
    Sortnet {
        widths: Vec<usize>,
        rho: f64,
        #[serde(default)]
        batch_norm: bool,
    },
    /// SortNet backbone plus a two-layer tanh MLP head trained with IBP.
    SortnetMlp {
        widths: Vec<usize>,
        rho: f64,
        #[serde(default)]
        batch_norm: bool,
        head_hidden: usize,
    },
    /// Stack of ℓ∞-distance layers.
    LinfNet { widths: Vec<usize> },
    /// Constrained affine layers with an elementwise activation
    /// (relu | tanh | abs | identity) or the maxmin pair sort.
    Standard {
        widths: Vec<usize>,
        activation: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum DatasetSpec {
    Mnist {
        images: String,
        labels: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normalize: Option<NormSpec>,
        /// Keep only the first N samples (desk-scale runs).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
    Boolean {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        builtin: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        table: Option<String>,
        #[serde(default)]
        mode: ModeSpec,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormSpec {
    mean: f64,
    std: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeSpec {
    /// All 2^d Boolean points.
    #[default]
    Full,
    /// The ≤ d+1 points 0, e₁, e₁+e₂, ….
    Compact,
    /// The adjacent-level slices S_p ∪ S_q.
    Levels { p: usize, q: usize },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSpec {
    model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metrics: Option<String>,
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("config error in {}: {e}", path.display())))
}

fn read_dataset_spec(path: &Path) -> Result<DatasetSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        usage(format!(
            "cannot read dataset descriptor {}: {e}",
            path.display()
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| {
        usage(format!(
            "dataset descriptor error in {}: {e}",
            path.display()
        ))
    })
}

fn load_dataset(spec: &DatasetSpec) -> Result<LabeledDataset, Failure> {
    match spec {
        DatasetSpec::Mnist {
            images,
            labels,
            normalize: norm,
            limit,
        } => {
            let mut ds = load_mnist(Path::new(images), Path::new(labels))?;
            if let Some(n) = limit {
                if *n == 0 {
                    return Err(usage("dataset limit must be positive"));
                }
                ds.inputs.truncate(*n);
                ds.labels.truncate(*n);
            }
            if let Some(n) = norm {
                normalize(&mut ds, n.mean, n.std)?;
            }
            Ok(ds)
        }
        DatasetSpec::Boolean {
            builtin,
            d,
            table,
            mode,
        } => {
            let f = boolean_from_parts(builtin.as_deref(), *d, table.as_deref().map(Path::new))?;
            let mode = match mode {
                ModeSpec::Full => BooleanMode::Full,
                ModeSpec::Compact => BooleanMode::Compact,
                ModeSpec::Levels { p, q } => BooleanMode::Levels { p: *p, q: *q },
            };
            Ok(gen_boolean_dataset(&f, mode)?)
        }
    }
}

fn boolean_from_parts(
    builtin: Option<&str>,
    d: Option<usize>,
    table: Option<&Path>,
) -> Result<BooleanFunction, Failure> {
    match (builtin, table) {
        (Some(name), None) => {
            let d = d.ok_or_else(|| usage("--d is required with a builtin function"))?;
            Ok(BooleanFunction::builtin(name, d)?)
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read table {}: {e}", path.display())))?;
            Ok(BooleanFunction::from_text(text.trim())?)
        }
        _ => Err(usage(
            "specify exactly one of a builtin function name or a truth-table file",
        )),
    }
}

// ---------------------------------------------------------------------------
// Architecture building
// ---------------------------------------------------------------------------

fn build_network(
    arch: &ArchSpec,
    input_dim: usize,
    num_classes: usize,
    value_range: (f64, f64),
) -> Result<Network, Failure> {
    let check_widths = |w: &[usize]| -> Result<(), Failure> {
        if w.iter().any(|&x| x == 0) {
            Err(usage("layer widths must be positive"))
        } else {
            Ok(())
        }
    };
    let net = match arch {
        ArchSpec::Sortnet {
            widths,
            rho,
            batch_norm,
        } => {
            check_widths(widths)?;
            check_rho(*rho)?;
            let mut layers = Vec::new();
            let mut prev = input_dim;
            for &w in widths {
                layers.push(sort_layer(w, prev, *rho));
                if *batch_norm {
                    layers.push(Layer::MeanShiftBn {
                        dim: w,
                        running_mean: None,
                    });
                }
                prev = w;
            }
            layers.push(sort_layer(num_classes, prev, *rho));
            Network::new(input_dim, layers)
        }
        ArchSpec::SortnetMlp {
            widths,
            rho,
            batch_norm,
            head_hidden,
        } => {
            check_widths(widths)?;
            check_rho(*rho)?;
            if widths.is_empty() || *head_hidden == 0 {
                return Err(usage("sortnet-mlp needs backbone widths and a head width"));
            }
            let mut layers = Vec::new();
            let mut prev = input_dim;
            for &w in widths {
                layers.push(sort_layer(w, prev, *rho));
                if *batch_norm {
                    layers.push(Layer::MeanShiftBn {
                        dim: w,
                        running_mean: None,
                    });
                }
                prev = w;
            }
            let split = layers.len();
            layers.push(Layer::Affine {
                weight: Tensor::zeros(*head_hidden, prev),
                bias: vec![0.0; *head_hidden],
                constrained: false,
            });
            layers.push(Layer::Activation {
                kind: ActKind::Tanh,
            });
            layers.push(Layer::Affine {
                weight: Tensor::zeros(num_classes, *head_hidden),
                bias: vec![0.0; num_classes],
                constrained: false,
            });
            Network::new(input_dim, layers).with_head_split(split)
        }
        ArchSpec::LinfNet { widths } => {
            check_widths(widths)?;
            let mut layers = Vec::new();
            let mut prev = input_dim;
            for &w in widths.iter().chain(std::iter::once(&num_classes)) {
                layers.push(Layer::LinfDist {
                    weight: Tensor::zeros(w, prev),
                    bias: vec![0.0; w],
                });
                prev = w;
            }
            Network::new(input_dim, layers)
        }
        ArchSpec::Standard { widths, activation } => {
            check_widths(widths)?;
            let act = match activation.as_str() {
                "relu" => Some(ActKind::Relu),
                "tanh" => Some(ActKind::Tanh),
                "abs" => Some(ActKind::Abs),
                "identity" => Some(ActKind::Identity),
                "maxmin" => None,
                other => {
                    return Err(usage(format!(
                        "unknown activation {other:?} (relu|tanh|abs|identity|maxmin)"
                    )))
                }
            };
            let mut layers = Vec::new();
            let mut prev = input_dim;
            for &w in widths {
                layers.push(Layer::Affine {
                    weight: Tensor::zeros(w, prev),
                    bias: vec![0.0; w],
                    constrained: true,
                });
                match &act {
                    Some(kind) => layers.push(Layer::Activation { kind: kind.clone() }),
                    None => {
                        if w % 2 != 0 {
                            return Err(usage("maxmin activation needs even layer widths"));
                        }
                        layers.push(Layer::MaxMin { group: 2 });
                    }
                }
                prev = w;
            }
            layers.push(Layer::Affine {
                weight: Tensor::zeros(num_classes, prev),
                bias: vec![0.0; num_classes],
                constrained: true,
            });
            Network::new(input_dim, layers)
        }
    };
    let net = net.with_input_range(value_range.0, value_range.1);
    net.out_dim()?;
    Ok(net)
}

fn sort_layer(width: usize, prev: usize, rho: f64) -> Layer {
    Layer::SortNet {
        weights: SortWeights::Geometric { rho },
        bias: Tensor::zeros(width, prev),
        act: ActKind::Abs,
    }
}

fn check_rho(rho: f64) -> Result<(), Failure> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(usage(format!("need 0 ≤ ρ < 1, got {rho}")))
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let mut cfg = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    // Round-trip invariant: the parsed config re-serializes to an equivalent
    // document (checked here so every run exercises it).
    {
        let text = serde_json::to_string(&cfg)
            .map_err(|e| Failure::Runtime(format!("config serialization failed: {e}")))?;
        let back: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::Runtime(format!("config round-trip failed: {e}")))?;
        let again = serde_json::to_string(&back)
            .map_err(|e| Failure::Runtime(format!("config serialization failed: {e}")))?;
        if text != again {
            return Err(Failure::Runtime("config round-trip is lossy".into()));
        }
    }
    // Models with an MLP head can only certify through interval bounds, so
    // they must also train with the IBP hinge.
    if matches!(cfg.architecture, ArchSpec::SortnetMlp { .. }) && !cfg.train.use_ibp {
        cfg.train.use_ibp = true;
        eprintln!("note: sortnet-mlp architectures train with the IBP hinge; enabling use_ibp");
    }
    cfg.train.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let mut net = build_network(&cfg.architecture, ds.dim, ds.num_classes, ds.value_range)?;
    ntk_init(&mut net, &RandomSource::new(cfg.train.seed));
    let metrics = fit(&mut net, &ds, &cfg.train)?;
    model_io::save(&net, Path::new(&cfg.output.model))?;
    if let Some(path) = &cfg.output.metrics {
        std::fs::write(path, metrics_csv(&metrics)).map_err(|e| Error::io(path.clone(), e))?;
    }
    // Report the exact (deterministic) clean accuracy of the saved model.
    let report = evaluate(
        &net,
        &ds,
        0.0,
        None,
        &RandomSource::new(cfg.train.seed),
        None,
    )?;
    say(format!(
        "trained {} epochs; final clean accuracy {:.4}",
        metrics.len(),
        report.clean_accuracy
    ));
    say(format!("model written to {}", cfg.output.model));
    Ok(())
}

// ---------------------------------------------------------------------------
// certify / attack
// ---------------------------------------------------------------------------

/// Effective radius in model input units: raw ε divided by the dataset's
/// normalization std, if any.
fn effective_eps(eps: f64, ds: &LabeledDataset) -> Result<f64, Failure> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(usage(format!("perturbation radius must be ≥ 0, got {eps}")));
    }
    Ok(match ds.normalization {
        Some((_, std)) => eps / std,
        None => eps,
    })
}

/// Certification needs either a fully Lipschitz network (margin bound) or an
/// MLP head that interval propagation supports.
fn check_certifiable(net: &Network) -> Result<(), Failure> {
    let Some(split) = net.head_split else {
        return Ok(());
    };
    let head = &net.layers[split..];
    let supported = head.iter().all(|l| {
        matches!(
            l,
            Layer::Affine { .. }
                | Layer::Activation {
                    kind: ActKind::Identity | ActKind::Relu | ActKind::Tanh,
                }
        )
    });
    let ends_affine = matches!(head.last(), Some(Layer::Affine { .. }));
    if !supported || !ends_affine {
        return Err(usage(
            "uncertifiable: the model head has no Lipschitz bound and is not \
             supported by interval propagation (need affine/monotone layers \
             ending in an affine layer)",
        ));
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, pgd: Option<PgdConfig>) -> CmdResult {
    let net = model_io::load(&args.model)?;
    let spec = read_dataset_spec(&args.dataset)?;
    let ds = load_dataset(&spec)?;
    if ds.dim != net.input_dim {
        return Err(usage(format!(
            "dataset dimension {} does not match model input dimension {}",
            ds.dim, net.input_dim
        )));
    }
    check_certifiable(&net)?;
    let eps = effective_eps(args.eps, &ds)?;
    let src = RandomSource::new(args.seed);
    let report = evaluate(&net, &ds, eps, pgd.as_ref(), &src, args.k_trunc)?;
    if let Some(path) = &args.output {
        std::fs::write(path, report.to_csv())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    say(report.summary());
    Ok(())
}

fn cmd_certify(args: &EvalArgs) -> CmdResult {
    cmd_eval(args, None)
}

fn cmd_attack(args: &AttackArgs) -> CmdResult {
    if args.steps == 0 || args.restarts == 0 {
        return Err(usage("attack needs at least one step and one restart"));
    }
    let pgd = PgdConfig {
        steps: args.steps,
        step_size: args.step_size,
        restarts: args.restarts,
        k_trunc: args.eval.k_trunc,
    };
    cmd_eval(&args.eval, Some(pgd))
}

// ---------------------------------------------------------------------------
// construct
// ---------------------------------------------------------------------------

fn cmd_construct(args: &ConstructArgs) -> CmdResult {
    if args.logits && args.kind != ConstructKind::Boolean {
        return Err(usage("--logits applies only to --kind boolean"));
    }
    let (net, summary) = match args.kind {
        ConstructKind::Boolean => construct_boolean(args)?,
        ConstructKind::Orderstat => construct_orderstat(args)?,
        ConstructKind::Sortingnet => construct_sortingnet(args)?,
        ConstructKind::TightSymmetric => construct_tight_symmetric(args)?,
        ConstructKind::TightLinear => construct_tight_linear(args)?,
        ConstructKind::Convert => construct_convert(args)?,
    };
    if let Some(path) = &args.output {
        model_io::save(&net, path)?;
        say(format!("{summary}; model written to {}", path.display()));
    } else {
        say(&summary);
    }
    Ok(())
}

fn require_d(args: &ConstructArgs) -> Result<usize, Failure> {
    args.d
        .ok_or_else(|| usage("--d is required for this construction"))
}

fn require_k(args: &ConstructArgs) -> Result<usize, Failure> {
    args.k
        .ok_or_else(|| usage("--k is required for this construction"))
}

fn scalar_out(net: &Network, x: &[f64]) -> Result<f64, Failure> {
    let cache = forward(net, x, &EvalOpts::exact())?;
    Ok(cache.output()[0])
}

fn bits_to_input(bits: usize, d: usize) -> Vec<f64> {
    (0..d).map(|i| ((bits >> i) & 1) as f64).collect()
}

fn kth_largest(x: &[f64], k: usize) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[k - 1]
}

fn construct_boolean(args: &ConstructArgs) -> Result<(Network, String), Failure> {
    let f = boolean_from_parts(args.builtin.as_deref(), args.d, args.table.as_deref())?;
    let d = f.arity();
    if d > 16 {
        return Err(usage("exhaustive Boolean verification supports d ≤ 16"));
    }
    let net = match args.family {
        ConstructFamily::Linf => boolean_to_linf_net(&f)?,
        ConstructFamily::Maxmin => boolean_to_maxmin_net(&f)?,
    };
    let total = 1usize << d;
    for bits in 0..total {
        let x = bits_to_input(bits, d);
        let out = scalar_out(&net, &x)?;
        let want = f.eval_bits(bits) as f64;
        if (out - want).abs() > 1e-9 {
            return Err(Failure::Verification(format!(
                "boolean construction failed at input {bits:0d$b}: got {out}, want {want}",
            )));
        }
    }
    let net = if args.logits {
        let mut wrapped = net;
        wrapped.layers.push(Layer::Affine {
            weight: Tensor::from_rows(&[vec![-1.0], vec![1.0]]),
            bias: vec![1.0, 0.0],
            constrained: true,
        });
        wrapped
    } else {
        net
    };
    Ok((net, format!("net verified on {total}/{total} inputs")))
}

fn construct_orderstat(args: &ConstructArgs) -> Result<(Network, String), Failure> {
    let d = require_d(args)?;
    let k = require_k(args)?;
    let b = args.bound;
    if !(b > 0.0) || !b.is_finite() {
        return Err(usage("--bound must be positive and finite"));
    }
    let net = match args.family {
        ConstructFamily::Linf => order_statistic_linf_net(d, k, b)?,
        ConstructFamily::Maxmin => maxmin_order_statistic_net(d, k, -b, b)?,
    };
    if d > 20 {
        return Err(usage("exhaustive binary verification supports d ≤ 20"));
    }
    for bits in 0..1usize << d {
        let x = bits_to_input(bits, d);
        let out = scalar_out(&net, &x)?;
        let want = kth_largest(&x, k);
        if (out - want).abs() > 1e-9 {
            return Err(Failure::Verification(format!(
                "order-statistic net failed on binary input {bits:b}: got {out}, want {want}"
            )));
        }
    }
    let src = RandomSource::new(args.seed);
    let mut s = src.stream(&[0xC057, 0]);
    let samples = 10_000;
    for i in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| s.uniform(-b, b)).collect();
        let out = scalar_out(&net, &x)?;
        let want = kth_largest(&x, k);
        if (out - want).abs() > 1e-9 {
            return Err(Failure::Verification(format!(
                "order-statistic net failed on random sample {i}: got {out}, want {want}"
            )));
        }
    }
    Ok((
        net,
        format!(
            "verified on {} binary and {samples} random inputs",
            1usize << d
        ),
    ))
}

fn construct_sortingnet(args: &ConstructArgs) -> Result<(Network, String), Failure> {
    let d = require_d(args)?;
    if d > 16 {
        return Err(usage("0-1 verification supports d ≤ 16"));
    }
    let b = args.bound;
    let (net, perm) = maxmin_sorting_net(d, -b, b)?;
    let schedule = batcher_schedule(d);
    let depth = schedule.len();
    let comparators: usize = schedule.iter().map(|s| s.len()).sum();
    // 0-1 principle: a comparator network sorting every binary sequence
    // sorts every real sequence.
    for bits in 0..1usize << d {
        let x = bits_to_input(bits, d);
        let cache = forward(&net, &x, &EvalOpts::exact())?;
        let out = cache.output();
        let mut want: Vec<f64> = x.clone();
        want.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (r, &w) in perm.iter().zip(&want) {
            if (out[*r] - w).abs() > 1e-12 {
                return Err(Failure::Verification(format!(
                    "sorting network failed the 0-1 check on input {bits:b}"
                )));
            }
        }
    }
    Ok((
        net,
        format!("depth {depth}, {comparators} comparators, 0-1 verified"),
    ))
}

fn symmetric_from_parts(args: &ConstructArgs) -> Result<SymmetricBooleanFunction, Failure> {
    let f = boolean_from_parts(args.builtin.as_deref(), args.d, args.table.as_deref())?;
    Ok(f.to_symmetric()?)
}

fn construct_tight_symmetric(args: &ConstructArgs) -> Result<(Network, String), Failure> {
    let g = symmetric_from_parts(args)?;
    let d = g.arity();
    if d > 16 {
        return Err(usage("exhaustive margin verification supports d ≤ 16"));
    }
    let net = tight_symmetric_net(&g)?;
    let target = 1.0 / d as f64;
    for bits in 0..1usize << d {
        let x = bits_to_input(bits, d);
        let y = g.eval_ones(bits.count_ones() as usize) as usize;
        let cache = forward(&net, &x, &EvalOpts::exact())?;
        let out = cache.output();
        let margin = out[y] - out[1 - y];
        if (margin - target).abs() > 1e-12 {
            return Err(Failure::Verification(format!(
                "tight symmetric net margin {margin} ≠ 1/{d} at input {bits:b}"
            )));
        }
    }
    Ok((
        net,
        format!("margin exactly 1/{d} on all {} inputs", 1usize << d),
    ))
}

fn construct_tight_linear(args: &ConstructArgs) -> Result<(Network, String), Failure> {
    let d = require_d(args)?;
    let k = require_k(args)?;
    let net = tight_linear_orderstat(d, k)?;
    let (_, gap) = impossibility_witness(&net, &WitnessKind::OrderStat { k })?;
    let target = 0.5 - 0.5 / d as f64;
    if (gap - target).abs() > 1e-12 {
        return Err(Failure::Verification(format!(
            "tight linear approximator: max corner error {gap} ≠ 1/2 − 1/2d = {target}"
        )));
    }
    Ok((
        net,
        format!("max Boolean-corner error exactly {target} (= 1/2 − 1/(2·{d}))"),
    ))
}

fn construct_convert(args: &ConstructArgs) -> Result<(Network, String), Failure> {
    let path = args
        .model
        .as_ref()
        .ok_or_else(|| usage("--model is required for --kind convert"))?;
    let source = model_io::load(path)?;
    let all_linf = source
        .layers
        .iter()
        .all(|l| matches!(l, Layer::LinfDist { .. }));
    let converted = if all_linf {
        linfnet_to_sortnet(&source)?
    } else {
        groupsort_to_sortnet(&source, args.bound)?
    };
    let (lo, hi) = source.input_range.unwrap_or((-args.bound, args.bound));
    let src = RandomSource::new(args.seed);
    let mut s = src.stream(&[0xC0E7, 0]);
    let samples = 10_000;
    let mut max_dev = 0.0f64;
    for _ in 0..samples {
        let x: Vec<f64> = (0..source.input_dim).map(|_| s.uniform(lo, hi)).collect();
        let a = forward(&source, &x, &EvalOpts::exact())?;
        let b = forward(&converted, &x, &EvalOpts::exact())?;
        for (u, v) in a.output().iter().zip(b.output()) {
            max_dev = max_dev.max((u - v).abs());
        }
    }
    if max_dev > 1e-9 {
        return Err(Failure::Verification(format!(
            "conversion deviates by {max_dev:.3e} from the source model"
        )));
    }
    Ok((
        converted,
        format!("converted to sortnet; max deviation {max_dev:.2e} on {samples} inputs"),
    ))
}

// ---------------------------------------------------------------------------
// verify-theory
// ---------------------------------------------------------------------------

struct Check {
    name: &'static str,
    suite: Suite,
    run: fn(&RandomSource, bool) -> Result<(), String>,
}

const CHECKS: &[Check] = &[
    Check {
        name: "stochastic-estimator-unbiased",
        suite: Suite::Props,
        run: check_estimator_unbiased,
    },
    Check {
        name: "truncation-bounds",
        suite: Suite::Props,
        run: check_truncation_bounds,
    },
    Check {
        name: "boolean-linf-exhaustive",
        suite: Suite::Props,
        run: check_boolean_linf,
    },
    Check {
        name: "boolean-maxmin-exhaustive",
        suite: Suite::Props,
        run: check_boolean_maxmin,
    },
    Check {
        name: "order-statistic-nets",
        suite: Suite::Props,
        run: check_order_statistics,
    },
    Check {
        name: "sorting-network-zero-one",
        suite: Suite::Props,
        run: check_sorting_network,
    },
    Check {
        name: "symmetric-tight-margins",
        suite: Suite::Props,
        run: check_tight_margins,
    },
    Check {
        name: "conversions-exact",
        suite: Suite::Props,
        run: check_conversions,
    },
    Check {
        name: "sum-inequality",
        suite: Suite::Props,
        run: check_sum_inequality,
    },
    Check {
        name: "pairset-invariant",
        suite: Suite::Impossibility,
        run: check_pairset,
    },
    Check {
        name: "tight-linear-floor",
        suite: Suite::Impossibility,
        run: check_tight_linear_floor,
    },
    Check {
        name: "standard-margin-cap",
        suite: Suite::Impossibility,
        run: check_margin_cap,
    },
    Check {
        name: "maxmin-shallow-gap",
        suite: Suite::Impossibility,
        run: check_maxmin_gap,
    },
];

fn cmd_verify_theory(args: &VerifyArgs) -> CmdResult {
    let src = RandomSource::new(args.seed);
    if let Some(name) = &args.inject_bug {
        if !CHECKS.iter().any(|c| c.name == name.as_str()) {
            return Err(usage(format!(
                "unknown check name {name:?} for --inject-bug"
            )));
        }
    }
    let mut failures = Vec::new();
    for check in CHECKS {
        let selected = match args.suite {
            Suite::All => true,
            s => check.suite == s,
        };
        if !selected {
            continue;
        }
        let sabotage = args.inject_bug.as_deref() == Some(check.name);
        match (check.run)(&src, sabotage) {
            Ok(()) => say(format!("PASS {}", check.name)),
            Err(msg) => {
                say(format!("FAIL {}: {msg}", check.name));
                failures.push(check.name);
            }
        }
    }
    if failures.is_empty() {
        say("all checks passed");
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "{} check(s) failed: {}",
            failures.len(),
            failures.join(", ")
        )))
    }
}

fn err_at(check: &str, detail: impl std::fmt::Display) -> String {
    format!("{check}: {detail}")
}

/// Single geometric SortNet neuron used by the estimator checks.
fn single_sort_neuron(d: usize, rho: f64, bias: Vec<f64>) -> Network {
    Network::new(
        d,
        vec![Layer::SortNet {
            weights: SortWeights::Geometric { rho },
            bias: Tensor::from_data(1, d, bias),
            act: ActKind::Abs,
        }],
    )
}

/// Exhaustive-mask expectation of the Bernoulli-max estimator equals the
/// exact geometric-weight neuron output.
fn check_estimator_unbiased(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 1]);
    for trial in 0..60 {
        let d = 2 + s.next_index(7); // d ≤ 8
        let rho = s.uniform(0.0, 0.9);
        let bias: Vec<f64> = (0..d).map(|_| s.uniform(-1.0, 1.0)).collect();
        let net = single_sort_neuron(d, rho, bias);
        let x: Vec<f64> = (0..d).map(|_| s.uniform(0.0, 2.0)).collect();
        let exact = forward(&net, &x, &EvalOpts::exact())
            .map_err(|e| err_at("exact forward", e))?
            .output()[0];
        let mut expectation = 0.0;
        for maskbits in 0..1usize << d {
            let mask: Vec<bool> = (0..d).map(|i| (maskbits >> i) & 1 == 1).collect();
            let prob: f64 = mask
                .iter()
                .map(|&keep| if keep { 1.0 - rho } else { rho })
                .product();
            let plan = MaskPlan {
                masks: vec![Some(mask)],
            };
            let opts = EvalOpts {
                mask: Some(&plan),
                ..EvalOpts::exact()
            };
            let out = forward(&net, &x, &opts)
                .map_err(|e| err_at("stochastic forward", e))?
                .output()[0];
            expectation += prob * out;
        }
        let scale = exact.abs().max(1.0);
        if (expectation - exact).abs() > 1e-9 * scale {
            return Err(format!(
                "trial {trial}: mask expectation {expectation} ≠ exact {exact} (d={d}, ρ={rho})"
            ));
        }
    }
    Ok(())
}

/// 0 ≤ exact − truncated ≤ ρ^k·‖σ(x+b)‖∞, and the reported deficit bound
/// dominates the realized deficit.
fn check_truncation_bounds(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 2]);
    for trial in 0..2000 {
        let d = 2 + s.next_index(11); // d ≤ 12
        let rho = s.uniform(0.05, 0.9);
        let k = 1 + s.next_index(12);
        let bias: Vec<f64> = (0..d).map(|_| s.uniform(-1.0, 1.0)).collect();
        let net = single_sort_neuron(d, rho, bias.clone());
        let x: Vec<f64> = (0..d).map(|_| s.uniform(-2.0, 2.0)).collect();
        let full = forward(&net, &x, &EvalOpts::exact())
            .map_err(|e| err_at("exact forward", e))?
            .output()[0];
        let cache = forward(&net, &x, &EvalOpts::exact_truncated(k))
            .map_err(|e| err_at("truncated forward", e))?;
        let trunc = cache.output()[0];
        let deficit = full - trunc;
        let act_max = x
            .iter()
            .zip(&bias)
            .map(|(xi, bi)| (xi + bi).abs())
            .fold(0.0f64, f64::max);
        let bound = rho.powi(k as i32) * act_max;
        if deficit < -1e-12 {
            return Err(format!(
                "trial {trial}: truncated value exceeds exact by {}",
                -deficit
            ));
        }
        if deficit > bound + 1e-12 {
            return Err(format!(
                "trial {trial}: deficit {deficit} exceeds ρ^k·‖σ(x+b)‖∞ = {bound}"
            ));
        }
        if deficit > cache.trunc_err + 1e-12 {
            return Err(format!(
                "trial {trial}: deficit {deficit} exceeds the reported bound {}",
                cache.trunc_err
            ));
        }
    }
    Ok(())
}

fn verify_boolean_net(f: &BooleanFunction, net: &Network, label: &str) -> Result<(), String> {
    let d = f.arity();
    for bits in 0..1usize << d {
        let x = bits_to_input(bits, d);
        let out = forward(net, &x, &EvalOpts::exact())
            .map_err(|e| err_at(label, e))?
            .output()[0];
        let want = f.eval_bits(bits) as f64;
        if (out - want).abs() > 1e-9 {
            return Err(format!(
                "{label} disagrees at input {bits:b}: got {out}, want {want}"
            ));
        }
    }
    Ok(())
}

fn random_table(s: &mut lipcert::rng::Stream, d: usize) -> BooleanFunction {
    let table: Vec<u8> = (0..1usize << d).map(|_| s.next_index(2) as u8).collect();
    BooleanFunction::from_table(d, table).expect("valid table")
}

/// Every Boolean function is represented exactly by the two-layer
/// ℓ∞-distance construction (all 256 at d=3, sampled at d=8).
fn check_boolean_linf(src: &RandomSource, sabotage: bool) -> Result<(), String> {
    for t in 0..256usize {
        let f = BooleanFunction::from_table(3, (0..8).map(|i| ((t >> i) & 1) as u8).collect())
            .expect("valid table");
        let mut net = boolean_to_linf_net(&f).map_err(|e| err_at("construction", e))?;
        if sabotage && t == 7 {
            // Deliberate mutation: flip the OR layer's bias sign.
            if let Layer::LinfDist { bias, .. } = &mut net.layers[1] {
                bias[0] = -bias[0];
            }
        }
        verify_boolean_net(&f, &net, "ℓ∞-net")?;
    }
    let mut s = src.stream(&[0x7E57, 3]);
    for _ in 0..100 {
        let f = random_table(&mut s, 8);
        let net = boolean_to_linf_net(&f).map_err(|e| err_at("construction", e))?;
        verify_boolean_net(&f, &net, "ℓ∞-net")?;
    }
    Ok(())
}

/// Same representation result for the deep MaxMin construction.
fn check_boolean_maxmin(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    for t in 0..256usize {
        let f = BooleanFunction::from_table(3, (0..8).map(|i| ((t >> i) & 1) as u8).collect())
            .expect("valid table");
        let net = boolean_to_maxmin_net(&f).map_err(|e| err_at("construction", e))?;
        verify_boolean_net(&f, &net, "maxmin net")?;
    }
    let mut s = src.stream(&[0x7E57, 4]);
    for _ in 0..50 {
        let f = random_table(&mut s, 8);
        let net = boolean_to_maxmin_net(&f).map_err(|e| err_at("construction", e))?;
        verify_boolean_net(&f, &net, "maxmin net")?;
    }
    Ok(())
}

/// Constructed order-statistic nets match the sort oracle exactly, both on
/// all binary inputs and on random real inputs.
fn check_order_statistics(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 5]);
    for d in 2..=8usize {
        let k = 1 + s.next_index(d);
        let linf = order_statistic_linf_net(d, k, 1.0).map_err(|e| err_at("ℓ∞ build", e))?;
        let maxmin =
            maxmin_order_statistic_net(d, k, -1.0, 1.0).map_err(|e| err_at("maxmin build", e))?;
        for bits in 0..1usize << d {
            let x = bits_to_input(bits, d);
            let want = kth_largest(&x, k);
            for (net, label) in [(&linf, "ℓ∞"), (&maxmin, "maxmin")] {
                let out = forward(net, &x, &EvalOpts::exact())
                    .map_err(|e| err_at(label, e))?
                    .output()[0];
                if (out - want).abs() > 1e-9 {
                    return Err(format!(
                        "{label} order-statistic net (d={d}, k={k}) wrong at {bits:b}: {out} vs {want}"
                    ));
                }
            }
        }
        if d <= 6 {
            for i in 0..2000 {
                let x: Vec<f64> = (0..d).map(|_| s.uniform(-1.0, 1.0)).collect();
                let want = kth_largest(&x, k);
                for (net, label) in [(&linf, "ℓ∞"), (&maxmin, "maxmin")] {
                    let out = forward(net, &x, &EvalOpts::exact())
                        .map_err(|e| err_at(label, e))?
                        .output()[0];
                    if (out - want).abs() > 1e-9 {
                        return Err(format!(
                            "{label} order-statistic net (d={d}, k={k}) wrong on sample {i}"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Batcher MaxMin sorting networks sort every binary input (0-1 principle)
/// and every sampled real input; d = 8 has depth 6 with 19 comparators.
fn check_sorting_network(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 6]);
    for d in 2..=10usize {
        let (net, perm) = maxmin_sorting_net(d, -2.0, 2.0).map_err(|e| err_at("build", e))?;
        for bits in 0..1usize << d {
            let x = bits_to_input(bits, d);
            let cache = forward(&net, &x, &EvalOpts::exact()).map_err(|e| err_at("forward", e))?;
            let mut want = x.clone();
            want.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (r, &w) in perm.iter().zip(&want) {
                if (cache.output()[*r] - w).abs() > 1e-12 {
                    return Err(format!("d={d}: 0-1 check failed on input {bits:b}"));
                }
            }
        }
        for _ in 0..100 {
            let x: Vec<f64> = (0..d).map(|_| s.uniform(-2.0, 2.0)).collect();
            let cache = forward(&net, &x, &EvalOpts::exact()).map_err(|e| err_at("forward", e))?;
            let mut want = x.clone();
            want.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (r, &w) in perm.iter().zip(&want) {
                if (cache.output()[*r] - w).abs() > 1e-12 {
                    return Err(format!("d={d}: real-input sort failed"));
                }
            }
        }
    }
    let schedule = batcher_schedule(8);
    let comparators: usize = schedule.iter().map(|st| st.len()).sum();
    if schedule.len() != 6 || comparators != 19 {
        return Err(format!(
            "d=8 schedule has depth {} and {comparators} comparators (want 6 and 19)",
            schedule.len()
        ));
    }
    Ok(())
}

fn random_symmetric(s: &mut lipcert::rng::Stream, d: usize) -> SymmetricBooleanFunction {
    loop {
        let g: Vec<u8> = (0..=d).map(|_| s.next_index(2) as u8).collect();
        if g.iter().any(|&v| v != g[0]) {
            return SymmetricBooleanFunction::new(g).expect("valid levels");
        }
    }
}

/// The tight standard-family classifier attains margin exactly 1/d on every
/// Boolean input.
fn check_tight_margins(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 7]);
    for d in 2..=8usize {
        for _ in 0..5 {
            let g = random_symmetric(&mut s, d);
            let net = tight_symmetric_net(&g).map_err(|e| err_at("build", e))?;
            let target = 1.0 / d as f64;
            for bits in 0..1usize << d {
                let x = bits_to_input(bits, d);
                let y = g.eval_ones(bits.count_ones() as usize) as usize;
                let out = forward(&net, &x, &EvalOpts::exact())
                    .map_err(|e| err_at("forward", e))?
                    .output()
                    .to_vec();
                let margin = out[y] - out[1 - y];
                if (margin - target).abs() > 1e-12 {
                    return Err(format!("d={d}: margin {margin} ≠ 1/{d} at input {bits:b}"));
                }
            }
        }
    }
    Ok(())
}

fn random_constrained_affine(s: &mut lipcert::rng::Stream, rows: usize, cols: usize) -> Layer {
    let mut w = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        w.push(s.uniform(-1.0, 1.0));
    }
    let mut weight = Tensor::from_data(rows, cols, w);
    for i in 0..rows {
        let norm = l1_norm(weight.row(i));
        if norm > 1.0 {
            for v in weight.row_mut(i) {
                *v /= norm;
            }
        }
    }
    let bias: Vec<f64> = (0..rows).map(|_| s.uniform(-0.5, 0.5)).collect();
    Layer::Affine {
        weight,
        bias,
        constrained: true,
    }
}

fn random_linf_net(s: &mut lipcert::rng::Stream, d: usize, widths: &[usize]) -> Network {
    let mut layers = Vec::new();
    let mut prev = d;
    for &w in widths {
        let mut data = Vec::with_capacity(w * prev);
        for _ in 0..w * prev {
            data.push(s.uniform(-1.5, 1.5));
        }
        layers.push(Layer::LinfDist {
            weight: Tensor::from_data(w, prev, data),
            bias: (0..w).map(|_| s.uniform(-0.5, 0.5)).collect(),
        });
        prev = w;
    }
    Network::new(d, layers)
}

fn random_groupsort_net(
    s: &mut lipcert::rng::Stream,
    d: usize,
    hidden: usize,
    out: usize,
) -> Network {
    Network::new(
        d,
        vec![
            random_constrained_affine(s, hidden, d),
            Layer::MaxMin { group: 2 },
            random_constrained_affine(s, hidden, hidden),
            Layer::MaxMin { group: 2 },
            random_constrained_affine(s, out, hidden),
        ],
    )
    .with_input_range(-2.0, 2.0)
}

/// The GroupSort→SortNet and ℓ∞-net→SortNet conversions are exact on their
/// declared domains.
fn check_conversions(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 8]);
    for trial in 0..20 {
        let d = 2 + s.next_index(4);
        let linf = random_linf_net(&mut s, d, &[5, 3]);
        let conv = linfnet_to_sortnet(&linf).map_err(|e| err_at("ℓ∞ conversion", e))?;
        for i in 0..500 {
            let x: Vec<f64> = (0..d).map(|_| s.uniform(-2.0, 2.0)).collect();
            let a = forward(&linf, &x, &EvalOpts::exact()).map_err(|e| err_at("fwd", e))?;
            let b = forward(&conv, &x, &EvalOpts::exact()).map_err(|e| err_at("fwd", e))?;
            for (u, v) in a.output().iter().zip(b.output()) {
                if (u - v).abs() > 1e-9 {
                    return Err(format!(
                        "ℓ∞ conversion trial {trial} sample {i}: deviation {}",
                        (u - v).abs()
                    ));
                }
            }
        }
        let hidden = 2 * (1 + s.next_index(3));
        let gs = random_groupsort_net(&mut s, d, hidden, 2);
        let conv = groupsort_to_sortnet(&gs, 2.0).map_err(|e| err_at("groupsort conversion", e))?;
        for i in 0..500 {
            let x: Vec<f64> = (0..d).map(|_| s.uniform(-2.0, 2.0)).collect();
            let a = forward(&gs, &x, &EvalOpts::exact()).map_err(|e| err_at("fwd", e))?;
            let b = forward(&conv, &x, &EvalOpts::exact()).map_err(|e| err_at("fwd", e))?;
            for (u, v) in a.output().iter().zip(b.output()) {
                if (u - v).abs() > 1e-9 {
                    return Err(format!(
                        "groupsort conversion trial {trial} sample {i}: deviation {}",
                        (u - v).abs()
                    ));
                }
            }
        }
    }
    Ok(())
}

fn random_standard_net(
    s: &mut lipcert::rng::Stream,
    d: usize,
    depth: usize,
    width: usize,
    out: usize,
) -> Network {
    let mut layers = Vec::new();
    let mut prev = d;
    for _ in 0..depth {
        layers.push(random_constrained_affine(s, width, prev));
        let kind = match s.next_index(3) {
            0 => ActKind::Relu,
            1 => ActKind::Tanh,
            _ => ActKind::Abs,
        };
        layers.push(Layer::Activation { kind });
        prev = width;
    }
    layers.push(random_constrained_affine(s, out, prev));
    Network::new(d, layers).with_input_range(0.0, 1.0)
}

/// The pairwise sum inequality holds for every sampled standard-family net
/// and pair set.
fn check_sum_inequality(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 9]);
    for trial in 0..200 {
        let d = 3 + s.next_index(6); // 3..8
        let q = s.next_index(d);
        let pairs = build_pair_set(d, q + 1, q).map_err(|e| err_at("pair set", e))?;
        let depth = 1 + s.next_index(3);
        let width = 2 + s.next_index(6);
        let out = 1 + s.next_index(3);
        let net = random_standard_net(&mut s, d, depth, width, out);
        let ok = verify_sum_inequality(&net, &pairs).map_err(|e| err_at("verify", e))?;
        if !ok {
            return Err(format!(
                "sum inequality violated on trial {trial} (d={d}, q={q})"
            ));
        }
    }
    Ok(())
}

/// Adjacent-level pair sets satisfy their balanced-difference invariant.
fn check_pairset(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 10]);
    for d in 2..=10usize {
        for _ in 0..5 {
            let q = s.next_index(d);
            let pairs = build_pair_set(d, q + 1, q).map_err(|e| err_at("build", e))?;
            if pairs.is_empty() {
                return Err(format!("empty pair set for d={d}, q={q}"));
            }
            if !pairs.check_invariant() {
                return Err(format!("pair-set invariant failed for d={d}, q={q}"));
            }
        }
    }
    Ok(())
}

/// The linear approximator's worst corner error is exactly 1/2 − 1/2d —
/// the floor no standard-family net can beat.
fn check_tight_linear_floor(_src: &RandomSource, sabotage: bool) -> Result<(), String> {
    for d in 2..=8usize {
        for k in 1..=d {
            let mut net = tight_linear_orderstat(d, k).map_err(|e| err_at("build", e))?;
            if sabotage && d == 4 && k == 2 {
                // Deliberate mutation: perturb the bias.
                if let Layer::Affine { bias, .. } = &mut net.layers[0] {
                    bias[0] += 0.05;
                }
            }
            let (_, gap) = impossibility_witness(&net, &WitnessKind::OrderStat { k })
                .map_err(|e| err_at("witness", e))?;
            let target = 0.5 - 0.5 / d as f64;
            if (gap - target).abs() > 1e-12 {
                return Err(format!(
                    "tight-linear-orderstat d={d} k={k}: corner error {gap} ≠ {target}"
                ));
            }
        }
    }
    Ok(())
}

/// Every sampled standard-family classifier has a witness point on the
/// adjacent-level dataset with margin ≤ 1/d.
fn check_margin_cap(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 11]);
    for trial in 0..100 {
        let d = 3 + s.next_index(6); // 3..8
        let g = random_symmetric(&mut s, d);
        if g.adjacent_separating_levels().is_err() {
            continue;
        }
        let depth = 1 + s.next_index(3);
        let width = 2 + s.next_index(6);
        let net = random_standard_net(&mut s, d, depth, width, 2);
        let (_, margin) = impossibility_witness(&net, &WitnessKind::Boolean { g: &g })
            .map_err(|e| err_at("witness", e))?;
        if margin > 1.0 / d as f64 + 1e-9 {
            return Err(format!(
                "trial {trial}: min margin {margin} exceeds the 1/{d} cap"
            ));
        }
    }
    Ok(())
}

fn random_shallow_maxmin(s: &mut lipcert::rng::Stream, d: usize, width: usize) -> Network {
    // Two affine layers (M = 2) around one MaxMin pair sort, scalar output.
    Network::new(
        d,
        vec![
            random_constrained_affine(s, width, d),
            Layer::MaxMin { group: 2 },
            random_constrained_affine(s, 1, width),
        ],
    )
    .with_input_range(0.0, 1.0)
}

/// Shallow MaxMin nets (M = 2 affine layers, d = 8) cannot approximate an
/// order statistic better than 1/2 − 2^{M−2}/d = 0.375 on the corners.
fn check_maxmin_gap(src: &RandomSource, _sabotage: bool) -> Result<(), String> {
    let mut s = src.stream(&[0x7E57, 12]);
    let d = 8;
    let floor = 0.5 - 1.0 / d as f64; // 2^{M-2} = 1 for M = 2
    for trial in 0..100 {
        let width = 2 * (1 + s.next_index(4));
        let net = random_shallow_maxmin(&mut s, d, width);
        let k = 2 + s.next_index(d - 2); // avoid trivial extremes
        let (_, gap) = impossibility_witness(&net, &WitnessKind::OrderStat { k })
            .map_err(|e| err_at("witness", e))?;
        if gap < floor - 1e-9 {
            return Err(format!(
                "trial {trial}: witness gap {gap} beats the {floor} depth floor (k={k})"
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn dispatch(cli: &Cli) -> CmdResult {
    lipcert::parallel::init_thread_pool();
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Construct(a) => cmd_construct(a),
        Command::VerifyTheory(a) => cmd_verify_theory(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; help/version requests exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
