use std::fs;
use std::path::{Path, PathBuf};
use std::io::Write;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evcsi::channelgen::{build_dataset, ChannelParams, Dataset, DEFAULT_TRAIN_FRACTION};
use evcsi::codebook::{build_dft_codebook, codebook_reconstruct, CodebookConfig, BASELINE_LABEL};
use evcsi::ensemble::{Ensemble, EnsembleManifest};
use evcsi::io::write_atomic;
use evcsi::kv::KvWriter;
use evcsi::metrics::EvalReport;
use evcsi::model::{
    compare_with_reference, count_flops, count_params, read_weights, write_weights, Model, ModelConfig,
    REFERENCE_PARAMS, REFERENCE_TOLERANCE, SPREAD_TOLERANCE,
};
use evcsi::quantizer::{read_bitstreams, write_bitstreams};
use evcsi::training::{log_csv, staged_train, train_run, RunConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DIMENSION: u8 = 4;

#[derive(Parser)]
#[command(name = "evcsi", version, about = "Eigenvector CSI feedback: data generation, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CSI dataset (EVCS file).
    Gen(GenArgs),
    /// Train an autoencoder from a run config.
    Train(TrainArgs),
    /// Evaluate trained weights on a dataset.
    Eval(EvalArgs),
    /// Evaluate the DFT-grid codebook baseline on a dataset.
    Baseline(BaselineArgs),
    /// Evaluate a model ensemble described by a manifest.
    Ensemble(EnsembleArgs),
    /// Print trainable parameters and FLOPs.
    Count(CountArgs),
    /// Encode a dataset into feedback bitstreams (EVCB file).
    Encode(EncodeArgs),
    /// Decode feedback bitstreams back into a dataset.
    Decode(DecodeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// desk, selective, flat or paper
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long)]
    n_tx: Option<usize>,
    #[arg(long)]
    n_rx: Option<usize>,
    #[arg(long)]
    n_subband: Option<usize>,
    #[arg(long)]
    n_cluster: Option<usize>,
    #[arg(long)]
    n_subpath: Option<usize>,
    /// Seconds.
    #[arg(long)]
    delay_spread: Option<f64>,
    #[arg(long)]
    carrier_hz: Option<f64>,
    #[arg(long)]
    subcarrier_hz: Option<f64>,
    #[arg(long)]
    n_rb: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subset {
    All,
    Train,
    Validation,
}

#[derive(Args)]
struct SplitArgs {
    /// Run config whose split settings select the subset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to `validation` with --config and `all` without.
    #[arg(long, value_enum)]
    subset: Option<Subset>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    oversample: usize,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct CountArgs {
    /// Run or model config; without it the reference table is printed.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    bits: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Model config stored next to a weight archive.
fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("cfg")
}

fn load_model(weights: &Path) -> Result<Model> {
    let cfg = ModelConfig::from_sidecar(&read_text(&sidecar_path(weights))?)
        .with_context(|| format!("model config for {}", weights.display()))?;
    let w = read_weights(&read(weights)?).with_context(|| format!("loading {}", weights.display()))?;
    Ok(Model::new(cfg, w)?)
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    write(path, &write_weights(&model.weights)?)?;
    write(&sidecar_path(path), model.cfg.to_sidecar().as_bytes())
}

fn load_dataset(path: &Path, split_seed: u64, train_fraction: f64) -> Result<Dataset> {
    Dataset::from_bytes(&read(path)?, split_seed, train_fraction).with_context(|| format!("parsing {}", path.display()))
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse(&read_text(path)?).with_context(|| format!("config {}", path.display()))
}

/// Dataset samples selected by `--config`/`--subset`.
fn load_subset(data: &Path, split: &SplitArgs) -> Result<Vec<evcsi::channelgen::CsiSample>> {
    let (seed, fraction) = match &split.config {
        Some(p) => {
            let run = load_run_config(p)?;
            (run.split_seed, run.train_fraction)
        }
        None => (0, DEFAULT_TRAIN_FRACTION),
    };
    let ds = load_dataset(data, seed, fraction)?;
    let subset = split.subset.unwrap_or(if split.config.is_some() { Subset::Validation } else { Subset::All });
    Ok(match subset {
        Subset::All => ds.samples().to_vec(),
        Subset::Train => ds.train().into_iter().cloned().collect(),
        Subset::Validation => ds.validation().into_iter().cloned().collect(),
    })
}

fn check_shape(samples: &[evcsi::channelgen::CsiSample], cfg: &ModelConfig) -> Result<()> {
    if let Some(s) = samples.first() {
        if (s.n_tx(), s.n_subband()) != (cfg.n_tx, cfg.n_subband) {
            return Err(evcsi::Error::Contract(format!(
                "data is {}x{} (antennas x subbands), model expects {}x{}",
                s.n_tx(),
                s.n_subband(),
                cfg.n_tx,
                cfg.n_subband
            ))
            .into());
        }
    }
    Ok(())
}

/// Records how an artifact was produced, next to it.
struct RunManifest {
    kv: KvWriter,
}

impl RunManifest {
    fn new(command: &str, argv: &[String]) -> Self {
        let mut kv = KvWriter::default();
        kv.put("command", command).put("tool_version", env!("CARGO_PKG_VERSION"));
        kv.put("argv", argv.join(" "));
        Self { kv }
    }

    fn put(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.kv.put(key, value);
        self
    }

    fn path(&mut self, key: &str, p: &Path) -> &mut Self {
        self.kv.put(key, p.display());
        self
    }

    fn write(self, path: &Path) -> Result<()> {
        write(path, self.kv.finish().as_bytes())
    }
}

fn manifest_for(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

fn cmd_gen(a: &GenArgs, ctx: &mut Ctx) -> Result<()> {
    let mut p = ChannelParams::profile(&a.profile)?;
    p.n_tx = a.n_tx.unwrap_or(p.n_tx);
    p.n_rx = a.n_rx.unwrap_or(p.n_rx);
    p.n_subband = a.n_subband.unwrap_or(p.n_subband);
    p.n_cluster = a.n_cluster.unwrap_or(p.n_cluster);
    p.n_subpath = a.n_subpath.unwrap_or(p.n_subpath);
    p.delay_spread = a.delay_spread.unwrap_or(p.delay_spread);
    p.carrier_hz = a.carrier_hz.unwrap_or(p.carrier_hz);
    p.subcarrier_hz = a.subcarrier_hz.unwrap_or(p.subcarrier_hz);
    p.n_rb = a.n_rb.unwrap_or(p.n_rb);
    let ds = build_dataset(&p, a.samples, a.seed)?;
    write(&a.out, &ds.to_bytes())?;
    let mut m = RunManifest::new("gen", &ctx.argv);
    m.put("seed", a.seed)
        .put("profile", &a.profile)
        .put("samples", a.samples)
        .put("n_tx", p.n_tx)
        .put("n_rx", p.n_rx)
        .put("n_subband", p.n_subband)
        .put("n_cluster", p.n_cluster)
        .put("n_subpath", p.n_subpath)
        .put("delay_spread", p.delay_spread)
        .put("carrier_hz", p.carrier_hz)
        .put("subcarrier_hz", p.subcarrier_hz)
        .put("n_rb", p.n_rb)
        .path("dataset", &a.out);
    m.write(&manifest_for(&a.out))?;
    writeln!(ctx.out, "wrote {} samples ({}x{}) to {}", ds.len(), p.n_tx, p.n_subband, a.out.display())?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, ctx: &mut Ctx) -> Result<()> {
    let run = load_run_config(&a.config)?;
    let ds = load_dataset(&a.data, run.split_seed, run.train_fraction)?;
    let mut model_cfg = run.model;
    if let Some(first) = run.train.stages.first() {
        model_cfg = model_cfg.with_bits(first.bits_total);
    }
    check_shape(ds.samples(), &model_cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let outcome = if run.train.stages.is_empty() {
        train_run(&ds, &run.train, &model_cfg)?
    } else {
        staged_train(&ds, &run.train, &model_cfg)?
    };
    let weights = a.out.join("weights.evcw");
    let log = a.out.join("log.csv");
    let resolved = a.out.join("config.txt");
    save_model(&outcome.model, &weights)?;
    write(&log, log_csv(&outcome.log).as_bytes())?;
    write(&resolved, run.to_text().as_bytes())?;
    let mut m = RunManifest::new("train", &ctx.argv);
    m.path("config", &a.config)
        .path("data", &a.data)
        .put("seed", run.train.seed)
        .put("split_seed", run.split_seed)
        .put("train_fraction", run.train_fraction)
        .path("weights", &weights)
        .path("model_config", &sidecar_path(&weights))
        .path("log", &log)
        .path("resolved_config", &resolved);
    m.write(&a.out.join("manifest.txt"))?;
    if let Some(last) = outcome.log.last() {
        writeln!(ctx.out, "epoch {} train_loss {:.6} val_sgcs {:.6}", last.epoch, last.train_loss, last.val_sgcs)?;
    }
    writeln!(ctx.out, "wrote {}", weights.display())?;
    Ok(())
}

fn print_report(ctx: &mut Ctx, label: &str, r: &EvalReport) -> Result<()> {
    writeln!(ctx.out, "label,{}", EvalReport::CSV_HEADER)?;
    writeln!(ctx.out, "{label},{}", r.csv_row())?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, ctx: &mut Ctx) -> Result<()> {
    let model = load_model(&a.weights)?;
    let samples = load_subset(&a.data, &a.split)?;
    check_shape(&samples, &model.cfg)?;
    let rec = model.reconstruct(&samples)?;
    print_report(ctx, "model", &EvalReport::evaluate(&samples, &rec)?)
}

fn cmd_baseline(a: &BaselineArgs, ctx: &mut Ctx) -> Result<()> {
    let samples = load_subset(&a.data, &a.split)?;
    let n_tx = samples.first().map_or(0, |s| s.n_tx());
    let cb = build_dft_codebook(CodebookConfig { n_tx, oversampling: a.oversample })?;
    let rec = codebook_reconstruct(&samples, &cb)?;
    let n_sb = samples.first().map_or(0, |s| s.n_subband());
    writeln!(ctx.diag, "{BASELINE_LABEL} O={} feedback_bits={}", a.oversample, cb.feedback_bits(n_sb))?;
    print_report(ctx, BASELINE_LABEL, &EvalReport::evaluate(&samples, &rec)?)
}

fn cmd_ensemble(a: &EnsembleArgs, ctx: &mut Ctx) -> Result<()> {
    let manifest = EnsembleManifest::parse(&read_text(&a.manifest)?)
        .with_context(|| format!("manifest {}", a.manifest.display()))?;
    let base = a.manifest.parent().unwrap_or(Path::new(""));
    let members = manifest
        .members
        .iter()
        .map(|p| load_model(&base.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let ens = Ensemble::new(members, manifest.bits_total)?;
    let samples = load_subset(&a.data, &a.split)?;
    check_shape(&samples, &ens.members()[0].cfg)?;
    let eval = ens.evaluate(&samples)?;
    for (j, s) in eval.member_sgcs.iter().enumerate() {
        let picked = eval.selected.iter().filter(|&&x| x == j).count();
        writeln!(ctx.diag, "member {j}: sgcs {s:.6}, selected for {picked} samples")?;
    }
    writeln!(ctx.diag, "index_bits {} payload_bits {}", ens.index_bits(), ens.payload_bits())?;
    print_report(ctx, "ensemble", &EvalReport::evaluate(&samples, &eval.reconstructions)?)
}

fn cmd_count(a: &CountArgs, ctx: &mut Ctx) -> Result<()> {
    match &a.config {
        Some(path) => {
            let cfg = load_run_config(path)?.model;
            let p = count_params(&cfg)?;
            let f = count_flops(&cfg)?;
            writeln!(ctx.out, "part,params,flops")?;
            writeln!(ctx.out, "encoder,{},{}", p.encoder.total(), f.encoder.total())?;
            writeln!(ctx.out, "decoder,{},{}", p.decoder.total(), f.decoder.total())?;
            let reference = REFERENCE_PARAMS.iter().find(|r| ModelConfig::paper(r.0) == cfg);
            if let Some(&(m, enc, dec)) = reference {
                let dev = |n: u64, r: f64| n as f64 / r - 1.0;
                let (de, dd) = (dev(p.encoder.total(), enc), dev(p.decoder.total(), dec));
                let ok = de.abs() <= REFERENCE_TOLERANCE && dd.abs() <= REFERENCE_TOLERANCE;
                writeln!(ctx.out, 
                    "reference M={m}: encoder {:+.3}% decoder {:+.3}% {}",
                    100.0 * de,
                    100.0 * dd,
                    if ok { "PASS" } else { "FAIL" }
                )?;
            }
        }
        None => {
            let cmp = compare_with_reference()?;
            writeln!(ctx.out, "bits,encoder_params,encoder_dev,decoder_params,decoder_dev,encoder_flops,decoder_flops,status")?;
            for r in &cmp.rows {
                writeln!(ctx.out, 
                    "{},{},{:+.3}%,{},{:+.3}%,{},{},{}",
                    r.bits_total,
                    r.params.encoder.total(),
                    100.0 * r.encoder_deviation,
                    r.params.decoder.total(),
                    100.0 * r.decoder_deviation,
                    r.flops.encoder.total(),
                    r.flops.decoder.total(),
                    if r.pass() { "PASS" } else { "FAIL" }
                )?;
            }
            writeln!(ctx.out, 
                "spread encoder {:.3}% decoder {:.3}% (limit {:.1}%, per-width tolerance {:.0}%) {}",
                100.0 * cmp.encoder_spread,
                100.0 * cmp.decoder_spread,
                100.0 * SPREAD_TOLERANCE,
                100.0 * REFERENCE_TOLERANCE,
                if cmp.spread_pass() { "PASS" } else { "FAIL" }
            )?;
        }
    }
    Ok(())
}

fn cmd_encode(a: &EncodeArgs, ctx: &mut Ctx) -> Result<()> {
    let model = load_model(&a.weights)?;
    let ds = load_dataset(&a.data, 0, DEFAULT_TRAIN_FRACTION)?;
    check_shape(ds.samples(), &model.cfg)?;
    let streams = model.encode_batch(ds.samples())?;
    write(&a.out, &write_bitstreams(&streams, model.cfg.bits_total)?)?;
    let mut m = RunManifest::new("encode", &ctx.argv);
    m.path("data", &a.data).path("weights", &a.weights).path("bits", &a.out);
    m.write(&manifest_for(&a.out))?;
    writeln!(ctx.out, "wrote {} streams of {} bits", streams.len(), model.cfg.bits_total)?;
    Ok(())
}

fn cmd_decode(a: &DecodeArgs, ctx: &mut Ctx) -> Result<()> {
    let model = load_model(&a.weights)?;
    let (streams, m) = read_bitstreams(&read(&a.bits)?)?;
    if m != model.cfg.bits_total {
        return Err(evcsi::Error::Contract(format!("streams carry {m} bits, model expects {}", model.cfg.bits_total)).into());
    }
    let samples = model.decode_batch(&streams)?;
    let ds = Dataset::new(samples, 0, DEFAULT_TRAIN_FRACTION)?;
    write(&a.out, &ds.to_bytes())?;
    let mut mf = RunManifest::new("decode", &ctx.argv);
    mf.path("bits", &a.bits).path("weights", &a.weights).path("dataset", &a.out);
    mf.write(&manifest_for(&a.out))?;
    writeln!(ctx.out, "wrote {} samples", ds.len())?;
    Ok(())
}

/// Process exit status for a failed command: 2 for I/O and format errors,
/// 3 for configuration errors, 4 for dimension mismatches, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<evcsi::Error>() {
            return match e {
                evcsi::Error::Io(_) | evcsi::Error::Format(_) => EXIT_IO,
                evcsi::Error::Config(_) => EXIT_CONFIG,
                evcsi::Error::Contract(_) => EXIT_DIMENSION,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

struct Ctx<'a> {
    argv: Vec<String>,
    out: &'a mut dyn Write,
    diag: &'a mut dyn Write,
}

/// Parses `args` (without the program name) and runs the command, writing
/// reports to `out` and progress notes to `diag`.
pub fn run<I, S>(args: I, out: &mut dyn Write, diag: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(std::iter::once("evcsi".to_string()).chain(argv.iter().cloned()))?;
    let ctx = &mut Ctx { argv, out, diag };
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, ctx),
        Command::Train(a) => cmd_train(a, ctx),
        Command::Eval(a) => cmd_eval(a, ctx),
        Command::Baseline(a) => cmd_baseline(a, ctx),
        Command::Ensemble(a) => cmd_ensemble(a, ctx),
        Command::Count(a) => cmd_count(a, ctx),
        Command::Encode(a) => cmd_encode(a, ctx),
        Command::Decode(a) => cmd_decode(a, ctx),
    }
}
