//! Command-line surface.
//!
//! Subcommands: `synth`, `train`, `adapt`, `encode`, `decode`,
//! `eval rd | bdrate | forgetting`, `inspect`. Every run that produces an
//! output directory writes a `run.txt` reproducibility record (resolved
//! configuration, seeds, input fingerprints, code version); replaying the
//! recorded command reproduces outputs bitwise.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure.

use crate::data::{self, DatasetManifest, DomainKind, Split};
use crate::error::{Error, Result};
use crate::eval::{
    bd_rate, forgetting_report, merge_reports, rd_sweep, write_forgetting_csv, write_rd_csv,
    write_rd_dat, AdaptMode, RdCurve,
};
use crate::model::{CodecConfig, CodecModel, Part};
use crate::model_file::{load_model, save_model, MODEL_MAGIC};
use crate::pipeline::{decode_image, encode_image, Bitstream, DecodeOptions, BITSTREAM_MAGIC};
use crate::train::{self, Strategy, TrainConfig, TraceRow};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "niclab", version, about = "Neural image compression laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (smooth or texture domain)
    Synth(SynthArgs),
    /// Train a codec from scratch (or jointly on two domains)
    Train(TrainArgs),
    /// Adapt a trained codec to a new domain
    Adapt(AdaptArgs),
    /// Encode an image into a bitstream
    Encode(EncodeArgs),
    /// Decode a bitstream into an image
    Decode(DecodeArgs),
    /// Rate-distortion and forgetting evaluations
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Print header/model information
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// smooth | texture
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 24)]
    n: usize,
    /// Square image side, multiple of 16
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (images + manifest.txt)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunParams {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_interval: Option<usize>,
    /// Optional key=value file; explicit flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Second domain manifest (joint strategy)
    #[arg(long)]
    manifest2: Option<PathBuf>,
    /// scratch | joint
    #[arg(long, default_value = "scratch")]
    strategy: String,
    #[arg(long, default_value_t = 64)]
    filters: usize,
    #[arg(long, default_value_t = 16)]
    custom_filters: usize,
    #[command(flatten)]
    params: RunParams,
    /// Output directory (model.nicm, trace.csv, run.txt)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    /// Source model file
    #[arg(long)]
    model: PathBuf,
    /// Target dataset manifest
    #[arg(long)]
    manifest: PathBuf,
    /// naive | selective | cawf
    #[arg(long)]
    strategy: String,
    #[command(flatten)]
    params: RunParams,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input image (PNG or PPM)
    #[arg(long)]
    input: PathBuf,
    /// Output bitstream (.nicb)
    #[arg(long)]
    output: PathBuf,
    /// Codec version to encode with (default: the model's newest)
    #[arg(long)]
    version: Option<u8>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input bitstream (.nicb)
    #[arg(long)]
    input: PathBuf,
    /// Output image (PNG or PPM)
    #[arg(long)]
    output: PathBuf,
    /// Experiment mode: decode even if the model hash does not match
    #[arg(long)]
    allow_hash_mismatch: bool,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Sweep models over a dataset into an RD curve CSV
    Rd(RdArgs),
    /// BD-rate between two RD curve CSVs
    Bdrate(BdrateArgs),
    /// Forgetting/compatibility report for adapted codecs
    Forgetting(ForgettingArgs),
}

#[derive(Args)]
struct RdArgs {
    /// Comma-separated model files, one per rate point
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// train | eval
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long, default_value = "niclab")]
    codec: String,
    #[arg(long, default_value = "1")]
    time: String,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
    /// Optional gnuplot-ready data file
    #[arg(long)]
    dat: Option<PathBuf>,
}

#[derive(Args)]
struct BdrateArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Optional CSV to append `reference,test,bd_rate_percent`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForgettingArgs {
    /// Source (t = 1) model
    #[arg(long)]
    t1: PathBuf,
    /// Naively fine-tuned t = 2 model
    #[arg(long)]
    naive: Option<PathBuf>,
    /// CAwF-adapted t = 2 model
    #[arg(long)]
    cawf: Option<PathBuf>,
    #[arg(long)]
    source_manifest: PathBuf,
    #[arg(long)]
    target_manifest: PathBuf,
    /// Output directory (forgetting.csv, difference images, run.txt)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// A .nicm model or .nicb bitstream
    #[arg(long)]
    input: PathBuf,
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own message (including --help/--version)
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Numeric(_) => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Adapt(a) => cmd_adapt(a),
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Eval(EvalCmd::Rd(a)) => cmd_eval_rd(a),
        Cmd::Eval(EvalCmd::Bdrate(a)) => cmd_eval_bdrate(a),
        Cmd::Eval(EvalCmd::Forgetting(a)) => cmd_eval_forgetting(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    }
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(Error::Format {
            offset: ln as u64,
            msg: format!("config line {} is not key=value", ln + 1),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn resolve_params(p: &RunParams, strategy: Strategy) -> Result<TrainConfig> {
    let file = match &p.config {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    fn pick<T: std::str::FromStr>(
        flag: Option<T>,
        file: &BTreeMap<String, String>,
        key: &str,
        default: T,
    ) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match file.get(key) {
            Some(s) => s
                .parse::<T>()
                .map_err(|_| Error::Contract(format!("bad config value {}={}", key, s))),
            None => Ok(default),
        }
    }
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lambda: pick(p.lambda, &file, "lambda", d.lambda)?,
        steps: pick(p.steps, &file, "steps", d.steps)?,
        batch: pick(p.batch, &file, "batch", d.batch)?,
        patch: pick(p.patch, &file, "patch", d.patch)?,
        lr: pick(p.lr, &file, "lr", d.lr)?,
        seed: pick(p.seed, &file, "seed", d.seed)?,
        log_interval: pick(p.log_interval, &file, "log_interval", d.log_interval)?,
        strategy,
    };
    if !cfg.lambda_in_grid() {
        eprintln!(
            "warning: lambda {} is off the reference grid {:?}",
            cfg.lambda,
            train::LAMBDA_GRID
        );
    }
    Ok(cfg)
}

fn record_pairs(cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("lambda".into(), cfg.lambda.to_string()),
        ("steps".into(), cfg.steps.to_string()),
        ("batch".into(), cfg.batch.to_string()),
        ("patch".into(), cfg.patch.to_string()),
        ("lr".into(), cfg.lr.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("log_interval".into(), cfg.log_interval.to_string()),
        ("strategy".into(), cfg.strategy.to_string()),
    ]
}

/// Writes the reproducibility record for a run directory.
fn write_run_record(dir: &Path, command: &str, pairs: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!("command={}\n", command));
    s.push_str(&format!("code_version={}\n", env!("CARGO_PKG_VERSION")));
    for (k, v) in pairs {
        s.push_str(&format!("{}={}\n", k, v));
    }
    std::fs::write(dir.join("run.txt"), s)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let kind: DomainKind = a.kind.parse()?;
    let manifest = data::synth_domain(kind, a.n, a.size, a.seed, &a.out)?;
    write_run_record(
        &a.out,
        "synth",
        &[
            ("kind".into(), a.kind.clone()),
            ("n".into(), a.n.to_string()),
            ("size".into(), a.size.to_string()),
            ("seed".into(), a.seed.to_string()),
            ("fingerprint".into(), format!("{:016x}", manifest.fingerprint())),
        ],
    )?;
    println!(
        "synth: {} {} images of {}x{} -> {}",
        a.n,
        kind,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn finish_training_run(
    out_dir: &Path,
    command: &str,
    cfg: &TrainConfig,
    extra: Vec<(String, String)>,
    result: Result<CodecModel>,
    trace: Vec<TraceRow>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    train::write_trace_csv(&out_dir.join("trace.csv"), &trace)?;
    let mut pairs = record_pairs(cfg);
    pairs.extend(extra);
    write_run_record(out_dir, command, &pairs)?;
    let model = result?;
    save_model(&model, &out_dir.join("model.nicm"))?;
    let last = trace.last();
    println!(
        "{}: {} steps done, final J = {} -> {}",
        command,
        cfg.steps,
        last.map_or("n/a".into(), |r| format!("{:.4}", r.j)),
        out_dir.join("model.nicm").display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let strategy: Strategy = a.strategy.parse()?;
    let cfg = resolve_params(&a.params, strategy)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let images = manifest.load_images(Split::Train)?;
    let secondary_manifest = a.manifest2.as_ref().map(|p| DatasetManifest::read(p)).transpose()?;
    let secondary = secondary_manifest
        .as_ref()
        .map(|m| m.load_images(Split::Train))
        .transpose()?;
    let codec = CodecConfig {
        shared_filters: a.filters,
        custom_filters: a.custom_filters,
        ..CodecConfig::default()
    };
    let mut extra = vec![
        ("filters".into(), a.filters.to_string()),
        ("custom_filters".into(), a.custom_filters.to_string()),
        ("manifest".into(), a.manifest.display().to_string()),
        ("manifest_fingerprint".into(), format!("{:016x}", manifest.fingerprint())),
    ];
    if let Some(m2) = &secondary_manifest {
        extra.push(("manifest2_fingerprint".into(), format!("{:016x}", m2.fingerprint())));
    }
    let mut trace = Vec::new();
    let result = train::train(codec, &cfg, &images, secondary.as_deref(), &mut trace);
    finish_training_run(&a.out, "train", &cfg, extra, result, trace)
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let strategy: Strategy = a.strategy.parse()?;
    if !matches!(strategy, Strategy::NaiveFt | Strategy::SelectiveFt | Strategy::Cawf) {
        return Err(Error::Contract(format!(
            "adapt expects naive|selective|cawf, got {}",
            a.strategy
        )));
    }
    let cfg = resolve_params(&a.params, strategy)?;
    let source = load_model(&a.model)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let images = manifest.load_images(Split::Train)?;
    let extra = vec![
        ("source_model".into(), a.model.display().to_string()),
        ("source_hash".into(), format!("{:016x}", source.shared_hash())),
        ("manifest".into(), a.manifest.display().to_string()),
        ("manifest_fingerprint".into(), format!("{:016x}", manifest.fingerprint())),
    ];
    let mut trace = Vec::new();
    let result = train::adapt(&source, &cfg, &images, &mut trace);
    finish_training_run(&a.out, "adapt", &cfg, extra, result, trace)
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let img = data::load_image(&a.input)?;
    let version = a.version.unwrap_or(model.version);
    let bs = encode_image(&img, &model, version)?;
    bs.write(&a.output)?;
    println!(
        "encode: {}x{} v{} -> {} bytes ({:.4} bpp) {}",
        img.width(),
        img.height(),
        version,
        bs.to_bytes().len(),
        bs.bpp(),
        a.output.display()
    );
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let bs = Bitstream::read(&a.input)?;
    let opts = DecodeOptions { allow_hash_mismatch: a.allow_hash_mismatch };
    let img = decode_image(&bs, &model, opts)?;
    data::save_image(&img, &a.output)?;
    println!(
        "decode: v{} stream -> {}x{} {}",
        bs.header.codec_version,
        img.width(),
        img.height(),
        a.output.display()
    );
    Ok(())
}

fn cmd_eval_rd(a: RdArgs) -> Result<()> {
    if a.models.is_empty() {
        return Err(Error::Contract("eval rd: at least one model required".into()));
    }
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "eval" => Split::Eval,
        other => return Err(Error::Contract(format!("unknown split '{}'", other))),
    };
    let manifest = DatasetManifest::read(&a.manifest)?;
    let images = manifest.load_images(split)?;
    let models: Vec<CodecModel> = a.models.iter().map(|p| load_model(p)).collect::<Result<_>>()?;
    let pairs: Vec<(f64, &CodecModel)> = models
        .iter()
        .map(|m| (train::LAMBDA_GRID[m.config.lambda_index.min(3) as usize], m))
        .collect();
    let domain = a.domain.clone().unwrap_or_else(|| manifest.name.clone());
    let curve = rd_sweep(&images, &pairs, &domain, &a.codec, &a.time)?;
    write_rd_csv(&a.out, std::slice::from_ref(&curve))?;
    if let Some(dat) = &a.dat {
        write_rd_dat(dat, std::slice::from_ref(&curve))?;
    }
    for p in &curve.points {
        println!(
            "rd: lambda={} bpp={:.4} psnr={:.2}{}",
            p.lambda,
            p.bpp,
            p.psnr,
            if p.lossless { " (lossless)" } else { "" }
        );
    }
    println!("rd: wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval_bdrate(a: BdrateArgs) -> Result<()> {
    let pick_curve = |path: &Path| -> Result<RdCurve> {
        let curves = crate::eval::read_rd_csv(path)?;
        curves
            .into_iter()
            .next()
            .ok_or_else(|| Error::Eval(format!("{} holds no curve", path.display())))
    };
    let reference = pick_curve(&a.reference)?;
    let test = pick_curve(&a.test)?;
    let bd = bd_rate(&reference, &test)?;
    println!("bd_rate_percent {:.4}", bd);
    if let Some(out) = &a.out {
        std::fs::write(
            out,
            format!(
                "reference,test,bd_rate_percent\n{},{},{}\n",
                a.reference.display(),
                a.test.display(),
                bd
            ),
        )?;
    }
    Ok(())
}

fn cmd_eval_forgetting(a: ForgettingArgs) -> Result<()> {
    if a.naive.is_none() && a.cawf.is_none() {
        return Err(Error::Contract(
            "eval forgetting: at least one of --naive/--cawf required".into(),
        ));
    }
    std::fs::create_dir_all(&a.out)?;
    let t1 = load_model(&a.t1)?;
    let source = DatasetManifest::read(&a.source_manifest)?.load_images(Split::Eval)?;
    let target = DatasetManifest::read(&a.target_manifest)?.load_images(Split::Eval)?;
    let artifacts = a.out.join("artifacts");
    let naive_report = a
        .naive
        .as_ref()
        .map(|p| {
            let m = load_model(p)?;
            forgetting_report(&source, &target, &t1, &m, AdaptMode::Naive, Some(&artifacts))
        })
        .transpose()?;
    let cawf_report = a
        .cawf
        .as_ref()
        .map(|p| {
            let m = load_model(p)?;
            forgetting_report(&source, &target, &t1, &m, AdaptMode::Cawf, Some(&artifacts))
        })
        .transpose()?;
    let rows = match (&naive_report, &cawf_report) {
        (Some(n), Some(c)) => merge_reports(n, c),
        (Some(n), None) => n.rows.clone(),
        (None, Some(c)) => c.rows.clone(),
        (None, None) => unreachable!(),
    };
    let csv = a.out.join("forgetting.csv");
    write_forgetting_csv(&csv, &rows)?;
    write_run_record(
        &a.out,
        "eval forgetting",
        &[
            ("t1".into(), a.t1.display().to_string()),
            ("naive".into(), a.naive.as_ref().map_or("-".into(), |p| p.display().to_string())),
            ("cawf".into(), a.cawf.as_ref().map_or("-".into(), |p| p.display().to_string())),
            ("source_manifest".into(), a.source_manifest.display().to_string()),
            ("target_manifest".into(), a.target_manifest.display().to_string()),
        ],
    )?;
    for r in &rows {
        println!(
            "forgetting: {} {} bpp={:.4} psnr={:.2}",
            r.domain, r.mode, r.mean_bpp, r.mean_psnr
        );
    }
    println!("forgetting: wrote {}", csv.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.input)?;
    if bytes.len() >= 4 && &bytes[0..4] == BITSTREAM_MAGIC {
        let bs = Bitstream::from_bytes(&bytes)?;
        let h = bs.header;
        println!("bitstream {}", a.input.display());
        println!("  format_version {}", h.format_version);
        println!("  codec_version {}", h.codec_version);
        println!("  lambda_index {}", h.lambda_index);
        println!("  model_hash {:016x}", h.model_hash);
        println!("  width {}", h.width);
        println!("  height {}", h.height);
        println!("  payload_len {}", h.payload_len);
        println!("  bpp {:.4}", bs.bpp());
        return Ok(());
    }
    if bytes.len() >= 4 && &bytes[0..4] == MODEL_MAGIC {
        let model = crate::model_file::model_from_bytes(&bytes)?;
        println!("model {}", a.input.display());
        println!("  version {}", model.version);
        println!("  shared_filters {}", model.config.shared_filters);
        println!("  custom_filters {}", model.config.custom_filters);
        println!("  lambda_index {}", model.config.lambda_index);
        println!("  encoder_params {}", model.param_count(Part::Encoder));
        println!("  decoder_params {}", model.param_count(Part::Decoder));
        println!("  entropy_params {}", model.param_count(Part::Entropy));
        println!("  shared_hash {:016x}", model.shared_hash());
        for (i, d) in model.densities.iter().enumerate() {
            match &d.tables {
                Some(t) => {
                    let lo = t.channels.iter().map(|c| c.q_min).min().unwrap();
                    let hi = t.channels.iter().map(|c| c.q_max).max().unwrap();
                    println!(
                        "  tables v{} channels {} support [{}, {}]",
                        i + 1,
                        t.num_channels(),
                        lo,
                        hi
                    );
                }
                None => println!("  tables v{} not frozen", i + 1),
            }
        }
        return Ok(());
    }
    Err(Error::Format {
        offset: 0,
        msg: "unrecognized file (neither model nor bitstream magic)".into(),
    })
}
