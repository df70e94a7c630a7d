use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tamperseal::adaptive::{adaptive_pass, AdaptiveConfig};
use tamperseal::attacks::{attack_model, AttackKind, LayerSelection};
use tamperseal::store::{
    fingerprint_hex, load_csv_dataset, read_container, write_container, write_csv_dataset, write_recovery_stats,
    write_report, write_sweep_csv, write_truth,
};
use tamperseal::sweep::{sweep, SweepConfig};
use tamperseal::toynet::{gen_blobs, train_logged, Split, ToyModel, TrainConfig};
use tamperseal::wmcore::{embed_model, recover_model, verify_model};
use tamperseal::{ParamStatus, WatermarkKey};

const LABEL_COLUMN: &str = "label";

#[derive(Parser)]
#[command(name = "tamperseal", version, about = "Fragile watermarking for float32 weight containers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy MLP on generated blobs and write the model and dataset.
    GenToy(GenToyArgs),
    /// Embed the watermark into every float32 tensor of a container.
    Embed(EmbedArgs),
    /// Check a container; exits 1 if any parameter is flagged.
    Verify(VerifyArgs),
    /// Tamper with a container and record the ground truth.
    Attack(AttackArgs),
    /// Verify, then restore or zero every flagged parameter.
    Recover(RecoverArgs),
    /// Attack/verify/recover over a list of tamper rates; writes CSV.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct KeyArg {
    /// Master key, `0x`-prefixed hex or decimal.
    #[arg(long, env = "TAMPERSEAL_KEY", hide_env_values = true, value_parser = parse_key)]
    key: u64,
}

#[derive(Args)]
struct GenToyArgs {
    /// Output model container.
    #[arg(long)]
    out: PathBuf,
    /// Output dataset CSV.
    #[arg(long)]
    data_out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input width.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    n_per_class: usize,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct EmbedArgs {
    input: PathBuf,
    output: PathBuf,
    #[command(flatten)]
    key: KeyArg,
    /// Train the adaptive bits (requires --data).
    #[arg(long)]
    adaptive: bool,
    #[arg(long, default_value_t = 5)]
    alpha: usize,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Dataset CSV for the adaptive pass.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    input: PathBuf,
    #[command(flatten)]
    key: KeyArg,
    /// Write a JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackType {
    RandValue,
    BitFlip,
    LsbConst,
    Forge,
}

#[derive(Args)]
struct AttackArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long = "type", value_enum)]
    kind: AttackType,
    /// Fraction of parameters replaced (rand-value).
    #[arg(long)]
    rate: Option<f64>,
    /// Number of bits flipped (bit-flip).
    #[arg(long)]
    bits: Option<usize>,
    /// Low bits overwritten per word (lsb-const).
    #[arg(long)]
    lsb_bits: Option<u32>,
    /// Bit value written (lsb-const).
    #[arg(long, default_value_t = 0)]
    lsb_value: u8,
    /// Storage index to forge (forge).
    #[arg(long)]
    index: Option<usize>,
    /// Key the forger believes in (forge).
    #[arg(long, value_parser = parse_key)]
    forge_key: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write ground-truth JSON here.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Attack this tensor index instead of the first float32 tensor.
    #[arg(long, conflicts_with = "all_layers")]
    layer: Option<usize>,
    #[arg(long)]
    all_layers: bool,
}

#[derive(Args)]
struct RecoverArgs {
    input: PathBuf,
    output: PathBuf,
    #[command(flatten)]
    key: KeyArg,
    /// Write recovery statistics JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Watermarked toy model container.
    input: PathBuf,
    #[command(flatten)]
    key: KeyArg,
    /// Dataset CSV used for the accuracy columns.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Clean (unwatermarked) model for the acc_clean column.
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1,0.2,0.3,0.5")]
    rates: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long)]
    all_layers: bool,
}

fn parse_key(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|e| format!("invalid key `{s}`: {e}"))
}

/// An error together with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<tamperseal::Error> for Failure {
    fn from(e: tamperseal::Error) -> Self {
        let code = if e.is_format_or_io() { 3 } else { 2 };
        Failure { code, err: e.into() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, err: anyhow!(msg.into()) }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenToy(a) => gen_toy(a),
        Command::Embed(a) => embed(a),
        Command::Verify(a) => verify(a),
        Command::Attack(a) => attack(a),
        Command::Recover(a) => recover(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn display_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn gen_toy(a: GenToyArgs) -> Outcome {
    let mut dims = vec![a.dim];
    dims.extend(&a.hidden);
    dims.push(a.classes);
    let data = gen_blobs(a.seed, a.n_per_class, a.classes, a.dim, a.radius, a.sigma)?;
    let init = ToyModel::random(&dims, a.seed)?;
    let cfg = TrainConfig { epochs: a.epochs, learning_rate: a.lr, batch_size: a.batch_size, seed: a.seed };
    let (model, losses) = train_logged(&init, &data, &cfg)?;
    write_container(&model.to_model(), &a.out)?;
    write_csv_dataset(&data, &a.data_out)?;
    println!("dims: {dims:?}");
    if let Some(loss) = losses.last() {
        println!("final loss: {loss:.4}");
    }
    for split in [Split::Train, Split::Validation, Split::Test] {
        println!("{} accuracy: {:.4}", split.name(), model.accuracy_on(&data, split)?);
    }
    Ok(0)
}

fn embed(a: EmbedArgs) -> Outcome {
    let key = WatermarkKey::new(a.key.key);
    let data = match (a.adaptive, &a.data) {
        (true, None) => return Err(usage("--adaptive requires --data")),
        (true, Some(path)) => Some(load_csv_dataset(path, LABEL_COLUMN, a.seed)?),
        (false, _) => None,
    };
    let model = read_container(&a.input)?;
    let mut marked = embed_model(&model, &key, None)?;
    if let Some(data) = data {
        let cfg = AdaptiveConfig { alpha: a.alpha, beta: a.beta, seed: a.seed, ..AdaptiveConfig::default() };
        let toy = ToyModel::from_model(&marked)?;
        let clean_acc = ToyModel::from_model(&model)?.accuracy_on(&data, cfg.eval_split)?;
        let out = adaptive_pass(&toy, &key, &cfg, &data)?;
        println!("clean {} accuracy: {clean_acc:.4}", cfg.eval_split.name());
        println!("watermarked accuracy: {:.4}", out.initial_accuracy);
        for t in &out.trace {
            println!(
                "tensor {} iter {}: {:.4} -> {:.4} ({} flipped) {}",
                t.tensor,
                t.iteration,
                t.acc_before,
                t.acc_candidate,
                t.flipped,
                if t.accepted { "accepted" } else { "rejected" }
            );
        }
        println!("adaptive accuracy: {:.4}", out.final_accuracy);
        marked = out.model.to_model();
    }
    write_container(&marked, &a.output)?;
    println!(
        "embedded {} parameters in {} tensors (key {})",
        marked.float_parameter_count(),
        marked.float_layers().count(),
        fingerprint_hex(&key)
    );
    Ok(0)
}

fn verify(a: VerifyArgs) -> Outcome {
    let key = WatermarkKey::new(a.key.key);
    let model = read_container(&a.input)?;
    let report = verify_model(&model, &key)?;
    if let Some(path) = &a.report {
        write_report(&display_name(&a.input), &key, &report, path)?;
    }
    let s = report.summary();
    println!(
        "{} parameters: {} intact, {} self-fail, {} mutual-suspect",
        s.total_parameters, s.intact, s.self_fail, s.mutual_suspect
    );
    for name in &report.unprotected {
        println!("unprotected tensor: {name}");
    }
    if report.is_intact() {
        println!("intact");
        return Ok(0);
    }
    const SHOWN: usize = 20;
    let flagged = report.layers.iter().flat_map(|l| {
        l.statuses.iter().enumerate().filter(|(_, s)| !s.is_intact()).map(move |(i, s)| (l, i, *s))
    });
    for (layer, i, status) in flagged.clone().take(SHOWN) {
        let tag = match status {
            ParamStatus::SelfFail => "self-fail",
            _ => "mutual-suspect",
        };
        println!("  {} [{}] index {i}: {tag}", layer.name, layer.layer_index);
    }
    let total = flagged.count();
    if total > SHOWN {
        println!("  ... {} more", total - SHOWN);
    }
    println!("TAMPERED");
    Ok(1)
}

fn attack(a: AttackArgs) -> Outcome {
    let kind = match a.kind {
        AttackType::RandValue => AttackKind::RandomValue { rate: a.rate.ok_or_else(|| usage("rand-value needs --rate"))? },
        AttackType::BitFlip => AttackKind::BitFlip { bits: a.bits.ok_or_else(|| usage("bit-flip needs --bits"))? },
        AttackType::LsbConst => AttackKind::LsbConstant {
            k: a.lsb_bits.ok_or_else(|| usage("lsb-const needs --lsb-bits"))?,
            value: a.lsb_value,
        },
        AttackType::Forge => AttackKind::Forge {
            index: a.index.ok_or_else(|| usage("forge needs --index"))?,
            attacker_key: WatermarkKey::new(a.forge_key.ok_or_else(|| usage("forge needs --forge-key"))?),
        },
    };
    let selection = match (a.all_layers, a.layer) {
        (true, _) => LayerSelection::All,
        (false, Some(i)) => LayerSelection::Index(i),
        (false, None) => LayerSelection::First,
    };
    let model = read_container(&a.input)?;
    let (attacked, truth) = attack_model(&model, &kind, selection, a.seed)?;
    write_container(&attacked, &a.output)?;
    if let Some(path) = &a.truth {
        write_truth(&truth, path)?;
    }
    println!("tampered {} parameters in {} tensors", truth.total(), truth.layers.len());
    Ok(0)
}

fn recover(a: RecoverArgs) -> Outcome {
    let key = WatermarkKey::new(a.key.key);
    let model = read_container(&a.input)?;
    let report = verify_model(&model, &key)?;
    let (recovered, recovery) = recover_model(&model, &key, &report)?;
    write_container(&recovered, &a.output)?;
    let stats = recovery.stats();
    if let Some(path) = &a.report {
        write_recovery_stats(&display_name(&a.input), &key, stats, path)?;
    }
    let s = report.summary();
    println!(
        "flagged {} self-fail, {} mutual-suspect; restored {}, zeroed {}, untouched {}",
        s.self_fail, s.mutual_suspect, stats.restored_exact, stats.zeroed, stats.untouched
    );
    Ok(0)
}

fn run_sweep(a: SweepArgs) -> Outcome {
    let key = WatermarkKey::new(a.key.key);
    if a.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(usage("rates must lie in [0, 1]"));
    }
    let marked = read_container(&a.input)?;
    let data = a.data.as_ref().map(|p| load_csv_dataset(p, LABEL_COLUMN, a.seed)).transpose()?;
    let clean = a.clean.as_ref().map(read_container).transpose()?;
    let cfg = SweepConfig {
        rates: a.rates,
        trials: a.trials,
        seed: a.seed,
        selection: if a.all_layers { LayerSelection::All } else { LayerSelection::First },
        ..SweepConfig::default()
    };
    let rows = sweep(&marked, &key, data.as_ref(), clean.as_ref(), &cfg)?;
    write_sweep_csv(&rows, &a.out)?;
    for r in &rows {
        println!(
            "rate {:.3}: recall {:.4} fpr {:.5} restored {:.4} zeroed {:.4} acc {:.4} -> {:.4}",
            r.rate, r.detection_recall, r.false_positive_rate, r.restored_exact_frac, r.zeroed_frac, r.acc_attacked,
            r.acc_recovered
        );
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_parse_as_hex_or_decimal() {
        assert_eq!(parse_key("1234"), Ok(1234));
        assert_eq!(parse_key("0x4d2"), Ok(1234));
        assert_eq!(parse_key("0XFF"), Ok(255));
        assert!(parse_key("abc").is_err());
        assert!(parse_key("0x").is_err());
        assert!(parse_key("-1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
