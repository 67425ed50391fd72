use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use citrus_core::attack::{misclassified_under, pgd_single, pgd_universal};
use citrus_core::campaign::run_campaign;
use citrus_core::certify::{certify_dataset, CertReport};
use citrus_core::checkpoint;
use citrus_core::oracle::{OracleCaps, PerturbationGrid};
use citrus_core::trainer::{metrics_csv, train, Evaluation};
use citrus_core::{Dataset, Network, RunConfig};

const ORACLE_VIOLATION: u8 = 2;

#[derive(Parser)]
#[command(name = "citrus", version, about = "Certified training against universal perturbations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// RunConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config except the dataset's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; defaults to `<out>/model.ctrw`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/test split as CSV.
    GenData(Common),
    /// Train a network and write model.ctrw, metrics.csv and report.json.
    Train(Common),
    /// Per-input and universal PGD accuracy of a checkpoint.
    Attack(ModelArgs),
    /// Batch-wise certified UAP accuracy of a checkpoint.
    Certify(ModelArgs),
    /// Exhaustive-grid fuzz campaign; exits 2 on any violated inequality.
    Oracle(Common),
    /// Merge run directories into one CSV table.
    Report {
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

/// Keys of `report.json`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RunReport {
    loss_kind: String,
    seed: u64,
    eps: f64,
    batch_n: usize,
    metric: String,
    clean_acc: f64,
    cert_individual_acc: f64,
    ucert: f64,
    attack_upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_s: Option<f64>,
}

impl RunReport {
    fn new(cfg: &RunConfig, cert: &CertReport) -> Self {
        RunReport {
            loss_kind: cfg.train.loss_kind.to_string(),
            seed: cfg.train.seed,
            eps: cert.eps,
            batch_n: cert.batch_size,
            metric: cert.metric.clone(),
            clean_acc: cert.clean_acc,
            cert_individual_acc: cert.cert_individual_acc,
            ucert: cert.ucert,
            attack_upper: cert.attack_upper,
            exact_mean: cert.exact_mean,
            epochs: None,
            wall_s: None,
        }
    }
}

fn prepare(common: &Common) -> AnyResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("config.json"), cfg.to_json())?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> AnyResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_model(args: &ModelArgs) -> AnyResult<Network> {
    let path = args
        .model
        .clone()
        .unwrap_or_else(|| args.common.out.join("model.ctrw"));
    Ok(checkpoint::load(&path).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn certify(cfg: &RunConfig, net: &Network, test: &Dataset) -> AnyResult<CertReport> {
    let caps = OracleCaps::default();
    let grid = match cfg.certify.exact_grid {
        Some(r) => Some(PerturbationGrid::new(cfg.certify.eps, r, net.input_dim())?),
        None => None,
    };
    Ok(certify_dataset(
        net,
        test,
        cfg.certify.eps,
        cfg.certify.batch_n,
        &cfg.attack,
        grid.as_ref().map(|g| (g, &caps)),
    )?)
}

fn cmd_gen_data(common: &Common) -> AnyResult<()> {
    let cfg = prepare(common)?;
    let (train, test) = cfg.datasets()?;
    train.write_csv(&common.out.join("train.csv"))?;
    test.write_csv(&common.out.join("test.csv"))?;
    println!("wrote {} train / {} test samples", train.len(), test.len());
    Ok(())
}

fn cmd_train(common: &Common) -> AnyResult<()> {
    let cfg = prepare(common)?;
    let (train_set, test) = cfg.datasets()?;
    let eval = Evaluation {
        data: &test,
        eps: cfg.certify.eps,
        batch_size: cfg.certify.batch_n,
        attack: cfg.attack.clone(),
    };
    let outcome = train(&cfg.train, &cfg.arch, &train_set, Some(&eval))?;
    checkpoint::save(&outcome.network, &common.out.join("model.ctrw"))?;
    std::fs::write(common.out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    let cert = certify(&cfg, &outcome.network, &test)?;
    let mut report = RunReport::new(&cfg, &cert);
    report.epochs = Some(outcome.metrics.len());
    report.wall_s = outcome.metrics.last().map(|m| m.wall_s);
    write_json(&common.out.join("report.json"), &report)?;
    println!(
        "{}: clean {:.4}  ucert {:.4}  attack {:.4}",
        report.loss_kind, report.clean_acc, report.ucert, report.attack_upper
    );
    Ok(())
}

#[derive(Serialize)]
struct AttackReport {
    eps: f64,
    clean_acc: f64,
    pgd_acc: f64,
    universal_acc: f64,
}

fn cmd_attack(args: &ModelArgs) -> AnyResult<()> {
    let cfg = prepare(&args.common)?;
    let net = load_model(args)?;
    let (_, test) = cfg.datasets()?;
    let eps = cfg.certify.eps;
    let atk = cfg.attack.with_eps(eps);
    let (mut clean, mut robust) = (0, 0);
    for (i, s) in test.samples().iter().enumerate() {
        clean += usize::from(net.predict(&s.x)? == s.y);
        let a = atk.with_seed(atk.seed.wrapping_add(i as u64));
        let adv = pgd_single(&net, &s.x, s.y, &a, test.range())?;
        robust += usize::from(net.predict(&adv)? == s.y);
    }
    let mut wrong = 0;
    for (b, batch) in test.samples().chunks(cfg.certify.batch_n.max(1)).enumerate() {
        let a = atk.with_seed(atk.seed.wrapping_add(b as u64));
        let u = pgd_universal(&net, batch, &a, test.range())?;
        wrong += misclassified_under(&net, batch, &u)?;
    }
    let n = test.len() as f64;
    let report = AttackReport {
        eps,
        clean_acc: clean as f64 / n,
        pgd_acc: robust as f64 / n,
        universal_acc: (test.len() - wrong) as f64 / n,
    };
    write_json(&args.common.out.join("attack.json"), &report)?;
    println!(
        "clean {:.4}  pgd {:.4}  universal {:.4}",
        report.clean_acc, report.pgd_acc, report.universal_acc
    );
    Ok(())
}

fn cmd_certify(args: &ModelArgs) -> AnyResult<()> {
    let cfg = prepare(&args.common)?;
    let net = load_model(args)?;
    let (_, test) = cfg.datasets()?;
    let cert = certify(&cfg, &net, &test)?;
    let out = &args.common.out;
    write_json(&out.join("cert.json"), &cert)?;
    std::fs::write(out.join("cert.csv"), cert.to_csv())?;

    // keep training-only fields of an existing report
    let path = out.join("report.json");
    let previous: Option<RunReport> = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let mut report = RunReport::new(&cfg, &cert);
    if let Some(p) = previous {
        report.epochs = p.epochs;
        report.wall_s = p.wall_s;
    }
    write_json(&path, &report)?;
    println!(
        "{} at eps {}: ucert {:.4}  attack upper {:.4}",
        cert.metric, cert.eps, cert.ucert, cert.attack_upper
    );
    Ok(())
}

fn cmd_oracle(common: &Common) -> AnyResult<u8> {
    let cfg = prepare(common)?;
    let report = run_campaign(&cfg.oracle)?;
    write_json(&common.out.join("oracle.json"), &report)?;
    for (name, t) in report.tallies() {
        println!(
            "{name:<26} checked {:>4}  vacuous {:>4}  violations {}",
            t.checked, t.vacuous, t.violations
        );
    }
    if report.violations() > 0 {
        eprintln!("{} inequality violations", report.violations());
        return Ok(ORACLE_VIOLATION);
    }
    Ok(0)
}

const REPORT_HEADER: &str = "run,loss,eps,Std,UCert,attack_upper";

fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> AnyResult<()> {
    if runs.is_empty() {
        return Err("report needs at least one run directory".into());
    }
    let mut table = String::from(REPORT_HEADER);
    table.push('\n');
    for dir in runs {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let r: RunReport = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        table.push_str(&format!(
            "{},{},{},{:.2},{:.2},{:.2}\n",
            dir.file_name().unwrap_or(dir.as_os_str()).to_string_lossy(),
            r.loss_kind,
            r.eps,
            100.0 * r.clean_acc,
            100.0 * r.ucert,
            100.0 * r.attack_upper
        ));
    }
    match out {
        Some(p) => std::fs::write(p, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn run(cli: Cli) -> AnyResult<u8> {
    match &cli.command {
        Command::GenData(c) => cmd_gen_data(c)?,
        Command::Train(c) => cmd_train(c)?,
        Command::Attack(a) => cmd_attack(a)?,
        Command::Certify(a) => cmd_certify(a)?,
        Command::Oracle(c) => return cmd_oracle(c),
        Command::Report { runs, out } => cmd_report(runs, out.as_deref())?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
