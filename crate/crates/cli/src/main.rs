//! sbnet-lab: analyze, verify, train, and benchmark residual networks
//! built around the offset-strided conv/deconv module.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 randomized property
//! failure, 3 numeric tolerance failure.

use std::fmt::Display;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sbnet_core::analysis::{self, TableRow};
use sbnet_core::battery::standard_battery;
use sbnet_core::bench::{run_suite, speedup_verdict, BenchCase};
use sbnet_core::checks::run_random_battery;
use sbnet_core::data::{DatasetSpec, Normalizer};
use sbnet_core::net::{Family, Network, NetworkConfig};
use sbnet_core::sb::DownsampleMode;
use sbnet_core::train::{evaluate, train, AugmentSpec, OptimSpec, TrainOptions};

#[derive(Parser)]
#[command(name = "sbnet-lab", version, about = "Residual networks with offset-strided conv/deconv modules")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print per-layer MACs, parameters, and auxiliary op counts.
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient battery.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run randomized invariant checks on the core operators.
    Properties {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a configured network on a dataset spec.
    Train(TrainArgs),
    /// Time one residual block against its compact variants.
    Bench(BenchArgs),
    /// Computed complexity totals next to the published figures.
    Tables(TablesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Text,
    Csv,
    Json,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON network config file; overrides the structured flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Family: cifar_regular, cifar_bottleneck, imagenet_regular, imagenet_bottleneck.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Enable the conv/deconv module on stride-1 blocks.
    #[arg(long)]
    sb: bool,
    /// Sampling pattern: 1/4, 2/4, 3/4, or full.
    #[arg(long, default_value = "2/4")]
    pattern: String,
    /// Compact-path downsampling: strided_conv or avgpool_conv.
    #[arg(long, default_value = "strided_conv")]
    downsample: String,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<NetworkConfig, String> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            return NetworkConfig::from_json(&text).map_err(|e| e.to_string());
        }
        let family = parse_family(self.family.as_deref().ok_or("pass --config or --family with --depth")?)?;
        let depth = self.depth.ok_or("pass --depth with --family")?;
        let classes = self.classes.unwrap_or(if family.is_cifar() { 10 } else { 1000 });
        let mut config = NetworkConfig::new(family, depth, classes);
        if self.sb {
            config = config.with_sb(&self.pattern, parse_mode(&self.downsample)?);
        }
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

fn parse_family(s: &str) -> Result<Family, String> {
    match s {
        "cifar_regular" => Ok(Family::CifarRegular),
        "cifar_bottleneck" => Ok(Family::CifarBottleneck),
        "imagenet_regular" => Ok(Family::ImagenetRegular),
        "imagenet_bottleneck" => Ok(Family::ImagenetBottleneck),
        _ => Err(format!("unknown family `{s}`")),
    }
}

fn parse_mode(s: &str) -> Result<DownsampleMode, String> {
    match s {
        "strided_conv" => Ok(DownsampleMode::StridedConv),
        "avgpool_conv" => Ok(DownsampleMode::AvgpoolConv),
        _ => Err(format!("unknown downsample mode `{s}`")),
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value_t = OutFormat::Text)]
    format: OutFormat,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// synthetic:<seed>:<n>:<classes>, cifar10:<dir>, or cifar100:<dir>.
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Override the default batch size of 64.
    #[arg(long)]
    batch: Option<usize>,
    /// Override the default initial learning rate of 0.1.
    #[arg(long)]
    lr: Option<f64>,
    /// Model initialization seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Example order and augmentation seed.
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[arg(long)]
    limit_train: Option<usize>,
    #[arg(long)]
    limit_test: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    /// Directory for metrics.csv, run.json, and checkpoint/.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// all, rb, sb_1/4, sb_2/4, or sb_3/4.
    #[arg(long, default_value = "all")]
    case: String,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 32)]
    hw: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Apply the speedup policy to sb_2/4 (adds it if missing); exits 3
    /// when the measured speedup lands below 1.15x.
    #[arg(long)]
    check: bool,
    #[arg(long, value_enum, default_value_t = OutFormat::Text)]
    format: OutFormat,
}

#[derive(Args)]
struct TablesArgs {
    /// all, cifar_regular, cifar_bottleneck, or imagenet.
    #[arg(long, default_value = "all")]
    family: String,
    #[arg(long, value_enum, default_value_t = OutFormat::Text)]
    format: OutFormat,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match cli.cmd {
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
        Cmd::Properties { cases, seed } => cmd_properties(cases, seed),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Tables(args) => cmd_tables(args),
    };
    std::process::exit(code);
}

fn fail(e: impl Display) -> i32 {
    eprintln!("error: {e}");
    1
}

fn emit(text: String, out: Option<&PathBuf>) -> i32 {
    match out {
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            0
        }
        Some(path) => match fs::write(path, text) {
            Ok(()) => 0,
            Err(e) => fail(format!("{}: {e}", path.display())),
        },
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> i32 {
    let config = match args.config.resolve() {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let report = match analysis::analyze(&config) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let text = match args.format {
        OutFormat::Text => report.to_text(),
        OutFormat::Csv => report.to_csv(),
        OutFormat::Json => report.to_json(),
    };
    emit(text, args.out.as_ref())
}

fn cmd_gradcheck(seed: u64) -> i32 {
    let items = standard_battery(seed);
    let mut failed = 0;
    for item in &items {
        let status = if item.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<34} max_err {:>10.3e}  tol {:>7.0e}  checked {:>4}  {status}",
            item.name, item.report.max_err, item.tol, item.report.checked
        );
        if !item.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks failed", items.len());
        3
    } else {
        println!("all {} gradient checks passed", items.len());
        0
    }
}

fn cmd_properties(cases: usize, seed: u64) -> i32 {
    let out = run_random_battery(cases, seed);
    for msg in &out.failures {
        eprintln!("FAIL {msg}");
    }
    if out.passed() {
        println!("all {} randomized property cases passed", out.cases_run);
        0
    } else {
        eprintln!("{} of {} randomized property cases failed", out.failures.len(), out.cases_run);
        2
    }
}

fn cmd_train(args: TrainArgs) -> i32 {
    let config = match args.config.resolve() {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let spec = match DatasetSpec::parse(&args.dataset) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let (mut train_ds, mut test_ds) = match spec.load() {
        Ok(pair) => pair,
        Err(e) => return fail(e),
    };
    if let Some(n) = args.limit_train {
        train_ds.truncate(n);
    }
    if let Some(n) = args.limit_test {
        test_ds.truncate(n);
    }
    if train_ds.num_classes() != config.num_classes {
        return fail(format!(
            "config has {} classes but dataset {} has {}",
            config.num_classes,
            train_ds.name,
            train_ds.num_classes()
        ));
    }
    let norm = Normalizer::fit(&train_ds);
    norm.apply(&mut train_ds);
    norm.apply(&mut test_ds);

    let mut net = match Network::build(&config, args.seed) {
        Ok(n) => n,
        Err(e) => return fail(e),
    };
    let mut optim = OptimSpec::standard(args.epochs);
    if let Some(b) = args.batch {
        optim.batch = b;
    }
    if let Some(lr) = args.lr {
        optim.lr = lr;
    }
    let opts = TrainOptions {
        epochs: args.epochs,
        optim,
        augment: AugmentSpec { enabled: !args.no_augment, ..AugmentSpec::default() },
        data_seed: args.data_seed,
        out_dir: args.out.clone(),
        verbose: !args.quiet,
    };
    println!(
        "training {} depth {} ({} params) on {} ({} train / {} test)",
        config.family,
        config.depth,
        net.param_count(),
        train_ds.name,
        train_ds.len(),
        test_ds.len()
    );
    match train(&mut net, &train_ds, &test_ds, &opts) {
        Ok(report) => {
            let train_err = evaluate(&net, &train_ds, opts.optim.batch).unwrap_or(1.0);
            println!(
                "done: final test_err {:.4}, train_err {:.4} over {} epochs",
                report.final_test_err,
                train_err,
                report.epochs.len()
            );
            0
        }
        Err(e) => fail(e),
    }
}

fn cmd_bench(args: BenchArgs) -> i32 {
    let mut cases: Vec<BenchCase> = if args.case == "all" {
        BenchCase::all().to_vec()
    } else {
        match BenchCase::parse(&args.case) {
            Some(c) => vec![c],
            None => return fail(format!("unknown case `{}`", args.case)),
        }
    };
    let check_case = BenchCase::Sb { m: 2 };
    if args.check && !cases.contains(&check_case) {
        cases.push(check_case);
    }
    if args.iters == 0 {
        return fail("--iters must be at least 1");
    }
    let results = match run_suite(&cases, args.channels, args.hw, args.batch, args.iters, args.seed) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    match args.format {
        OutFormat::Json => println!("{}", serde_json::to_string_pretty(&results).expect("results serialize")),
        _ => {
            println!(
                "{:<8} {:>11} {:>9} {:>14} {:>9}  verdict (threads=1, {} iters, {}x{}x{} input)",
                "case", "median_ms", "iqr_ms", "macs", "speedup", args.iters, args.channels, args.hw, args.hw
            );
            for r in &results {
                let verdict = if r.case == "rb" { "-" } else { speedup_verdict(r.speedup_vs_baseline) };
                println!(
                    "{:<8} {:>11.3} {:>9.3} {:>14} {:>9.2}  {verdict}",
                    r.case, r.median_ms, r.iqr_ms, r.macs, r.speedup_vs_baseline
                );
            }
        }
    }
    if args.check {
        let r = results.iter().find(|r| r.case == "sb_2/4").expect("check case was added");
        let verdict = speedup_verdict(r.speedup_vs_baseline);
        eprintln!("speedup check (sb_2/4): {:.2}x -> {verdict}", r.speedup_vs_baseline);
        if verdict == "fail" {
            return 3;
        }
    }
    0
}

fn table_text(rows: &[TableRow]) -> String {
    let mut s = format!(
        "{:<20} {:>5} {:<7} {:>14} {:>14} {:>8}\n",
        "family", "depth", "variant", "computed", "published", "dev%"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:>5} {:<7} {:>14} {:>14} {:>+8.2}\n",
            r.family.to_string(),
            r.depth,
            if r.sb { "sb" } else { "base" },
            r.computed,
            r.published as u64,
            r.rel_dev * 100.0
        ));
    }
    s
}

fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("family,depth,variant,computed,published,rel_dev\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            r.family,
            r.depth,
            if r.sb { "sb" } else { "base" },
            r.computed,
            r.published,
            r.rel_dev
        ));
    }
    s
}

fn cmd_tables(args: TablesArgs) -> i32 {
    let groups: Vec<&str> = match args.family.as_str() {
        "all" => vec!["cifar_regular", "cifar_bottleneck", "imagenet"],
        "cifar_regular" | "cifar_bottleneck" | "imagenet" => vec![args.family.as_str()],
        other => return fail(format!("unknown table family `{other}`")),
    };
    let mut rows = Vec::new();
    for g in groups {
        let r = match g {
            "cifar_regular" => analysis::compare_cifar_regular(),
            "cifar_bottleneck" => analysis::compare_cifar_bottleneck(),
            _ => analysis::compare_imagenet(),
        };
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(e) => return fail(e),
        }
    }
    let text = match args.format {
        OutFormat::Text => table_text(&rows),
        OutFormat::Csv => table_csv(&rows),
        OutFormat::Json => serde_json::to_string_pretty(&rows).expect("rows serialize"),
    };
    emit(text, None)
}
