use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use winocaffe::device::{Device, DeviceConfig, ReprogramPolicy};
use winocaffe::net::{parse_netdef, random_weights, save_weights, Network};
use winocaffe::perf::{
    dsp_comparison, dsp_estimate, load_fixtures, parse_fixtures, run_benchmark, BenchOptions,
    DspCostModel, PerfConfig, BUILTIN_SUITE,
};
use winocaffe::tensor::Tensor4D;
use winocaffe::verify::{run_verification, ABS_FLOOR, REL_TOL};
use winocaffe::winograd::{conv3x3_winograd, tiling_dims, OpCounters, Strategy};

#[derive(Parser)]
#[command(name = "winocaffe", version, about = "Winograd 3x3 convolution engine and simulated accelerator runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reprogram {
    Always,
    SkipIfLoaded,
}

#[derive(Subcommand)]
enum Command {
    /// Check every strategy against the direct convolution on random layers.
    Verify {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run one forward pass of a model file.
    Run {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Print the device event log.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value_t = 2)]
        cus: usize,
        #[arg(long, value_enum, default_value_t = Reprogram::Always)]
        reprogram: Reprogram,
        /// Write the output tensor here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time the 3x3 layers of the benchmark networks.
    Bench {
        /// Fixture CSV; the built-in convnet suite when omitted.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        batch_scale: f64,
        #[arg(long, default_value = "case3")]
        strategy: Strategy,
        #[arg(long, default_value_t = 2)]
        cus: usize,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Operation and DSP accounting for one strategy.
    Count {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value_t = 4)]
        pe: usize,
        /// Input plane size used for the per-layer totals.
        #[arg(long, default_value_t = 13)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        maps: usize,
    },
    /// Write random weight files for a model, plus a random input tensor.
    Gen {
        #[arg(long)]
        net: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Where to write the input tensor.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { trials, seed } => verify(trials, seed),
        Command::Run {
            net,
            input,
            trace,
            cus,
            reprogram,
            output,
        } => run(&net, &input, trace, cus, reprogram, output.as_deref()),
        Command::Bench {
            suite,
            batch_scale,
            strategy,
            cus,
            seed,
            csv,
        } => bench(suite.as_deref(), batch_scale, strategy, cus, seed, csv.as_deref()),
        Command::Count {
            strategy,
            pe,
            size,
            channels,
            maps,
        } => count(strategy, pe, size, channels, maps),
        Command::Gen { net, seed, input } => gen(&net, seed, input.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn verify(trials: usize, seed: u64) -> CliResult {
    let start = std::time::Instant::now();
    let r = run_verification(trials, seed);
    println!(
        "{} random layers, seed {}, tolerance rel {:e} / abs {:e}",
        r.trials, seed, REL_TOL, ABS_FLOOR
    );
    println!(
        "engine vs direct:     max abs {:.3e}  max rel {:.3e}  violations {}",
        r.oracle.max_abs, r.oracle.max_rel, r.oracle.violations
    );
    println!(
        "strategy vs strategy: max abs {:.3e}  max rel {:.3e}  violations {}",
        r.strategies.max_abs, r.strategies.max_rel, r.strategies.violations
    );
    println!("{:.2} s", start.elapsed().as_secs_f64());
    if r.passed() {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::FAILURE)
    }
}

fn run(net: &Path, input: &Path, trace: bool, cus: usize, reprogram: Reprogram, output: Option<&Path>) -> CliResult {
    let mut device = Device::new(DeviceConfig {
        cu_count: cus.max(1),
        reprogram: match reprogram {
            Reprogram::Always => ReprogramPolicy::Always,
            Reprogram::SkipIfLoaded => ReprogramPolicy::SkipIfLoaded,
        },
        ..DeviceConfig::default()
    });
    let mut network = Network::from_file(net, &device)?;
    let x = Tensor4D::load(input)?;
    let report = network.forward(&x, &mut device)?;
    println!("net {} input {} output {}", network.def().name, x.shape(), report.output.shape());
    print!("{}", report.to_text());
    if let Some(out) = output {
        report.output.save(out)?;
        println!("output written to {}", out.display());
    }
    if trace {
        let stdout = io::stdout();
        let mut w = stdout.lock();
        writeln!(w)?;
        device.log().write_lines(&mut w)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(
    suite: Option<&Path>,
    batch_scale: f64,
    strategy: Strategy,
    cus: usize,
    seed: u64,
    csv: Option<&Path>,
) -> CliResult {
    let fixtures = match suite {
        Some(p) => load_fixtures(p)?,
        None => parse_fixtures(BUILTIN_SUITE)?,
    };
    let opts = BenchOptions {
        batch_scale,
        strategy,
        seed,
        perf: PerfConfig {
            cu_count: cus.max(1),
            ..PerfConfig::default()
        },
    };
    let report = run_benchmark(&fixtures, &opts)?;
    print!("{}", report.to_text());
    if let Some(path) = csv {
        report.write_csv(BufWriter::new(File::create(path)?))?;
        println!("csv written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn count(strategy: Strategy, pe: usize, size: usize, channels: usize, maps: usize) -> CliResult {
    if pe == 0 || size == 0 || channels == 0 || maps == 0 {
        return Err("--pe, --size, --channels and --maps must be positive".into());
    }
    let cfg = PerfConfig {
        pe_count: pe,
        ..PerfConfig::default()
    };
    let model = DspCostModel::default();
    let (p, q) = tiling_dims(size, size);
    let q_out = size.div_ceil(2);
    let per_tile = OpCounters::predicted(strategy, 1, 1, 1, 1, 1, pe);

    println!("strategy {strategy}, {pe} PEs per compute unit");
    println!(
        "adds per tile transform: {} ({} input stage, {} in PEs)",
        per_tile.input_stage_adds + per_tile.pe_transform_adds,
        per_tile.input_stage_adds,
        per_tile.pe_transform_adds
    );
    if strategy == Strategy::PartialInPe {
        println!("edge column transform per tile row: {} adds", per_tile.edge_column_adds);
    }
    if strategy == Strategy::FullPreTransform {
        println!("transformed tiles are stored: 16 values per 4x4 window instead of 8 per raw tile");
    }
    println!(
        "per window and output map: {} multiplies, {} output-transform adds, {} accumulate adds",
        per_tile.multiplications, per_tile.output_transform_adds, per_tile.accumulate_adds
    );
    println!("input-transform DSPs: {}", dsp_estimate(strategy, &cfg, &model));
    let cmp = dsp_comparison(&cfg, &model);
    println!(
        "DSPs case1 {} / case2 {} / case3 {}; case2 - case3 = {} (synthesis reported {})",
        cmp.case1, cmp.case2, cmp.case3, cmp.saving, cmp.measured_saving
    );

    // Instrumented run of a small random layer, checked against the prediction.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect() };
    let x = Tensor4D::from_vec(winocaffe::tensor::Shape::new(1, channels, size, size), draw(channels * size * size))?;
    let w = Tensor4D::from_vec(winocaffe::tensor::Shape::new(maps, channels, 3, 3), draw(maps * channels * 9))?;
    let mut measured = OpCounters::new(pe);
    conv3x3_winograd(&x, &w, None, strategy, Some(&mut measured))?;
    let predicted = OpCounters::predicted(strategy, 1, channels as u64, maps as u64, p as u64, q_out as u64, pe);
    println!();
    println!(
        "layer {channels}x{size}x{size} -> {maps} maps: {p} tile rows, {q_out} windows per row, {q} tiles per row after padding"
    );
    println!(
        "{:<24} {:>14} {:>14}",
        "counter", "measured", "predicted"
    );
    let rows = [
        ("tile transforms", measured.tile_transforms, predicted.tile_transforms),
        ("input stage adds", measured.input_stage_adds, predicted.input_stage_adds),
        ("PE transform adds", measured.pe_transform_adds, predicted.pe_transform_adds),
        ("edge column adds", measured.edge_column_adds, predicted.edge_column_adds),
        ("multiplications", measured.multiplications, predicted.multiplications),
        ("output transform adds", measured.output_transform_adds, predicted.output_transform_adds),
        ("accumulate adds", measured.accumulate_adds, predicted.accumulate_adds),
        ("max PE load", measured.max_pe_load(), predicted.max_pe_load()),
    ];
    for (name, m, p) in rows {
        println!("{name:<24} {m:>14} {p:>14}");
    }
    println!("adds per tile transform (measured): {:.2}", measured.adds_per_tile_transform());
    Ok(ExitCode::SUCCESS)
}

fn gen(net: &Path, seed: u64, input: Option<&Path>) -> CliResult {
    let def = parse_netdef(&std::fs::read_to_string(net)?)?;
    let dir = net.parent().unwrap_or(Path::new("."));
    let weights = random_weights(&def, seed);
    for p in save_weights(&def, &weights, dir)? {
        println!("wrote {}", p.display());
    }
    if let Some(path) = input {
        let s = def.input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let data = (0..s.len()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        Tensor4D::from_vec(s, data)?.save(path)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
