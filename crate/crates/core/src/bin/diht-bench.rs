use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use diht::bench::{self, report, BenchConfig, Mode, OutputFormat};
use diht::MapConfig;

/// Operations and iteration microbenchmarks for the distributed hash table.
#[derive(Debug, Parser)]
#[command(name = "diht-bench", version)]
struct Args {
    /// Simulated locales.
    #[arg(long, default_value_t = 4)]
    locales: usize,
    /// Worker tasks per locale.
    #[arg(long, default_value_t = 4)]
    tasks: usize,
    /// Total operations across all tasks (operations modes).
    #[arg(long, default_value_t = 1_000_000)]
    ops: u64,
    /// Share of lookups; the rest is split evenly between inserts and erases.
    #[arg(long, default_value_t = 0.8)]
    read_ratio: f64,
    /// Keys are drawn from a space of 2^key-bits.
    #[arg(long, default_value_t = 16)]
    key_bits: u32,
    /// Aggregation buffer capacity per destination.
    #[arg(long, default_value_t = 10240)]
    buffer_size: usize,
    /// Pairs per element list before it splits.
    #[arg(long, default_value_t = 8)]
    bucket_elems: usize,
    /// Root buckets per locale.
    #[arg(long, default_value_t = 1024)]
    root_size: usize,
    /// Workload seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// ops-sync, ops-async, iter-serial or iter-parallel.
    #[arg(long, default_value = "ops-async")]
    mode: Mode,
    /// text, csv or json.
    #[arg(long, default_value = "text")]
    output: OutputFormat,
}

impl Args {
    fn config(&self) -> BenchConfig {
        BenchConfig {
            locales: self.locales,
            tasks: self.tasks,
            total_ops: self.ops,
            key_bits: self.key_bits,
            map: MapConfig {
                buffer_size: self.buffer_size,
                bucket_num_elements: self.bucket_elems,
                root_buckets_per_locale: self.root_size,
                ..MapConfig::default()
            },
            seed: self.seed,
            mode: self.mode,
            ..BenchConfig::default()
        }
        .with_read_ratio(self.read_ratio)
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = args.config();
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    if cfg.mode.is_iteration() && cfg.is_large() {
        eprintln!(
            "warning: {} keys will need several GiB of memory",
            cfg.key_range()
        );
    }
    match bench::run(&cfg) {
        Ok(reports) => {
            let out = report::render(&reports, args.output);
            let _ = std::io::stdout().write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
