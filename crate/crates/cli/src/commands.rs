//! Argument definitions and subcommand dispatch.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dopq_core::dqt;
use dopq_core::pipeline::GridSpec;
use dopq_core::toyvit::{gaussian_tokens, ViTConfig};
use dopq_core::QuantizerKind;
use serde::Serialize;

use crate::ablation::{
    ablation_mosf, ablation_tanq, mosf_mad_rows, mosf_rows, tanq_rows, PairCheck, MOSF_FACTORS, MOSF_HEADER,
    MOSF_MAD_HEADER, TANQ_HEADER, TANQ_KINDS,
};
use crate::config::{RunConfig, RunManifest, VERSION};
use crate::data::{postln_channels, softmax_rows, CorpusSummary, Lab};
use crate::error::{CliError, Result};
use crate::output::{write_csv, write_json};
use crate::report::summarize;
use crate::run::cmd_run;
use crate::sweep::{rows_of, sweep_quantizers, SweepRow, SWEEP_BITS};

#[derive(Debug, Parser)]
#[command(name = "dopq", version = VERSION, about = "Post-training quantization lab for a toy vision transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Error of every quantizer family at several bit-widths on a corpus.
    SweepQuantizers(SweepArgs),
    /// Top-1 agreement with different post-Softmax quantizers.
    AblationTanq(TanqArgs),
    /// Median- vs. mean-based shared factors under injected outliers.
    AblationMosf(MosfArgs),
    /// Full three-stage pipeline run into a run directory.
    Run(RunArgs),
    /// Human-readable summary of a run or ablation directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    SoftmaxRows,
    PostlnChannels,
    TokenSequences,
}

fn parse_kind(s: &str) -> std::result::Result<QuantizerKind, String> {
    s.parse().map_err(|e: dopq_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: CorpusKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rows (softmax, post-LayerNorm) or sequences (tokens).
    #[arg(long, default_value_t = 512)]
    pub rows: usize,
    /// Row length N (softmax) or channel count (post-LayerNorm).
    #[arg(long, default_value_t = 16)]
    pub cols: usize,
    /// Logit standard deviation of softmax rows.
    #[arg(long, default_value_t = 3.0)]
    pub sigma: f64,
    /// Number of outlier channels (post-LayerNorm).
    #[arg(long, default_value_t = 2)]
    pub outliers: usize,
    #[arg(long, default_value_t = 50.0)]
    pub outlier_factor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Corpus file (`.dqt`); a σ = 3 softmax corpus from `--seed` if absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_BITS)]
    pub bits: Vec<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TanqArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub bits_a: u32,
    /// Restrict to these post-Softmax families (default: uq, log2, sulq, tanq).
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub quantizer: Vec<QuantizerKind>,
    /// Skip the high-precision control row.
    #[arg(long)]
    pub no_control: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MosfArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub bits_w: u32,
    #[arg(long, default_value_t = 4)]
    pub bits_a: u32,
    #[arg(long, value_delimiter = ',', default_values_t = MOSF_FACTORS)]
    pub outlier_factor: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration (schema "dopq.run/v1"); defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bits_w: Option<u32>,
    #[arg(long)]
    pub bits_a: Option<u32>,
    #[arg(long)]
    pub outlier_factor: Option<f64>,
    /// Post-Softmax quantizer family.
    #[arg(long, value_parser = parse_kind)]
    pub quantizer: Option<QuantizerKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `run`, `ablation-tanq`, `ablation-mosf` or
    /// `sweep-quantizers`.
    pub dir: PathBuf,
    /// Also write the summary to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn prepare(out: &Path, subcommand: &str, seed: u64, config: Option<&Path>) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("manifest.json"), &RunManifest::new(subcommand, seed, config, out))
}

/// Checks plus the rows they were computed from.
#[derive(Debug, Serialize)]
struct Checked<'a, T> {
    rows: &'a T,
    checks: Vec<PairCheck>,
}

fn print_checks(checks: &[PairCheck]) {
    for c in checks {
        println!("{} {}", if c.holds { "PASS" } else { "FAIL" }, c.claim);
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (name, tensor, softmax) = match a.kind {
        CorpusKind::SoftmaxRows => ("softmax_rows", softmax_rows(a.rows, a.cols, a.sigma, a.seed)?, true),
        CorpusKind::PostlnChannels => {
            let (x, _) = postln_channels(a.rows, a.cols, a.outliers, a.outlier_factor, a.seed)?;
            ("postln_channels", x, false)
        }
        CorpusKind::TokenSequences => (
            "token_sequences",
            gaussian_tokens(&ViTConfig::lab(a.seed), a.rows, a.seed)?,
            false,
        ),
    };
    prepare(&a.out, "gen-data", a.seed, None)?;
    dqt::write_f64(a.out.join(format!("{name}.dqt")), &tensor)?;
    let summary = CorpusSummary::of(&tensor, softmax);
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("{name} {:?} written to {}", summary.shape, a.out.display());
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let corpus = match &a.corpus {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Data(format!("corpus {} not found", p.display())));
            }
            dqt::read_f64(p)?
        }
        None => softmax_rows(512, 16, 3.0, a.seed)?,
    };
    if a.bits.is_empty() {
        return Err(CliError::Usage("--bits needs at least one bit-width".into()));
    }
    let rows = sweep_quantizers(&corpus, &a.bits, &GridSpec::default().grid())?;
    prepare(&a.out, "sweep-quantizers", a.seed, None)?;
    let header = SweepRow::header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&a.out.join("sweep.csv"), &header, &rows.iter().map(SweepRow::record).collect::<Vec<_>>())?;
    let mut checks = Vec::new();
    let (lo, hi) = (a.bits.iter().min(), a.bits.iter().max());
    if let (Some(&lo), Some(&hi)) = (lo, hi) {
        if lo < hi {
            for kind in QuantizerKind::ALL {
                let r = rows_of(&rows, kind);
                let mse = |b| r.iter().find(|x| x.bitwidth == b).map(|x| x.mse);
                checks.push(PairCheck {
                    claim: format!("{kind}: b={hi} mse < b={lo} mse"),
                    holds: mse(hi) < mse(lo),
                });
            }
        }
    }
    if a.bits.contains(&4) {
        let mse = |k| rows.iter().find(|r| r.quantizer == k && r.bitwidth == 4).map(|r| r.mse);
        checks.push(PairCheck {
            claim: "b=4: tanq mse <= uq mse".into(),
            holds: mse(QuantizerKind::Tan) <= mse(QuantizerKind::Uniform),
        });
    }
    write_json(&a.out.join("sweep.json"), &Checked { rows: &rows, checks: checks.clone() })?;
    for r in &rows {
        println!("{:>8} b={} mse={:.3e} max_err={:.3e}", r.quantizer.name(), r.bitwidth, r.mse, r.max_err);
    }
    print_checks(&checks);
    Ok(())
}

pub fn tanq(a: &TanqArgs) -> Result<()> {
    let kinds = if a.quantizer.is_empty() {
        TANQ_KINDS.to_vec()
    } else {
        a.quantizer.clone()
    };
    let lab = Lab::standard(a.seed, 1.0)?;
    let result = ablation_tanq(&lab, a.seed, a.bits_a, &kinds, !a.no_control)?;
    prepare(&a.out, "ablation-tanq", a.seed, None)?;
    write_csv(&a.out.join("ablation_tanq.csv"), &TANQ_HEADER, &tanq_rows(&result))?;
    write_json(&a.out.join("ablation_tanq.json"), &result)?;
    for r in result.rows.iter().chain(&result.control) {
        println!("{:>8} a{} agreement {:.4}", r.quantizer.name(), r.bits_a, r.top1_agreement);
    }
    print_checks(&result.checks);
    Ok(())
}

pub fn mosf(a: &MosfArgs) -> Result<()> {
    if a.outlier_factor.is_empty() {
        return Err(CliError::Usage("--outlier-factor needs at least one value".into()));
    }
    let result = ablation_mosf(a.seed, &a.outlier_factor, a.bits_w, a.bits_a)?;
    prepare(&a.out, "ablation-mosf", a.seed, None)?;
    write_csv(&a.out.join("ablation_mosf.csv"), &MOSF_HEADER, &mosf_rows(&result))?;
    write_csv(&a.out.join("mad_tables.csv"), &MOSF_MAD_HEADER, &mosf_mad_rows(&result))?;
    write_json(&a.out.join("ablation_mosf.json"), &result)?;
    for e in &result.entries {
        println!(
            "factor {:>4}: mosf mse {:.6e}  repq mse {:.6e}  relative {:+.3e}",
            e.factor, e.ab.mosf_mean_block_mse, e.ab.repq_mean_block_mse, e.ab.rel_diff
        );
    }
    print_checks(&result.checks);
    Ok(())
}

pub fn run(a: &RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(0),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.bits_w {
        cfg.pipeline.template.bits_w = b;
    }
    if let Some(b) = a.bits_a {
        cfg.pipeline.template.bits_a = b;
    }
    if let Some(f) = a.outlier_factor {
        cfg.outlier_factor = f;
    }
    if let Some(k) = a.quantizer {
        cfg.pipeline.template.softmax = k;
    }
    cfg.validate()?;
    let doc = cmd_run(&cfg, a.config.as_deref(), &a.out)?;
    println!(
        "top-1 agreement {:.4}, held-out block mse {:?}",
        doc.report.eval.top1_agreement, doc.report.eval.block_mse
    );
    println!("run directory {}", a.out.display());
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let text = summarize(&a.dir)?;
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text)?;
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::SweepQuantizers(a) => sweep(a),
        Command::AblationTanq(a) => tanq(a),
        Command::AblationMosf(a) => mosf(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
    }
}
