//! Command-line front end: `run`, `analyze`, `synth` and `export-check`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::capture::{names, read_capture, write_capture, AttentionRegime, Capture};
use crate::error::{Error, Result};
use crate::metrics::{
    leave_one_out_delta, quantile, sink_score, term_share, v_norm_profile, Thresholds,
    DEFAULT_SINK_THRESHOLD, DEFAULT_VNORM_QUANTILE,
};
use crate::model::{
    build_synthetic_waiver_model, forward, init_random_model, ModelConfig, ModelRegime,
    ModelWeights,
};
use crate::positional::swap_pe_row;
use crate::report::{analyze_capture, check_capture, default_analysis_dir, AnalyzeOptions};

pub const SEED_ENV: &str = "WAIVERLAB_SEED";

/// Token id standing in for a model's designated start token.
pub const SPECIAL_TOKEN: usize = 1;
/// Smallest id drawn for random tokens; ids below are reserved.
pub const FIRST_ORDINARY_TOKEN: usize = 2;

/// Full-scale sequence lengths the interventions are usually described
/// at. Indices given at that scale map onto desk length `L` as
/// `round(index * L / reference)`, clamped to the last position.
pub const CAUSAL_REFERENCE_LEN: usize = 1024;
pub const GLOBAL_REFERENCE_LEN: usize = 512;

#[derive(Debug, Parser)]
#[command(
    name = "waiverlab",
    version,
    about = "Attention sink and waiver-element lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a toy forward pass, optionally with an intervention, and write a capture.
    Run(RunArgs),
    /// Detect waivers in a capture and write CSV/SVG artifacts.
    Analyze(AnalyzeArgs),
    /// Build the synthetic waiver model, write its weights and a capture.
    Synth(SynthArgs),
    /// Validate a capture directory.
    ExportCheck(ExportCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Causal,
    Global,
}

impl Preset {
    pub fn regime(self) -> ModelRegime {
        match self {
            Preset::Causal => ModelRegime::CausalRope,
            Preset::Global => ModelRegime::GlobalLearnable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstToken {
    /// Position 0 holds the designated start token, the rest are random.
    Special,
    Random,
}

/// Source row of a positional-table swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapSource {
    First,
    Last,
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PeSwapArg {
    pub target: usize,
    pub source: SwapSource,
}

impl FromStr for PeSwapArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (t, src) = s
            .split_once(':')
            .ok_or_else(|| format!("expected TARGET:SOURCE, got {s:?}"))?;
        let target = t.parse().map_err(|_| format!("bad target row {t:?}"))?;
        let source = match src {
            "first" => SwapSource::First,
            "last" => SwapSource::Last,
            n => SwapSource::Index(n.parse().map_err(|_| format!("bad source row {n:?}"))?),
        };
        Ok(Self { target, source })
    }
}

impl fmt::Display for PeSwapArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.source {
            SwapSource::First => write!(f, "{}:first", self.target),
            SwapSource::Last => write!(f, "{}:last", self.target),
            SwapSource::Index(n) => write!(f, "{}:{n}", self.target),
        }
    }
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Seed for weights and random tokens; WAIVERLAB_SEED takes precedence.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value_t = Preset::Causal)]
    pub preset: Preset,
    #[arg(long, default_value_t = 64)]
    pub len: usize,
    #[arg(long, value_enum, default_value_t = FirstToken::Special, conflicts_with = "tokens")]
    pub first_token: FirstToken,
    /// Fixed comma-separated token ids; overrides --len.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Option<Vec<usize>>,
    /// Restrict query row K to attend only to itself (causal preset).
    #[arg(long, value_name = "K", conflicts_with = "pe_swap")]
    pub mask_row: Option<usize>,
    /// Copy positional row SOURCE (first, last or an index) over TARGET (global preset).
    #[arg(long, value_name = "TARGET:SOURCE")]
    pub pe_swap: Option<PeSwapArg>,
    /// Load weights from a capture directory instead of initialising them.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = DEFAULT_SINK_THRESHOLD)]
    pub sink_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_VNORM_QUANTILE)]
    pub vnorm_quantile: f64,
}

impl ThresholdArgs {
    fn thresholds(&self) -> Thresholds {
        Thresholds {
            sink_threshold: self.sink_threshold,
            vnorm_quantile: self.vnorm_quantile,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub capture: PathBuf,
    /// Output directory; defaults to CAPTURE/analysis.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    /// Only draw figures for this layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Only draw figures for this head.
    #[arg(long)]
    pub head: Option<usize>,
    /// Query row shown in attention scatters; defaults to the last row.
    #[arg(long)]
    pub query_row: Option<usize>,
    #[arg(long)]
    pub hidden_layer: Option<usize>,
    #[arg(long)]
    pub hidden_position: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Preset::Causal)]
    pub preset: Preset,
    #[arg(long, default_value_t = 64)]
    pub len: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = SPECIAL_TOKEN)]
    pub waiver_token: usize,
    /// Position holding the waiver token.
    #[arg(long, default_value_t = 0)]
    pub waiver_position: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct ExportCheckArgs {
    pub capture: PathBuf,
    /// Treat warnings as failure.
    #[arg(long)]
    pub strict: bool,
}

/// Seed after applying the environment override.
pub fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TokenSource {
    Fixed { ids: Vec<usize> },
    SeededRandom,
    SpecialFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InterventionSpec {
    None,
    MaskRow { position: usize },
    PeSwap { target: usize, source: SwapSource },
}

/// A validated `run` request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub preset: Preset,
    pub len: usize,
    pub tokens: TokenSource,
    pub intervention: InterventionSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub weights: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_args(args: &RunArgs, seed: u64) -> Result<Self> {
        let (len, tokens) = match &args.tokens {
            Some(ids) => (ids.len(), TokenSource::Fixed { ids: ids.clone() }),
            None => (
                args.len,
                match args.first_token {
                    FirstToken::Special => TokenSource::SpecialFirst,
                    FirstToken::Random => TokenSource::SeededRandom,
                },
            ),
        };
        let intervention = match (args.mask_row, args.pe_swap) {
            (Some(_), Some(_)) => return Err(Error::Usage("choose one intervention".into())),
            (Some(position), None) => InterventionSpec::MaskRow { position },
            (None, Some(p)) => InterventionSpec::PeSwap {
                target: p.target,
                source: p.source,
            },
            (None, None) => InterventionSpec::None,
        };
        let spec = Self {
            preset: args.preset,
            len,
            tokens,
            intervention,
            seed,
            out: args.out.clone(),
            weights: args.weights.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len == 0 {
            return Err(Error::Usage("sequence length must be positive".into()));
        }
        match self.intervention {
            InterventionSpec::MaskRow { position } => {
                if self.preset != Preset::Causal {
                    return Err(Error::Usage("--mask-row requires the causal preset".into()));
                }
                if position >= self.len {
                    return Err(Error::Usage(format!(
                        "--mask-row {position} outside length {}",
                        self.len
                    )));
                }
            }
            InterventionSpec::PeSwap { .. } if self.preset != Preset::Global => {
                return Err(Error::Usage("--pe-swap requires the global preset".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Desk-scale counterparts of the full-scale indices the interventions
    /// are usually quoted at.
    pub fn index_mapping(&self) -> Vec<String> {
        let (reference, indices): (usize, &[usize]) = match self.preset {
            Preset::Causal => (CAUSAL_REFERENCE_LEN, &[255]),
            Preset::Global => (GLOBAL_REFERENCE_LEN, &[0, 383, 511]),
        };
        indices
            .iter()
            .map(|&i| {
                format!(
                    "index mapping: full-scale index {i} of {reference} -> desk index {} of {}",
                    desk_index(i, reference, self.len),
                    self.len
                )
            })
            .collect()
    }

    fn token_ids(&self, vocab: usize) -> Result<Vec<usize>> {
        if vocab <= FIRST_ORDINARY_TOKEN {
            return Err(Error::Config(format!(
                "vocabulary of {vocab} leaves no ordinary tokens"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let mut random = |n: usize| -> Vec<usize> {
            (0..n)
                .map(|_| rng.gen_range(FIRST_ORDINARY_TOKEN..vocab))
                .collect()
        };
        Ok(match &self.tokens {
            TokenSource::Fixed { ids } => ids.clone(),
            TokenSource::SeededRandom => random(self.len),
            TokenSource::SpecialFirst => {
                let mut ids = random(self.len);
                ids[0] = SPECIAL_TOKEN;
                ids
            }
        })
    }
}

fn load_or_init(spec: &ExperimentSpec) -> Result<ModelWeights> {
    match &spec.weights {
        Some(dir) => {
            let w = ModelWeights::from_capture(&read_capture(dir)?)?;
            if w.config.regime != spec.preset.regime() {
                return Err(Error::Usage(format!(
                    "weights in {} are {:?}, not {:?}",
                    dir.display(),
                    w.config.regime,
                    spec.preset
                )));
            }
            Ok(w)
        }
        None => {
            let mut config = ModelConfig::desk(spec.preset.regime());
            config.seed = spec.seed;
            config.max_len = spec.len;
            init_random_model(&config)
        }
    }
}

/// Nearest desk position to full-scale index `i`, kept inside the sequence.
pub fn desk_index(i: usize, reference: usize, len: usize) -> usize {
    ((i as f64 * len as f64 / reference as f64).round() as usize).min(len.saturating_sub(1))
}

/// Executes a `run` request and returns the capture it wrote, along with
/// log lines for the console.
pub fn cmd_run(spec: &ExperimentSpec) -> Result<(Capture, Vec<String>)> {
    let mut weights = load_or_init(spec)?;
    let tokens = spec.token_ids(weights.config.vocab_size)?;
    let mut mask = weights.config.default_mask(spec.len)?;
    let mut log = spec.index_mapping();
    match spec.intervention {
        InterventionSpec::None => {}
        InterventionSpec::MaskRow { position } => {
            mask = mask.with_self_only_row(position)?;
            log.push(format!(
                "intervention: query row {position} attends only to itself"
            ));
        }
        InterventionSpec::PeSwap { target, source } => {
            let pe = weights
                .pe
                .as_ref()
                .ok_or_else(|| Error::Usage("model has no positional table".into()))?;
            let source = match source {
                SwapSource::First => 0,
                SwapSource::Last => pe.max_len() - 1,
                SwapSource::Index(n) => n,
            };
            weights.pe = Some(swap_pe_row(pe, target, source)?);
            log.push(format!(
                "intervention: positional row {target} <- row {source}"
            ));
        }
    }
    let mut capture = forward(&weights, &tokens, &mask, true)?
        .capture
        .expect("capture requested");
    capture.metadata.notes.extend(spec.index_mapping());
    write_capture(&capture, &spec.out)?;
    log.push(format!(
        "wrote {} tensors to {}",
        capture.len(),
        spec.out.display()
    ));
    Ok((capture, log))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<Vec<String>> {
    let capture = read_capture(&args.capture)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_analysis_dir(&args.capture));
    let opts = AnalyzeOptions {
        thresholds: args.thresholds.thresholds(),
        layer: args.layer,
        head: args.head,
        query_row: args.query_row,
        hidden_layer: args.hidden_layer,
        hidden_position: args.hidden_position,
    };
    let (_, summary) = analyze_capture(&capture, &opts, &out)?;
    let t = summary.thresholds;
    let mut log = vec![
        format!(
            "thresholds: sink_threshold={} vnorm_quantile={}",
            t.sink_threshold, t.vnorm_quantile
        ),
        format!(
            "interventions: {}",
            if summary.interventions.is_empty() {
                "none".to_string()
            } else {
                summary
                    .interventions
                    .iter()
                    .map(|i| i.label())
                    .collect::<Vec<_>>()
                    .join(", ")
            }
        ),
        format!("waiver positions: {:?}", summary.waiver_positions),
    ];
    log.extend(summary.notes.iter().map(|n| format!("note: {n}")));
    log.push(format!(
        "wrote {} files to {}",
        summary.files.len(),
        out.display()
    ));
    Ok(log)
}

/// Per-head diagnostics of the waiver position in a synthetic capture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthHeadStats {
    pub layer: usize,
    pub head: usize,
    pub sink_score: f64,
    pub v_l2_over_median: f64,
    pub max_leave_one_out: f64,
    pub max_term_share: f64,
}

pub fn synth_stats(
    capture: &Capture,
    regime: AttentionRegime,
    position: usize,
) -> Result<Vec<SynthHeadStats>> {
    capture
        .attention_heads()
        .into_iter()
        .map(|(layer, head)| {
            let w = capture.require(&names::attn_weights(layer, head))?;
            let v = capture.require(&names::value(layer, head))?;
            let l2: Vec<f64> = v_norm_profile(v).iter().map(|p| p.l2).collect();
            let median = quantile(&l2, 0.5);
            let max = |xs: Vec<Option<f64>>| xs.into_iter().flatten().fold(0.0f64, f64::max);
            Ok(SynthHeadStats {
                layer,
                head,
                sink_score: sink_score(w, position, regime)?,
                v_l2_over_median: if median > 0.0 {
                    l2[position] / median
                } else {
                    f64::NAN
                },
                max_leave_one_out: max(leave_one_out_delta(w, v, position)?),
                max_term_share: max(term_share(w, v, position)?),
            })
        })
        .collect()
}

pub fn synth_config(args: &SynthArgs, seed: u64) -> ModelConfig {
    let mut config = ModelConfig::desk(args.preset.regime());
    config.vocab_size = args.vocab;
    config.d_model = args.d_model;
    config.num_heads = args.heads;
    config.head_dim = args.d_model.checked_div(args.heads).unwrap_or(0);
    config.num_layers = args.layers;
    config.ffn_hidden = 4 * args.d_model;
    config.max_len = args.len;
    config.seed = seed;
    config
}

pub fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<Vec<String>> {
    if args.len == 0 || args.waiver_position >= args.len {
        return Err(Error::Usage(format!(
            "waiver position {} outside length {}",
            args.waiver_position, args.len
        )));
    }
    let config = synth_config(args, seed);
    let weights = build_synthetic_waiver_model(&config, args.waiver_token)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let ordinary: Vec<usize> = (0..config.vocab_size)
        .filter(|&t| t != args.waiver_token && t >= FIRST_ORDINARY_TOKEN)
        .collect();
    let mut tokens: Vec<usize> = (0..args.len)
        .map(|_| ordinary[rng.gen_range(0..ordinary.len())])
        .collect();
    tokens[args.waiver_position] = args.waiver_token;

    let weights_dir = args.out.join("weights");
    let capture_dir = args.out.join("capture");
    write_capture(&weights.to_capture()?, &weights_dir)?;
    let mask = config.default_mask(args.len)?;
    let mut capture = forward(&weights, &tokens, &mask, true)?
        .capture
        .expect("capture requested");
    capture.metadata.notes.push(format!(
        "synthetic waiver token {} at position {}",
        args.waiver_token, args.waiver_position
    ));
    write_capture(&capture, &capture_dir)?;

    let stats = synth_stats(&capture, config.regime.attention(), args.waiver_position)?;
    let json = serde_json::to_string_pretty(&stats).map_err(|e| Error::Manifest(e.to_string()))?;
    let stats_path = args.out.join("synth_stats.json");
    std::fs::write(&stats_path, json + "\n").map_err(|e| Error::io(&stats_path, e))?;

    let mut log = vec![format!(
        "waiver token {} at position {}; weights -> {}, capture -> {}",
        args.waiver_token,
        args.waiver_position,
        weights_dir.display(),
        capture_dir.display()
    )];
    for s in &stats {
        log.push(format!(
            "layer {} head {}: sink {:.4} v_l2/median {:.3e} max leave-one-out {:.3e} max term share {:.3e}",
            s.layer, s.head, s.sink_score, s.v_l2_over_median, s.max_leave_one_out, s.max_term_share
        ));
    }
    Ok(log)
}

pub fn cmd_export_check(args: &ExportCheckArgs) -> Result<Vec<String>> {
    let capture = read_capture(&args.capture)?;
    let warnings = check_capture(&capture);
    let mut log: Vec<String> = warnings.iter().map(|w| format!("warning: {w}")).collect();
    log.push(format!(
        "{}: {} tensors, {} attention heads, {} warnings",
        args.capture.display(),
        capture.len(),
        capture.attention_heads().len(),
        warnings.len()
    ));
    if args.strict && !warnings.is_empty() {
        for l in &log {
            eprintln!("{l}");
        }
        return Err(Error::Manifest(format!(
            "{} warnings in strict mode",
            warnings.len()
        )));
    }
    Ok(log)
}

/// Dispatches a parsed command line, returning console lines on success.
pub fn execute(cli: &Cli) -> Result<Vec<String>> {
    match &cli.command {
        Command::Run(args) => {
            let spec = ExperimentSpec::from_args(args, effective_seed(args.seed.seed)?)?;
            Ok(cmd_run(&spec)?.1)
        }
        Command::Analyze(args) => cmd_analyze(args),
        Command::Synth(args) => cmd_synth(args, effective_seed(args.seed.seed)?),
        Command::ExportCheck(args) => cmd_export_check(args),
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(extra: &[&str]) -> RunArgs {
        let mut argv = vec!["waiverlab", "run", "--out", "/tmp/unused"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Run(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn pe_swap_argument_parses() {
        assert_eq!(
            "48:first".parse::<PeSwapArg>().unwrap(),
            PeSwapArg {
                target: 48,
                source: SwapSource::First
            }
        );
        assert_eq!(
            "3:last".parse::<PeSwapArg>().unwrap().source,
            SwapSource::Last
        );
        assert_eq!(
            "3:7".parse::<PeSwapArg>().unwrap().source,
            SwapSource::Index(7)
        );
        assert!("3".parse::<PeSwapArg>().is_err());
        assert!("x:first".parse::<PeSwapArg>().is_err());
    }

    #[test]
    fn intervention_must_match_regime() {
        let bad =
            ExperimentSpec::from_args(&run_args(&["--preset", "global", "--mask-row", "3"]), 0);
        assert!(matches!(bad, Err(Error::Usage(_))));
        let bad = ExperimentSpec::from_args(&run_args(&["--pe-swap", "3:first"]), 0);
        assert!(matches!(bad, Err(Error::Usage(_))));
        let bad = ExperimentSpec::from_args(&run_args(&["--mask-row", "64"]), 0);
        assert!(matches!(bad, Err(Error::Usage(_))));
        let ok = ExperimentSpec::from_args(
            &run_args(&["--preset", "global", "--pe-swap", "48:first"]),
            0,
        )
        .unwrap();
        assert_eq!(
            ok.intervention,
            InterventionSpec::PeSwap {
                target: 48,
                source: SwapSource::First
            }
        );
    }

    #[test]
    fn fixed_tokens_set_length() {
        let spec = ExperimentSpec::from_args(&run_args(&["--tokens", "1,5,9"]), 0).unwrap();
        assert_eq!(spec.len, 3);
        assert_eq!(spec.token_ids(256).unwrap(), vec![1, 5, 9]);
    }

    #[test]
    fn special_first_and_random_tokens() {
        let spec = ExperimentSpec::from_args(&run_args(&[]), 4).unwrap();
        let ids = spec.token_ids(256).unwrap();
        assert_eq!(ids[0], SPECIAL_TOKEN);
        assert!(ids[1..]
            .iter()
            .all(|&t| (FIRST_ORDINARY_TOKEN..256).contains(&t)));
        assert_eq!(ids, spec.token_ids(256).unwrap());
        let random = ExperimentSpec::from_args(&run_args(&["--first-token", "random"]), 4).unwrap();
        assert!(random
            .token_ids(256)
            .unwrap()
            .iter()
            .all(|&t| t >= FIRST_ORDINARY_TOKEN));
    }

    #[test]
    fn index_mapping_scales_to_desk_length() {
        let causal = ExperimentSpec::from_args(&run_args(&[]), 0).unwrap();
        assert!(causal.index_mapping()[0].contains("index 255 of 1024 -> desk index 16 of 64"));
        let global = ExperimentSpec::from_args(&run_args(&["--preset", "global"]), 0).unwrap();
        let m = global.index_mapping();
        assert!(m[1].contains("383 of 512 -> desk index 48"));
        assert!(m[2].contains("511 of 512 -> desk index 63"));
    }
}
