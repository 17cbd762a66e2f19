//! Command-line pipeline: `init`, `profile`, `allocate`, `evaluate`, `export-lp`, `report`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 parse or input error, 3 infeasible
//! problem, 4 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::allocator::{
    build_problem, export_lp, realized_penalty, solve_bnb, verify_allocation, Mode, DEFAULT_BIT_SET, DEFAULT_LAMBDA,
};
use crate::data::{generate_synthetic, synthetic_batch, EVAL_STREAM};
use crate::error::{Error, Result};
use crate::eval::{evaluate_variants, format_table, Variant, METRIC_NOTE};
use crate::importance::{importance_profile, DEFAULT_IMAGES};
use crate::io::{
    check_spec_hash, load_json, read_tensors, save_json, write_tensors, AllocationDocument, EvaluationReport,
    ProfileDocument, FORMAT_VERSION,
};
use crate::model::{Model, CALIBRATION_IMAGES};
use crate::par::Execution;
use crate::profiler::{layer_stats, overhead_bits};
use crate::spec::NetworkSpec;
use crate::synergy::{synergy_profile, DEFAULT_EPSILON};
use crate::tensor::Tensor;
use crate::weights::Weights;

#[derive(Debug, Parser)]
#[command(name = "mixq", version, about = "Mixed-precision quantization planner for a toy vision transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the toy spec, seeded weights and synthetic data sets to a directory.
    Init(InitArgs),
    /// Compute layer importance and pair synergy over a calibration set.
    Profile(ProfileArgs),
    /// Solve for per-layer bit-widths under uniform-target budgets.
    Allocate(AllocateArgs),
    /// Compare fake-quantized variants against full precision.
    Evaluate(EvaluateArgs),
    /// Write the allocation problem as a CPLEX LP file.
    ExportLp(ExportLpArgs),
    /// Print a summary of profile and allocation documents.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Network spec; the built-in toy spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IMAGES)]
    pub images: usize,
    #[arg(long, default_value_t = DEFAULT_IMAGES)]
    pub eval_images: usize,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Network spec; the built-in toy spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Weight tensor file; seeded random weights when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Calibration tensor file; seeded synthetic inputs when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IMAGES)]
    pub images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Run on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    #[arg(long)]
    pub profile: PathBuf,
    /// When given, its hash must match the profile's.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub target_bits: u32,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BIT_SET)]
    pub bits_set: Vec<u32>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = Mode::Synergy)]
    pub mode: Mode,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportLpArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Allocation documents to evaluate; repeatable.
    #[arg(long)]
    pub allocation: Vec<PathBuf>,
    /// Uniform bit-widths to include as reference rows; repeatable.
    #[arg(long, value_delimiter = ',', default_values_t = [6u32, 16])]
    pub uniform_bits: Vec<u32>,
    /// Evaluation tensor file; seeded synthetic inputs when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IMAGES)]
    pub eval_images: usize,
    /// Calibration tensor file for activation ranges; seeded synthetic inputs when omitted.
    #[arg(long)]
    pub calibration_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub allocation: Vec<PathBuf>,
    #[arg(long)]
    pub evaluation: Option<PathBuf>,
}

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub const EXIT_IO: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Parse(_)
        | Error::Json(_)
        | Error::SpecHashMismatch { .. }
        | Error::ShapeMismatch(_)
        | Error::InvalidParameter(_)
        | Error::EmptyInput(_)
        | Error::UnknownLayer(_)
        | Error::NotQuantizable(_) => EXIT_PARSE,
        Error::NonFinite(_)
        | Error::InvalidDistribution(_)
        | Error::CodeOutOfRange { .. }
        | Error::NegativeInput(_)
        | Error::TooLarge(_) => EXIT_NUMERICAL,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self { code: exit_code(&e), message: e.to_string() }
    }
}

fn with_path<T>(r: Result<T>, path: &Path) -> Result<T, CliError> {
    r.map_err(|e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    })
}

fn load_spec(path: Option<&Path>) -> Result<NetworkSpec, CliError> {
    match path {
        None => Ok(NetworkSpec::toy()),
        Some(p) => with_path(fs::read_to_string(p).map_err(Error::from).and_then(|s| NetworkSpec::from_json(&s)), p),
    }
}

fn load_model(spec: NetworkSpec, weights: Option<&Path>, seed: u64) -> Result<Model, CliError> {
    match weights {
        None => Ok(Model::random(spec, seed)),
        Some(p) => {
            let w = with_path(read_tensors(p).and_then(|t| Weights::from_tensors(&spec, t)), p)?;
            Ok(Model::new(spec, w)?)
        }
    }
}

fn load_images(path: Option<&Path>, seed: u64, stream: u64, count: usize, shape: &[usize]) -> Result<Vec<Tensor>, CliError> {
    if count == 0 {
        return Err(Error::InvalidParameter("image count must be at least 1".into()).into());
    }
    match path {
        None => Ok(synthetic_batch(seed, stream, count, shape)?),
        Some(p) => {
            let mut t = with_path(read_tensors(p), p)?;
            if t.len() < count {
                return Err(CliError {
                    code: EXIT_PARSE,
                    message: format!("{}: holds {} inputs, {count} requested", p.display(), t.len()),
                });
            }
            t.truncate(count);
            Ok(t)
        }
    }
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Importance, synergy and cost statistics of `model` over `images`.
pub fn build_profile(model: &Model, images: &[Tensor], seed: u64, epsilon: f64, exec: Execution) -> Result<ProfileDocument> {
    let importance = importance_profile(model, images, exec)?;
    let synergy = synergy_profile(&importance.raw_cmi, epsilon)?;
    Ok(ProfileDocument {
        format_version: FORMAT_VERSION,
        spec_hash: model.spec().hash(),
        seed,
        created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        importance,
        synergy,
        stats: layer_stats(model.spec()),
    })
}

/// Solves the allocation problem for a profile; `None` when no assignment fits the budgets.
pub fn allocate(
    profile: &ProfileDocument,
    target_bits: u32,
    bit_set: &[u32],
    lambda: f64,
    mode: Mode,
) -> Result<Option<AllocationDocument>> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidParameter(format!("lambda must be finite and ≥ 0, got {lambda}")));
    }
    let mut bit_set = bit_set.to_vec();
    bit_set.sort_unstable();
    bit_set.dedup();
    let problem = build_problem(&profile.importance, &profile.synergy, &profile.stats, target_bits, &bit_set, lambda, mode)?;
    let allocation = solve_bnb(&problem)?;
    if !allocation.feasible {
        return Ok(None);
    }
    let verification = verify_allocation(&problem, &allocation);
    let realized_penalty = realized_penalty(&problem, &allocation.bits)?;
    Ok(Some(AllocationDocument {
        format_version: FORMAT_VERSION,
        spec_hash: profile.spec_hash.clone(),
        mode,
        target_bits,
        problem,
        allocation,
        verification,
        realized_penalty,
        overhead_bits: overhead_bits(&profile.stats),
    }))
}

fn load_profile(args: &ProblemArgs) -> Result<ProfileDocument, CliError> {
    let doc: ProfileDocument = with_path(load_json(&args.profile, "profile"), &args.profile)?;
    if let Some(p) = &args.spec {
        check_spec_hash(&load_spec(Some(p))?.hash(), &doc.spec_hash)?;
    }
    Ok(doc)
}

fn cmd_init(a: &InitArgs) -> Result<String, CliError> {
    let spec = load_spec(a.spec.as_deref())?;
    let shape = spec.config.image_shape();
    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let weights = Weights::random(&spec, a.seed);
    let calib = generate_synthetic(a.seed, a.images, &shape)?;
    let eval = synthetic_batch(a.seed, EVAL_STREAM, a.eval_images, &shape)?;
    let mut spec_text = spec.to_json();
    spec_text.push('\n');
    fs::write(a.out_dir.join("spec.json"), spec_text).map_err(Error::from)?;
    write_tensors(&a.out_dir.join("weights.mxqt"), &weights.to_tensors())?;
    write_tensors(&a.out_dir.join("calibration.mxqt"), &calib)?;
    write_tensors(&a.out_dir.join("eval.mxqt"), &eval)?;
    Ok(format!("wrote spec.json, weights.mxqt, calibration.mxqt, eval.mxqt to {}\n", a.out_dir.display()))
}

fn cmd_profile(a: &ProfileArgs) -> Result<String, CliError> {
    let spec = load_spec(a.spec.as_deref())?;
    let shape = spec.config.image_shape();
    let model = load_model(spec, a.weights.as_deref(), a.seed)?;
    let images = load_images(a.data.as_deref(), a.seed, crate::data::DATA_STREAM, a.images, &shape)?;
    let doc = build_profile(&model, &images, a.seed, a.epsilon, exec(a.sequential))?;
    save_json(&a.out, &doc)?;
    Ok(format!(
        "profiled {} layers over {} images ({} forwards) -> {}\n",
        doc.importance.layer_ids.len(),
        doc.importance.t,
        model.forward_count(),
        a.out.display()
    ))
}

fn infeasible(p: &ProblemArgs) -> CliError {
    CliError {
        code: EXIT_INFEASIBLE,
        message: format!(
            "no assignment from bit set {:?} fits the size and BitOps budgets of uniform {}-bit",
            p.bits_set, p.target_bits
        ),
    }
}

fn cmd_allocate(a: &AllocateArgs) -> Result<String, CliError> {
    let p = &a.problem;
    let profile = load_profile(p)?;
    let doc = allocate(&profile, p.target_bits, &p.bits_set, p.lambda, p.mode)?.ok_or_else(|| infeasible(p))?;
    save_json(&a.out, &doc)?;
    Ok(format!(
        "{} allocation: objective {:.6}, size slack {}, bitops slack {} -> {}\nbits {:?}\n",
        doc.mode,
        doc.allocation.objective,
        doc.verification.size_slack,
        doc.verification.bitops_slack,
        a.out.display(),
        doc.allocation.bits
    ))
}

fn cmd_export_lp(a: &ExportLpArgs) -> Result<String, CliError> {
    let p = &a.problem;
    let profile = load_profile(p)?;
    let mut bit_set = p.bits_set.clone();
    bit_set.sort_unstable();
    bit_set.dedup();
    let problem =
        build_problem(&profile.importance, &profile.synergy, &profile.stats, p.target_bits, &bit_set, p.lambda, p.mode)?;
    fs::write(&a.out, export_lp(&problem)?).map_err(Error::from)?;
    Ok(format!("wrote {}\n", a.out.display()))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<String, CliError> {
    let spec = load_spec(a.spec.as_deref())?;
    let hash = spec.hash();
    let shape = spec.config.image_shape();
    let stats = layer_stats(&spec);
    let layers = stats.layer_ids.len();
    let mut variants: Vec<Variant> = a.uniform_bits.iter().map(|&b| Variant::uniform(b, layers)).collect();
    for path in &a.allocation {
        let doc: AllocationDocument = with_path(load_json(path, "allocation"), path)?;
        with_path(check_spec_hash(&hash, &doc.spec_hash), path)?;
        let stem = path.file_stem().map_or_else(|| "allocation".into(), |s| s.to_string_lossy().into_owned());
        variants.push(Variant { label: format!("{stem} ({})", doc.mode), bits: doc.allocation.bits });
    }
    let model = load_model(spec, a.weights.as_deref(), a.seed)?;
    let calib = load_images(
        a.calibration_data.as_deref(),
        a.seed,
        crate::data::DATA_STREAM,
        CALIBRATION_IMAGES,
        &shape,
    )?;
    let eval = load_images(a.data.as_deref(), a.seed, EVAL_STREAM, a.eval_images, &shape)?;
    let rows = evaluate_variants(&model, &stats, &calib, &eval, &variants, exec(a.sequential))?;
    let report = EvaluationReport {
        format_version: FORMAT_VERSION,
        spec_hash: hash,
        note: METRIC_NOTE.into(),
        seed: a.seed,
        calibration_images: calib.len(),
        eval_images: eval.len(),
        rows,
    };
    save_json(&a.out, &report)?;
    Ok(format!("# {}\n{}", report.note, format_table(&report.rows)))
}

fn cmd_report(a: &ReportArgs) -> Result<String, CliError> {
    let mut s = String::new();
    if let Some(path) = &a.profile {
        let doc: ProfileDocument = with_path(load_json(path, "profile"), path)?;
        writeln!(s, "profile {} (seed {}, T = {}, spec {})", path.display(), doc.seed, doc.importance.t, &doc.spec_hash[..12.min(doc.spec_hash.len())]).unwrap();
        writeln!(s, "{:>5}  {:>10}  {:>10}  {:>12}  {:>10}", "layer", "omega", "s_hat", "params", "macs").unwrap();
        for (i, id) in doc.importance.layer_ids.iter().enumerate() {
            let syn = doc.synergy.s_hat.get(i).map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            writeln!(
                s,
                "{id:>5}  {:>10.6}  {syn:>10}  {:>12}  {:>10}",
                doc.importance.omega[i], doc.stats.w_count[i], doc.stats.macs[i]
            )
            .unwrap();
        }
    }
    for path in &a.allocation {
        let doc: AllocationDocument = with_path(load_json(path, "allocation"), path)?;
        let v = &doc.verification;
        writeln!(
            s,
            "allocation {}: mode {}, target {}, lambda {}, objective {:.6}, penalty {:.6}",
            path.display(),
            doc.mode,
            doc.target_bits,
            doc.problem.lambda,
            doc.allocation.objective,
            doc.realized_penalty
        )
        .unwrap();
        writeln!(
            s,
            "  size {} / {} bits, bitops {} / {}, overhead {} bits\n  bits {:?}",
            v.size_bits, doc.problem.size_budget, v.bitops, doc.problem.bitops_budget, doc.overhead_bits, doc.allocation.bits
        )
        .unwrap();
    }
    if let Some(path) = &a.evaluation {
        let doc: EvaluationReport = with_path(load_json(path, "evaluation"), path)?;
        writeln!(s, "# {}\n{}", doc.note, format_table(&doc.rows)).unwrap();
    }
    if s.is_empty() {
        return Err(CliError { code: EXIT_PARSE, message: "nothing to report; pass --profile, --allocation or --evaluation".into() });
    }
    Ok(s)
}

/// Runs a parsed command, returning the text for stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Allocate(a) => cmd_allocate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ExportLp(a) => cmd_export_lp(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        use clap::error::ErrorKind;
        let code = match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
            _ => EXIT_PARSE,
        };
        CliError { code, message: e.render().to_string() }
    })?;
    run(&cli)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Parse("x".into())), 2);
        assert_eq!(exit_code(&Error::SpecHashMismatch { expected: "a".into(), found: "b".into() }), 2);
        assert_eq!(exit_code(&Error::NonFinite("x")), 4);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
    }

    #[test]
    fn bad_flags_are_parse_errors() {
        let e = run_args(["mixq", "allocate", "--profile", "p.json"]).unwrap_err();
        assert_eq!(e.code, EXIT_PARSE);
        let e = run_args(["mixq", "allocate", "--profile", "p", "--out", "o", "--mode", "bogus"]).unwrap_err();
        assert_eq!(e.code, EXIT_PARSE);
        let e = run_args(["mixq", "report"]).unwrap_err();
        assert_eq!(e.code, EXIT_PARSE);
    }

    #[test]
    fn lambda_must_be_non_negative() {
        let spec = NetworkSpec::toy();
        let model = Model::random(spec, 0);
        let imgs = generate_synthetic(0, 1, &[3, 16, 16]).unwrap();
        let doc = build_profile(&model, &imgs, 0, DEFAULT_EPSILON, Execution::Parallel).unwrap();
        assert!(allocate(&doc, 6, &DEFAULT_BIT_SET, -1.0, Mode::Synergy).is_err());
        assert!(allocate(&doc, 6, &DEFAULT_BIT_SET, f64::NAN, Mode::Synergy).is_err());
        let a = allocate(&doc, 6, &[8, 4, 6, 6], 0.1, Mode::Synergy).unwrap().unwrap();
        assert_eq!(a.problem.bit_set, vec![4, 6, 8]);
        assert!(a.verification.mismatches.is_empty());
    }
}
