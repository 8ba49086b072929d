//! One adapter per subcommand. Each reads its inputs, calls the library and
//! returns the JSON summary printed on stdout.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use serde_json::{json, Value};
use svdcomp::autodiff::{certification_case, certify, degenerate_case};
use svdcomp::io::{LayerPayload, ModelContainer};
use svdcomp::model::{evaluate, truncation_report, Dataset, ForwardMode, ToyModel};
use svdcomp::pack::{pack, quant_error_report};
use svdcomp::pipeline::{budget_allocation, packed_storage_ratio, run_pipeline, PipelineConfig};
use svdcomp::rank::{round_ranks, IntegerAllocation, RankAllocation, RatioCounting};
use svdcomp::train::train_ranks;
use svdcomp::update::{update_all_weights, UpdatedWeight};

use crate::settings::{CliError, Knobs};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset.
    GenData(GenData),
    /// Write a toy model container.
    InitModel(InitModel),
    /// Learn continuous per-layer ranks for a target ratio.
    TrainRanks(TrainRanks),
    /// Replace compressible weights by their rank-k IPCA updates.
    UpdateWeights(UpdateWeights),
    /// Pack updated weights into 8-bit factor pairs.
    Pack(Pack),
    /// Task loss of a model on a dataset.
    Eval(Eval),
    /// Certify the SVD backward pass against finite differences.
    Gradcheck(Gradcheck),
    /// Activation truncation against weight truncation at the same ranks.
    CompareTrunc(CompareTrunc),
    /// Train, round, update, pack and evaluate in one go.
    Pipeline(Pipeline),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[command(flatten)]
    knobs: Knobs,
    /// Draw from the held-out stream of the seed.
    #[arg(long)]
    held_out: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitModel {
    #[command(flatten)]
    knobs: Knobs,
    /// Random weights from the seed instead of the canonical teacher.
    #[arg(long)]
    random: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainRanks {
    #[command(flatten)]
    knobs: Knobs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Learned continuous allocation, `{layer: {k, m, n}}`.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch `epoch,layer,k,task_loss,ratio` rows.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Integer allocation after rounding towards the target.
    #[arg(long)]
    rounded_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UpdateWeights {
    #[command(flatten)]
    knobs: Knobs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Integer allocation JSON.
    #[arg(long)]
    alloc: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-layer IPCA objective against the batch oracle.
    #[arg(long)]
    objective_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Pack {
    /// Container written by update-weights (carries the ranks).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// Factored when the container holds packed layers, dense otherwise.
    Auto,
    Dense,
    /// Per-sample best rank-k activations; needs an integer `--alloc`.
    Hard,
    /// Per-sample smooth truncation; needs `--alloc` and uses `--beta`.
    Smooth,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    knobs: Knobs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    mode: EvalMode,
    #[arg(long)]
    alloc: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    #[command(flatten)]
    knobs: Knobs,
    /// Use the degenerate set (ties, vanishing values, zero matrices).
    #[arg(long)]
    degenerate: bool,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Debug, Args)]
pub struct CompareTrunc {
    #[command(flatten)]
    knobs: Knobs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Integer allocation; defaults to the remapped budget at --target-ratio.
    #[arg(long)]
    alloc: Option<PathBuf>,
    /// Fractions of each layer's rank probed one layer at a time.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    fractions: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct Pipeline {
    #[command(flatten)]
    knobs: Knobs,
    /// Starting model; defaults to the teacher of --kind.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Calibration data; defaults to --calib-count samples from --seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation data; defaults to --eval-count held-out samples.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn run(command: Command) -> Result<Value, CliError> {
    match command {
        Command::GenData(c) => gen_data(c),
        Command::InitModel(c) => init_model(c),
        Command::TrainRanks(c) => cmd_train_ranks(c),
        Command::UpdateWeights(c) => cmd_update_weights(c),
        Command::Pack(c) => cmd_pack(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::CompareTrunc(c) => cmd_compare_trunc(c),
        Command::Pipeline(c) => cmd_pipeline(c),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("summaries serialize")
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::data(format!("{} is not a dataset: {e}", path.display())))
}

fn save_dataset(data: &Dataset, path: &Path) -> Result<(), CliError> {
    write_text(path, &serde_json::to_string(data).expect("datasets serialize"))
}

fn load_container(path: &Path) -> Result<ModelContainer, CliError> {
    ModelContainer::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_int_alloc(path: &Path) -> Result<IntegerAllocation, CliError> {
    IntegerAllocation::from_json(&read_text(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn gen_data(c: GenData) -> Result<Value, CliError> {
    let s = c.knobs.resolve()?;
    let count = s.count.unwrap_or(crate::settings::DEFAULT_SAMPLES);
    let data = if c.held_out {
        Dataset::held_out(s.kind, s.seed, count)
    } else {
        Dataset::generate(s.kind, s.seed, count)
    };
    save_dataset(&data, &c.out)?;
    Ok(json!({
        "kind": s.kind,
        "seed": s.seed,
        "held_out": c.held_out,
        "count": data.len(),
        "path": c.out,
    }))
}

fn init_model(c: InitModel) -> Result<Value, CliError> {
    let s = c.knobs.resolve()?;
    let model = if c.random { ToyModel::random(s.kind, s.seed) } else { ToyModel::teacher(s.kind) };
    ModelContainer::from_model(&model, Some(s.kind)).save(&c.out)?;
    Ok(json!({
        "kind": s.kind,
        "random": c.random,
        "seed": c.random.then_some(s.seed),
        "layers": model.compressible_shapes().iter().map(|(l, m, n)| json!({"layer": l, "m": m, "n": n})).collect::<Vec<_>>(),
        "path": c.out,
    }))
}

fn cmd_train_ranks(c: TrainRanks) -> Result<Value, CliError> {
    let s = c.knobs.resolve()?;
    let model = load_container(&c.model)?.dense_model()?;
    let data = load_dataset(&c.data)?;
    let outcome = match train_ranks(&model, &data, &s.target, &s.train) {
        Ok(o) => o,
        Err(svdcomp::error::Error::Diverged { epoch, detail, last_good }) => {
            // Keep the last finite allocation for inspection.
            write_text(&c.out, &last_good.to_json()?)?;
            return Err(CliError {
                code: crate::settings::EXIT_NUMERICAL,
                message: format!("training diverged in epoch {epoch}: {detail}; last good allocation written"),
            });
        }
        Err(e) => return Err(e.into()),
    };
    write_text(&c.out, &outcome.allocation.to_json()?)?;
    if let Some(path) = &c.trajectory {
        outcome.write_trajectory_csv(create(path)?)?;
    }
    let rounded = round_ranks(&outcome.allocation, s.target.r_target, s.train.counting);
    if let Some(path) = &c.rounded_out {
        write_text(path, &rounded.to_json()?)?;
    }
    let last = outcome.history.last().expect("at least one epoch");
    Ok(json!({
        "target_ratio": s.target.r_target,
        "ratio": outcome.final_ratio(s.train.counting),
        "rounded_ratio": rounded.ratio(s.train.counting),
        "epochs": outcome.history.len(),
        "initial_total_loss": outcome.history[0].total,
        "final_total_loss": last.total,
        "final_task_loss": last.task_loss,
        "allocation": allocation_value(&outcome.allocation),
        "rounded": rounded.entries,
    }))
}

fn allocation_value(alloc: &RankAllocation) -> Value {
    serde_json::from_str(&alloc.to_json().expect("allocations serialize")).expect("valid JSON")
}

fn cmd_update_weights(c: UpdateWeights) -> Result<Value, CliError> {
    let s = c.knobs.resolve()?;
    let container = load_container(&c.model)?;
    let model = container.dense_model()?;
    let data = load_dataset(&c.data)?;
    let alloc = load_int_alloc(&c.alloc)?;
    let outcome = update_all_weights(&model, &data, &alloc, &s.update)?;
    let mut out = ModelContainer::from_model(&outcome.model, container.kind);
    out.allocation = Some(alloc);
    out.save(&c.out)?;
    if let Some(path) = &c.objective_csv {
        outcome.write_objective_csv(create(path)?)?;
    }
    Ok(json!({ "layers": outcome.reports, "path": c.out }))
}

fn cmd_pack(c: Pack) -> Result<Value, CliError> {
    let container = load_container(&c.model)?;
    let alloc = container
        .allocation
        .clone()
        .ok_or_else(|| CliError::data(format!("{} carries no rank allocation", c.model.display())))?;
    let model = container.dense_model()?;
    let mut packed = vec![None; model.layers().len()];
    let mut layers = Vec::new();
    for (idx, l) in model.layers().iter().enumerate() {
        let Some(entry) = alloc.get(&l.name) else { continue };
        if matches!(container.layers[idx].payload, LayerPayload::Packed(_)) {
            return Err(CliError::data(format!("`{}` is already packed", l.name)));
        }
        let w = UpdatedWeight { w_tilde: l.weight.clone(), k: entry.k };
        let p = pack(&w).map_err(|e| e.in_layer(&l.name))?;
        let q = quant_error_report(&w).map_err(|e| e.in_layer(&l.name))?;
        layers.push(json!({
            "layer": l.name,
            "k": entry.k,
            "slots": p.slot_count(),
            "mse": q.mse,
            "mae": q.mae,
            "relative_frobenius": q.relative_frobenius,
        }));
        packed[idx] = Some(p);
    }
    let ratio = packed_storage_ratio(&packed);
    ModelContainer::with_packed(&model, container.kind, &packed, Some(alloc))?.save(&c.out)?;
    Ok(json!({ "packed_ratio": ratio, "layers": layers, "path": c.out }))
}

fn cmd_eval(c: Eval) -> Result<Value, CliError> {
    let s = c.knobs.resolve()?;
    let container = load_container(&c.model)?;
    let model = container.dense_model()?;
    let data = load_dataset(&c.data)?;
    let need_alloc = || c.alloc.as_deref().ok_or_else(|| CliError::usage("this mode needs --alloc"));
    let factors;
    let continuous;
    let integer;
    let (mode, name) = match c.mode {
        EvalMode::Auto | EvalMode::Dense => {
            let packed = container.layers.iter().any(|l| matches!(l.payload, LayerPayload::Packed(_)));
            if c.mode == EvalMode::Auto && packed {
                factors = container.factors();
                (ForwardMode::Factored(&factors), "factored")
            } else {
                (ForwardMode::Dense, "dense")
            }
        }
        EvalMode::Hard => {
            integer = load_int_alloc(need_alloc()?)?;
            (ForwardMode::HardTruncated(&integer), "hard")
        }
        EvalMode::Smooth => {
            let path = need_alloc()?;
            continuous = RankAllocation::from_json(&read_text(path)?)
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            (ForwardMode::SmoothTruncated { alloc: &continuous, beta: s.train.beta }, "smooth")
        }
    };
    let report = evaluate(&model, &data, &mode)?;
    Ok(json!({
        "mode": name,
        "loss": report.loss,
        "perplexity": report.perplexity,
        "samples": report.samples,
    }))
}

fn cmd_gradcheck(c: Gradcheck) -> Result<Value, CliError> {
    let s = c.knobs.resolve()?;
    if !(c.step > 0.0) {
        return Err(CliError::usage("--step must be positive"));
    }
    let count = s.count.unwrap_or(if c.degenerate { 20 } else { 100 });
    let report = if c.degenerate {
        certify(count, |i| degenerate_case(s.seed, i), &s.train.backward, c.step)?
    } else {
        certify(count, |i| certification_case(s.seed, i), &s.train.backward, c.step)?
    };
    let mut v = to_value(&report);
    v["degenerate_set"] = json!(c.degenerate);
    v["seed"] = json!(s.seed);
    Ok(v)
}

fn cmd_compare_trunc(c: CompareTrunc) -> Result<Value, CliError> {
    let s = c.knobs.resolve()?;
    let model = load_container(&c.model)?.dense_model()?;
    let data = load_dataset(&c.data)?;
    let alloc = match &c.alloc {
        Some(path) => load_int_alloc(path)?,
        None => budget_allocation(&model.compressible_shapes(), s.target.r_target, RatioCounting::Remapped),
    };
    if let Some(f) = c.fractions.iter().find(|f| !(**f >= 0.0 && **f <= 1.0)) {
        return Err(CliError::usage(format!("fraction {f} is outside [0, 1]")));
    }
    let report = truncation_report(&model, &data, &alloc, &c.fractions)?;
    let mut v = to_value(&report);
    v["activation_wins_everywhere"] =
        json!(report.full.activation_wins() && report.sweep.iter().all(|p| p.activation_wins()));
    Ok(v)
}

fn cmd_pipeline(c: Pipeline) -> Result<Value, CliError> {
    let s = c.knobs.resolve()?;
    let (model, kind) = match &c.model {
        Some(path) => {
            let container = load_container(path)?;
            let kind = container.kind.unwrap_or(s.kind);
            (container.dense_model()?, kind)
        }
        None => (ToyModel::teacher(s.kind), s.kind),
    };
    let pick = |path: &Option<PathBuf>, make: &dyn Fn() -> Dataset| -> Result<Dataset, CliError> {
        match path {
            Some(p) => load_dataset(p),
            None => Ok(make()),
        }
    };
    let calib = pick(&c.data, &|| Dataset::generate(kind, s.seed, s.calib_count))?;
    let eval = pick(&c.eval_data, &|| Dataset::held_out(kind, s.seed, s.eval_count))?;
    let cfg = PipelineConfig { target: s.target, train: s.train, update: s.update };
    let outcome = run_pipeline(&model, &calib, &eval, &cfg)?;
    std::fs::create_dir_all(&c.out_dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", c.out_dir.display())))?;
    let path = |name: &str| c.out_dir.join(name);
    outcome.training.write_trajectory_csv(create(&path("trajectory.csv"))?)?;
    write_text(&path("allocation.json"), &outcome.training.allocation.to_json()?)?;
    write_text(&path("ranks.json"), &outcome.ranks.to_json()?)?;
    outcome.update.write_objective_csv(create(&path("ipca_objective.csv"))?)?;
    outcome.container(&model, Some(kind))?.save(&path("packed.svdc"))?;
    log::info!("wrote pipeline artifacts to {}", c.out_dir.display());
    let mut report = to_value(&outcome.report);
    write_text(&path("report.json"), &serde_json::to_string_pretty(&report).expect("valid JSON"))?;
    report["kind"] = json!(kind);
    report["seed"] = json!(s.seed);
    report["out_dir"] = json!(c.out_dir);
    Ok(report)
}
