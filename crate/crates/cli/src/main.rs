use std::io::{Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use teleop_core::baselines::{FingertipConfig, JointCorrespondence};
use teleop_core::empirical::{build_empirical_mapping, ExtremaPoses, MotionAssignment};
use teleop_core::grasp::{parse_dataset, sample_dataset, GraspDataset, SamplerConfig};
use teleop_core::hand_model::{validate_model, HandModel, JointPose};
use teleop_core::ransac::{build_algorithmic_mapping, fit_report, FitConfig, FitReport};
use teleop_core::session::{
    read_trajectory, replay_eval, MappingKind, MessageType, ReplayReport, SessionConfig,
    SessionResources, StreamMessage,
};
use teleop_core::subspace::TeleopMapping;
use teleop_core::Error;

#[derive(Parser)]
#[command(
    name = "teleop",
    version,
    about = "Teleoperation subspace mapping tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a mapping from a motion assignment and demonstration extrema.
    BuildEmpirical(BuildEmpirical),
    /// Sample grasps of the reference objects for a hand model.
    GenGrasps(GenGrasps),
    /// Thin a raw grasp dataset by threshold escalation.
    ParseGrasps(ParseGrasps),
    /// Fit a subspace to a grasp dataset by consensus search.
    FitRansac(FitRansac),
    /// Turn a fit report into a mapping.
    BuildMapping(BuildMapping),
    /// Map a file of master poses to slave poses.
    Map(MapCmd),
    /// Run a live mapping session.
    Serve(Serve),
    /// Replay a master trajectory and report path metrics.
    ReplayEval(ReplayEval),
    /// Check files against their formats.
    Validate(Validate),
}

#[derive(Args)]
struct BuildEmpirical {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    assign: PathBuf,
    #[arg(long)]
    extrema: PathBuf,
    /// Origin pose as comma-separated joint values; overrides the extrema file.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    origin: Option<Vec<f64>>,
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenGrasps {
    #[arg(long)]
    model: PathBuf,
    /// Object size ratio; defaults to the model's scale.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = 200_000)]
    budget: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    max_valid: usize,
    #[arg(long, default_value_t = teleop_core::grasp::quality::DEFAULT_FRICTION)]
    mu: f64,
    #[arg(long, default_value_t = teleop_core::grasp::quality::DEFAULT_DIRECTIONS)]
    directions: usize,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParseGrasps {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitRansac {
    #[arg(long)]
    dataset: PathBuf,
    /// Number of hypotheses.
    #[arg(long = "M", visible_alias = "hypotheses", default_value_t = teleop_core::ransac::DEFAULT_HYPOTHESES)]
    hypotheses: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inlier distance; defaults to the dataset's final parsing threshold.
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Extrema file whose origin pose replaces the dataset-derived origin.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Record wall-clock time in the report.
    #[arg(long)]
    timing: bool,
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildMapping {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Calibration extrema used for scaling instead of joint-limit combinations.
    #[arg(long)]
    extrema: Option<PathBuf>,
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MapCmd {
    #[arg(long)]
    master: PathBuf,
    #[arg(long)]
    slave: PathBuf,
    /// Trajectory file of master poses; `-` reads stdin.
    #[arg(long = "in")]
    input: PathBuf,
    /// Enables clamping to the slave joint limits.
    #[arg(long)]
    slave_model: Option<PathBuf>,
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
    /// Map through a running service instead of in process.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    session: PathBuf,
    /// HTTP and WebSocket endpoint.
    #[arg(long)]
    http: Option<SocketAddr>,
    /// Line-protocol TCP endpoint.
    #[arg(long)]
    tcp: Option<SocketAddr>,
    /// Run one session over stdin and stdout.
    #[arg(long, conflicts_with_all = ["http", "tcp"])]
    stdio: bool,
}

#[derive(Args)]
struct ReplayEval {
    #[arg(long, required_unless_present = "server")]
    session: Option<PathBuf>,
    #[arg(long)]
    trajectory: PathBuf,
    /// Override the session's initial mapping kind.
    #[arg(long)]
    mapping: Option<String>,
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
    /// Also write every reply message as JSON Lines.
    #[arg(long)]
    out_stream: Option<PathBuf>,
    /// Replay through a running service.
    #[arg(long, conflicts_with = "out_stream")]
    server: Option<String>,
}

#[derive(Args)]
struct Validate {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Also check poses and dof against this hand model.
    #[arg(long)]
    model: Option<PathBuf>,
}

/// Failures split by exit code: bad input (2) or internal fault (1).
enum Failure {
    Invalid(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

impl From<teleop_client::ClientError> for Failure {
    fn from(e: teleop_client::ClientError) -> Self {
        match e {
            teleop_client::ClientError::Rejected { .. } => Failure::Invalid(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("TELEOP_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::BuildEmpirical(a) => build_empirical(a),
        Command::GenGrasps(a) => gen_grasps(a),
        Command::ParseGrasps(a) => parse_grasps(a),
        Command::FitRansac(a) => fit_ransac(a),
        Command::BuildMapping(a) => build_mapping(a),
        Command::Map(a) => map(a),
        Command::Serve(a) => serve(a),
        Command::ReplayEval(a) => replay(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(1)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read_input(path: &Path) -> Result<String, Failure> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, Failure> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Failure::Invalid("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Failure::Internal(e.to_string())),
    }
}

fn build_empirical(a: BuildEmpirical) -> Outcome {
    let model = HandModel::load_validated(&a.model)?;
    let assign = MotionAssignment::load(&a.assign)?;
    let extrema = ExtremaPoses::load(&a.extrema)?;
    let origin = match (a.origin, &extrema.origin) {
        (Some(o), _) => JointPose(o),
        (None, Some(o)) => o.clone(),
        (None, None) => {
            return Err(Failure::Invalid(
                "no origin pose: pass --origin or add one to the extrema file".into(),
            ))
        }
    };
    let mapping = build_empirical_mapping(&model, &origin, &assign, &extrema)?;
    emit(a.out.as_deref(), &mapping.to_json_string()?)
}

fn gen_grasps(a: GenGrasps) -> Outcome {
    let model = HandModel::load_validated(&a.model)?;
    let cfg = SamplerConfig {
        budget: a.budget,
        seed: a.seed,
        max_valid: a.max_valid,
        friction_mu: a.mu,
        directions: a.directions,
        threads: a.threads,
        ..Default::default()
    };
    if a.threads == Some(0) {
        return Err(Failure::Invalid("--threads must be at least 1".into()));
    }
    let scale = a.scale.unwrap_or(model.scale);
    let (ds, diags) = sample_dataset(&model, scale, &cfg)?;
    for (k, d) in diags.iter().enumerate() {
        let dominant = d.dominant_failure().map(|f| f.describe()).unwrap_or("none");
        eprintln!(
            "object {}: {} valid of {} candidates, {} robustness evaluations, most common failure: {dominant}",
            k + 1,
            d.valid,
            d.iterations,
            d.perturbation_evaluations
        );
    }
    emit(a.out.as_deref(), &ds.to_jsonl()?)?;
    if let Some(k) = diags.iter().position(|d| d.valid == 0) {
        return Err(Failure::Invalid(format!(
            "object {} has no valid grasps (max aperture {:.4} m)",
            k + 1,
            diags[k].max_aperture
        )));
    }
    Ok(())
}

fn parse_grasps(a: ParseGrasps) -> Outcome {
    let raw = GraspDataset::from_jsonl(&read_input(&a.dataset)?)?;
    let parsed = parse_dataset(&raw)?;
    eprintln!(
        "final threshold {:.1}, grasps per object {:?}",
        parsed.xi_final.unwrap_or(0.0),
        parsed.counts()
    );
    emit(a.out.as_deref(), &parsed.to_jsonl()?)
}

fn fit_ransac(a: FitRansac) -> Outcome {
    let ds = GraspDataset::from_jsonl(&read_input(&a.dataset)?)?;
    let mut cfg = FitConfig::for_dataset(&ds, a.seed);
    cfg.hypotheses = a.hypotheses;
    if let Some(xi) = a.xi {
        cfg.xi = xi;
    }
    cfg.validate()?;
    let calibration = match &a.calibration {
        Some(p) => Some(
            ExtremaPoses::load(p)?
                .origin
                .ok_or_else(|| Failure::Invalid(format!("{} has no origin pose", p.display())))?,
        ),
        None => None,
    };
    let start = Instant::now();
    let (_, mut report) = with_threads(a.threads, || fit_report(&ds, &cfg, calibration.as_ref()))??;
    if a.timing {
        report.runtime_seconds = Some(start.elapsed().as_secs_f64());
    }
    eprintln!(
        "best hypothesis {}: min inliers per object {}, inliers {:?}",
        report.best_index, report.best_score.t1, report.per_object_inliers
    );
    emit(a.out.as_deref(), &report.to_json_string()?)
}

fn build_mapping(a: BuildMapping) -> Outcome {
    let model = HandModel::load_validated(&a.model)?;
    let report = FitReport::load(&a.report)?;
    if report.hand_id != model.hand_id {
        return Err(Failure::Invalid(format!(
            "report is for {} but the model is {}",
            report.hand_id, model.hand_id
        )));
    }
    let calibration = a.extrema.as_deref().map(ExtremaPoses::load).transpose()?;
    let mut mapping = build_algorithmic_mapping(
        &model,
        &report.final_hypothesis(),
        &report.cfg,
        calibration.as_ref(),
    )?;
    mapping.provenance.dataset_digest = Some(report.dataset_digest.clone());
    emit(a.out.as_deref(), &mapping.to_json_string()?)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Failure::from)
}

fn stream_text(msgs: &[StreamMessage]) -> Result<String, Failure> {
    let mut out = String::new();
    for m in msgs {
        out.push_str(&m.to_line()?);
        out.push('\n');
    }
    Ok(out)
}

fn map(a: MapCmd) -> Outcome {
    let traj = read_trajectory(&read_input(&a.input)?)?;
    let master = TeleopMapping::load(&a.master)?;
    let slave = TeleopMapping::load(&a.slave)?;
    let model = a
        .slave_model
        .as_deref()
        .map(HandModel::load_validated)
        .transpose()?;
    let replies = match &a.server {
        Some(url) => {
            let req = teleop_service::MapRequest {
                master: serde_json::from_str(&master.to_json_string()?).map_err(Error::from)?,
                slave: serde_json::from_str(&slave.to_json_string()?).map_err(Error::from)?,
                slave_model: model
                    .as_ref()
                    .map(|m| serde_json::from_str(&m.to_json_string()?).map_err(Error::from))
                    .transpose()?,
                poses: traj,
            };
            let client = teleop_client::HttpClient::new(url.clone());
            runtime()?.block_on(client.map(&req))?.replies
        }
        None => {
            let res = Arc::new(SessionResources::subspace(master, slave, model)?);
            let mut session = teleop_core::session::Session::new(res);
            traj.iter()
                .flat_map(|p| session.handle(&StreamMessage::master_pose(p.t, p.q.clone())))
                .collect()
        }
    };
    emit(a.out.as_deref(), &stream_text(&replies)?)?;
    let errors = replies
        .iter()
        .filter(|m| m.kind == MessageType::Error)
        .count();
    if errors > 0 {
        return Err(Failure::Invalid(format!(
            "{errors} poses could not be mapped"
        )));
    }
    Ok(())
}

fn serve(a: Serve) -> Outcome {
    let res = Arc::new(SessionConfig::load_resources(&a.session)?);
    let rt = runtime()?;
    if a.stdio {
        rt.block_on(teleop_service::serve_stdio(res))?;
        return Ok(());
    }
    let endpoints = match (a.http, a.tcp) {
        (None, None) => teleop_service::Endpoints {
            http: Some(([127, 0, 0, 1], 7401).into()),
            tcp: Some(([127, 0, 0, 1], 7400).into()),
        },
        (http, tcp) => teleop_service::Endpoints { http, tcp },
    };
    rt.block_on(async move {
        let bound = teleop_service::Bound::bind(&endpoints).await?;
        if let Some(addr) = bound.http_addr() {
            eprintln!("http listening on {addr}");
        }
        if let Some(addr) = bound.tcp_addr() {
            eprintln!("tcp listening on {addr}");
        }
        tokio::select! {
            r = bound.run(res) => r,
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })?;
    Ok(())
}

fn replay(a: ReplayEval) -> Outcome {
    let traj = read_trajectory(&read_input(&a.trajectory)?)?;
    let report: ReplayReport = match (&a.server, &a.session) {
        (Some(url), _) => {
            if a.mapping.is_some() {
                return Err(Failure::Invalid(
                    "--mapping cannot be combined with --server".into(),
                ));
            }
            let client = teleop_client::HttpClient::new(url.clone());
            runtime()?.block_on(client.replay_eval(traj))?
        }
        (None, Some(path)) => {
            let mut res = SessionConfig::load_resources(path)?;
            if let Some(m) = &a.mapping {
                res.initial_kind = MappingKind::parse(m)
                    .ok_or_else(|| Failure::Invalid(format!("unknown mapping \"{m}\"")))?;
                res.validate()?;
            }
            let (report, replies) = replay_eval(&traj, Arc::new(res))?;
            if let Some(p) = &a.out_stream {
                std::fs::write(p, stream_text(&replies)?)?;
            }
            report
        }
        (None, None) => unreachable!("clap requires --session without --server"),
    };
    eprintln!(
        "{} steps, {} errors, {} clamped steps, max joint step {:.4} rad, latency p50 {:.2e} s p99 {:.2e} s",
        report.steps,
        report.errors,
        report.clamped_steps,
        report.max_joint_step,
        report.latency.p50,
        report.latency.p99
    );
    emit(a.out.as_deref(), &report.to_json_string()?)
}

/// The kind of a file, from its `schema` tag or its shape.
fn detect(text: &str) -> Result<String, Failure> {
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Failure::Invalid("empty file".into()))?;
    let value: serde_json::Value = serde_json::from_str(first)
        .or_else(|_| serde_json::from_str(text))
        .map_err(|e| Failure::Invalid(format!("not JSON: {e}")))?;
    if let Some(s) = value.get("schema").and_then(|s| s.as_str()) {
        return Ok(s.to_owned());
    }
    if value.get("type").is_some() {
        return Ok("stream".into());
    }
    if value.get("t").is_some() && value.get("q").is_some() {
        return Ok("trajectory".into());
    }
    Err(Failure::Invalid(
        "cannot tell the file format: no schema tag".into(),
    ))
}

fn validate_one(path: &Path, model: Option<&HandModel>) -> Result<String, Failure> {
    let text = read_input(path)?;
    let kind = detect(&text)?;
    let dof_check = |what: &str, dof: usize| -> Outcome {
        match model {
            Some(m) if m.dof != dof => Err(Failure::Invalid(format!(
                "{what} has dof {dof} but {} has {}",
                m.hand_id, m.dof
            ))),
            _ => Ok(()),
        }
    };
    match kind.as_str() {
        teleop_core::hand_model::SCHEMA => {
            let m = HandModel::from_json_str(&text)?;
            let violations = validate_model(&m);
            if !violations.is_empty() {
                let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                return Err(Failure::Invalid(list.join("; ")));
            }
        }
        teleop_core::subspace::SCHEMA => {
            let m = TeleopMapping::from_json_str(&text)?;
            m.validate()?;
            if let Some(model) = model {
                m.validate_for(model)?;
            }
        }
        teleop_core::grasp::SCHEMA => {
            let ds = GraspDataset::from_jsonl(&text)?;
            match model {
                Some(model) => ds.validate_for(model)?,
                None => ds.validate()?,
            }
        }
        teleop_core::empirical::ASSIGNMENT_SCHEMA => {
            let a = MotionAssignment::from_json_str(&text)?;
            if let Some(m) = model {
                a.validate(m.dof)?;
            }
        }
        teleop_core::empirical::EXTREMA_SCHEMA => {
            let e = ExtremaPoses::from_json_str(&text)?;
            if let Some(m) = model {
                for p in e.pooled().iter().chain(e.origin.iter()) {
                    m.check_pose(p)?;
                }
            }
        }
        teleop_core::ransac::REPORT_SCHEMA => {
            let r = FitReport::from_json_str(&text)?;
            r.cfg.validate()?;
            dof_check("report", r.hypothesis.dof())?;
        }
        teleop_core::baselines::CORRESPONDENCE_SCHEMA => {
            let c = JointCorrespondence::from_json_str(&text)?;
            let max = |k: usize| c.pairs.iter().map(|p| p[k] + 1).max().unwrap_or(0);
            c.validate(max(0), max(1))?;
        }
        teleop_core::baselines::FINGERTIP_SCHEMA => {
            FingertipConfig::from_json_str(&text)?.validate()?
        }
        teleop_core::session::SESSION_SCHEMA => {
            SessionConfig::load_resources(path)?;
        }
        teleop_core::session::REPLAY_SCHEMA => {
            ReplayReport::from_json_str(&text)?;
        }
        "trajectory" => {
            let traj = read_trajectory(&text)?;
            for p in &traj {
                dof_check("trajectory", p.q.len())?;
            }
        }
        "stream" => {
            for (n, line) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                serde_json::from_str::<StreamMessage>(line)
                    .map_err(|e| Failure::Invalid(format!("line {}: {e}", n + 1)))?;
            }
        }
        other => return Err(Failure::Invalid(format!("unknown schema \"{other}\""))),
    }
    Ok(kind)
}

fn validate(a: Validate) -> Outcome {
    let model = a
        .model
        .as_deref()
        .map(HandModel::load_validated)
        .transpose()?;
    let mut failed = false;
    for f in &a.files {
        match validate_one(f, model.as_ref()) {
            Ok(kind) => println!("{}: ok ({kind})", f.display()),
            Err(Failure::Invalid(m)) => {
                failed = true;
                println!("{}: invalid: {m}", f.display());
            }
            Err(e) => return Err(e),
        }
    }
    if failed {
        return Err(Failure::Invalid("some files are invalid".into()));
    }
    Ok(())
}
