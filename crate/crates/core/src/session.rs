//! Streaming teleoperation sessions and offline trajectory replay.
//!
//! A session turns each incoming `master_pose` message into exactly one
//! `slave_pose` reply using the selected mapping. The same state machine
//! drives live connections and replay, so both produce identical output for
//! identical input.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{fingertip_map, joint_map, FingertipConfig, JointCorrespondence};
use crate::error::{check_len, Error, Result};
use crate::hand_model::{clamp_to_limits, forward_kinematics, HandModel, JointPose};
use crate::jsonio;
use crate::subspace::{teleop_map, TeleopMapping};

pub const SESSION_SCHEMA: &str = "session-config/1";
pub const REPLAY_SCHEMA: &str = "replay-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingKind {
    Subspace,
    Joint,
    Fingertip,
}

impl MappingKind {
    pub fn name(self) -> &'static str {
        match self {
            MappingKind::Subspace => "subspace",
            MappingKind::Joint => "joint",
            MappingKind::Fingertip => "fingertip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "subspace" => Some(MappingKind::Subspace),
            "joint" => Some(MappingKind::Joint),
            "fingertip" => Some(MappingKind::Fingertip),
            _ => None,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Session description. Paths are relative to the file they are read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_mapping: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slave_mapping: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_model: Option<PathBuf>,
    pub slave_model: PathBuf,
    pub mapping_kind: MappingKind,
    #[serde(default = "default_true")]
    pub clamp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondence: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingertip: Option<PathBuf>,
}

impl SessionConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        jsonio::from_tagged_str(text, SESSION_SCHEMA)
    }

    pub fn to_json_string(&self) -> Result<String> {
        jsonio::to_tagged_document(self, SESSION_SCHEMA)
    }

    /// Reads the config and every file it references.
    pub fn load_resources(path: &Path) -> Result<SessionResources> {
        let cfg = Self::from_json_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve(base)
    }

    pub fn resolve(&self, base: &Path) -> Result<SessionResources> {
        let at = |p: &Path| base.join(p);
        let slave_model = HandModel::load_validated(&at(&self.slave_model))?;
        let master_model = match &self.master_model {
            Some(p) => Some(HandModel::load_validated(&at(p))?),
            None => None,
        };
        let load_mapping = |p: &Option<PathBuf>| -> Result<Option<TeleopMapping>> {
            p.as_ref().map(|p| TeleopMapping::load(&at(p))).transpose()
        };
        let res = SessionResources {
            master_mapping: load_mapping(&self.master_mapping)?,
            slave_mapping: load_mapping(&self.slave_mapping)?,
            master_model,
            slave_model: Some(slave_model),
            correspondence: self
                .correspondence
                .as_ref()
                .map(|p| JointCorrespondence::load(&at(p)))
                .transpose()?,
            fingertip: self
                .fingertip
                .as_ref()
                .map(|p| FingertipConfig::load(&at(p)))
                .transpose()?,
            initial_kind: self.mapping_kind,
            clamp: self.clamp,
        };
        res.validate()?;
        Ok(res)
    }
}

/// Loaded, immutable data a session works with; shared between sessions.
#[derive(Debug, Clone)]
pub struct SessionResources {
    pub master_mapping: Option<TeleopMapping>,
    pub slave_mapping: Option<TeleopMapping>,
    pub master_model: Option<HandModel>,
    pub slave_model: Option<HandModel>,
    pub correspondence: Option<JointCorrespondence>,
    pub fingertip: Option<FingertipConfig>,
    pub initial_kind: MappingKind,
    /// Clamp slave poses to the slave joint limits (needs the slave model).
    pub clamp: bool,
}

impl SessionResources {
    /// Subspace-only resources, e.g. for batch mapping without a slave model.
    pub fn subspace(
        master: TeleopMapping,
        slave: TeleopMapping,
        slave_model: Option<HandModel>,
    ) -> Result<Self> {
        let res = Self {
            clamp: slave_model.is_some(),
            master_mapping: Some(master),
            slave_mapping: Some(slave),
            master_model: None,
            slave_model,
            correspondence: None,
            fingertip: None,
            initial_kind: MappingKind::Subspace,
        };
        res.validate()?;
        Ok(res)
    }

    pub fn master_dof(&self) -> Option<usize> {
        self.master_model
            .as_ref()
            .map(|m| m.dof)
            .or(self.master_mapping.as_ref().map(|m| m.dof()))
    }

    pub fn slave_dof(&self) -> Option<usize> {
        self.slave_model
            .as_ref()
            .map(|m| m.dof)
            .or(self.slave_mapping.as_ref().map(|m| m.dof()))
    }

    /// Whether `kind` has everything it needs.
    pub fn supports(&self, kind: MappingKind) -> bool {
        match kind {
            MappingKind::Subspace => self.master_mapping.is_some() && self.slave_mapping.is_some(),
            MappingKind::Joint => self.correspondence.is_some() && self.slave_model.is_some(),
            MappingKind::Fingertip => {
                self.fingertip.is_some()
                    && self.master_model.is_some()
                    && self.slave_model.is_some()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.supports(self.initial_kind) {
            return Err(Error::Invalid(format!(
                "{} mapping needs files that the session does not provide",
                self.initial_kind.name()
            )));
        }
        if self.clamp && self.slave_model.is_none() {
            return Err(Error::Invalid("clamping needs a slave model".into()));
        }
        if let (Some(a), Some(b)) = (&self.master_model, &self.master_mapping) {
            b.validate_for(a)?;
        }
        if let (Some(a), Some(b)) = (&self.slave_model, &self.slave_mapping) {
            b.validate_for(a)?;
        }
        if let Some(m) = &self.master_mapping {
            m.validate()?;
        }
        if let Some(m) = &self.slave_mapping {
            m.validate()?;
        }
        if let (Some(c), Some(md), Some(sd)) =
            (&self.correspondence, self.master_dof(), self.slave_dof())
        {
            c.validate(md, sd)?;
        }
        if let Some(f) = &self.fingertip {
            f.validate()?;
        }
        Ok(())
    }
}

/// Link points of every finger, palm frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FkFrame {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master: Option<Vec<Vec<[f64; 3]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slave: Option<Vec<Vec<[f64; 3]>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    MasterPose,
    SlavePose,
    SetMapping,
    Error,
    Info,
}

/// One line of the stream protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamMessage {
    #[serde(rename = "type")]
    pub kind: MessageType,
    /// Sender timestamp in seconds; echoed, never interpreted.
    #[serde(default)]
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping_ref: Option<String>,
    /// Per-joint flags of the slave pose marking clamped joints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamped: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Kinematics for rendering; sent as an `info` message after each
    /// `slave_pose` once a `set_mapping` asked for it with `with_fk`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fk: Option<FkFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_fk: Option<bool>,
}

impl StreamMessage {
    pub fn new(kind: MessageType, t: f64) -> Self {
        Self {
            kind,
            t,
            q: None,
            psi: None,
            mapping_ref: None,
            clamped: None,
            message: None,
            fk: None,
            with_fk: None,
        }
    }

    pub fn master_pose(t: f64, q: Vec<f64>) -> Self {
        Self {
            q: Some(q),
            ..Self::new(MessageType::MasterPose, t)
        }
    }

    pub fn set_mapping(t: f64, kind: MappingKind) -> Self {
        Self {
            mapping_ref: Some(kind.name().into()),
            ..Self::new(MessageType::SetMapping, t)
        }
    }

    pub fn error(t: f64, message: impl Into<String>) -> Self {
        Self {
            message: Some(message.into()),
            ..Self::new(MessageType::Error, t)
        }
    }

    pub fn info(t: f64, message: impl Into<String>) -> Self {
        Self {
            message: Some(message.into()),
            ..Self::new(MessageType::Info, t)
        }
    }

    pub fn to_line(&self) -> Result<String> {
        jsonio::to_line(self)
    }
}

/// Per-connection state; processes messages strictly in order.
#[derive(Debug)]
pub struct Session {
    res: Arc<SessionResources>,
    kind: MappingKind,
    with_fk: bool,
    /// Last slave pose, the warm start of the fingertip solver.
    last_slave: Option<JointPose>,
}

impl Session {
    pub fn new(res: Arc<SessionResources>) -> Self {
        Self {
            kind: res.initial_kind,
            res,
            with_fk: false,
            last_slave: None,
        }
    }

    pub fn kind(&self) -> MappingKind {
        self.kind
    }

    pub fn resources(&self) -> &SessionResources {
        &self.res
    }

    /// Handles one raw line of input.
    pub fn handle_line(&mut self, line: &str) -> Vec<StreamMessage> {
        match serde_json::from_str::<StreamMessage>(line) {
            Ok(msg) => self.handle(&msg),
            Err(e) => vec![StreamMessage::error(
                0.0,
                format!("unparseable message: {e}"),
            )],
        }
    }

    pub fn handle(&mut self, msg: &StreamMessage) -> Vec<StreamMessage> {
        match msg.kind {
            MessageType::MasterPose => match self.map_pose(msg) {
                Ok(reply) => {
                    let mut out = vec![reply];
                    if self.with_fk {
                        out.push(self.fk_info(msg, &out[0]));
                    }
                    out
                }
                Err(e) => vec![StreamMessage::error(msg.t, e.to_string())],
            },
            MessageType::SetMapping => self.set_mapping(msg),
            other => vec![StreamMessage::error(
                msg.t,
                format!("unexpected message type {other:?} from client"),
            )],
        }
    }

    fn set_mapping(&mut self, msg: &StreamMessage) -> Vec<StreamMessage> {
        let Some(r) = &msg.mapping_ref else {
            return vec![StreamMessage::error(msg.t, "set_mapping needs mapping_ref")];
        };
        let Some(kind) = MappingKind::parse(r) else {
            return vec![StreamMessage::error(
                msg.t,
                format!("unknown mapping \"{r}\""),
            )];
        };
        if !self.res.supports(kind) {
            return vec![StreamMessage::error(
                msg.t,
                format!("mapping \"{r}\" is not configured for this session"),
            )];
        }
        self.kind = kind;
        self.last_slave = None;
        if let Some(f) = msg.with_fk {
            self.with_fk = f;
        }
        let mut reply = StreamMessage::info(msg.t, format!("mapping set to {r}"));
        reply.mapping_ref = Some(r.clone());
        if self.with_fk {
            reply.fk = Some(FkFrame {
                master: self
                    .res
                    .master_model
                    .as_ref()
                    .map(|m| points(m, &m.neutral_pose())),
                slave: self
                    .slave_rest()
                    .and_then(|q| self.res.slave_model.as_ref().map(|m| points(m, &q))),
            });
        }
        vec![reply]
    }

    fn slave_rest(&self) -> Option<JointPose> {
        match (&self.res.slave_mapping, &self.res.slave_model) {
            (Some(m), _) => Some(m.origin.clone()),
            (None, Some(model)) => Some(model.neutral_pose()),
            _ => None,
        }
    }

    fn fk_info(&self, input: &StreamMessage, reply: &StreamMessage) -> StreamMessage {
        let master = match (&self.res.master_model, &input.q) {
            (Some(m), Some(q)) => Some(points(m, &JointPose(q.clone()))),
            _ => None,
        };
        let slave = match (&self.res.slave_model, &reply.q) {
            (Some(m), Some(q)) => Some(points(m, &JointPose(q.clone()))),
            _ => None,
        };
        StreamMessage {
            fk: Some(FkFrame { master, slave }),
            ..StreamMessage::new(MessageType::Info, input.t)
        }
    }

    fn map_pose(&mut self, msg: &StreamMessage) -> Result<StreamMessage> {
        let q = msg
            .q
            .as_ref()
            .ok_or_else(|| Error::Invalid("master_pose needs q".into()))?;
        if let Some(dof) = self.res.master_dof() {
            check_len("master_pose q", dof, q.len())?;
        }
        crate::error::check_finite("master_pose q", q)?;
        let q_master = JointPose(q.clone());
        let res = &self.res;
        let (q_slave, psi) = match self.kind {
            MappingKind::Subspace => {
                let (m, s) = (
                    res.master_mapping.as_ref().expect("supported"),
                    res.slave_mapping.as_ref().expect("supported"),
                );
                let (qs, psi) = teleop_map(m, s, &q_master)?;
                (qs, Some(psi.0))
            }
            MappingKind::Joint => {
                let corr = res.correspondence.as_ref().expect("supported");
                let slave = res.slave_model.as_ref().expect("supported");
                (joint_map(corr, &q_master, slave)?.0, None)
            }
            MappingKind::Fingertip => {
                let cfg = res.fingertip.as_ref().expect("supported");
                let master = res.master_model.as_ref().expect("supported");
                let slave = res.slave_model.as_ref().expect("supported");
                let init = self.last_slave.clone().or_else(|| self.slave_rest());
                (
                    fingertip_map(cfg, master, &q_master, slave, init.as_ref())?.q,
                    None,
                )
            }
        };
        let (q_out, flags) = match (&res.slave_model, res.clamp) {
            (Some(model), true) => {
                let (c, f) = clamp_to_limits(model, &q_slave)?;
                (c, Some(f))
            }
            _ => {
                crate::error::check_finite("slave pose", q_slave.as_slice())?;
                (q_slave, None)
            }
        };
        self.last_slave = Some(q_out.clone());
        Ok(StreamMessage {
            q: Some(q_out.0),
            psi,
            mapping_ref: Some(self.kind.name().into()),
            clamped: flags,
            ..StreamMessage::new(MessageType::SlavePose, msg.t)
        })
    }
}

fn points(model: &HandModel, q: &JointPose) -> Vec<Vec<[f64; 3]>> {
    match forward_kinematics(model, q) {
        Ok(kin) => kin
            .fingers
            .iter()
            .map(|f| f.points.iter().map(|p| [p.x, p.y, p.z]).collect())
            .collect(),
        Err(_) => Vec::new(),
    }
}

/// One sample of a recorded master trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub q: Vec<f64>,
}

pub fn read_trajectory(text: &str) -> Result<Vec<TrajectoryPoint>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("trajectory line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>> {
    read_trajectory(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_trajectory(points: &[TrajectoryPoint]) -> Result<String> {
    let mut out = String::new();
    for p in points {
        out.push_str(&jsonio::to_line(p)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Latency {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Latency {
    /// Nearest-rank percentiles of per-message processing times in seconds.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self {
                p50: 0.0,
                p90: 0.0,
                p99: 0.0,
                max: 0.0,
            };
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            max: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayReport {
    pub steps: usize,
    pub mapping_kind: MappingKind,
    /// ψ per step for subspace mappings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_path: Option<Vec<[f64; 3]>>,
    pub slave_path: Vec<Vec<f64>>,
    /// Total clamped joint values over all steps.
    pub clamp_count: usize,
    /// Steps with at least one clamped joint.
    pub clamped_steps: usize,
    /// Largest single-joint change between consecutive slave poses (radians).
    pub max_joint_step: f64,
    pub errors: usize,
    pub latency: Latency,
}

impl ReplayReport {
    pub fn to_json_string(&self) -> Result<String> {
        jsonio::to_tagged_document(self, REPLAY_SCHEMA)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        jsonio::from_tagged_str(text, REPLAY_SCHEMA)
    }
}

/// Runs a trajectory through a fresh session. Returns the report and every
/// reply message in order, which match what a live connection would send.
pub fn replay_eval(
    trajectory: &[TrajectoryPoint],
    res: Arc<SessionResources>,
) -> Result<(ReplayReport, Vec<StreamMessage>)> {
    let mut session = Session::new(res);
    let kind = session.kind();
    let mut replies = Vec::with_capacity(trajectory.len());
    let mut latencies = Vec::with_capacity(trajectory.len());
    let mut psi_path = Vec::new();
    let mut slave_path: Vec<Vec<f64>> = Vec::with_capacity(trajectory.len());
    let (mut clamp_count, mut clamped_steps, mut errors) = (0, 0, 0);
    let mut max_step = 0.0_f64;
    for p in trajectory {
        let msg = StreamMessage::master_pose(p.t, p.q.clone());
        let start = Instant::now();
        let out = session.handle(&msg);
        latencies.push(start.elapsed().as_secs_f64());
        for r in &out {
            match r.kind {
                MessageType::SlavePose => {
                    let q = r.q.clone().unwrap_or_default();
                    if let Some(prev) = slave_path.last() {
                        for (a, b) in prev.iter().zip(&q) {
                            max_step = max_step.max((a - b).abs());
                        }
                    }
                    if let Some(psi) = r.psi {
                        psi_path.push(psi);
                    }
                    if let Some(flags) = &r.clamped {
                        let n = flags.iter().filter(|f| **f).count();
                        clamp_count += n;
                        clamped_steps += usize::from(n > 0);
                    }
                    slave_path.push(q);
                }
                MessageType::Error => errors += 1,
                _ => {}
            }
        }
        replies.extend(out);
    }
    let report = ReplayReport {
        steps: trajectory.len(),
        mapping_kind: kind,
        psi_path: (kind == MappingKind::Subspace).then_some(psi_path),
        slave_path,
        clamp_count,
        clamped_steps,
        max_joint_step: max_step,
        errors,
        latency: Latency::from_samples(&latencies),
    };
    Ok((report, replies))
}
