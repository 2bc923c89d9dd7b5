//! Test-time optimization of the displacement field and the review workflow.
//!
//! A [`Session`] owns one fixed/moving pair and the field being optimized.
//! Step 1 produces a starting field ([`Initializer`]); step 2 runs
//! image-specific optimization (full-image loss, default 100 iterations);
//! step 3 runs region-specific optimization on a reviewer box (masked loss,
//! default 400 iterations), repeatable per box. [`Session::decide`] maps a
//! reviewer verdict to the next step.
//!
//! Adam moments are reset at the start of every run, so an RSO run with an
//! unregularized loss leaves every component outside its box untouched.

pub mod adam;
mod init;
mod trace;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, OptimizerConfig, Param};
pub use init::{initial_field, Initializer, ITERATIONS_PER_LEVEL};
pub use trace::{Baseline, LossTrace, Phase, TraceEntry, CSV_HEADER};

use crate::error::{Error, Result};
use crate::loss::{evaluate, gradient_share, image_loss, GradientShareReport, LossConfig, RegionPartition};
use crate::transform::{warp, DisplacementField, RoiBox};
use crate::volume::Volume3;

pub const DEFAULT_ISO_ITERATIONS: usize = 100;
pub const DEFAULT_RSO_ITERATIONS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Initialized,
    IsoRunning,
    IsoDone,
    RsoRunning,
    RsoDone,
    Accepted,
}

impl Stage {
    pub fn is_running(self) -> bool {
        matches!(self, Stage::IsoRunning | Stage::RsoRunning)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Whether trace rows carry elapsed wall-clock time. `Off` writes zeros,
/// which keeps exported traces byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    #[default]
    Wall,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SessionConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub init: Initializer,
    /// Box whose loss is also recorded during ISO runs.
    pub monitor_roi: Option<RoiBox>,
    pub timing: Timing,
    /// During RSO, zero the gradient inside earlier boxes (outside the current one).
    pub protect_previous_rois: bool,
}

/// Cooperative cancellation, checked between iterations.
#[derive(Debug, Clone, Default)]
pub struct CancelFlag(Arc<AtomicBool>);

impl CancelFlag {
    pub fn request(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_requested(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    fn clear(&self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

/// Stop a run once the tracked loss improves by less than
/// `min_relative_improvement` over `window` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub min_relative_improvement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub iterations: usize,
    pub early_stop: Option<EarlyStop>,
}

impl RunOptions {
    pub fn iterations(iterations: usize) -> Self {
        RunOptions {
            iterations,
            early_stop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOutcome {
    pub completed: usize,
    pub cancelled: bool,
    pub stopped_early: bool,
}

/// Called after every completed iteration, with the session in a consistent state.
pub trait RunObserver {
    fn on_iteration(&mut self, session: &Session, entry: &TraceEntry);
}

impl<F: FnMut(&Session, &TraceEntry)> RunObserver for F {
    fn on_iteration(&mut self, session: &Session, entry: &TraceEntry) {
        self(session, entry)
    }
}

pub struct NoObserver;

impl RunObserver for NoObserver {
    fn on_iteration(&mut self, _: &Session, _: &TraceEntry) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    ImageNotAcceptable,
    RegionNotAcceptable { roi: RoiBox },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum NextAction {
    Finish,
    RunIso { iterations: usize },
    RunRso { roi: RoiBox, iterations: usize },
}

/// Everything needed to rebuild a session from storage.
#[derive(Debug, Clone)]
pub struct SessionParts {
    pub fixed: Arc<Volume3>,
    pub moving: Arc<Volume3>,
    pub dvf: DisplacementField,
    pub config: SessionConfig,
    pub stage: Stage,
    pub trace: LossTrace,
    pub roi_history: Vec<RoiBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub dims: crate::volume::Dims,
    pub stage: Stage,
    pub iteration: u64,
    pub roi_history: Vec<RoiBox>,
    pub config: SessionConfig,
    pub trace_rows: usize,
    pub cancelled_at: Vec<u64>,
}

#[derive(Debug)]
pub struct Session {
    fixed: Arc<Volume3>,
    moving: Arc<Volume3>,
    dvf: DisplacementField,
    optimizer: AdamState,
    config: SessionConfig,
    stage: Stage,
    trace: LossTrace,
    roi_history: Vec<RoiBox>,
    cancel: CancelFlag,
}

/// Step 1: build a session and its starting field.
pub fn init_session(fixed: Volume3, moving: Volume3, config: SessionConfig) -> Result<Session> {
    Session::new(Arc::new(fixed), Arc::new(moving), config)
}

impl Session {
    pub fn new(fixed: Arc<Volume3>, moving: Arc<Volume3>, config: SessionConfig) -> Result<Self> {
        fixed.dims().ensure_same(&moving.dims())?;
        config.loss.validate()?;
        config.optimizer.validate()?;
        if let Some(roi) = &config.monitor_roi {
            roi.validate(fixed.dims())?;
        }
        let dvf = initial_field(&fixed, &moving, &config.loss, &config.optimizer, config.init)?;
        let mut session = Session {
            optimizer: AdamState::new(3 * fixed.dims().len()),
            fixed,
            moving,
            dvf,
            config,
            stage: Stage::Initialized,
            trace: LossTrace::default(),
            roi_history: Vec::new(),
            cancel: CancelFlag::default(),
        };
        let warped = session.warped();
        session.trace.initial = Some(Baseline {
            full_loss: image_loss(&session.fixed, &warped, &session.config.loss, None)?,
            roi_loss: session.monitor_loss(&warped, None)?,
        });
        Ok(session)
    }

    pub fn restore(parts: SessionParts) -> Result<Self> {
        let dims = parts.fixed.dims();
        dims.ensure_same(&parts.moving.dims())?;
        dims.ensure_same(&parts.dvf.dims())?;
        if parts.stage.is_running() {
            return Err(Error::Stage {
                op: "restore",
                stage: parts.stage.to_string(),
            });
        }
        Ok(Session {
            optimizer: AdamState::new(3 * dims.len()),
            fixed: parts.fixed,
            moving: parts.moving,
            dvf: parts.dvf,
            config: parts.config,
            stage: parts.stage,
            trace: parts.trace,
            roi_history: parts.roi_history,
            cancel: CancelFlag::default(),
        })
    }

    pub fn fixed(&self) -> &Arc<Volume3> {
        &self.fixed
    }

    pub fn moving(&self) -> &Arc<Volume3> {
        &self.moving
    }

    pub fn dvf(&self) -> &DisplacementField {
        &self.dvf
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn trace(&self) -> &LossTrace {
        &self.trace
    }

    pub fn roi_history(&self) -> &[RoiBox] {
        &self.roi_history
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.config.loss
    }

    pub fn optimizer_state(&self) -> &AdamState {
        &self.optimizer
    }

    /// Number of completed ISO/RSO iterations.
    pub fn iteration(&self) -> u64 {
        self.trace.last_iteration()
    }

    pub fn cancel_flag(&self) -> CancelFlag {
        self.cancel.clone()
    }

    pub fn set_monitor_roi(&mut self, roi: Option<RoiBox>) -> Result<()> {
        if let Some(r) = &roi {
            r.validate(self.fixed.dims())?;
        }
        self.config.monitor_roi = roi;
        Ok(())
    }

    pub fn warped(&self) -> Volume3 {
        warp(&self.moving, &self.dvf).expect("session dims are consistent")
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            dims: self.fixed.dims(),
            stage: self.stage,
            iteration: self.iteration(),
            roi_history: self.roi_history.clone(),
            config: self.config,
            trace_rows: self.trace.len(),
            cancelled_at: self.trace.cancelled_at.clone(),
        }
    }

    pub fn parts(&self) -> SessionParts {
        SessionParts {
            fixed: self.fixed.clone(),
            moving: self.moving.clone(),
            dvf: self.dvf.clone(),
            config: self.config,
            stage: self.stage,
            trace: self.trace.clone(),
            roi_history: self.roi_history.clone(),
        }
    }

    fn monitor_loss(&self, warped: &Volume3, roi: Option<&RoiBox>) -> Result<Option<f64>> {
        match roi.or(self.config.monitor_roi.as_ref()) {
            Some(r) => Ok(Some(image_loss(&self.fixed, warped, &self.config.loss, Some(r))?)),
            None => Ok(None),
        }
    }

    fn require_stage(&self, op: &'static str, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::Stage {
                op,
                stage: self.stage.to_string(),
            })
        }
    }

    /// Step 2: full-image optimization.
    pub fn run_iso(&mut self, iterations: usize) -> Result<RunOutcome> {
        self.run_iso_with(RunOptions::iterations(iterations), &mut NoObserver)
    }

    pub fn run_iso_with(&mut self, opts: RunOptions, observer: &mut dyn RunObserver) -> Result<RunOutcome> {
        self.require_stage("run_iso", &[Stage::Initialized, Stage::IsoDone, Stage::RsoDone])?;
        self.run_phase(Phase::Iso, None, opts, observer)
    }

    /// Step 3: optimization restricted to `roi`.
    pub fn run_rso(&mut self, roi: RoiBox, iterations: usize) -> Result<RunOutcome> {
        self.run_rso_with(roi, RunOptions::iterations(iterations), &mut NoObserver)
    }

    pub fn run_rso_with(
        &mut self,
        roi: RoiBox,
        opts: RunOptions,
        observer: &mut dyn RunObserver,
    ) -> Result<RunOutcome> {
        self.require_stage("run_rso", &[Stage::Initialized, Stage::IsoDone, Stage::RsoDone])?;
        roi.validate(self.fixed.dims())?;
        if roi.voxel_count() == 0 {
            return Err(Error::EmptyMask);
        }
        self.roi_history.push(roi);
        self.run_phase(Phase::Rso, Some(roi), opts, observer)
    }

    fn run_phase(
        &mut self,
        phase: Phase,
        roi: Option<RoiBox>,
        opts: RunOptions,
        observer: &mut dyn RunObserver,
    ) -> Result<RunOutcome> {
        let (running, done) = match phase {
            Phase::Iso => (Stage::IsoRunning, Stage::IsoDone),
            Phase::Rso => (Stage::RsoRunning, Stage::RsoDone),
        };
        self.stage = running;
        self.optimizer.reset();
        let result = self.iterate(phase, roi, opts, observer);
        self.stage = done;
        self.cancel.clear();
        if let Ok(outcome) = &result {
            if outcome.cancelled {
                self.trace.cancelled_at.push(self.iteration());
            }
        }
        result
    }

    fn iterate(
        &mut self,
        phase: Phase,
        roi: Option<RoiBox>,
        opts: RunOptions,
        observer: &mut dyn RunObserver,
    ) -> Result<RunOutcome> {
        let start = Instant::now();
        let roi_id = roi.map(|_| self.roi_history.len() - 1);
        let protected: Vec<RoiBox> = match (roi, self.config.protect_previous_rois) {
            (Some(_), true) => self.roi_history[..self.roi_history.len() - 1].to_vec(),
            _ => Vec::new(),
        };
        let mut outcome = RunOutcome {
            completed: 0,
            cancelled: false,
            stopped_early: false,
        };
        let mut tracked: Vec<f64> = Vec::new();

        for _ in 0..opts.iterations {
            if self.cancel.is_requested() {
                outcome.cancelled = true;
                break;
            }
            let next = self.iteration() + 1;
            let mut grad = evaluate(&self.fixed, &self.moving, &self.dvf, &self.config.loss, roi.as_ref())?.grad;
            if let Some(current) = roi {
                for p in &protected {
                    clear_outside(&mut grad, p, &current);
                }
            }
            adam_step(&mut self.dvf, &grad, &mut self.optimizer, &self.config.optimizer).map_err(|e| match e {
                Error::Numeric { .. } => Error::Numeric { iteration: next },
                other => other,
            })?;

            let warped = self.warped();
            let entry = TraceEntry {
                iteration: next,
                phase,
                full_loss: image_loss(&self.fixed, &warped, &self.config.loss, None)?,
                roi_loss: self.monitor_loss(&warped, roi.as_ref())?,
                roi_id,
                wall_ms: match self.config.timing {
                    Timing::Wall => start.elapsed().as_millis() as u64,
                    Timing::Off => 0,
                },
            };
            self.trace.push(entry);
            outcome.completed += 1;
            observer.on_iteration(self, &entry);

            if let Some(stop) = opts.early_stop {
                tracked.push(entry.roi_loss.filter(|_| phase == Phase::Rso).unwrap_or(entry.full_loss));
                if stop.window > 0 && tracked.len() > stop.window {
                    let old = tracked[tracked.len() - 1 - stop.window];
                    let new = tracked[tracked.len() - 1];
                    if old <= 0.0 || (old - new) / old < stop.min_relative_improvement {
                        outcome.stopped_early = true;
                        break;
                    }
                }
            }
        }
        Ok(outcome)
    }

    /// Record a reviewer verdict and return the step it calls for.
    pub fn decide(&mut self, verdict: Verdict) -> Result<NextAction> {
        self.require_stage(
            "decide",
            &[Stage::Initialized, Stage::IsoDone, Stage::RsoDone],
        )?;
        match verdict {
            Verdict::Accept => {
                self.stage = Stage::Accepted;
                Ok(NextAction::Finish)
            }
            Verdict::ImageNotAcceptable => Ok(NextAction::RunIso {
                iterations: DEFAULT_ISO_ITERATIONS,
            }),
            Verdict::RegionNotAcceptable { roi } => {
                roi.validate(self.fixed.dims())?;
                Ok(NextAction::RunRso {
                    roi,
                    iterations: DEFAULT_RSO_ITERATIONS,
                })
            }
        }
    }

    /// Carry out an action returned by [`Session::decide`].
    pub fn execute(&mut self, action: NextAction, observer: &mut dyn RunObserver) -> Result<Option<RunOutcome>> {
        match action {
            NextAction::Finish => Ok(None),
            NextAction::RunIso { iterations } => self.run_iso_with(RunOptions::iterations(iterations), observer).map(Some),
            NextAction::RunRso { roi, iterations } => {
                self.run_rso_with(roi, RunOptions::iterations(iterations), observer).map(Some)
            }
        }
    }

    /// Per-region gradient shares of the unregularized full-image loss at the current field.
    pub fn diagnose(&self, partition: &RegionPartition) -> Result<GradientShareReport> {
        let cfg = LossConfig {
            reg_weight: 0.0,
            ..self.config.loss
        };
        let mut report = gradient_share(&self.fixed, &self.moving, &self.dvf, partition, &cfg)?;
        report.iteration = Some(self.iteration());
        Ok(report)
    }

    pub fn export_trace_csv(&self) -> String {
        self.trace.to_csv()
    }

    pub fn export_trace_json(&self) -> String {
        self.trace.to_json()
    }
}

fn clear_outside(grad: &mut crate::loss::GradientField, protected: &RoiBox, current: &RoiBox) {
    if current.contains_box(protected) {
        return;
    }
    if !protected.intersects(current) {
        grad.clear_box(protected);
        return;
    }
    let dims = grad.dims();
    for i in protected.indices(dims) {
        let [x, y, z] = dims.coords(i);
        if !current.contains(x, y, z) {
            grad.clear_index(i);
        }
    }
}
