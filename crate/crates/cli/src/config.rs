use std::path::Path;

use roireg::engine::{Initializer, OptimizerConfig, SessionConfig, Timing, DEFAULT_ISO_ITERATIONS, DEFAULT_RSO_ITERATIONS};
use roireg::{Error, LossConfig, Result};
use serde::{Deserialize, Serialize};

use crate::{InitArg, RunArgs};

pub const DEFAULT_COARSE_LEVELS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub iso_iters: usize,
    pub rso_iters: usize,
    /// Recorded in every output; the optimization itself draws no random numbers.
    pub seed: u64,
    pub init: Initializer,
    /// `off` keeps `wall_ms` at 0 so traces are byte-reproducible.
    pub timing: Timing,
    pub protect_previous_rois: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            iso_iters: DEFAULT_ISO_ITERATIONS,
            rso_iters: DEFAULT_RSO_ITERATIONS,
            seed: 0,
            init: Initializer::CoarseToFine {
                levels: DEFAULT_COARSE_LEVELS,
            },
            timing: Timing::Off,
            protect_previous_rois: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::argument("config", format!("{}: {e}", path.display())))
    }

    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        match (args.init, args.levels) {
            (Some(InitArg::Identity), Some(_)) => {
                return Err(Error::argument("levels", "only meaningful with --init coarse"));
            }
            (Some(InitArg::Identity), None) => cfg.init = Initializer::Identity,
            (Some(InitArg::Coarse), levels) => {
                cfg.init = Initializer::CoarseToFine {
                    levels: levels.unwrap_or(DEFAULT_COARSE_LEVELS),
                }
            }
            (None, Some(levels)) => cfg.init = Initializer::CoarseToFine { levels },
            (None, None) => {}
        }
        if let Some(lr) = args.lr {
            cfg.optimizer.learning_rate = lr;
        }
        if let Some(w) = args.reg_weight {
            cfg.loss.reg_weight = w;
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        if let Initializer::CoarseToFine { levels } = self.init {
            if !(1..=8).contains(&levels) {
                return Err(Error::argument("init.levels", format!("{levels} is outside 1..=8")));
            }
        }
        Ok(())
    }

    pub fn session_config(&self, monitor_roi: Option<roireg::RoiBox>) -> SessionConfig {
        SessionConfig {
            loss: self.loss,
            optimizer: self.optimizer,
            init: self.init,
            monitor_roi,
            timing: self.timing,
            protect_previous_rois: self.protect_previous_rois,
        }
    }
}
