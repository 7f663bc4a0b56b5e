//! Run configuration: environment dimensions, model widths, gate constants,
//! and training hyperparameters. Serialized as versioned TOML next to every
//! checkpoint so that evaluation reloads the exact geometry a model was
//! trained with.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Palette size is fixed; goal tokens are palette indices, so the goal
/// codebook has the same cardinality.
pub const PALETTE: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnvConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    /// Side of the square wrist crop, odd.
    pub wrist: usize,
    pub action_dim: usize,
    /// Actions per emitted chunk; control decisions happen every `chunk`
    /// environment steps.
    pub chunk: usize,
    pub max_steps: usize,
    /// Minimum Chebyshev distance between consecutive targets when sampling
    /// layouts; keeps sub-task legs long enough to be non-trivial.
    pub min_leg: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_w: 16,
            grid_h: 16,
            wrist: 5,
            action_dim: 4,
            chunk: 5,
            max_steps: 200,
            min_leg: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Head view is split into (grid/patch)^2 square patches.
    pub patch: usize,
    /// Side lengths of the coarse-to-fine goal grids; each scale doubles the
    /// previous one and the last must equal grid_w / patch.
    pub scales: Vec<usize>,
    pub plan_max_len: usize,
    pub instr_len: usize,
    pub sub_hidden: usize,
    pub img_hidden: usize,
    pub gate_hidden: usize,
    pub act_hidden: usize,
    pub ode_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            patch: 4,
            scales: vec![1, 2, 4],
            plan_max_len: 4,
            instr_len: 4,
            sub_hidden: 64,
            img_hidden: 64,
            gate_hidden: 32,
            act_hidden: 128,
            ode_steps: 10,
        }
    }
}

impl ModelConfig {
    /// Number of tokens the finest goal grid holds.
    pub fn goal_cells(&self) -> usize {
        let s = *self.scales.last().unwrap();
        s * s
    }

    /// Tokens across all scales (the full coarse-to-fine sequence).
    pub fn pyramid_cells(&self) -> usize {
        self.scales.iter().map(|s| s * s).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GateConfig {
    /// Skip when the discrepancy score exceeds tau; recompute otherwise.
    pub tau: f64,
    pub cost_full: f64,
    pub cost_skip: f64,
    /// Minimum control steps between recomputes; 0 disables the dwell.
    pub min_dwell: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { tau: 0.5, cost_full: 244.0, cost_skip: 83.0, min_dwell: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lambda_sub: f64,
    pub lambda_img: f64,
    pub lambda_gate: f64,
    /// Fraction of action-loss samples trained with instruction-only
    /// conditioning so that inference-time ablation of the locked plan and
    /// goal stays in-distribution.
    pub cond_dropout: f64,
    /// Synthetic disrupted-state gate samples mixed into each batch when the
    /// dataset carries them.
    pub gate_aug_per_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            stage1_steps: 2000,
            stage2_steps: 4000,
            lr_stage1: 3e-3,
            lr_stage2: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: 1.0,
            lambda_sub: 0.1,
            lambda_img: 0.1,
            lambda_gate: 1.0,
            cond_dropout: 0.1,
            gate_aug_per_batch: 8,
        }
    }
}

/// How per-step goal targets were produced for the dataset a model was
/// trained on. Evaluation refuses mode/checkpoint mismatches.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Goal is the completion frame of the step's segment.
    Completion,
    /// Goal is the frame a fixed number of steps ahead, clamped at the end.
    FixedOffset,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub target_mode: TargetMode,
    pub train_seed: u64,
    pub dataset: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub version: u32,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub gate: GateConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            gate: GateConfig::default(),
            train: TrainConfig::default(),
            provenance: None,
        }
    }
}

impl RunConfig {
    /// Small geometry for fast tests: 8x8 grid, 3x3 wrist, two goal scales,
    /// narrow model.
    pub fn micro() -> Self {
        let mut c = RunConfig::default();
        c.env.grid_w = 8;
        c.env.grid_h = 8;
        c.env.wrist = 3;
        c.env.max_steps = 80;
        c.env.min_leg = 3;
        c.model.d_model = 6;
        c.model.scales = vec![1, 2];
        c.model.sub_hidden = 8;
        c.model.img_hidden = 8;
        c.model.gate_hidden = 6;
        c.model.act_hidden = 10;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return e(format!("unsupported config version {}", self.version));
        }
        if self.env.grid_w != self.env.grid_h {
            return e("grid must be square".into());
        }
        if self.env.grid_w % self.model.patch != 0 {
            return e(format!("patch {} must divide grid {}", self.model.patch, self.env.grid_w));
        }
        if self.env.wrist % 2 == 0 || self.env.wrist == 0 {
            return e("wrist crop side must be odd".into());
        }
        if self.env.action_dim != 4 {
            return e("action layout is (dx, dy, grip, pad)".into());
        }
        if self.env.chunk == 0 || self.env.max_steps == 0 {
            return e("chunk and max_steps must be positive".into());
        }
        if self.model.scales.is_empty() || self.model.scales[0] != 1 {
            return e("scale schedule must start at 1".into());
        }
        for w in self.model.scales.windows(2) {
            if w[1] != w[0] * 2 {
                return e(format!("scales must double: {} then {}", w[0], w[1]));
            }
        }
        let finest = *self.model.scales.last().unwrap();
        if finest != self.env.grid_w / self.model.patch {
            return e(format!(
                "finest scale {} must equal grid/patch = {}",
                finest,
                self.env.grid_w / self.model.patch
            ));
        }
        if !(0.0..=1.0).contains(&self.gate.tau) {
            return e(format!("tau {} outside [0,1]", self.gate.tau));
        }
        if self.gate.cost_full <= 0.0 || self.gate.cost_skip <= 0.0 {
            return e("costs must be positive".into());
        }
        if self.model.ode_steps == 0 {
            return e("ode_steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.train.cond_dropout) {
            return e("cond_dropout outside [0,1]".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
