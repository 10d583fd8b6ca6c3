use serde::{Deserialize, Serialize};

use crate::error::{NfsError, Result};
use crate::gates::GateSampler;

/// Topology and search-space description of a [`super::TwoStreamNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of both modality stems.
    pub stem_width: usize,
    /// Output channels of each shared stage. Every stage halves the spatial
    /// size except the last, which keeps it.
    pub stage_widths: Vec<usize>,
    pub kernel: usize,
    /// 1-based indices of the shared stages that carry search cells.
    pub searched_stages: Vec<usize>,
    pub num_identities: usize,
    /// Uniform range for the raw gate parameters.
    pub gate_init: (f64, f64),
    pub sampler: GateSampler,
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_height: 32,
            input_width: 16,
            stem_width: 16,
            stage_widths: vec![16, 32, 64, 128],
            kernel: 3,
            searched_stages: vec![1, 2, 3],
            num_identities: 64,
            gate_init: (0.0, 0.01),
            sampler: GateSampler::default(),
            bn_momentum: 0.1,
        }
    }
}

/// Output geometry of one shared stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl NetConfig {
    pub fn embedding_dim(&self) -> usize {
        self.stage_widths.last().copied().unwrap_or(0)
    }

    pub fn stage_count(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn is_searched(&self, stage_index: usize) -> bool {
        self.searched_stages.contains(&(stage_index + 1))
    }

    pub fn searched_mask(&self) -> Vec<bool> {
        (0..self.stage_count()).map(|i| self.is_searched(i)).collect()
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NfsError::Config(msg));
        if self.stage_widths.is_empty() {
            return fail("at least one shared stage is required".into());
        }
        if self.stem_width == 0 || self.stage_widths.contains(&0) {
            return fail("channel widths must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.num_identities == 0 {
            return fail("the classifier needs at least one training identity".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.searched_stages {
            if s == 0 || s > self.stage_count() {
                return fail(format!("searched stage {s} outside 1..={}", self.stage_count()));
            }
            if !seen.insert(s) {
                return fail(format!("searched stage {s} listed twice"));
            }
        }
        let (lo, hi) = self.gate_init;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return fail(format!("gate init range ({lo}, {hi}) is not an interval"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return fail(format!("batch-norm momentum {} outside (0, 1]", self.bn_momentum));
        }
        self.stage_shapes().map(|_| ())
    }

    /// Geometry after every shared stage, checking that each strided stage
    /// still has room to downsample.
    pub fn stage_shapes(&self) -> Result<Vec<StageShape>> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(NfsError::DegenerateOutput {
                op: "net",
                height: self.input_height as isize,
                width: self.input_width as isize,
            });
        }
        let last = self.stage_count().saturating_sub(1);
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut shapes = Vec::with_capacity(self.stage_count());
        for (i, &channels) in self.stage_widths.iter().enumerate() {
            let stride = if i == last { 1 } else { 2 };
            if h < stride || w < stride {
                return Err(NfsError::DegenerateOutput {
                    op: "net",
                    height: (h / stride) as isize,
                    width: (w / stride) as isize,
                });
            }
            h = (h - 1) / stride + 1;
            w = (w - 1) / stride + 1;
            shapes.push(StageShape {
                channels,
                height: h,
                width: w,
                stride,
            });
        }
        Ok(shapes)
    }
}
