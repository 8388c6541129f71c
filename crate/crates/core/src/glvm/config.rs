//! Network configuration: the searched architecture genes plus the fixed
//! structural choices (patch size, branch mode, class count), and the JSON
//! file format with strict grid validation.

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::space::{rational_from_f64, rational_to_f64, validate as space_validate, ArchConfig, LocalGenes, SpaceSpec};

/// Branch ablation modes. `DualFiu` is the full network; `DualNoFiu` runs
/// both branches with the interaction units zeroed out; the single-branch
/// modes drop the other branch entirely. `SingleHead` is the Mamba branch
/// with one head and one scan direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    DualFiu,
    DualNoFiu,
    CnnOnly,
    MambaOnly,
    SingleHead,
}

impl Mode {
    pub fn has_cnn_head(self) -> bool {
        matches!(self, Mode::DualFiu | Mode::DualNoFiu | Mode::CnnOnly)
    }
    pub fn has_mamba_head(self) -> bool {
        !matches!(self, Mode::CnnOnly)
    }
    pub fn uses_fiu(self) -> bool {
        matches!(self, Mode::DualFiu)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlvmConfig {
    pub depth: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub patch: usize,
    pub mode: Mode,
    pub classes: usize,
    pub in_channels: usize,
    pub locals: Vec<LocalGenes>,
}

#[derive(Serialize, Deserialize)]
struct LocalFile {
    #[serde(rename = "T")]
    heads: usize,
    #[serde(rename = "E")]
    expand: f64,
    #[serde(rename = "V")]
    state: usize,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    #[serde(rename = "N")]
    depth: usize,
    #[serde(rename = "C")]
    channels: usize,
    #[serde(rename = "D")]
    embed_dim: usize,
    p: usize,
    mode: Mode,
    #[serde(rename = "K")]
    classes: usize,
    #[serde(default = "default_in_channels")]
    in_channels: usize,
    locals: Vec<LocalFile>,
}

fn default_in_channels() -> usize {
    1
}

impl GlvmConfig {
    pub fn new(arch: &ArchConfig, patch: usize, mode: Mode, classes: usize) -> Self {
        GlvmConfig {
            depth: arch.depth,
            channels: arch.channels,
            embed_dim: arch.embed_dim,
            patch,
            mode,
            classes,
            in_channels: 1,
            locals: arch.locals.clone(),
        }
    }

    /// The manual (non-searched) configuration: N=12, C=64, D=128, p=2 with
    /// (T, E, V) = (4, 2, 16) in every block.
    pub fn manual_default(classes: usize) -> Self {
        let locals = vec![
            LocalGenes {
                heads: 4,
                expand: Rational64::from_integer(2),
                state: 16,
            };
            12
        ];
        GlvmConfig {
            depth: 12,
            channels: 64,
            embed_dim: 128,
            patch: 2,
            mode: Mode::DualFiu,
            classes,
            in_channels: 1,
            locals,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            depth: self.depth,
            channels: self.channels,
            embed_dim: self.embed_dim,
            locals: self.locals.clone(),
        }
    }

    /// Head count actually built for block `i` (SingleHead forces one).
    pub fn block_heads(&self, i: usize) -> usize {
        match self.mode {
            Mode::SingleHead => 1,
            _ => self.locals[i].heads,
        }
    }

    /// Scan directions actually built (SingleHead forces one).
    pub fn dirs(&self) -> usize {
        match self.mode {
            Mode::SingleHead => 1,
            _ => 4,
        }
    }

    /// E*D for block `i`; errors unless it is a positive integer.
    pub fn expanded_dim(&self, i: usize) -> Result<usize> {
        let e = self.locals[i].expand;
        let num = e.numer() * self.embed_dim as i64;
        let den = *e.denom();
        if num <= 0 || num % den != 0 {
            return Err(TensorError::param(
                "glvm_config",
                format!("block {i}: E*D = {e}*{} is not a positive integer", self.embed_dim),
            ));
        }
        Ok((num / den) as usize)
    }

    /// D_h for block `i`; errors when E*D is not divisible by the head count.
    pub fn head_dim(&self, i: usize) -> Result<usize> {
        let ed = self.expanded_dim(i)?;
        let t = self.block_heads(i);
        if t == 0 || ed % t != 0 {
            return Err(TensorError::param(
                "glvm_config",
                format!("block {i}: expanded dim {ed} not divisible by {t} heads"),
            ));
        }
        Ok(ed / t)
    }

    /// Structural checks that must hold for the network to build at all.
    pub fn check_buildable(&self) -> Result<()> {
        if self.depth == 0 || self.channels == 0 || self.embed_dim == 0 || self.patch == 0 {
            return Err(TensorError::param("glvm_config", "zero-sized dimension"));
        }
        if self.classes < 2 {
            return Err(TensorError::param("glvm_config", "need at least two classes"));
        }
        if self.locals.len() != self.depth {
            return Err(TensorError::param(
                "glvm_config",
                format!("{} local triples for depth {}", self.locals.len(), self.depth),
            ));
        }
        for i in 0..self.depth {
            self.head_dim(i)?;
            if self.locals[i].state == 0 {
                return Err(TensorError::param("glvm_config", format!("block {i}: state size 0")));
            }
        }
        Ok(())
    }

    /// Config-file validation: basic shape sanity plus grid membership
    /// against a search space. `allow_off_grid` skips the grid checks so
    /// published searched-architecture tables with off-grid entries still
    /// load. Structural buildability (head divisibility) is a separate,
    /// build-time check; some published configs validate but cannot build.
    pub fn validate(&self, spec: &SpaceSpec, allow_off_grid: bool) -> Result<()> {
        if self.depth == 0 || self.locals.len() != self.depth {
            return Err(TensorError::param(
                "glvm_config",
                format!("{} local triples for depth {}", self.locals.len(), self.depth),
            ));
        }
        if self.classes < 2 {
            return Err(TensorError::param("glvm_config", "need at least two classes"));
        }
        if !allow_off_grid {
            space_validate(spec, &self.arch())
                .map_err(|e| TensorError::param("glvm_config", e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ConfigFile {
            depth: self.depth,
            channels: self.channels,
            embed_dim: self.embed_dim,
            p: self.patch,
            mode: self.mode,
            classes: self.classes,
            in_channels: self.in_channels,
            locals: self
                .locals
                .iter()
                .map(|l| LocalFile {
                    heads: l.heads,
                    expand: rational_to_f64(l.expand),
                    state: l.state,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("config serialization")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ConfigFile = serde_json::from_str(s)
            .map_err(|e| TensorError::param("glvm_config", format!("bad config file: {e}")))?;
        let locals = file
            .locals
            .iter()
            .map(|l| {
                rational_from_f64(l.expand)
                    .map(|expand| LocalGenes {
                        heads: l.heads,
                        expand,
                        state: l.state,
                    })
                    .ok_or_else(|| {
                        TensorError::param("glvm_config", format!("bad expand ratio {}", l.expand))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GlvmConfig {
            depth: file.depth,
            channels: file.channels,
            embed_dim: file.embed_dim,
            patch: file.p,
            mode: file.mode,
            classes: file.classes,
            in_channels: file.in_channels,
            locals,
        })
    }
}

/// Pyramid stage of block `i` (0-based) in a depth-`n` network: stages
/// 0, 1, 2 split the blocks in thirds. Spatial size halves and channels
/// double at each stage boundary.
pub fn stage_of(i: usize, n: usize) -> usize {
    ((3 * i) / n).min(2)
}

/// Stage of the block's output, i.e. of the next block (clamped at the last
/// stage). When it exceeds `stage_of(i, n)` the block's trailing depthwise
/// conv runs at stride 2 and the final 1x1 conv doubles the channels.
pub fn stage_out(i: usize, n: usize) -> usize {
    ((3 * (i + 1)) / n).min(2)
}

/// (input channels, output channels, stride) of block `i`.
pub fn block_dims(channels: usize, i: usize, n: usize) -> (usize, usize, usize) {
    let s_in = stage_of(i, n);
    let s_out = stage_out(i, n);
    (
        channels << s_in,
        channels << s_out,
        1usize << (s_out - s_in),
    )
}

/// Channel count of the feature map entering the CNN classifier.
pub fn final_channels(channels: usize, n: usize) -> usize {
    channels << stage_out(n - 1, n)
}
