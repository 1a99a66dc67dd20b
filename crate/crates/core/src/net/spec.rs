use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A shared-trunk convolution (always followed by tanh).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// A branch transposed convolution, followed by batch norm, an optional
/// additive skip from a trunk activation, and tanh (sigmoid on the last stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeconvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Index of the trunk layer whose activation is added after batch norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<usize>,
}

/// Topology of the two-way forked network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Side ω of the square input patches.
    pub patch_size: usize,
    pub input_channels: usize,
    pub trunk: Vec<ConvSpec>,
    pub t_branch: Vec<DeconvSpec>,
    pub a_branch: Vec<DeconvSpec>,
}

/// Spatial extents of every activation for one input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    /// `(channels, side)` after each trunk layer.
    pub trunk: Vec<(usize, usize)>,
    pub t_branch: Vec<(usize, usize)>,
    pub a_branch: Vec<(usize, usize)>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let conv = |out_channels, stride| ConvSpec {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        };
        let branch = |out| {
            vec![
                DeconvSpec { out_channels: 64, kernel: 4, stride: 2, padding: 1, skip: Some(2) },
                DeconvSpec { out_channels: 32, kernel: 3, stride: 1, padding: 1, skip: Some(1) },
                DeconvSpec { out_channels: 16, kernel: 4, stride: 2, padding: 1, skip: Some(0) },
                DeconvSpec { out_channels: out, kernel: 3, stride: 1, padding: 1, skip: None },
            ]
        };
        NetworkSpec {
            patch_size: 64,
            input_channels: 3,
            trunk: vec![conv(16, 1), conv(32, 2), conv(64, 1), conv(64, 2)],
            t_branch: branch(1),
            a_branch: branch(3),
        }
    }
}

impl NetworkSpec {
    /// The default topology with every channel width divided by `factor`
    /// (outputs keep 1 and 3 channels). Used for quick experiments.
    pub fn slim(factor: usize) -> Self {
        let mut spec = Self::default();
        let factor = factor.max(1);
        for c in &mut spec.trunk {
            c.out_channels = (c.out_channels / factor).max(1);
        }
        for branch in [&mut spec.t_branch, &mut spec.a_branch] {
            let last = branch.len() - 1;
            for d in &mut branch[..last] {
                d.out_channels = (d.out_channels / factor).max(1);
            }
        }
        spec
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            toml::from_str(text).map_err(|e| Error::invalid(format!("network spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Checks the structural invariants and propagates shapes for `patch_size`.
    pub fn validate(&self) -> Result<ShapePlan> {
        let bad = |msg: String| Err(Error::invalid(format!("network spec: {msg}")));
        if self.trunk.is_empty() {
            return bad("trunk has no layers".into());
        }
        if self.patch_size == 0 || self.input_channels == 0 {
            return bad("patch size and input channels must be positive".into());
        }
        for (name, branch, out) in [("t", &self.t_branch, 1), ("A", &self.a_branch, 3)] {
            if branch.len() != self.trunk.len() {
                return bad(format!(
                    "{name} branch has {} transposed convs, trunk has {} convs",
                    branch.len(),
                    self.trunk.len()
                ));
            }
            if branch.last().map(|d| d.out_channels) != Some(out) {
                return bad(format!("{name} branch must end with {out} channel(s)"));
            }
        }

        let mut trunk = Vec::with_capacity(self.trunk.len());
        let mut side = self.patch_size;
        for (i, c) in self.trunk.iter().enumerate() {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return bad(format!("trunk layer {i} has a zero extent"));
            }
            let padded = side + 2 * c.padding;
            if padded < c.kernel {
                return bad(format!("trunk layer {i} kernel exceeds its {side}px input"));
            }
            side = (padded - c.kernel) / c.stride + 1;
            trunk.push((c.out_channels, side));
        }
        let trunk_side = side;

        let mut plans = Vec::with_capacity(2);
        for (name, branch) in [("t", &self.t_branch), ("A", &self.a_branch)] {
            let mut side = trunk_side;
            let mut plan = Vec::with_capacity(branch.len());
            for (j, d) in branch.iter().enumerate() {
                if d.out_channels == 0 || d.kernel == 0 || d.stride == 0 {
                    return bad(format!("{name} stage {j} has a zero extent"));
                }
                let grown = (side - 1) * d.stride + d.kernel;
                if grown <= 2 * d.padding {
                    return bad(format!("{name} stage {j} produces an empty output"));
                }
                side = grown - 2 * d.padding;
                let channels = d.out_channels;
                if let Some(s) = d.skip {
                    let Some(&src) = trunk.get(s) else {
                        return bad(format!("{name} stage {j} skips from missing trunk layer {s}"));
                    };
                    if src != (channels, side) {
                        return bad(format!(
                            "{name} stage {j} output {channels}x{side}px cannot take skip from trunk layer {s} ({}x{}px)",
                            src.0, src.1
                        ));
                    }
                }
                plan.push((channels, side));
            }
            if side != self.patch_size {
                return bad(format!(
                    "{name} branch outputs {side}px maps for {}px patches",
                    self.patch_size
                ));
            }
            plans.push(plan);
        }
        let a_branch = plans.pop().expect("two plans");
        let t_branch = plans.pop().expect("two plans");
        Ok(ShapePlan {
            trunk,
            t_branch,
            a_branch,
        })
    }
}
