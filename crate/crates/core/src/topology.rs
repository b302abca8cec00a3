//! Static structure of a maskable classifier: blocks made of parallel paths,
//! paths made of layers. Parameter shapes are a pure function of this.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    /// Pointwise dense map over channels (a 1x1 convolution).
    FullyConnected,
    /// Parameter-free pass-through.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTopology {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub channel_count: usize,
    #[serde(default = "one")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub norm: bool,
    #[serde(default)]
    pub relu: bool,
}

fn one() -> usize {
    1
}

impl LayerTopology {
    pub fn conv(in_channels: usize, out: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        Self {
            kind: LayerKind::Conv,
            in_channels,
            channel_count: out,
            kernel,
            stride,
            norm: true,
            relu,
        }
    }

    pub fn fully_connected(in_channels: usize, out: usize, relu: bool) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            in_channels,
            channel_count: out,
            kernel: 1,
            stride: 1,
            norm: true,
            relu,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        self.kind != LayerKind::Identity
    }

    /// Kernel size actually applied (fully-connected layers are pointwise).
    pub fn effective_kernel(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.kernel,
            _ => 1,
        }
    }

    pub fn effective_stride(&self) -> usize {
        match self.kind {
            LayerKind::Identity => 1,
            _ => self.stride,
        }
    }

    fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        if self.kind == LayerKind::Identity {
            return (c, h, w);
        }
        let k = self.effective_kernel();
        let s = self.effective_stride();
        let pad = k / 2;
        let out = |n: usize| (n + 2 * pad - k) / s + 1;
        (self.channel_count, out(h), out(w))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathTopology {
    pub layers: Vec<LayerTopology>,
}

impl PathTopology {
    pub fn identity() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| !l.is_parameterized())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTopology {
    pub paths: Vec<PathTopology>,
    #[serde(default)]
    pub downsamples: bool,
    /// ReLU applied to the sum of the selected paths.
    #[serde(default)]
    pub relu_after: bool,
}

impl BlockTopology {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Position of a layer inside the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub path: usize,
    pub layer: usize,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.block, self.path, self.layer)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split('.').map(str::parse::<usize>).collect();
        match parts.as_slice() {
            [Ok(block), Ok(path), Ok(layer)] => Ok(LayerId {
                block: *block,
                path: *path,
                layer: *layer,
            }),
            _ => Err(Error::Other(format!("malformed layer id `{s}`"))),
        }
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTopology {
    pub input_shape: InputShape,
    pub blocks: Vec<BlockTopology>,
    pub num_classes: usize,
    /// Channel groups per maskable layer.
    pub groups: usize,
}

impl ModelTopology {
    /// A small residual network: a conv stem followed by `widths.len()` stages
    /// of two-path blocks. Every stage after the first halves the resolution
    /// in its first block, whose skip path is a strided 1x1 projection.
    pub fn residual(
        input_shape: InputShape,
        widths: &[usize],
        blocks_per_stage: usize,
        num_classes: usize,
        groups: usize,
    ) -> Result<Self> {
        if widths.is_empty() || blocks_per_stage == 0 {
            return Err(Error::Topology("need at least one stage and block".into()));
        }
        let mut blocks = vec![BlockTopology {
            paths: vec![PathTopology {
                layers: vec![LayerTopology::conv(input_shape.channels, widths[0], 3, 1, true)],
            }],
            downsamples: false,
            relu_after: false,
        }];
        let mut channels = widths[0];
        for (stage, &width) in widths.iter().enumerate() {
            for i in 0..blocks_per_stage {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let residual = PathTopology {
                    layers: vec![
                        LayerTopology::conv(channels, width, 3, stride, true),
                        LayerTopology::conv(width, width, 3, 1, false),
                    ],
                };
                let skip = if stride == 1 && channels == width {
                    PathTopology::identity()
                } else {
                    let proj = LayerTopology::conv(channels, width, 1, stride, false);
                    PathTopology { layers: vec![proj] }
                };
                blocks.push(BlockTopology {
                    paths: vec![residual, skip],
                    downsamples: stride > 1,
                    relu_after: true,
                });
                channels = width;
            }
        }
        let topology = Self {
            input_shape,
            blocks,
            num_classes,
            groups,
        };
        topology.validate()?;
        Ok(topology)
    }

    /// The default desk model: 16x16 RGB inputs, widths 8/16/32, one block per stage.
    pub fn desk(num_classes: usize) -> Self {
        let shape = InputShape {
            height: 16,
            width: 16,
            channels: 3,
        };
        Self::residual(shape, &[8, 16, 32], 1, num_classes, 4).expect("desk topology is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes == 0 {
            problems.push("num_classes must be positive".to_string());
        }
        if self.groups == 0 {
            problems.push("groups must be positive".to_string());
        }
        if self.blocks.is_empty() {
            problems.push("no blocks".to_string());
        }
        let s = self.input_shape;
        let mut shape = (s.channels, s.height, s.width);
        for (b, block) in self.blocks.iter().enumerate() {
            if block.paths.is_empty() {
                problems.push(format!("block {b}: n_paths must be >= 1"));
                continue;
            }
            let mut outputs = Vec::new();
            for (p, path) in block.paths.iter().enumerate() {
                let mut cur = shape;
                for (l, layer) in path.layers.iter().enumerate() {
                    let id = LayerId {
                        block: b,
                        path: p,
                        layer: l,
                    };
                    if layer.kind == LayerKind::Identity {
                        continue;
                    }
                    if layer.channel_count == 0 {
                        problems.push(format!("layer {id}: channel_count must be >= 1"));
                        continue;
                    }
                    if self.groups > 0 && layer.channel_count % self.groups != 0 {
                        problems.push(format!(
                            "layer {id}: channel_count {} not divisible by {} groups",
                            layer.channel_count, self.groups
                        ));
                    }
                    if layer.in_channels != cur.0 {
                        problems.push(format!(
                            "layer {id}: expects {} input channels, receives {}",
                            layer.in_channels, cur.0
                        ));
                    }
                    if layer.effective_kernel() == 0 || layer.effective_stride() == 0 {
                        problems.push(format!("layer {id}: kernel and stride must be positive"));
                        continue;
                    }
                    cur = layer.output_shape(cur);
                    cur.0 = layer.channel_count;
                }
                outputs.push(cur);
            }
            if outputs.windows(2).any(|w| w[0] != w[1]) {
                problems.push(format!("block {b}: paths produce different shapes {outputs:?}"));
            }
            if let Some(&out) = outputs.first() {
                let shrinks = out.1 < shape.1 || out.2 < shape.2;
                if shrinks != block.downsamples {
                    problems.push(format!("block {b}: downsamples flag disagrees with shapes"));
                }
                shape = out;
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Topology(problems.join("; ")))
        }
    }

    /// (channels, height, width) entering each block, plus the final output.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        let s = self.input_shape;
        let mut shape = (s.channels, s.height, s.width);
        let mut shapes = vec![shape];
        for block in &self.blocks {
            if let Some(path) = block.paths.first() {
                for layer in &path.layers {
                    shape = layer.output_shape(shape);
                }
            }
            shapes.push(shape);
        }
        shapes
    }

    pub fn feature_channels(&self) -> usize {
        self.block_shapes().last().map(|s| s.0).unwrap_or(0)
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerTopology> {
        self.blocks
            .get(id.block)?
            .paths
            .get(id.path)?
            .layers
            .get(id.layer)
    }

    /// Parameterized (hence maskable) layers of one path.
    pub fn maskable_layers(&self, block: usize, path: usize) -> impl Iterator<Item = LayerId> + '_ {
        self.blocks[block].paths[path]
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(move |(layer, _)| LayerId { block, path, layer })
    }

    pub fn all_maskable_layers(&self) -> Vec<LayerId> {
        let mut ids = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for p in 0..block.paths.len() {
                ids.extend(self.maskable_layers(b, p));
            }
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_topology_shapes() {
        let t = ModelTopology::desk(10);
        assert_eq!(t.blocks.len(), 4);
        assert_eq!(t.blocks[1].n_paths(), 2);
        assert!(t.blocks[1].paths[1].is_identity());
        assert!(!t.blocks[2].paths[1].is_identity());
        let shapes = t.block_shapes();
        assert_eq!(shapes[0], (3, 16, 16));
        assert_eq!(*shapes.last().unwrap(), (32, 4, 4));
        assert_eq!(t.feature_channels(), 32);
    }

    #[test]
    fn rejects_indivisible_channels() {
        let mut t = ModelTopology::desk(10);
        t.groups = 3;
        let err = t.validate().unwrap_err().to_string();
        assert!(err.contains("not divisible"), "{err}");
    }

    #[test]
    fn rejects_mismatched_paths() {
        let mut t = ModelTopology::desk(10);
        t.blocks[2].paths[1] = PathTopology::identity();
        assert!(t.validate().is_err());
    }

    #[test]
    fn layer_id_round_trip() {
        let id = LayerId {
            block: 2,
            path: 1,
            layer: 0,
        };
        assert_eq!(id.to_string().parse::<LayerId>().unwrap(), id);
        assert!("1.2".parse::<LayerId>().is_err());
    }
}
