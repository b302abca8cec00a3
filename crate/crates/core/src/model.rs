//! Differentiable maskable classifiers.
//!
//! A [`MaskableModel`] evaluates a [`ModelTopology`] either in full or
//! restricted to a [`SubnetSpec`]. Layers are `conv -> norm -> relu -> mask`
//! units; a block sums its selected paths and optionally applies a ReLU; the
//! head is global average pooling followed by a linear classifier. Deselected
//! paths are never evaluated, so they contribute exactly zero, and deselected
//! channels are zeroed without rescaling.
//!
//! Forward passes return a [`ForwardPass`] holding everything backward needs,
//! so several passes (full, masked, adversarial) can be alive at once and
//! backpropagated independently into the same [`Gradients`].

use ndarray::{linalg::general_mat_mul, s, Array2, Array4, ArrayD, ArrayView2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subnet::SubnetSpec;
use crate::topology::{LayerId, LayerKind, LayerTopology, ModelTopology};

pub type Tensor = ArrayD<f32>;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    weight: usize,
    bias: Option<usize>,
    gamma: Option<usize>,
    beta: Option<usize>,
    norm: Option<usize>,
}

/// Gradient buffers shaped like a model's parameters.
#[derive(Clone, Debug)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(model: &MaskableModel) -> Self {
        Self(model.params.iter().map(|p| Tensor::zeros(p.value.raw_dim())).collect())
    }

    pub fn zero(&mut self) {
        for g in &mut self.0 {
            g.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.0 {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// Channel dropout applied to every block output in train mode.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn rand::RngCore,
}

pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub subnet: Option<&'a SubnetSpec>,
    pub dropout: Option<Dropout<'a>>,
    /// Keep a copy of every block's output in [`ForwardPass::block_outputs`].
    pub keep_block_outputs: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            subnet: None,
            dropout: None,
            keep_block_outputs: false,
        }
    }

    pub fn masked(mut self, subnet: &'a SubnetSpec) -> Self {
        self.subnet = Some(subnet);
        self
    }

    pub fn with_dropout(mut self, dropout: Dropout<'a>) -> Self {
        self.dropout = Some(dropout);
        self
    }

    pub fn keeping_block_outputs(mut self) -> Self {
        self.keep_block_outputs = true;
        self
    }
}

struct NormCache {
    xhat: Array4<f32>,
    inv_std: Vec<f32>,
    train: bool,
}

struct LayerCache {
    slots: Option<LayerSlots>,
    kernel: usize,
    stride: usize,
    input_dim: (usize, usize, usize, usize),
    out_dim: (usize, usize, usize, usize),
    cols: Array2<f32>,
    norm: Option<NormCache>,
    /// Post-ReLU activation, kept only for layers with a ReLU.
    relu_out: Option<Array4<f32>>,
    mask: Option<Vec<f32>>,
}

struct BlockCache {
    paths: Vec<(usize, Vec<LayerCache>)>,
    relu_out: Option<Array4<f32>>,
    dropout: Option<Array2<f32>>,
}

/// Result of one forward evaluation, kept for backpropagation.
pub struct ForwardPass {
    pub logits: Array2<f64>,
    pub block_outputs: Vec<Array4<f32>>,
    mode: Mode,
    masked: bool,
    input_dim: (usize, usize, usize, usize),
    blocks: Vec<BlockCache>,
    features: Array2<f32>,
    spatial: usize,
    batch_stats: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

impl ForwardPass {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_masked(&self) -> bool {
        self.masked
    }

    pub fn batch_size(&self) -> usize {
        self.input_dim.0
    }
}

#[derive(Clone, Debug)]
pub struct MaskableModel {
    topology: ModelTopology,
    params: Vec<NamedTensor>,
    norms: Vec<RunningStats>,
    layout: Vec<Vec<Vec<Option<LayerSlots>>>>,
    head_weight: usize,
    head_bias: usize,
    mode: Mode,
}

impl MaskableModel {
    /// Builds a model with Kaiming-normal convolutions, unit norm scales and a
    /// uniform linear head.
    pub fn new<R: Rng + ?Sized>(topology: ModelTopology, rng: &mut R) -> Result<Self> {
        topology.validate()?;
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let mut layout = Vec::new();
        let push = |params: &mut Vec<NamedTensor>, name: String, value: Tensor| {
            params.push(NamedTensor { name, value });
            params.len() - 1
        };
        for (b, block) in topology.blocks.iter().enumerate() {
            let mut block_slots = Vec::new();
            for (p, path) in block.paths.iter().enumerate() {
                let mut path_slots = Vec::new();
                for (l, layer) in path.layers.iter().enumerate() {
                    if !layer.is_parameterized() {
                        path_slots.push(None);
                        continue;
                    }
                    let prefix = format!("blocks.{b}.paths.{p}.layers.{l}");
                    let k = layer.effective_kernel();
                    let fan_in = layer.in_channels * k * k;
                    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
                    let shape = [layer.channel_count, layer.in_channels, k, k];
                    let weight = Tensor::from_shape_fn(IxDyn(&shape), |_| normal.sample(rng));
                    let weight = push(&mut params, format!("{prefix}.weight"), weight);
                    let c = layer.channel_count;
                    let (bias, gamma, beta, norm) = if layer.norm {
                        let gamma = push(&mut params, format!("{prefix}.norm.weight"), Tensor::ones(IxDyn(&[c])));
                        let beta = push(&mut params, format!("{prefix}.norm.bias"), Tensor::zeros(IxDyn(&[c])));
                        norms.push(RunningStats {
                            mean: vec![0.0; c],
                            var: vec![1.0; c],
                        });
                        (None, Some(gamma), Some(beta), Some(norms.len() - 1))
                    } else {
                        let bias = push(&mut params, format!("{prefix}.bias"), Tensor::zeros(IxDyn(&[c])));
                        (Some(bias), None, None, None)
                    };
                    path_slots.push(Some(LayerSlots {
                        weight,
                        bias,
                        gamma,
                        beta,
                        norm,
                    }));
                }
                block_slots.push(path_slots);
            }
            layout.push(block_slots);
        }
        let features = topology.feature_channels();
        let bound = 1.0 / (features as f32).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).unwrap();
        let head_w = Tensor::from_shape_fn(IxDyn(&[topology.num_classes, features]), |_| uniform.sample(rng));
        let head_weight = push(&mut params, "head.weight".into(), head_w);
        let head_bias = push(&mut params, "head.bias".into(), Tensor::zeros(IxDyn(&[topology.num_classes])));
        Ok(Self {
            topology,
            params,
            norms,
            layout,
            head_weight,
            head_bias,
            mode: Mode::Train,
        })
    }

    pub fn topology(&self) -> &ModelTopology {
        &self.topology
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.norms
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.norms
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn slots(&self, id: LayerId) -> Option<LayerSlots> {
        *self.layout.get(id.block)?.get(id.path)?.get(id.layer)?
    }

    /// Name of the weight tensor of a parameterized layer.
    pub fn weight_name(&self, id: LayerId) -> Option<&str> {
        self.slots(id).map(|s| self.params[s.weight].name.as_str())
    }

    /// L1 norm of a layer's weight tensor (0 for parameter-free layers).
    pub fn weight_l1(&self, id: LayerId) -> f64 {
        self.slots(id)
            .map(|s| self.params[s.weight].value.iter().map(|w| w.abs() as f64).sum())
            .unwrap_or(0.0)
    }

    /// Summed absolute weight of the filters producing each channel group.
    pub fn group_weight_l1(&self, id: LayerId) -> Vec<f64> {
        let groups = self.topology.groups;
        let Some(slots) = self.slots(id) else {
            return vec![0.0; groups];
        };
        let w = &self.params[slots.weight].value;
        let out = w.shape()[0];
        let per_group = out / groups;
        let per_filter = w.len() / out;
        let flat = w.as_slice().expect("parameters are contiguous");
        (0..groups)
            .map(|g| {
                flat[g * per_group * per_filter..(g + 1) * per_group * per_filter]
                    .iter()
                    .map(|v| v.abs() as f64)
                    .sum()
            })
            .collect()
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let s = self.topology.input_shape;
        let (_, c, h, w) = x.dim();
        if (c, h, w) != (s.channels, s.height, s.width) || x.dim().0 == 0 {
            return Err(Error::Shape {
                expected: format!("(N>0, {}, {}, {})", s.channels, s.height, s.width),
                actual: format!("{:?}", x.dim()),
            });
        }
        Ok(())
    }

    /// Logits of the full model in the model's current mode.
    pub fn forward_full(&self, x: &Array4<f32>) -> Result<Array2<f64>> {
        Ok(self.forward(x, ForwardOptions::new(self.mode))?.logits)
    }

    /// Logits of the subnet `spec` in the model's current mode.
    pub fn forward_masked(&self, x: &Array4<f32>, spec: &SubnetSpec) -> Result<Array2<f64>> {
        Ok(self.forward(x, ForwardOptions::new(self.mode).masked(spec))?.logits)
    }

    pub fn forward(&self, x: &Array4<f32>, mut opts: ForwardOptions<'_>) -> Result<ForwardPass> {
        self.check_input(x)?;
        if let Some(spec) = opts.subnet {
            spec.validate(&self.topology)?;
        }
        let mode = opts.mode;
        let mut batch_stats = Vec::new();
        let mut blocks = Vec::with_capacity(self.topology.blocks.len());
        let mut block_outputs = Vec::new();
        let mut h = x.clone();
        for (b, block) in self.topology.blocks.iter().enumerate() {
            let mut sum: Option<Array4<f32>> = None;
            let mut path_caches = Vec::new();
            for (p, path) in block.paths.iter().enumerate() {
                if let Some(spec) = opts.subnet {
                    if !spec.keeps_path(b, p) {
                        continue;
                    }
                }
                let mut cur = h.clone();
                let mut caches = Vec::with_capacity(path.layers.len());
                for (l, layer) in path.layers.iter().enumerate() {
                    let id = LayerId {
                        block: b,
                        path: p,
                        layer: l,
                    };
                    let mask = opts
                        .subnet
                        .and_then(|spec| spec.channel_mask(id, layer.channel_count, self.topology.groups));
                    let (out, cache) = self.layer_forward(id, layer, &cur, mode, mask, &mut batch_stats);
                    cur = out;
                    caches.push(cache);
                }
                match sum.as_mut() {
                    None => sum = Some(cur),
                    Some(acc) => *acc += &cur,
                }
                path_caches.push((p, caches));
            }
            let mut out = sum.expect("a validated block keeps at least one path");
            let relu_out = if block.relu_after {
                out.mapv_inplace(|v| v.max(0.0));
                Some(out.clone())
            } else {
                None
            };
            let dropout = match (&mut opts.dropout, mode) {
                (Some(d), Mode::Train) if d.rate > 0.0 => {
                    let (n, c, _, _) = out.dim();
                    let keep = if d.rate >= 1.0 { 0.0 } else { 1.0 / (1.0 - d.rate) as f32 };
                    let mask = Array2::from_shape_fn((n, c), |_| {
                        if d.rng.random::<f64>() < d.rate {
                            0.0
                        } else {
                            keep
                        }
                    });
                    for ((i, ch, _, _), v) in out.indexed_iter_mut() {
                        *v *= mask[(i, ch)];
                    }
                    Some(mask)
                }
                _ => None,
            };
            blocks.push(BlockCache {
                paths: path_caches,
                relu_out,
                dropout,
            });
            if opts.keep_block_outputs {
                block_outputs.push(out.clone());
            }
            h = out;
        }
        let (n, c, hh, ww) = h.dim();
        let spatial = hh * ww;
        let features = h
            .into_shape_with_order((n, c, spatial))
            .expect("contiguous")
            .mean_axis(ndarray::Axis(2))
            .expect("non-empty spatial extent");
        let w = self.params[self.head_weight]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let bias = self.params[self.head_bias].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let logits32 = features.dot(&w.t()) + &bias;
        Ok(ForwardPass {
            logits: logits32.mapv(f64::from),
            block_outputs,
            mode,
            masked: opts.subnet.is_some(),
            input_dim: x.dim(),
            blocks,
            features,
            spatial,
            batch_stats,
        })
    }

    fn layer_forward(
        &self,
        id: LayerId,
        layer: &LayerTopology,
        x: &Array4<f32>,
        mode: Mode,
        mask: Option<Vec<f32>>,
        batch_stats: &mut Vec<(usize, Vec<f32>, Vec<f32>)>,
    ) -> (Array4<f32>, LayerCache) {
        if layer.kind == LayerKind::Identity {
            let cache = LayerCache {
                slots: None,
                kernel: 1,
                stride: 1,
                input_dim: x.dim(),
                out_dim: x.dim(),
                cols: Array2::zeros((0, 0)),
                norm: None,
                relu_out: None,
                mask: None,
            };
            return (x.clone(), cache);
        }
        let slots = self.slots(id).expect("parameterized layer has slots");
        let k = layer.effective_kernel();
        let stride = layer.effective_stride();
        let (n, c, h, w) = x.dim();
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let o = layer.channel_count;
        let cols = im2col(x, k, stride, pad, ho, wo);
        let weight = self.params[slots.weight]
            .value
            .view()
            .into_shape_with_order((o, c * k * k))
            .unwrap();
        let mut out2 = Array2::<f32>::zeros((o, n * ho * wo));
        general_mat_mul(1.0, &weight, &cols, 0.0, &mut out2);
        let mut y = Array4::<f32>::zeros((n, o, ho, wo));
        {
            let plane = ho * wo;
            let src = out2.as_slice().unwrap();
            let dst = y.as_slice_mut().unwrap();
            let bias = slots.bias.map(|b| self.params[b].value.as_slice().unwrap());
            for ch in 0..o {
                let add = bias.map_or(0.0, |b| b[ch]);
                for i in 0..n {
                    let s = &src[ch * n * plane + i * plane..ch * n * plane + (i + 1) * plane];
                    let d = &mut dst[(i * o + ch) * plane..(i * o + ch + 1) * plane];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv = sv + add;
                    }
                }
            }
        }
        let norm = slots.norm.map(|ni| {
            let gamma = self.params[slots.gamma.unwrap()].value.as_slice().unwrap();
            let beta = self.params[slots.beta.unwrap()].value.as_slice().unwrap();
            let (xhat, inv_std, stats) = match mode {
                Mode::Train => {
                    let (mean, var) = channel_moments(&y);
                    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let xhat = normalize(&y, &mean, &inv_std);
                    (xhat, inv_std, Some((mean, var)))
                }
                Mode::Eval => {
                    let rs = &self.norms[ni];
                    let inv_std: Vec<f32> = rs.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    (normalize(&y, &rs.mean, &inv_std), inv_std, None)
                }
            };
            if let Some((mean, var)) = stats {
                batch_stats.push((ni, mean, var));
            }
            let plane = ho * wo;
            let src = xhat.as_slice().unwrap();
            let dst = y.as_slice_mut().unwrap();
            for (idx, (dv, sv)) in dst.iter_mut().zip(src).enumerate() {
                let ch = (idx / plane) % o;
                *dv = gamma[ch] * sv + beta[ch];
            }
            NormCache {
                xhat,
                inv_std,
                train: mode == Mode::Train,
            }
        });
        let relu_out = if layer.relu {
            y.mapv_inplace(|v| v.max(0.0));
            Some(y.clone())
        } else {
            None
        };
        if let Some(m) = &mask {
            apply_channel_mask(&mut y, m);
        }
        let cache = LayerCache {
            slots: Some(slots),
            kernel: k,
            stride,
            input_dim: (n, c, h, w),
            out_dim: (n, o, ho, wo),
            cols,
            norm,
            relu_out,
            mask,
        };
        (y, cache)
    }

    /// Folds the batch statistics of a train-mode full forward into the
    /// running statistics. Masked passes never touch the running statistics.
    pub fn commit_running_stats(&mut self, pass: &ForwardPass) {
        if pass.masked || pass.mode != Mode::Train {
            return;
        }
        for (ni, mean, var) in &pass.batch_stats {
            let rs = &mut self.norms[*ni];
            for ch in 0..mean.len() {
                rs.mean[ch] = (1.0 - BN_MOMENTUM) * rs.mean[ch] + BN_MOMENTUM * mean[ch];
                rs.var[ch] = (1.0 - BN_MOMENTUM) * rs.var[ch] + BN_MOMENTUM * var[ch];
            }
        }
    }

    /// Backpropagates `dlogits` (gradient of the loss w.r.t. the logits of
    /// `pass`) into `grads`. Returns the input gradient when requested.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        dlogits: &Array2<f64>,
        grads: &mut Gradients,
        want_input_grad: bool,
    ) -> Option<Array4<f32>> {
        self.backward_impl(pass, dlogits, Some(grads), want_input_grad)
    }

    /// Gradient of the loss w.r.t. the input only; parameter gradients are
    /// not formed.
    pub fn input_gradient(&self, pass: &ForwardPass, dlogits: &Array2<f64>) -> Array4<f32> {
        self.backward_impl(pass, dlogits, None, true)
            .expect("input gradient was requested")
    }

    fn backward_impl(
        &self,
        pass: &ForwardPass,
        dlogits: &Array2<f64>,
        mut grads: Option<&mut Gradients>,
        want_input_grad: bool,
    ) -> Option<Array4<f32>> {
        let dl = dlogits.mapv(|v| v as f32);
        if let Some(grads) = grads.as_deref_mut() {
            let mut gw = grads.0[self.head_weight]
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            general_mat_mul(1.0, &dl.t(), &pass.features, 1.0, &mut gw);
            let mut gb = grads.0[self.head_bias].view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            gb += &dl.sum_axis(ndarray::Axis(0));
        }
        let w = self.params[self.head_weight]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let dfeat = dl.dot(&w);
        let last = self.topology.block_shapes();
        let (c, hh, ww) = *last.last().unwrap();
        let n = pass.input_dim.0;
        let inv = 1.0 / pass.spatial as f32;
        let mut dh = Array4::from_shape_fn((n, c, hh, ww), |(i, ch, _, _)| dfeat[(i, ch)] * inv);

        for (b, cache) in pass.blocks.iter().enumerate().rev() {
            if let Some(mask) = &cache.dropout {
                for ((i, ch, _, _), v) in dh.indexed_iter_mut() {
                    *v *= mask[(i, ch)];
                }
            }
            if let Some(out) = &cache.relu_out {
                ndarray::Zip::from(&mut dh).and(out).for_each(|g, &o| {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let need_dx = b > 0 || want_input_grad;
            let mut dx: Option<Array4<f32>> = None;
            for (_, layers) in &cache.paths {
                let mut g = dh.clone();
                for (li, lc) in layers.iter().enumerate().rev() {
                    g = self.layer_backward(lc, g, grads.as_deref_mut(), need_dx || li > 0);
                }
                if !need_dx {
                    continue;
                }
                match dx.as_mut() {
                    None => dx = Some(g),
                    Some(acc) => *acc += &g,
                }
            }
            if let Some(dx) = dx {
                dh = dx;
            }
        }
        want_input_grad.then_some(dh)
    }

    fn layer_backward(
        &self,
        lc: &LayerCache,
        mut g: Array4<f32>,
        mut grads: Option<&mut Gradients>,
        need_dx: bool,
    ) -> Array4<f32> {
        let Some(slots) = lc.slots else {
            return g;
        };
        if let Some(m) = &lc.mask {
            apply_channel_mask(&mut g, m);
        }
        if let Some(out) = &lc.relu_out {
            ndarray::Zip::from(&mut g).and(out).for_each(|gv, &o| {
                if o <= 0.0 {
                    *gv = 0.0;
                }
            });
        }
        let (n, o, ho, wo) = lc.out_dim;
        let plane = ho * wo;
        if let Some(nc) = &lc.norm {
            let gamma = self.params[slots.gamma.unwrap()].value.as_slice().unwrap().to_vec();
            let m = (n * plane) as f32;
            let gs = g.as_slice().unwrap();
            let xs = nc.xhat.as_slice().unwrap();
            let mut sum_g = vec![0.0f64; o];
            let mut sum_gx = vec![0.0f64; o];
            for (idx, (&gv, &xv)) in gs.iter().zip(xs).enumerate() {
                let ch = (idx / plane) % o;
                sum_g[ch] += gv as f64;
                sum_gx[ch] += (gv * xv) as f64;
            }
            if let Some(grads) = grads.as_deref_mut() {
                for (dg, s) in grads.0[slots.gamma.unwrap()].iter_mut().zip(&sum_gx) {
                    *dg += *s as f32;
                }
                for (db, s) in grads.0[slots.beta.unwrap()].iter_mut().zip(&sum_g) {
                    *db += *s as f32;
                }
            }
            let gm = g.as_slice_mut().unwrap();
            if nc.train {
                for (idx, (gv, &xv)) in gm.iter_mut().zip(xs).enumerate() {
                    let ch = (idx / plane) % o;
                    let dxhat = *gv * gamma[ch];
                    let mean_dxhat = (sum_g[ch] as f32 * gamma[ch]) / m;
                    let mean_dxhat_x = (sum_gx[ch] as f32 * gamma[ch]) / m;
                    *gv = nc.inv_std[ch] * (dxhat - mean_dxhat - xv * mean_dxhat_x);
                }
            } else {
                for (idx, gv) in gm.iter_mut().enumerate() {
                    let ch = (idx / plane) % o;
                    *gv *= gamma[ch] * nc.inv_std[ch];
                }
            }
        }
        // reorder (n, o, p) -> (o, n*p)
        let mut g2 = Array2::<f32>::zeros((o, n * plane));
        {
            let src = g.as_slice().unwrap();
            let dst = g2.as_slice_mut().unwrap();
            for i in 0..n {
                for ch in 0..o {
                    dst[ch * n * plane + i * plane..ch * n * plane + (i + 1) * plane]
                        .copy_from_slice(&src[(i * o + ch) * plane..(i * o + ch + 1) * plane]);
                }
            }
        }
        let (_, c, h, w) = lc.input_dim;
        let k = lc.kernel;
        if let Some(grads) = grads {
            let mut dw = grads.0[slots.weight]
                .view_mut()
                .into_shape_with_order((o, c * k * k))
                .unwrap();
            general_mat_mul(1.0, &g2, &lc.cols.t(), 1.0, &mut dw);
            if let Some(bi) = slots.bias {
                let mut db = grads.0[bi].view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                db += &g2.sum_axis(ndarray::Axis(1));
            }
        }
        if !need_dx {
            return Array4::zeros((0, 0, 0, 0));
        }
        let weight = self.params[slots.weight]
            .value
            .view()
            .into_shape_with_order((o, c * k * k))
            .unwrap();
        let dcols = weight.t().dot(&g2);
        col2im(dcols.view(), (n, c, h, w), k, lc.stride, k / 2, ho, wo)
    }
}

fn apply_channel_mask(y: &mut Array4<f32>, mask: &[f32]) {
    let (n, c, h, w) = y.dim();
    let plane = h * w;
    let data = y.as_slice_mut().unwrap();
    for i in 0..n {
        for (ch, &m) in mask.iter().enumerate().take(c) {
            if m != 1.0 {
                for v in &mut data[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                    *v *= m;
                }
            }
        }
    }
}

fn channel_moments(y: &Array4<f32>) -> (Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = y.dim();
    let plane = h * w;
    let data = y.as_slice().unwrap();
    let m = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for i in 0..n {
            s += data[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for i in 0..n {
            ss += data[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (ss / m) as f32;
    }
    (mean, var)
}

fn normalize(y: &Array4<f32>, mean: &[f32], inv_std: &[f32]) -> Array4<f32> {
    let (_, c, h, w) = y.dim();
    let plane = h * w;
    let mut out = y.clone();
    for (idx, v) in out.as_slice_mut().unwrap().iter_mut().enumerate() {
        let ch = (idx / plane) % c;
        *v = (*v - mean[ch]) * inv_std[ch];
    }
    out
}

/// Unfolds `x` (N, C, H, W) into columns (C*k*k, N*Ho*Wo).
fn im2col(x: &Array4<f32>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let plane_out = ho * wo;
    let mut cols = Array2::<f32>::zeros((c * k * k, n * plane_out));
    let src = x.as_slice().expect("activations are contiguous");
    let dst = cols.as_slice_mut().unwrap();
    let row_len = n * plane_out;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let drow = &mut dst[row * row_len..(row + 1) * row_len];
                for i in 0..n {
                    let img = &src[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = i * plane_out + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[base + ox] = img[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: ArrayView2<f32>,
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f32> {
    let mut x = Array4::<f32>::zeros((n, c, h, w));
    let plane_out = ho * wo;
    let row_len = n * plane_out;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().unwrap();
    let dst = x.as_slice_mut().unwrap();
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let srow = &src[row * row_len..(row + 1) * row_len];
                for i in 0..n {
                    let img = &mut dst[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = i * plane_out + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                img[iy * w + ix as usize] += srow[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Per-sample argmax with ties broken towards the lowest class index.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Convenience: logits of `x` in eval mode, evaluated in chunks.
pub fn predict(model: &MaskableModel, x: &Array4<f32>, spec: Option<&SubnetSpec>, chunk: usize) -> Result<Array2<f64>> {
    let n = x.dim().0;
    let mut out = Array2::zeros((n, model.topology().num_classes));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let xb = x.slice(s![start..end, .., .., ..]).to_owned();
        let mut opts = ForwardOptions::new(Mode::Eval);
        opts.subnet = spec;
        let pass = model.forward(&xb, opts)?;
        out.slice_mut(s![start..end, ..]).assign(&pass.logits);
        start = end;
    }
    Ok(out)
}
