//! Forward-only network: Meta-Kernel, a four-level U-Net and the Feature
//! Aggregation Module (FAM).
//!
//! ```text
//! rri (9xHxW) ──► meta-kernel ──► meta ──► backbone ──► multi-scale ─┐
//!                                  │                                 ▼
//!     range ──► context module ──────────────────────────► attention fusion
//!                                  │                                 │
//!                                  └──────► concat ◄── range-guided ─┘
//!                                             │
//!                            3x3 conv + relu (+ 1x1 residual projection)
//!                                             │
//!                                        1x1 conv ──► n x H x W logits
//! ```

use crate::meta_kernel::{meta_kernel_forward, MetaKernelInput, MetaKernelParams};
use crate::range_view::{Normalization, RangeResidualImage, MASK_CHANNEL, RRI_CHANNELS};
use crate::tensor_ops::{
    conv2d_with, logistic, relu, upsample_nearest, ConvKernel, ConvOpts, FeatureMap, SeededInit,
    TensorError,
};

pub const BACKBONE_STAGES: usize = 4;
/// Spatial divisibility required by four stride-2 stages.
pub const BACKBONE_FACTOR: usize = 1 << BACKBONE_STAGES;

/// A convolution's weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: ConvKernel,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn seeded(out: usize, inp: usize, k: usize, init: &mut SeededInit) -> Self {
        Self {
            kernel: ConvKernel {
                out_channels: out,
                in_channels: inp,
                kh: k,
                kw: k,
                data: init.he(out * inp * k * k, inp * k * k),
            },
            bias: vec![0.0; out],
        }
    }

    pub fn zeros(out: usize, inp: usize, k: usize) -> Self {
        Self {
            kernel: ConvKernel::zeros(out, inp, k, k),
            bias: vec![0.0; out],
        }
    }

    /// Size-preserving convolution.
    pub fn forward(&self, x: &FeatureMap, dilation: usize) -> Result<FeatureMap, TensorError> {
        conv2d_with(x, &self.kernel, &self.bias, ConvOpts::same(self.kernel.kh, dilation))
    }

    /// Same padding as [`Self::forward`] with stride 2: equal to the full
    /// resolution output sampled at even rows and columns.
    pub fn forward_downsample(&self, x: &FeatureMap) -> Result<FeatureMap, TensorError> {
        let opts = ConvOpts {
            stride: 2,
            ..ConvOpts::same(self.kernel.kh, 1)
        };
        conv2d_with(x, &self.kernel, &self.bias, opts)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.in_channels
    }

    fn zero_bias(&mut self) {
        self.bias.fill(0.0);
    }
}

/// Channel widths of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub value_channels: usize,
    pub mlp_hidden: usize,
    pub meta_channels: usize,
    pub widths: [usize; BACKBONE_STAGES],
    pub context_channels: usize,
    pub fuse_channels: usize,
    pub num_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            value_channels: RRI_CHANNELS,
            mlp_hidden: 16,
            meta_channels: 32,
            widths: [32, 64, 128, 256],
            context_channels: 32,
            fuse_channels: 32,
            num_classes: 19,
        }
    }
}

impl NetworkConfig {
    /// Output widths of the four decoder stages, coarse to fine.
    pub fn decoder_widths(&self) -> [usize; BACKBONE_STAGES] {
        let w = self.widths;
        [w[2], w[1], w[0], w[0]]
    }

    pub fn multi_scale_channels(&self) -> usize {
        self.decoder_widths()[BACKBONE_STAGES - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub gate: ConvLayer,
    pub project: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamParams {
    pub context: ContextParams,
    pub attention: AttentionParams,
    pub fuse: ConvLayer,
    /// Present when the concatenation width differs from `fuse`'s output.
    pub residual: Option<ConvLayer>,
    pub classifier: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<ConvLayer>,
}

/// Every learnable tensor of the network plus the seed it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub seed: u64,
    pub config: NetworkConfig,
    pub meta: MetaKernelParams,
    pub backbone: BackboneParams,
    pub fam: FamParams,
}

impl NetworkParams {
    /// Draws every tensor from one seeded stream in a fixed block order.
    pub fn seeded(config: &NetworkConfig, seed: u64) -> Self {
        let mut init = SeededInit::new(seed);
        let c = config;
        let meta = MetaKernelParams::seeded(c.value_channels, c.mlp_hidden, c.meta_channels, &mut init);

        let mut encoder = Vec::new();
        let mut prev = c.meta_channels;
        for &w in &c.widths {
            encoder.push(ConvLayer::seeded(w, prev, 3, &mut init));
            prev = w;
        }
        let skips = [c.widths[2], c.widths[1], c.widths[0], c.meta_channels];
        let mut decoder = Vec::new();
        for (out, skip) in c.decoder_widths().into_iter().zip(skips) {
            decoder.push(ConvLayer::seeded(out, prev + skip, 3, &mut init));
            prev = out;
        }

        let ms = c.multi_scale_channels();
        let cat = c.meta_channels + ms;
        let fam = FamParams {
            context: ContextParams {
                conv1: ConvLayer::seeded(c.context_channels, 1, 3, &mut init),
                conv2: ConvLayer::seeded(c.context_channels, c.context_channels, 3, &mut init),
            },
            attention: AttentionParams {
                gate: ConvLayer::seeded(ms, c.context_channels, 1, &mut init),
                project: ConvLayer::seeded(ms, c.context_channels, 1, &mut init),
            },
            fuse: ConvLayer::seeded(c.fuse_channels, cat, 3, &mut init),
            residual: (cat != c.fuse_channels).then(|| ConvLayer::seeded(c.fuse_channels, cat, 1, &mut init)),
            classifier: ConvLayer::seeded(c.num_classes, c.fuse_channels, 1, &mut init),
        };

        Self {
            seed,
            config: config.clone(),
            meta,
            backbone: BackboneParams { encoder, decoder },
            fam,
        }
    }

    /// Named parameter blocks in checkpoint order.
    pub fn sections(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (k, l) in self.meta.weight_mlp.layers.iter().enumerate() {
            out.push((format!("meta.mlp.{k}.weight"), &l.weight));
            out.push((format!("meta.mlp.{k}.bias"), &l.bias));
        }
        out.push(("meta.aggregator.weight".into(), &self.meta.aggregator_weight));
        out.push(("meta.aggregator.bias".into(), &self.meta.aggregator_bias));
        for (name, layer) in self.conv_layers() {
            out.push((format!("{name}.weight"), &layer.kernel.data));
            out.push((format!("{name}.bias"), &layer.bias));
        }
        out
    }

    pub fn sections_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        for (k, l) in self.meta.weight_mlp.layers.iter_mut().enumerate() {
            out.push((format!("meta.mlp.{k}.weight"), &mut l.weight));
            out.push((format!("meta.mlp.{k}.bias"), &mut l.bias));
        }
        out.push(("meta.aggregator.weight".into(), &mut self.meta.aggregator_weight));
        out.push(("meta.aggregator.bias".into(), &mut self.meta.aggregator_bias));
        for (name, layer) in Self::conv_layers_mut(&mut self.backbone, &mut self.fam) {
            out.push((format!("{name}.weight"), &mut layer.kernel.data));
            out.push((format!("{name}.bias"), &mut layer.bias));
        }
        out
    }

    fn conv_layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut v: Vec<(String, &ConvLayer)> = Vec::new();
        for (s, l) in self.backbone.encoder.iter().enumerate() {
            v.push((format!("backbone.enc{s}"), l));
        }
        for (s, l) in self.backbone.decoder.iter().enumerate() {
            v.push((format!("backbone.dec{s}"), l));
        }
        let f = &self.fam;
        v.push(("fam.context.conv1".into(), &f.context.conv1));
        v.push(("fam.context.conv2".into(), &f.context.conv2));
        v.push(("fam.attention.gate".into(), &f.attention.gate));
        v.push(("fam.attention.project".into(), &f.attention.project));
        v.push(("fam.fuse".into(), &f.fuse));
        if let Some(r) = &f.residual {
            v.push(("fam.residual".into(), r));
        }
        v.push(("fam.classifier".into(), &f.classifier));
        v
    }

    fn conv_layers_mut<'a>(
        backbone: &'a mut BackboneParams,
        f: &'a mut FamParams,
    ) -> Vec<(String, &'a mut ConvLayer)> {
        let mut v: Vec<(String, &mut ConvLayer)> = Vec::new();
        for (s, l) in backbone.encoder.iter_mut().enumerate() {
            v.push((format!("backbone.enc{s}"), l));
        }
        for (s, l) in backbone.decoder.iter_mut().enumerate() {
            v.push((format!("backbone.dec{s}"), l));
        }
        v.push(("fam.context.conv1".into(), &mut f.context.conv1));
        v.push(("fam.context.conv2".into(), &mut f.context.conv2));
        v.push(("fam.attention.gate".into(), &mut f.attention.gate));
        v.push(("fam.attention.project".into(), &mut f.attention.project));
        v.push(("fam.fuse".into(), &mut f.fuse));
        if let Some(r) = &mut f.residual {
            v.push(("fam.residual".into(), r));
        }
        v.push(("fam.classifier".into(), &mut f.classifier));
        v
    }

    pub fn zero_biases(&mut self) {
        for l in &mut self.meta.weight_mlp.layers {
            l.bias.fill(0.0);
        }
        self.meta.aggregator_bias.fill(0.0);
        for (_, l) in Self::conv_layers_mut(&mut self.backbone, &mut self.fam) {
            l.zero_bias();
        }
    }
}

/// Two stacked 3x3 convolutions (dilation 1, then 2) with a relu between.
pub fn context_module_forward(range: &FeatureMap, params: &ContextParams) -> Result<FeatureMap, TensorError> {
    if range.channels != 1 {
        return Err(TensorError::Shape(format!(
            "context module takes the range channel only, got {} channels",
            range.channels
        )));
    }
    let h = relu(&params.conv1.forward(range, 1)?);
    params.conv2.forward(&h, 2)
}

/// `multi_scale * logistic(gate(ctx)) + project(ctx)`.
pub fn attention_fusion(
    multi_scale: &FeatureMap,
    range_ctx: &FeatureMap,
    params: &AttentionParams,
) -> Result<FeatureMap, TensorError> {
    if (multi_scale.height, multi_scale.width) != (range_ctx.height, range_ctx.width) {
        return Err(TensorError::Shape(format!(
            "attention fusion of {}x{} and {}x{} maps",
            multi_scale.height, multi_scale.width, range_ctx.height, range_ctx.width
        )));
    }
    let gate = params.gate.forward(range_ctx, 1)?.map(logistic);
    let projected = params.project.forward(range_ctx, 1)?;
    multi_scale.mul(&gate)?.add(&projected)
}

pub fn fam_forward(
    meta: &FeatureMap,
    multi_scale: &FeatureMap,
    range: &FeatureMap,
    params: &FamParams,
) -> Result<FeatureMap, TensorError> {
    let ctx = context_module_forward(range, &params.context)?;
    let guided = attention_fusion(multi_scale, &ctx, &params.attention)?;
    let cat = FeatureMap::concat(&[meta, &guided])?;
    let fused = relu(&params.fuse.forward(&cat, 1)?);
    let skip = match &params.residual {
        Some(proj) => proj.forward(&cat, 1)?,
        None => cat,
    };
    params.classifier.forward(&fused.add(&skip)?, 1)
}

/// Encoder of stride-2 3x3 convolutions with relu; decoder of nearest
/// upsampling, skip concatenation, 3x3 convolution and relu.
pub fn micro_backbone_forward(meta: &FeatureMap, params: &BackboneParams) -> Result<FeatureMap, TensorError> {
    if meta.height % BACKBONE_FACTOR != 0 || meta.width % BACKBONE_FACTOR != 0 {
        return Err(TensorError::Shape(format!(
            "backbone input {}x{} is not divisible by {BACKBONE_FACTOR}",
            meta.height, meta.width
        )));
    }
    if params.encoder.len() != BACKBONE_STAGES || params.decoder.len() != BACKBONE_STAGES {
        return Err(TensorError::Shape("backbone needs four encoder and four decoder stages".into()));
    }
    let mut skips = vec![meta.clone()];
    for conv in &params.encoder {
        let down = relu(&conv.forward_downsample(skips.last().unwrap())?);
        skips.push(down);
    }
    let mut x = skips.pop().unwrap();
    for conv in &params.decoder {
        let skip = skips.pop().unwrap();
        let up = upsample_nearest(&x, 2);
        x = relu(&conv.forward(&FeatureMap::concat(&[&up, &skip])?, 1)?);
    }
    Ok(x)
}

/// Splits a range residual image into Meta-Kernel geometry (raw r, x, y, z),
/// normalized values, and the validity mask.
pub fn network_input(rri: &RangeResidualImage, norm: &Normalization) -> MetaKernelInput {
    let (h, w) = (rri.height, rri.width);
    let n = h * w;
    let geometry = FeatureMap::from_vec(4, h, w, rri.data[..4 * n].iter().map(|&v| v as f64).collect())
        .expect("sized");
    let mut values = FeatureMap::from_vec(RRI_CHANNELS, h, w, rri.data.iter().map(|&v| v as f64).collect())
        .expect("sized");
    for c in 0..5 {
        let (m, s) = (norm.means[c], norm.stds[c]);
        values.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    let mask = rri.channel(MASK_CHANNEL).iter().map(|&v| v != 0.0).collect();
    MetaKernelInput {
        geometry,
        values,
        mask,
    }
}

/// Full composition: Meta-Kernel, backbone, FAM. Returns `n x H x W` logits.
pub fn network_forward(
    rri: &RangeResidualImage,
    params: &NetworkParams,
    norm: &Normalization,
) -> Result<FeatureMap, TensorError> {
    let input = network_input(rri, norm);
    let meta = meta_kernel_forward(&input, &params.meta)?;
    let multi_scale = micro_backbone_forward(&meta, &params.backbone)?;
    let (h, w) = (rri.height, rri.width);
    let range = FeatureMap::from_vec(1, h, w, input.values.channel(0).to_vec())?;
    fam_forward(&meta, &multi_scale, &range, &params.fam)
}
