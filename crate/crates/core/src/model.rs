//! Truncated ResNet18 encoder with an ASPP decoder.
//!
//! The encoder is the ResNet18 stem followed by the first `encoder_stages`
//! residual stages (three by default, output stride 16, 256 channels). The
//! decoder runs parallel atrous branches plus an image-pooling branch over the
//! encoder map, projects the concatenation, classifies with a 1x1 conv and
//! upsamples the logits bilinearly back to the input resolution.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ice_labels::IceClass;
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, broadcast_spatial, concat_channels, crop_spatial,
    crop_spatial_backward, global_avg_pool, global_avg_pool_backward, join, max_pool_3x3_s2,
    max_pool_backward, reflect_pad, relu_backward, relu_inplace, split_channels, BatchNorm2d,
    Conv2d, MaxPoolIndices, Module, Param, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_stages: usize,
    pub aspp_channels: usize,
    pub aspp_rates: Vec<usize>,
    pub pretrained_encoder: Option<PathBuf>,
    /// Reflection-pad inputs whose sides are not a multiple of the output
    /// stride and crop the logits back. When false such inputs are rejected.
    pub pad_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: IceClass::COUNT,
            encoder_stages: 3,
            // 256 puts the network near 5.0M parameters; 128 keeps it at ~3.8M
            aspp_channels: 128,
            aspp_rates: vec![1, 6, 12, 18],
            pretrained_encoder: None,
            pad_inputs: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad(format!(
                "need at least one input channel and two classes, got {} and {}",
                self.in_channels, self.num_classes
            ));
        }
        if !(1..=4).contains(&self.encoder_stages) {
            return bad(format!("encoder_stages must be 1..=4, got {}", self.encoder_stages));
        }
        if self.aspp_channels == 0 {
            return bad("aspp_channels must be positive".into());
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return bad(format!("aspp_rates must be non-empty and positive, got {:?}", self.aspp_rates));
        }
        Ok(())
    }

    pub fn output_stride(&self) -> usize {
        4 << (self.encoder_stages - 1)
    }

    pub fn encoder_channels(&self) -> usize {
        64 << (self.encoder_stages - 1)
    }
}

/// Conv (no bias) followed by batch norm and an optional ReLU.
#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: bool,
    out: Option<Tensor>,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, dil: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, stride, pad, dil, false, rng),
            bn: BatchNorm2d::new(cout),
            relu,
            out: None,
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.bn.infer(&self.conv.infer(x));
        if self.relu {
            relu_inplace(&mut y);
        }
        y
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut y = self.bn.forward(&self.conv.forward(x));
        if self.relu {
            relu_inplace(&mut y);
            self.out = Some(y.clone());
        }
        y
    }

    fn backward_to_conv(&mut self, mut dy: Tensor) -> Tensor {
        if let Some(y) = self.out.take() {
            relu_backward(&mut dy, &y);
        }
        self.bn.backward(&dy)
    }

    fn backward(&mut self, dy: Tensor) -> Tensor {
        let d = self.backward_to_conv(dy);
        self.conv.backward(&d)
    }
}

impl Module for ConvBn {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.bn.params(&join(prefix, "bn"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.bn.params_mut(&join(prefix, "bn"), out);
    }

    fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        self.out = None;
    }
}

/// ResNet basic block: two 3x3 conv-bn pairs with an identity or projected
/// shortcut.
#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    mid: Option<Tensor>,
    out: Option<Tensor>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(cin, cout, 1, stride, 0, 1, false, rng),
                BatchNorm2d::new(cout),
            )
        });
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, 1, false, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, 1, false, rng),
            bn2: BatchNorm2d::new(cout),
            downsample,
            mid: None,
            out: None,
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut a = self.bn1.infer(&self.conv1.infer(x));
        relu_inplace(&mut a);
        let mut y = self.bn2.infer(&self.conv2.infer(&a));
        match &self.downsample {
            Some((conv, bn)) => y.add_assign(&bn.infer(&conv.infer(x))),
            None => y.add_assign(x),
        }
        relu_inplace(&mut y);
        y
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut a = self.bn1.forward(&self.conv1.forward(x));
        relu_inplace(&mut a);
        let mut y = self.bn2.forward(&self.conv2.forward(&a));
        match &mut self.downsample {
            Some((conv, bn)) => y.add_assign(&bn.forward(&conv.forward(x))),
            None => y.add_assign(x),
        }
        relu_inplace(&mut y);
        self.mid = Some(a);
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        relu_backward(&mut g, &self.out.take().expect("backward without forward"));
        let mut da = self.conv2.backward(&self.bn2.backward(&g));
        relu_backward(&mut da, &self.mid.take().expect("backward without forward"));
        let mut dx = self.conv1.backward(&self.bn1.backward(&da));
        match &mut self.downsample {
            Some((conv, bn)) => dx.add_assign(&conv.backward(&bn.backward(&g))),
            None => dx.add_assign(&g),
        }
        dx
    }
}

impl Module for BasicBlock {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.params(&join(prefix, "conv1"), out);
        self.bn1.params(&join(prefix, "bn1"), out);
        self.conv2.params(&join(prefix, "conv2"), out);
        self.bn2.params(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &self.downsample {
            conv.params(&join(prefix, "downsample.0"), out);
            bn.params(&join(prefix, "downsample.1"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.params_mut(&join(prefix, "conv1"), out);
        self.bn1.params_mut(&join(prefix, "bn1"), out);
        self.conv2.params_mut(&join(prefix, "conv2"), out);
        self.bn2.params_mut(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.params_mut(&join(prefix, "downsample.0"), out);
            bn.params_mut(&join(prefix, "downsample.1"), out);
        }
    }

    fn clear_cache(&mut self) {
        for m in [&mut self.conv1, &mut self.conv2] {
            m.clear_cache();
        }
        for m in [&mut self.bn1, &mut self.bn2] {
            m.clear_cache();
        }
        if let Some((conv, bn)) = &mut self.downsample {
            conv.clear_cache();
            bn.clear_cache();
        }
        self.mid = None;
        self.out = None;
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stem: ConvBn,
    pool: Option<MaxPoolIndices>,
    layers: Vec<[BasicBlock; 2]>,
}

impl Encoder {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let stem = ConvBn::new(config.in_channels, 64, 7, 2, 3, 1, true, rng);
        let layers = (0..config.encoder_stages)
            .map(|i| {
                let cout = 64 << i;
                let cin = if i == 0 { 64 } else { cout / 2 };
                let stride = if i == 0 { 1 } else { 2 };
                [
                    BasicBlock::new(cin, cout, stride, rng),
                    BasicBlock::new(cout, cout, 1, rng),
                ]
            })
            .collect();
        Self {
            stem,
            pool: None,
            layers,
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let (mut y, _) = max_pool_3x3_s2(&self.stem.infer(x));
        for blocks in &self.layers {
            for b in blocks {
                y = b.infer(&y);
            }
        }
        y
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (mut y, idx) = max_pool_3x3_s2(&self.stem.forward(x));
        self.pool = Some(idx);
        for blocks in &mut self.layers {
            for b in blocks {
                y = b.forward(&y);
            }
        }
        y
    }

    fn backward(&mut self, dy: &Tensor) {
        let mut g = dy.clone();
        for blocks in self.layers.iter_mut().rev() {
            for b in blocks.iter_mut().rev() {
                g = b.backward(&g);
            }
        }
        let g = max_pool_backward(&g, &self.pool.take().expect("backward without forward"));
        let d = self.stem.backward_to_conv(g);
        self.stem.conv.backward_params_only(&d);
    }
}

impl Module for Encoder {
    // torchvision ResNet naming
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.stem.conv.params(&join(prefix, "conv1"), out);
        self.stem.bn.params(&join(prefix, "bn1"), out);
        for (i, blocks) in self.layers.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                b.params(&join(prefix, &format!("layer{}.{j}", i + 1)), out);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.stem.conv.params_mut(&join(prefix, "conv1"), out);
        self.stem.bn.params_mut(&join(prefix, "bn1"), out);
        for (i, blocks) in self.layers.iter_mut().enumerate() {
            for (j, b) in blocks.iter_mut().enumerate() {
                b.params_mut(&join(prefix, &format!("layer{}.{j}", i + 1)), out);
            }
        }
    }

    fn clear_cache(&mut self) {
        self.stem.clear_cache();
        self.pool = None;
        for b in self.layers.iter_mut().flatten() {
            b.clear_cache();
        }
    }
}

/// ASPP head. The image-pooling branch is a biased 1x1 conv + ReLU without
/// batch norm: its statistics would be computed over a single value per
/// sample.
#[derive(Clone, Debug)]
struct AsppDecoder {
    branches: Vec<ConvBn>,
    pool_conv: Conv2d,
    pool_out: Option<Tensor>,
    project: ConvBn,
    classifier: Conv2d,
}

impl AsppDecoder {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (cin, ch) = (config.encoder_channels(), config.aspp_channels);
        let branches = config
            .aspp_rates
            .iter()
            .map(|&r| {
                if r == 1 {
                    ConvBn::new(cin, ch, 1, 1, 0, 1, true, rng)
                } else {
                    ConvBn::new(cin, ch, 3, 1, r, r, true, rng)
                }
            })
            .collect::<Vec<_>>();
        let concat = ch * (branches.len() + 1);
        Self {
            branches,
            pool_conv: Conv2d::new(cin, ch, 1, 1, 0, 1, true, rng),
            pool_out: None,
            project: ConvBn::new(concat, ch, 1, 1, 0, 1, true, rng),
            classifier: Conv2d::new(ch, config.num_classes, 1, 1, 0, 1, true, rng),
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut pooled = self.pool_conv.infer(&global_avg_pool(x));
        relu_inplace(&mut pooled);
        let mut parts: Vec<Tensor> = self.branches.iter().map(|b| b.infer(x)).collect();
        parts.push(broadcast_spatial(&pooled, x.h(), x.w()));
        let cat = concat_channels(&parts.iter().collect::<Vec<_>>());
        self.classifier.infer(&self.project.infer(&cat))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut pooled = self.pool_conv.forward(&global_avg_pool(x));
        relu_inplace(&mut pooled);
        self.pool_out = Some(pooled.clone());
        let mut parts: Vec<Tensor> = self.branches.iter_mut().map(|b| b.forward(x)).collect();
        parts.push(broadcast_spatial(&pooled, x.h(), x.w()));
        let cat = concat_channels(&parts.iter().collect::<Vec<_>>());
        let y = self.project.forward(&cat);
        self.classifier.forward(&y)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let dproj = self.classifier.backward(dy);
        let dcat = self.project.backward(dproj);
        let ch = self.project.conv.geom().cout;
        let sizes = vec![ch; self.branches.len() + 1];
        let mut parts = split_channels(&dcat, &sizes);
        let (h, w) = (dcat.h(), dcat.w());

        // broadcast backward: sum over the plane
        let mut dpool = global_avg_pool(&parts.pop().expect("pool branch"));
        dpool.data_mut().iter_mut().for_each(|v| *v *= (h * w) as f32);
        relu_backward(&mut dpool, &self.pool_out.take().expect("backward without forward"));
        let mut dx = global_avg_pool_backward(&self.pool_conv.backward(&dpool), h, w);

        for (b, g) in self.branches.iter_mut().zip(parts) {
            dx.add_assign(&b.backward(g));
        }
        dx
    }
}

impl Module for AsppDecoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, b) in self.branches.iter().enumerate() {
            b.params(&join(prefix, &format!("branches.{i}")), out);
        }
        self.pool_conv.params(&join(prefix, "pool.conv"), out);
        self.project.params(&join(prefix, "project"), out);
        self.classifier.params(&join(prefix, "classifier"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &format!("branches.{i}")), out);
        }
        self.pool_conv.params_mut(&join(prefix, "pool.conv"), out);
        self.project.params_mut(&join(prefix, "project"), out);
        self.classifier.params_mut(&join(prefix, "classifier"), out);
    }

    fn clear_cache(&mut self) {
        for b in &mut self.branches {
            b.clear_cache();
        }
        self.pool_conv.clear_cache();
        self.pool_out = None;
        self.project.clear_cache();
        self.classifier.clear_cache();
    }
}

/// Spatial bookkeeping of the last training forward pass.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    input: (usize, usize),
    padded: (usize, usize),
    features: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    config: ModelConfig,
    encoder: Encoder,
    decoder: AsppDecoder,
    geometry: Option<Geometry>,
}

impl SegmentationModel {
    /// Builds a randomly initialized model and loads the pretrained encoder
    /// when the config names one. Encoder and decoder draw from separate
    /// streams, so the decoder initialization depends only on `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut enc_rng = ChaCha8Rng::seed_from_u64(seed);
        enc_rng.set_stream(1);
        let mut dec_rng = ChaCha8Rng::seed_from_u64(seed);
        dec_rng.set_stream(2);
        let mut model = Self {
            config: config.clone(),
            encoder: Encoder::new(config, &mut enc_rng),
            decoder: AsppDecoder::new(config, &mut dec_rng),
            geometry: None,
        };
        if let Some(path) = &config.pretrained_encoder {
            model.load_encoder(path)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn output_stride(&self) -> usize {
        self.config.output_stride()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Trainable parameter count (batch-norm running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.numel())
            .sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(n, p)| p.trainable && n.starts_with("encoder."))
            .map(|(_, p)| p.numel())
            .sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn plan(&self, x: &Tensor) -> Result<Geometry> {
        if x.c() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels,
                x.c()
            )));
        }
        let (h, w) = (x.h(), x.w());
        let s = self.output_stride();
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty input".into()));
        }
        let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
        if (ph, pw) != (h, w) {
            if !self.config.pad_inputs {
                return Err(Error::Shape(format!(
                    "input {h}x{w} is not a multiple of {s} and padding is disabled"
                )));
            }
            if ph - h >= h || pw - w >= w {
                return Err(Error::Shape(format!(
                    "input {h}x{w} is too small to reflection-pad to {ph}x{pw}"
                )));
            }
        }
        Ok(Geometry {
            input: (h, w),
            padded: (ph, pw),
            features: (ph / s, pw / s),
        })
    }

    fn pad(x: &Tensor, g: &Geometry) -> Option<Tensor> {
        (g.padded != g.input).then(|| reflect_pad(x, g.padded.0, g.padded.1))
    }

    /// Inference-mode logits `[n, num_classes, h, w]`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.plan(x)?;
        let padded = Self::pad(x, &g);
        let features = self.encoder.infer(padded.as_ref().unwrap_or(x));
        debug_assert_eq!((features.h(), features.w()), g.features);
        let low = self.decoder.infer(&features);
        let up = bilinear_resize(&low, g.padded.0, g.padded.1);
        Ok(crop_spatial(&up, g.input.0, g.input.1))
    }

    /// Training-mode forward: batch statistics, running estimates updated,
    /// activations cached for [`SegmentationModel::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let g = self.plan(x)?;
        let padded = Self::pad(x, &g);
        let features = self.encoder.forward(padded.as_ref().unwrap_or(x));
        let low = self.decoder.forward(&features);
        self.geometry = Some(g);
        let up = bilinear_resize(&low, g.padded.0, g.padded.1);
        Ok(crop_spatial(&up, g.input.0, g.input.1))
    }

    /// Accumulates parameter gradients for the logits gradient `dlogits`.
    pub fn backward(&mut self, dlogits: &Tensor) {
        let g = self.geometry.take().expect("backward without a training forward");
        let dup = crop_spatial_backward(dlogits, g.padded.0, g.padded.1);
        let dlow = bilinear_resize_backward(&dup, g.features.0, g.features.1);
        let dfeat = self.decoder.backward(&dlow);
        self.encoder.backward(&dfeat);
    }

    pub fn clear_cache(&mut self) {
        self.encoder.clear_cache();
        self.decoder.clear_cache();
        self.geometry = None;
    }

    /// Writes every parameter and running statistic to a tensor archive.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let params = self.named_params();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = params
            .iter()
            .map(|(name, p)| {
                let data = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), p.shape.clone(), data)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, data)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), data)?)))
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize_to_file(views, &None, path)?;
        Ok(())
    }

    /// Loads a full set of weights written by [`SegmentationModel::save_weights`].
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let archive = SafeTensors::deserialize(&bytes)?;
        let mut targets = self.named_params_mut();
        assign(&archive, &mut targets, |name| vec![name.to_string()], path)
    }

    /// Loads encoder weights. Names may carry the `encoder.` prefix or be
    /// bare torchvision ResNet names; extra tensors (later stages, the
    /// classification head) are ignored.
    pub fn load_encoder(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let archive = SafeTensors::deserialize(&bytes)?;
        let mut targets = Vec::new();
        self.encoder.params_mut("encoder", &mut targets);
        assign(
            &archive,
            &mut targets,
            |name| {
                let bare = name.strip_prefix("encoder.").unwrap_or(name);
                vec![name.to_string(), bare.to_string()]
            },
            path,
        )
    }
}

fn assign(
    archive: &SafeTensors<'_>,
    targets: &mut [(String, &mut Param)],
    candidates: impl Fn(&str) -> Vec<String>,
    path: &Path,
) -> Result<()> {
    let names: HashMap<String, ()> = archive.names().into_iter().map(|n| (n.clone(), ())).collect();
    // validate everything before touching any weight
    let mut found = Vec::with_capacity(targets.len());
    for (name, param) in targets.iter() {
        let key = candidates(name)
            .into_iter()
            .find(|c| names.contains_key(c))
            .ok_or_else(|| {
                Error::IncompatibleWeights(format!("{}: missing tensor {name}", path.display()))
            })?;
        let view = archive.tensor(&key)?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::IncompatibleWeights(format!(
                "{}: tensor {key} has dtype {:?}, expected F32",
                path.display(),
                view.dtype()
            )));
        }
        if view.shape() != param.shape.as_slice() {
            return Err(Error::IncompatibleWeights(format!(
                "{}: tensor {key} has shape {:?}, model expects {:?}",
                path.display(),
                view.shape(),
                param.shape
            )));
        }
        found.push(view);
    }
    for ((_, param), view) in targets.iter_mut().zip(found) {
        for (v, chunk) in param.value.iter_mut().zip(view.data().chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(())
}

impl Module for SegmentationModel {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.encoder.params(&join(prefix, "encoder"), out);
        self.decoder.params(&join(prefix, "decoder"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.encoder.params_mut(&join(prefix, "encoder"), out);
        self.decoder.params_mut(&join(prefix, "decoder"), out);
    }

    fn clear_cache(&mut self) {
        SegmentationModel::clear_cache(self);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            aspp_channels: 8,
            encoder_stages: 1,
            aspp_rates: vec![1, 2],
            ..ModelConfig::default()
        }
    }

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    /// Closed-form count for the default architecture.
    fn expected_params(c: &ModelConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
        let bn = |ch: usize| 2 * ch;
        let mut total = conv(c.in_channels, 64, 7) + bn(64);
        for i in 0..c.encoder_stages {
            let cout = 64 << i;
            let cin = if i == 0 { 64 } else { cout / 2 };
            total += conv(cin, cout, 3) + conv(cout, cout, 3) + 2 * bn(cout);
            total += conv(cout, cout, 3) * 2 + 2 * bn(cout);
            if i > 0 {
                total += conv(cin, cout, 1) + bn(cout);
            }
        }
        let (f, a) = (c.encoder_channels(), c.aspp_channels);
        for &r in &c.aspp_rates {
            total += conv(f, a, if r == 1 { 1 } else { 3 }) + bn(a);
        }
        total += conv(f, a, 1) + a;
        total += conv(a * (c.aspp_rates.len() + 1), a, 1) + bn(a);
        total + conv(a, c.num_classes, 1) + c.num_classes
    }

    #[test]
    fn default_parameter_budget() {
        let config = ModelConfig::default();
        let model = SegmentationModel::build(&config, 0).unwrap();
        let n = model.param_count();
        assert_eq!(n, expected_params(&config));
        assert!((3_500_000..=4_500_000).contains(&n), "{n}");
        // encoder matches the torchvision ResNet18 layers 1-3 count
        assert_eq!(model.encoder_param_count(), 2_782_784);
        assert_eq!(model.output_stride(), 16);
    }

    #[test]
    fn shape_contract_and_padding() {
        let model = SegmentationModel::build(&small(), 1).unwrap();
        for (h, w) in [(32, 32), (37, 45), (20, 31)] {
            let y = model.infer(&random_input([2, 3, h, w], 2)).unwrap();
            assert_eq!(y.shape(), [2, 5, h, w]);
            assert!(y.is_finite());
        }
        let strict = SegmentationModel::build(&ModelConfig { pad_inputs: false, ..small() }, 1).unwrap();
        assert!(matches!(strict.infer(&random_input([1, 3, 30, 32], 3)), Err(Error::Shape(_))));
        assert!(matches!(model.infer(&random_input([1, 2, 32, 32], 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let model = SegmentationModel::build(&ModelConfig::default(), 5).unwrap();
        assert!(model.infer(&Tensor::zeros([1, 3, 64, 64])).unwrap().is_finite());
    }

    #[test]
    fn batch_independence_in_inference() {
        let model = SegmentationModel::build(&small(), 4).unwrap();
        let a = random_input([1, 3, 24, 24], 7);
        let mut both = a.data().to_vec();
        both.extend_from_slice(a.data());
        let y = model.infer(&Tensor::from_vec([2, 3, 24, 24], both)).unwrap();
        assert_eq!(y.sample(0), y.sample(1));
        assert_eq!(y.sample(0), model.infer(&a).unwrap().data());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = SegmentationModel::build(&small(), 9).unwrap();
        let b = SegmentationModel::build(&small(), 9).unwrap();
        let c = SegmentationModel::build(&small(), 10).unwrap();
        let values = |m: &SegmentationModel| -> Vec<Vec<f32>> {
            m.named_params().iter().filter(|(n, _)| n.starts_with("decoder.")).map(|(_, p)| p.value.clone()).collect()
        };
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn gradient_matches_directional_difference() {
        // loss = <logits, r>; compare <grad, v> with a central difference
        // along a random direction v restricted to one parameter group
        let base = SegmentationModel::build(&small(), 11).unwrap();
        let x = random_input([2, 3, 20, 20], 12);
        let r = random_input([2, 5, 20, 20], 13);
        let loss = |m: &SegmentationModel, dir: &[(String, Vec<f32>)], t: f32| -> f64 {
            let mut m = m.clone();
            for (name, p) in m.named_params_mut() {
                if let Some((_, v)) = dir.iter().find(|(n, _)| *n == name) {
                    p.value.iter_mut().zip(v).for_each(|(a, b)| *a += t * b);
                }
            }
            let y = m.forward_train(&x).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut model = base.clone();
        model.zero_grad();
        model.forward_train(&x).unwrap();
        model.backward(&r);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for group in ["encoder.conv1.", "encoder.bn1.", "encoder.layer1.", "decoder.branches.", "decoder.pool.", "decoder.project.", "decoder.classifier."] {
            let dir: Vec<(String, Vec<f32>)> = model
                .named_params()
                .into_iter()
                .filter(|(n, p)| n.starts_with(group) && p.trainable)
                .map(|(n, p)| (n, (0..p.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
                .collect();
            let analytic: f64 = dir
                .iter()
                .map(|(n, v)| {
                    let p = model.named_params().into_iter().find(|(m, _)| m == n).unwrap().1;
                    p.grad.iter().zip(v).map(|(g, d)| *g as f64 * *d as f64).sum::<f64>()
                })
                .sum();
            // ReLU/max-pool kinks bias large steps, f32 rounding small ones
            let best = [1e-3f32, 1e-4, 1e-5]
                .into_iter()
                .map(|eps| {
                    let numeric = (loss(&base, &dir, eps) - loss(&base, &dir, -eps)) / (2.0 * eps as f64);
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best < 3e-2, "{group}: analytic {analytic}, best relative error {best}");
        }
    }

    #[test]
    fn weights_round_trip_and_reject_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let a = SegmentationModel::build(&small(), 1).unwrap();
        a.save_weights(&path).unwrap();
        let mut b = SegmentationModel::build(&small(), 2).unwrap();
        b.load_weights(&path).unwrap();
        let x = random_input([1, 3, 16, 16], 3);
        assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());

        let mut wide = SegmentationModel::build(&ModelConfig { aspp_channels: 16, ..small() }, 2).unwrap();
        assert!(matches!(wide.load_weights(&path), Err(Error::IncompatibleWeights(_))));
    }

    #[test]
    fn pretrained_encoder_accepts_bare_names_and_leaves_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resnet.safetensors");
        let source = SegmentationModel::build(&small(), 3).unwrap();
        let tensors: Vec<(String, Vec<usize>, Vec<u8>)> = source
            .named_params()
            .into_iter()
            .filter_map(|(n, p)| {
                n.strip_prefix("encoder.").map(|bare| {
                    (bare.to_string(), p.shape.clone(), p.value.iter().flat_map(|v| v.to_le_bytes()).collect())
                })
            })
            .chain(std::iter::once(("fc.weight".to_string(), vec![2], vec![0u8; 8])))
            .collect();
        let views: Vec<_> = tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), TensorView::new(Dtype::F32, s.clone(), d).unwrap()))
            .collect();
        safetensors::serialize_to_file(views, &None, &path).unwrap();

        let config = ModelConfig { pretrained_encoder: Some(path.clone()), ..small() };
        let loaded = SegmentationModel::build(&config, 4).unwrap();
        let fresh = SegmentationModel::build(&small(), 4).unwrap();
        for (((name, a), (_, b)), (_, c)) in loaded.named_params().into_iter().zip(source.named_params()).zip(fresh.named_params()) {
            if name.starts_with("encoder.") {
                assert_eq!(a.value, b.value, "{name}");
            } else {
                assert_eq!(a.value, c.value, "{name}");
            }
        }

        let deeper = ModelConfig { encoder_stages: 2, pretrained_encoder: Some(path), ..small() };
        assert!(matches!(SegmentationModel::build(&deeper, 0), Err(Error::IncompatibleWeights(_))));
    }
}
