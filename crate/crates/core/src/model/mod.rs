//! The U-shaped detection network.
//!
//! ```text
//! image ──1×1 conv──► F0 ──⊙ W_lca──► DW 3×3 ─► BN ─┐
//!                      └────────────────────────────+──► PReLU ─► F0e
//! F0e ─► layer1 (stride 1) ─► F1 ─► CAE ─► F1e
//!     ─► layer2 (stride 2) ─► F2 ─► CAE ─► F2e
//!     ─► layer3 (stride 2) ─► F3 ─► CAE ─► F3e
//!     ─► layer4 (stride 2) ─► F4 ─► CAE ─► F4e
//! F4e ─up─► + F3e ─up─► + F2e ─up─► + F1e ─► head ─► sigmoid
//! ```
//!
//! Each residual layer is a stack of split-attention blocks; each up-fusion is
//! `1×1 conv (halve channels) → BN → ReLU → bilinear ×2 → add skip`. The head is
//! `3×3 conv → BN → ReLU → 1×1 conv → sigmoid`.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, ArrayView4, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::lca::{self, GrayImage, LcaParams, Pairing};
use crate::nn::{BatchStats, Mode, ParamStore, Real, Tape, Var, BN_EPS, BN_MOMENTUM, PRELU_INIT};
use crate::{Error, Result};

pub mod complexity;

pub use complexity::{count_flops, count_params};

/// Probability map, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Array2<f64>);

impl ProbMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbMap(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Strictly-greater binarisation.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask(self.0.mapv(|p| (p > threshold) as u8))
    }
}

/// Per-pixel `{0, 1}` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(Array2<u8>);

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask(Array2::zeros((height, width)))
    }

    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask(values))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        BinaryMask(Array2::from_shape_fn((height, width), |(r, c)| f(r, c) as u8))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.0[[r, c]] != 0
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.0[[r, c]] = on as u8;
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_real<T: Real>(&self) -> Array2<T> {
        self.0.mapv(|v| if v != 0 { T::one() } else { T::zero() })
    }
}

/// Binarises a probability map: 1 where `prob > threshold`.
pub fn predict(prob: &ProbMap, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(prob.threshold(threshold))
}

/// Which image the local-contrast branch reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LceInput {
    /// The same standardised image the convolutional stem sees.
    #[default]
    Standardized,
    /// The un-normalised 0–255 intensities.
    Raw,
}

/// Network geometry and local-contrast settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width `C` after the stem; layer widths are `C, 2C, 4C, 8C`.
    pub base_channels: usize,
    /// Split-attention blocks per residual layer.
    pub blocks: [usize; 4],
    pub pairing: Pairing,
    /// `[height, width]`; both divisible by 8.
    pub input_size: [usize; 2],
    /// When false the attention map is replaced by ones (ablation).
    pub use_lce: bool,
    pub lce_input: LceInput,
    pub lca: LcaParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            blocks: [1, 2, 4, 8],
            lca: LcaParams::default(),
            pairing: Pairing::default(),
            input_size: [256, 256],
            use_lce: true,
            lce_input: LceInput::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config("every residual layer needs at least one block".into()));
        }
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be positive multiples of 8")));
        }
        self.lca.validate()?;
        if h < self.lca.operator_size() || w < self.lca.operator_size() {
            return Err(Error::Config(format!("input {h}x{w} smaller than the local-contrast operator")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Channel width of residual layer `i` (0-based).
    pub fn layer_width(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

/// Hidden width of a split-attention gate for a block with `channels` outputs.
pub fn gate_width(channels: usize) -> usize {
    (channels / 2).max(4)
}

/// Parameters and running statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct LcaeNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(&mut self.rng))
    }
}

fn conv(store: &mut ParamStore<f64>, init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
    store.insert_param(format!("{name}.weight"), init.kaiming(&[cout, cin, k, k], cin * k * k));
    if bias {
        store.insert_param(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
    }
}

fn bn(store: &mut ParamStore<f64>, name: &str, c: usize) {
    store.insert_param(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c])));
    store.insert_param(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])));
    store.insert_buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c])));
    store.insert_buffer(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[c])));
}

/// Static description of one split-attention block.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn has_projection(&self) -> bool {
        self.cin != self.cout || self.stride != 1
    }
}

/// All residual blocks in forward order, grouped by layer.
pub fn block_specs(config: &ModelConfig) -> Vec<Vec<BlockSpec>> {
    let mut cin = config.base_channels;
    (0..4)
        .map(|layer| {
            let cout = config.layer_width(layer);
            (0..config.blocks[layer])
                .map(|b| {
                    let spec = BlockSpec {
                        name: format!("enc{}.{b}", layer + 1),
                        cin: if b == 0 { cin } else { cout },
                        cout,
                        stride: if b == 0 && layer > 0 { 2 } else { 1 },
                    };
                    if b == 0 {
                        cin = cout;
                    }
                    spec
                })
                .collect()
        })
        .collect()
}

impl LcaeNet<f64> {
    /// Freshly initialised network: Kaiming-normal convolutions, zero biases,
    /// unit BN scales, PReLU slope 0.25. Deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut s = ParamStore::new();

        conv(&mut s, &mut init, "ce.expand", 1, c, 1, true);
        conv(&mut s, &mut init, "ce.dw", 1, c, 3, false);
        bn(&mut s, "ce.bn", c);
        s.insert_param("ce.prelu.slope", ArrayD::from_elem(IxDyn(&[1]), PRELU_INIT));

        for (layer, blocks) in block_specs(&config).iter().enumerate() {
            for b in blocks {
                let n = &b.name;
                conv(&mut s, &mut init, &format!("{n}.conv1"), b.cin, b.cout, 3, false);
                bn(&mut s, &format!("{n}.bn1"), b.cout);
                for r in 0..2 {
                    conv(&mut s, &mut init, &format!("{n}.branch{r}"), b.cout, b.cout, 3, false);
                    bn(&mut s, &format!("{n}.bn_branch{r}"), b.cout);
                }
                let g = gate_width(b.cout);
                conv(&mut s, &mut init, &format!("{n}.gate1"), b.cout, g, 1, true);
                conv(&mut s, &mut init, &format!("{n}.gate2"), g, 2 * b.cout, 1, true);
                if b.has_projection() {
                    conv(&mut s, &mut init, &format!("{n}.shortcut"), b.cin, b.cout, 1, false);
                    bn(&mut s, &format!("{n}.bn_shortcut"), b.cout);
                }
            }
            let k = init.kaiming(&[3], 3);
            s.insert_param(format!("cae{}.kernel", layer + 1), k);
        }

        for level in (1..=3).rev() {
            let cin = config.layer_width(level);
            conv(&mut s, &mut init, &format!("up{level}.conv"), cin, cin / 2, 1, false);
            bn(&mut s, &format!("up{level}.bn"), cin / 2);
        }

        conv(&mut s, &mut init, "head.conv", c, c, 3, false);
        bn(&mut s, "head.bn", c);
        conv(&mut s, &mut init, "head.out", c, 1, 1, true);

        Ok(LcaeNet { config, store: s })
    }

    /// Reads a checkpoint written by [`LcaeNet::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = ParamStore::load(path)?;
        let config = ModelConfig::from_toml(&meta)?;
        let mut net = LcaeNet::new(config, 0)?;
        net.store.load_from(&store)?;
        Ok(net)
    }
}

impl<T: Real> LcaeNet<T> {
    pub fn cast<U: Real>(&self) -> LcaeNet<U> {
        LcaeNet { config: self.config.clone(), store: self.store.cast() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, &self.config.to_toml())
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        let m = BN_MOMENTUM;
        for (name, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let buf = self.store.buffer_mut(&format!("{name}.{suffix}"))?;
                for (r, &b) in buf.iter_mut().zip(batch) {
                    *r = T::of((1.0 - m) * r.as_f64() + m * b);
                }
            }
        }
        Ok(())
    }

    /// Attention maps `N×1×H×W` for a batch `N×1×H×W` of local-contrast source
    /// images, or ones when the branch is disabled.
    pub fn attention(&self, source: ArrayView4<f64>) -> Result<Array4<T>> {
        let (n, c, h, w) = source.dim();
        if c != 1 {
            return Err(Error::Dimension(format!("expected single-channel images, got {c} channels")));
        }
        let mut out = Array4::<T>::ones((n, 1, h, w));
        if !self.config.use_lce {
            return Ok(out);
        }
        for (i, img) in source.outer_iter().enumerate() {
            let gray = GrayImage::new(img.index_axis(Axis(0), 0).to_owned())?;
            let weights = lca::attention_with(&gray, &self.config.lca, self.config.pairing)?;
            out.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&weights.0.mapv(T::of));
        }
        Ok(out)
    }

    fn check_input(&self, images: ArrayView4<T>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        let [eh, ew] = self.config.input_size;
        if c != 1 || h != eh || w != ew {
            return Err(Error::Dimension(format!(
                "network expects N×1×{eh}×{ew} input, got {:?}",
                images.dim()
            )));
        }
        Ok(())
    }

    /// Records a full forward pass and returns the probability-map variable
    /// (`N×1×H×W`).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: Var,
        attention: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<(String, BatchStats)>)> {
        self.check_input(tape.value4(images))?;
        let mut pass = ForwardPass::new(self, tape, mode);
        let f0e = pass.ce_layer(images, attention)?;
        let enc = pass.encoder(f0e)?;
        let prob = pass.decoder(&enc)?;
        Ok((prob, pass.stats))
    }

    /// Eval-mode probability maps for standardised images; `lce_source` supplies
    /// the images the attention branch reads (defaults to `images`).
    pub fn predict_batch(&self, images: &Array4<f64>, lce_source: Option<&Array4<f64>>) -> Result<Vec<ProbMap>> {
        let attention = self.attention(lce_source.unwrap_or(images).view())?;
        let mut tape = Tape::<T>::new();
        let x = tape.constant(images.mapv(T::of).into_dyn());
        let a = tape.constant(attention.into_dyn());
        let (prob, _) = self.forward(&mut tape, x, a, Mode::Eval)?;
        tape.value4(prob)
            .outer_iter()
            .map(|p| ProbMap::new(p.index_axis(Axis(0), 0).mapv(|v| v.as_f64())))
            .collect()
    }
}

/// One forward pass in progress: the network, the tape it records onto, and
/// the batch statistics collected so far.
pub struct ForwardPass<'a, T: Real> {
    net: &'a LcaeNet<T>,
    pub tape: &'a mut Tape<T>,
    mode: Mode,
    pub stats: Vec<(String, BatchStats)>,
}

/// Encoder outputs after channel enhancement, shallowest first.
pub struct EncoderOutputs {
    pub enhanced: [Var; 4],
}

impl<'a, T: Real> ForwardPass<'a, T> {
    pub fn new(net: &'a LcaeNet<T>, tape: &'a mut Tape<T>, mode: Mode) -> Self {
        ForwardPass { net, tape, mode, stats: Vec::new() }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        let value = self.net.store.param(name)?;
        Ok(self.tape.param(name, value))
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = match self.net.store.param(&bias_name) {
            Ok(_) => Some(self.p(&bias_name)?),
            Err(_) => None,
        };
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.stats.push((name.to_owned(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let store = &self.net.store;
                let mean = store.buffer(&format!("{name}.running_mean"))?.view().into_dimensionality()?;
                let var = store.buffer(&format!("{name}.running_var"))?.view().into_dimensionality()?;
                self.tape.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }

    /// Stem with local-contrast enhancement: `PReLU(F0 + BN(DW(W ⊙ F0)))`.
    pub fn ce_layer(&mut self, images: Var, attention: Var) -> Result<Var> {
        let f0 = self.conv(images, "ce.expand", 1, 0)?;
        let e1 = self.tape.mul_spatial(f0, attention)?;
        let w = self.p("ce.dw.weight")?;
        let dw = self.tape.depthwise_conv(e1, w, 1)?;
        let e2 = self.bn(dw, "ce.bn")?;
        let sum = self.tape.add(f0, e2)?;
        let slope = self.p("ce.prelu.slope")?;
        self.tape.prelu(sum, slope)
    }

    /// Radix-2 split-attention residual block.
    pub fn block(&mut self, x: Var, spec: &BlockSpec) -> Result<Var> {
        let n = &spec.name;
        let h = self.conv(x, &format!("{n}.conv1"), spec.stride, 1)?;
        let h = self.bn(h, &format!("{n}.bn1"))?;
        let h = self.tape.relu(h);
        let mut branches = [h; 2];
        for (r, slot) in branches.iter_mut().enumerate() {
            let b = self.conv(h, &format!("{n}.branch{r}"), 1, 1)?;
            let b = self.bn(b, &format!("{n}.bn_branch{r}"))?;
            *slot = self.tape.relu(b);
        }
        let total = self.tape.add(branches[0], branches[1])?;
        let pooled = self.tape.global_avg_pool(total)?;
        let z = self.conv(pooled, &format!("{n}.gate1"), 1, 0)?;
        let z = self.tape.relu(z);
        let logits = self.conv(z, &format!("{n}.gate2"), 1, 0)?;
        let gates = self.tape.radix_softmax(logits, 2)?;
        let g0 = self.tape.channel_slice(gates, 0, spec.cout)?;
        let g1 = self.tape.channel_slice(gates, spec.cout, spec.cout)?;
        let a = self.tape.mul_channel(branches[0], g0)?;
        let b = self.tape.mul_channel(branches[1], g1)?;
        let fused = self.tape.add(a, b)?;
        let shortcut = if spec.has_projection() {
            let s = self.conv(x, &format!("{n}.shortcut"), spec.stride, 0)?;
            self.bn(s, &format!("{n}.bn_shortcut"))?
        } else {
            x
        };
        let out = self.tape.add(fused, shortcut)?;
        Ok(self.tape.relu(out))
    }

    /// Channel attention enhancement: `F ⊙ sigmoid(conv1d(gap(F))) + F`.
    pub fn cae(&mut self, f: Var, name: &str) -> Result<Var> {
        let pooled = self.tape.global_avg_pool(f)?;
        let k = self.p(&format!("{name}.kernel"))?;
        let mixed = self.tape.conv1d_channels(pooled, k)?;
        let omega = self.tape.sigmoid(mixed);
        let weighted = self.tape.mul_channel(f, omega)?;
        self.tape.add(weighted, f)
    }

    /// The four residual layers, each followed by its CAE module.
    pub fn encoder(&mut self, f0e: Var) -> Result<EncoderOutputs> {
        let (h, w) = (self.tape.value4(f0e).dim().2, self.tape.value4(f0e).dim().3);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Dimension(format!("encoder input {h}x{w} not divisible by 8")));
        }
        let mut x = f0e;
        let mut enhanced = [f0e; 4];
        for (layer, blocks) in block_specs(&self.net.config).iter().enumerate() {
            for spec in blocks {
                x = self.block(x, spec)?;
            }
            enhanced[layer] = self.cae(x, &format!("cae{}", layer + 1))?;
        }
        Ok(EncoderOutputs { enhanced })
    }

    /// `1×1 conv → BN → ReLU → ×2 upsample → + skip`.
    pub fn up_fusion(&mut self, deep: Var, skip: Var, level: usize) -> Result<Var> {
        let name = format!("up{level}");
        let r = self.conv(deep, &format!("{name}.conv"), 1, 0)?;
        let r = self.bn(r, &format!("{name}.bn"))?;
        let r = self.tape.relu(r);
        let u = self.tape.upsample2(r)?;
        self.tape.add(u, skip)
    }

    /// Three up-fusions and the prediction head; returns `N×1×H×W` probabilities.
    pub fn decoder(&mut self, enc: &EncoderOutputs) -> Result<Var> {
        let [f1, f2, f3, f4] = enc.enhanced;
        let f3f = self.up_fusion(f4, f3, 3)?;
        let f2f = self.up_fusion(f3f, f2, 2)?;
        let f1f = self.up_fusion(f2f, f1, 1)?;
        let h = self.conv(f1f, "head.conv", 1, 1)?;
        let h = self.bn(h, "head.bn")?;
        let h = self.tape.relu(h);
        let logits = self.conv(h, "head.out", 1, 0)?;
        Ok(self.tape.sigmoid(logits))
    }
}

impl From<ndarray::ShapeError> for Error {
    fn from(e: ndarray::ShapeError) -> Self {
        Error::Dimension(e.to_string())
    }
}

/// Stacks single-channel images into an `N×1×H×W` batch.
pub fn stack_images(images: &[&GrayImage]) -> Result<Array4<f64>> {
    let first = images.first().ok_or_else(|| Error::EmptyDataset("no images to stack".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut out = Array4::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(Error::Dimension(format!(
                "image {i} is {}x{}, batch is {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        out.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(img.pixels());
    }
    Ok(out)
}
