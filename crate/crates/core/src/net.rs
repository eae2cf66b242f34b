//! Two-stream backbone with attention fusion, similarity head and mask decoder.
//!
//! Each stream is three stages of `conv3x3 -> BN -> ReLU -> conv3x3 -> BN ->
//! 2x average pool`. A stage's output is the signed pre-activation map; the
//! next stage starts with a ReLU. The tapped maps (low, mid, high) therefore
//! carry sign, which lets patch cosines span the full `[-1, 1]` range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::error::{ensure_dims, Error, Result};
use crate::mpsm::{fuse_multiscale, partition, similarity_pattern, PatchGrid, DEFAULT_K};
use crate::nn::{Conv2d, ConvBn, Dense, Mode};

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];
pub const HEAD_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Both streams, attention fusion and the similarity head.
    Full,
    /// RGB stream only, classified from globally pooled high-level features.
    RgbOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub k: usize,
    pub widths: [usize; 3],
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            k: DEFAULT_K,
            widths: DEFAULT_WIDTHS,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image size must be a multiple of 8 and at least 16, got {}",
                self.image_size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let high = self.image_size / 8;
        PatchGrid::new(high, high, self.k)?;
        Ok(())
    }

    /// Spatial extent of the high-level map.
    pub fn high_extent(&self) -> usize {
        self.image_size / 8
    }
}

#[derive(Clone, Debug)]
struct Stage {
    first: ConvBn,
    second: ConvBn,
}

impl Stage {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            first: ConvBn::new(store, &format!("{name}.0"), 3, cin, cout, rng),
            second: ConvBn::new(store, &format!("{name}.1"), 3, cout, cout, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode, rectify_input: bool) -> Result<Var> {
        let x = if rectify_input { tape.relu(x) } else { x };
        let h = self.first.forward(tape, store, x, mode)?;
        let h = tape.relu(h);
        let h = self.second.forward(tape, store, h, mode)?;
        tape.avg_pool2(h)
    }
}

#[derive(Clone, Debug)]
struct Stream {
    stages: [Stage; 3],
}

impl Stream {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, widths: [usize; 3], rng: &mut R) -> Self {
        Self {
            stages: [
                Stage::new(store, &format!("{name}.stage0"), cin, widths[0], rng),
                Stage::new(store, &format!("{name}.stage1"), widths[0], widths[1], rng),
                Stage::new(store, &format!("{name}.stage2"), widths[1], widths[2], rng),
            ],
        }
    }
}

/// Attention maps and fused features of one stage.
#[derive(Clone, Copy, Debug)]
pub struct RfamOutput {
    pub a1: Var,
    pub a2: Var,
    pub fused: Var,
}

/// RGB-frequency attention: `V = ReLU(BN(conv1x1([u1, u2])))`,
/// `[a1, a2] = sigmoid(conv3x3(V))`, `fused = a1 * u1 + a2 * u2`.
#[derive(Clone, Debug)]
pub struct Rfam {
    pub mix: ConvBn,
    pub attend: Conv2d,
}

impl Rfam {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            mix: ConvBn::new(store, &format!("{name}.mix"), 1, 2 * channels, 2 * channels, rng),
            attend: Conv2d::new(store, &format!("{name}.attend"), 3, 2 * channels, 2, true, 1, rng),
        }
    }

    /// `u1` is the frequency-stream map, `u2` the RGB-stream map.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u1: Var, u2: Var, mode: Mode) -> Result<RfamOutput> {
        ensure_dims!(
            tape.shape(u1) == tape.shape(u2),
            "rfam: stream maps differ, {:?} vs {:?}",
            tape.shape(u1),
            tape.shape(u2)
        );
        let u = tape.concat(&[u1, u2])?;
        let v = self.mix.forward(tape, store, u, mode)?;
        let v = tape.relu(v);
        let logits = self.attend.forward(tape, store, v)?;
        let a = tape.sigmoid(logits);
        let parts = tape.split(a, &[1, 1])?;
        let (a1, a2) = (parts[0], parts[1]);
        let w1 = tape.mul(a1, u1)?;
        let w2 = tape.mul(a2, u2)?;
        let fused = tape.add(w1, w2)?;
        debug_assert!(fused_matches(tape, a1, a2, u1, u2, fused));
        Ok(RfamOutput { a1, a2, fused })
    }
}

fn fused_matches(tape: &Tape, a1: Var, a2: Var, u1: Var, u2: Var, fused: Var) -> bool {
    let c = tape.value(u1).last_dim();
    let (a1, a2) = (tape.value(a1).data(), tape.value(a2).data());
    let (u1, u2) = (tape.value(u1).data(), tape.value(u2).data());
    tape.value(fused).data().iter().enumerate().all(|(i, &f)| {
        let expect = a1[i / c] * u1[i] + a2[i / c] * u2[i];
        (f - expect).abs() <= 1e-12 * (1.0 + expect.abs())
    })
}

#[derive(Clone, Debug)]
struct UpBlock {
    conv: ConvBn,
}

#[derive(Clone, Debug)]
struct Decoder {
    up_mid: UpBlock,
    up_low: UpBlock,
    up_full: UpBlock,
    out: Conv2d,
}

impl Decoder {
    fn new<R: Rng>(store: &mut ParamStore, widths: [usize; 3], rng: &mut R) -> Self {
        let [w0, w1, w2] = widths;
        let up = |store: &mut ParamStore, name: &str, cin, cout, rng: &mut R| UpBlock {
            conv: ConvBn::new(store, name, 3, cin, cout, rng),
        };
        let up_mid = up(store, "decoder.mid", w2 + w1, w1, rng);
        let up_low = up(store, "decoder.low", w1 + w0, w0, rng);
        let up_full = up(store, "decoder.full", w0, (w0 / 2).max(1), rng);
        let out = Conv2d::new(store, "decoder.out", 3, (w0 / 2).max(1), 1, true, 1, rng);
        Self {
            up_mid,
            up_low,
            up_full,
            out,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, maps: [Var; 3], size: usize, mode: Mode) -> Result<Var> {
        let [low, mid, high] = maps;
        let block = |tape: &mut Tape, b: &UpBlock, x: Var, skip: Option<Var>, h: usize| -> Result<Var> {
            let x = tape.resize_bilinear(x, h, h)?;
            let x = match skip {
                Some(s) => tape.concat(&[x, s])?,
                None => x,
            };
            let y = b.conv.forward(tape, store, x, mode)?;
            Ok(tape.relu(y))
        };
        let x = block(tape, &self.up_mid, high, Some(mid), size / 4)?;
        let x = block(tape, &self.up_low, x, Some(low), size / 2)?;
        let x = block(tape, &self.up_full, x, None, size)?;
        let logits = self.out.forward(tape, store, x)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Per-batch network outputs.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// Forged probability, `[n, 1]`.
    pub y_hat: Var,
    /// Predicted mask, `[n, h, w, 1]`.
    pub mask_hat: Var,
    /// Similarity pattern, `[n, k^2, k^2]`; absent for the RGB-only variant.
    pub s_hat: Option<Var>,
    /// Features handed to the similarity module and decoder: low, mid, high.
    pub stage_fused: [Var; 3],
    /// Per-stage attention outputs; absent for the RGB-only variant.
    pub attention: Option<[RfamOutput; 3]>,
}

#[derive(Clone, Debug)]
pub struct TwoStreamNet {
    config: ModelConfig,
    rgb: Stream,
    freq: Option<Stream>,
    rfams: Option<[Rfam; 3]>,
    head_hidden: Dense,
    head_out: Dense,
    decoder: Decoder,
}

impl TwoStreamNet {
    /// Registers every parameter in `store` in a fixed order.
    pub fn new<R: Rng>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let rgb = Stream::new(store, "rgb", 3, w, rng);
        let (freq, rfams, head_in) = match config.variant {
            Variant::Full => {
                let freq = Stream::new(store, "freq", 1, w, rng);
                let rfams = [
                    Rfam::new(store, "rfam.low", w[0], rng),
                    Rfam::new(store, "rfam.mid", w[1], rng),
                    Rfam::new(store, "rfam.high", w[2], rng),
                ];
                (Some(freq), Some(rfams), config.k.pow(4))
            }
            Variant::RgbOnly => (None, None, w[2]),
        };
        let head_hidden = Dense::new(store, "head.hidden", head_in, HEAD_HIDDEN, rng);
        let head_out = Dense::new(store, "head.out", HEAD_HIDDEN, 1, rng);
        let decoder = Decoder::new(store, w, rng);
        Ok(Self {
            config,
            rgb,
            freq,
            rfams,
            head_hidden,
            head_out,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `x1` is the RGB batch `[n, h, w, 3]`, `x2` its frequency cue `[n, h, w, 1]`
    /// (ignored by the RGB-only variant).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x1: Var, x2: Var, mode: Mode) -> Result<NetworkOutput> {
        let (s1, s2) = (tape.shape(x1).to_vec(), tape.shape(x2).to_vec());
        let size = self.config.image_size;
        ensure_dims!(
            s1.len() == 4 && s1[1] == size && s1[2] == size && s1[3] == 3,
            "forward: expected [n, {size}, {size}, 3] RGB batch, got {s1:?}"
        );
        ensure_dims!(
            s2.len() == 4 && s2[..3] == s1[..3] && s2[3] == 1,
            "forward: frequency cue {s2:?} does not match RGB batch {s1:?}"
        );

        let mut rgb_maps = [x1; 3];
        let mut x = x1;
        for (l, stage) in self.rgb.stages.iter().enumerate() {
            x = stage.forward(tape, store, x, mode, l > 0)?;
            rgb_maps[l] = x;
        }

        let (Some(freq), Some(rfams)) = (&self.freq, &self.rfams) else {
            let pooled = tape.global_pool(rgb_maps[2])?;
            let y_hat = self.classify(tape, store, pooled)?;
            let mask_hat = self.decoder.forward(tape, store, rgb_maps, size, mode)?;
            return Ok(NetworkOutput {
                y_hat,
                mask_hat,
                s_hat: None,
                stage_fused: rgb_maps,
                attention: None,
            });
        };

        let mut attention = Vec::with_capacity(3);
        let mut f = x2;
        for (l, stage) in freq.stages.iter().enumerate() {
            f = stage.forward(tape, store, f, mode, l > 0)?;
            attention.push(rfams[l].forward(tape, store, f, rgb_maps[l], mode)?);
        }
        let attention = [attention[0], attention[1], attention[2]];
        let fused = attention.map(|a| a.fused);

        let multi = fuse_multiscale(tape, fused[0], fused[1], fused[2])?;
        let patches = partition(tape, multi, self.config.k)?;
        let s_hat = similarity_pattern(tape, patches)?;
        let flat = tape.flatten(s_hat)?;
        let y_hat = self.classify(tape, store, flat)?;
        let mask_hat = self.decoder.forward(tape, store, fused, size, mode)?;
        Ok(NetworkOutput {
            y_hat,
            mask_hat,
            s_hat: Some(s_hat),
            stage_fused: fused,
            attention: Some(attention),
        })
    }

    fn classify(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let h = self.head_hidden.forward(tape, store, features)?;
        let h = tape.relu(h);
        let logit = self.head_out.forward(tape, store, h)?;
        Ok(tape.sigmoid(logit))
    }
}

/// Stacks per-sample HWC rasters into one NHWC tensor.
pub fn batch_tensor(images: &[&crate::Image]) -> Result<Tensor> {
    ensure_dims!(!images.is_empty(), "batch_tensor: empty batch");
    let (h, w, c) = (images[0].height(), images[0].width(), images[0].channels());
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        ensure_dims!(
            img.height() == h && img.width() == w && img.channels() == c,
            "batch_tensor: mixed image shapes"
        );
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), h, w, c], data)
}
