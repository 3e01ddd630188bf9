//! Two-stream generator (translation U-net + segmentation U-net with a shared
//! bottleneck and cross-stream attentional fusion) and the conditional patch
//! discriminator.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uagan_autograd::{concat_channels, param, ConvGeom, ParamRef, Shape, Tensor, Var};

use crate::error::{Result, UaganError};
use crate::nn::{Conv2d, ConvBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Encoder levels above the bottleneck.
    pub levels: usize,
    pub base_channels: usize,
    /// Number of modalities M; the translation input has 1 + M channels.
    pub modalities: usize,
    /// How many of the deepest encoder blocks are shared between streams
    /// when the variant shares its bottleneck.
    pub shared_depth: usize,
    pub disc_base_channels: usize,
    pub disc_layers: usize,
    pub slope: f32,
    pub disc_slope: f32,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 4,
            base_channels: 16,
            modalities: 3,
            shared_depth: 1,
            disc_base_channels: 32,
            disc_layers: 4,
            slope: 0.2,
            disc_slope: 0.01,
        }
    }
}

impl UNetConfig {
    pub fn in_channels_trans(&self) -> usize {
        1 + self.modalities
    }
    pub fn in_channels_seg(&self) -> usize {
        1
    }
    pub fn out_channels_trans(&self) -> usize {
        1
    }
    pub fn out_channels_seg(&self) -> usize {
        2
    }

    /// Channels of encoder level `i`; level `levels` is the bottleneck.
    pub fn channels_at(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.modalities == 0 {
            return Err(UaganError::Config("levels, base_channels and modalities must be ≥ 1".into()));
        }
        if self.shared_depth > self.levels {
            return Err(UaganError::Config(format!(
                "shared_depth {} exceeds the {} blocks with matching channels",
                self.shared_depth, self.levels
            )));
        }
        let g = 1usize << self.levels;
        let d = 1usize << self.disc_layers;
        if !image_size.is_multiple_of(g) || !image_size.is_multiple_of(d) || image_size < g.max(d) {
            return Err(UaganError::Config(format!(
                "image size {image_size} must be a multiple of 2^{} and 2^{}",
                self.levels, self.disc_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Uagan,
    UaganAtten,
    UaganFuse,
    UaganTrans,
    Joint,
    Individual,
}

impl Preset {
    pub const ALL: [Preset; 6] =
        [Preset::Uagan, Preset::UaganAtten, Preset::UaganFuse, Preset::UaganTrans, Preset::Joint, Preset::Individual];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Uagan => "uagan",
            Preset::UaganAtten => "uagan-atten",
            Preset::UaganFuse => "uagan-fuse",
            Preset::UaganTrans => "uagan-trans",
            Preset::Joint => "joint",
            Preset::Individual => "individual",
        }
    }

    /// Name used in reports.
    pub fn display_name(&self) -> &'static str {
        match self {
            Preset::Uagan => "UAGAN",
            Preset::UaganAtten => "UAGAN-atten",
            Preset::UaganFuse => "UAGAN-fuse",
            Preset::UaganTrans => "UAGAN-trans",
            Preset::Joint => "Joint",
            Preset::Individual => "Individual",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = UaganError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s.to_ascii_lowercase()).ok_or_else(|| {
            let valid: Vec<_> = Preset::ALL.iter().map(Preset::name).collect();
            UaganError::Argument(format!("unknown variant '{s}'; valid presets: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxTask {
    Translation,
    Reconstruction,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub preset: Preset,
    pub attention_enabled: bool,
    pub fusion_enabled: bool,
    pub aux_task: AuxTask,
    pub bottleneck_shared: bool,
}

impl VariantSpec {
    pub fn preset(preset: Preset) -> Self {
        let (attention_enabled, fusion_enabled, aux_task, bottleneck_shared) = match preset {
            Preset::Uagan => (true, true, AuxTask::Translation, true),
            Preset::UaganAtten => (false, true, AuxTask::Translation, true),
            Preset::UaganFuse => (false, false, AuxTask::Translation, true),
            Preset::UaganTrans => (true, true, AuxTask::Reconstruction, true),
            Preset::Joint | Preset::Individual => (false, false, AuxTask::None, false),
        };
        VariantSpec { preset, attention_enabled, fusion_enabled, aux_task, bottleneck_shared }
    }

    pub fn has_trans_stream(&self) -> bool {
        self.aux_task != AuxTask::None
    }

    /// Only the translation task is adversarial.
    pub fn has_discriminator(&self) -> bool {
        self.aux_task == AuxTask::Translation
    }

    pub fn per_modality(&self) -> bool {
        self.preset == Preset::Individual
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Trans,
    Seg,
}

/// Encoder outputs of one stream: features at each level and the bottleneck.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stream: Stream,
    pub levels: Vec<Var>,
    pub bottleneck: Var,
}

/// Parameters of one attentional block: a single-channel gate and a channel
/// alignment, both 1×1 convolutions applied to the other stream's features.
pub struct AttentionBlock {
    pub mask_conv: Conv2d,
    pub align_conv: Conv2d,
}

impl AttentionBlock {
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionBlock {
            mask_conv: Conv2d::pointwise(&format!("{name}.mask"), channels, 1, rng),
            align_conv: Conv2d::pointwise(&format!("{name}.align"), channels, channels, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = self.mask_conv.params();
        p.extend(self.align_conv.params());
        p
    }
}

/// `sigmoid(mask_conv ⊗ f_other)`, one channel.
pub fn attention_map(f_other: &Var, block: &AttentionBlock) -> Result<Var> {
    if f_other.shape().c() != block.mask_conv.in_channels() {
        return Err(UaganError::Shape(format!(
            "attention input {} for a gate expecting {} channels",
            f_other.shape(),
            block.mask_conv.in_channels()
        )));
    }
    Ok(block.mask_conv.forward(f_other)?.sigmoid()?)
}

/// How the other stream's features enter a decoder level.
#[derive(Clone, Copy)]
pub enum Fusion<'a> {
    /// `F_own + M ⊙ (align ⊗ F_other)`.
    Attention(&'a AttentionBlock),
    /// `F_own + F_other`.
    Add,
    /// `F_own`.
    Off,
}

pub fn attentional_fuse(f_own: &Var, f_other: &Var, fusion: Fusion<'_>) -> Result<Var> {
    if f_own.shape() != f_other.shape() {
        return Err(UaganError::Config(format!("cannot fuse features {} with {}", f_own.shape(), f_other.shape())));
    }
    Ok(match fusion {
        Fusion::Off => f_own.clone(),
        Fusion::Add => f_own.add(f_other)?,
        Fusion::Attention(block) => {
            let gate = attention_map(f_other, block)?;
            let aligned = block.align_conv.forward(f_other)?;
            f_own.add(&aligned.mul(&gate)?)?
        }
    })
}

/// One U-net: encoder blocks (last `shared_depth` possibly shared), decoder blocks, head.
struct StreamNet {
    enc: Vec<Rc<ConvBlock>>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
}

impl StreamNet {
    fn new(
        name: &str,
        cfg: &UNetConfig,
        in_ch: usize,
        out_ch: usize,
        shared: &[Option<Rc<ConvBlock>>],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut enc = Vec::with_capacity(cfg.levels + 1);
        for i in 0..=cfg.levels {
            let block = match shared.get(i).cloned().flatten() {
                Some(b) => b,
                None => {
                    let cin = if i == 0 { in_ch } else { cfg.channels_at(i - 1) };
                    Rc::new(ConvBlock::new(&format!("{name}.enc{i}"), cin, cfg.channels_at(i), cfg.slope, rng))
                }
            };
            enc.push(block);
        }
        let dec = (0..cfg.levels)
            .map(|i| {
                let cin = cfg.channels_at(i) + cfg.channels_at(i + 1);
                ConvBlock::new(&format!("{name}.dec{i}"), cin, cfg.channels_at(i), cfg.slope, rng)
            })
            .collect();
        let head = Conv2d::pointwise(&format!("{name}.head"), cfg.base_channels, out_ch, rng);
        StreamNet { enc, dec, head }
    }

    fn encoder_params(&self) -> Vec<ParamRef> {
        self.enc.iter().flat_map(|b| b.params()).collect()
    }

    fn decoder_params(&self) -> Vec<ParamRef> {
        let mut p: Vec<ParamRef> = self.dec.iter().flat_map(|b| b.params()).collect();
        p.extend(self.head.params());
        p
    }
}

/// Outputs of a joint pass through both streams.
pub struct GeneratorOutput {
    /// `None` for segmentation-only variants.
    pub translated: Option<Var>,
    pub seg_logits: Var,
    pub trans_features: Option<FeaturePyramid>,
    pub seg_features: FeaturePyramid,
}

pub struct Generator {
    cfg: UNetConfig,
    variant: VariantSpec,
    seg: StreamNet,
    trans: Option<StreamNet>,
    /// Gates in the segmentation decoder, applied to translation features.
    seg_attn: Vec<AttentionBlock>,
    /// Gates in the translation decoder, applied to segmentation features.
    trans_attn: Vec<AttentionBlock>,
}

impl Generator {
    pub fn new(cfg: &UNetConfig, variant: &VariantSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared_depth = if variant.bottleneck_shared && variant.has_trans_stream() { cfg.shared_depth } else { 0 };
        let shared: Vec<Option<Rc<ConvBlock>>> = (0..=cfg.levels)
            .map(|i| {
                (i + shared_depth > cfg.levels).then(|| {
                    Rc::new(ConvBlock::new(
                        &format!("gen.shared.enc{i}"),
                        cfg.channels_at(i - 1),
                        cfg.channels_at(i),
                        cfg.slope,
                        &mut rng,
                    ))
                })
            })
            .collect();
        let seg = StreamNet::new("gen.seg", cfg, cfg.in_channels_seg(), cfg.out_channels_seg(), &shared, &mut rng);
        let trans = variant.has_trans_stream().then(|| {
            StreamNet::new("gen.trans", cfg, cfg.in_channels_trans(), cfg.out_channels_trans(), &shared, &mut rng)
        });
        let with_attention = variant.has_trans_stream() && variant.fusion_enabled && variant.attention_enabled;
        let attn = |stream: &str, rng: &mut ChaCha8Rng| -> Vec<AttentionBlock> {
            if !with_attention {
                return Vec::new();
            }
            (0..cfg.levels)
                .map(|i| AttentionBlock::new(&format!("gen.{stream}.attn{i}"), cfg.channels_at(i), rng))
                .collect()
        };
        let seg_attn = attn("seg", &mut rng);
        let trans_attn = attn("trans", &mut rng);
        Ok(Generator { cfg: cfg.clone(), variant: variant.clone(), seg, trans, seg_attn, trans_attn })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn variant(&self) -> &VariantSpec {
        &self.variant
    }

    fn stream(&self, stream: Stream) -> Result<&StreamNet> {
        match stream {
            Stream::Seg => Ok(&self.seg),
            Stream::Trans => {
                self.trans.as_ref().ok_or_else(|| UaganError::Config("variant has no translation stream".into()))
            }
        }
    }

    pub fn encode(&self, stream: Stream, input: &Var) -> Result<FeaturePyramid> {
        let net = self.stream(stream)?;
        let want = net.enc[0].in_channels();
        if input.shape().c() != want {
            return Err(UaganError::Config(format!(
                "{stream:?} encoder expects {want} input channels, got {}",
                input.shape()
            )));
        }
        let [_, _, h, w] = input.shape().0;
        let g = 1 << self.cfg.levels;
        if h % g != 0 || w % g != 0 {
            return Err(UaganError::Config(format!("input {} not divisible by 2^{}", input.shape(), self.cfg.levels)));
        }
        let mut levels = Vec::with_capacity(self.cfg.levels);
        let mut h = input.clone();
        for block in &net.enc[..self.cfg.levels] {
            let f = block.forward(&h)?;
            h = f.max_pool2()?;
            levels.push(f);
        }
        let bottleneck = net.enc[self.cfg.levels].forward(&h)?;
        Ok(FeaturePyramid { stream, levels, bottleneck })
    }

    fn fusion_at(&self, stream: Stream, level: usize) -> Fusion<'_> {
        if !self.variant.fusion_enabled || !self.variant.has_trans_stream() {
            return Fusion::Off;
        }
        if !self.variant.attention_enabled {
            return Fusion::Add;
        }
        match stream {
            Stream::Seg => Fusion::Attention(&self.seg_attn[level]),
            Stream::Trans => Fusion::Attention(&self.trans_attn[level]),
        }
    }

    pub fn decode(&self, stream: Stream, own: &FeaturePyramid, other: Option<&FeaturePyramid>) -> Result<Var> {
        let net = self.stream(stream)?;
        if own.levels.len() != self.cfg.levels || other.is_some_and(|o| o.levels.len() != self.cfg.levels) {
            return Err(UaganError::Config("feature pyramid depth does not match the decoder".into()));
        }
        let mut d = own.bottleneck.clone();
        for i in (0..self.cfg.levels).rev() {
            let up = d.upsample2()?;
            let fused = match (other, self.fusion_at(stream, i)) {
                (Some(o), fusion) => attentional_fuse(&own.levels[i], &o.levels[i], fusion)?,
                (None, _) => own.levels[i].clone(),
            };
            d = net.dec[i].forward(&concat_channels(&[fused, up])?)?;
        }
        net.head.forward(&d)
    }

    /// Runs both streams: the translation stream on `[x, planes(labels)]` and the
    /// segmentation stream on `x`.
    pub fn forward(&self, x: &Var, labels: &[usize]) -> Result<GeneratorOutput> {
        if x.shape().c() != 1 {
            return Err(UaganError::Shape(format!("generator input must be single-channel, got {}", x.shape())));
        }
        let seg_features = self.encode(Stream::Seg, x)?;
        if !self.variant.has_trans_stream() {
            let seg_logits = self.decode(Stream::Seg, &seg_features, None)?;
            return Ok(GeneratorOutput { translated: None, seg_logits, trans_features: None, seg_features });
        }
        let planes = Var::constant(label_planes(labels, self.cfg.modalities, x.shape())?);
        let trans_in = concat_channels(&[x.clone(), planes])?;
        let trans_features = self.encode(Stream::Trans, &trans_in)?;
        let translated = self.decode(Stream::Trans, &trans_features, Some(&seg_features))?;
        let seg_logits = self.decode(Stream::Seg, &seg_features, Some(&trans_features))?;
        Ok(GeneratorOutput {
            translated: Some(translated),
            seg_logits,
            trans_features: Some(trans_features),
            seg_features,
        })
    }

    /// `G_trans(x, c')`. Skips the segmentation decoder.
    pub fn translate(&self, x: &Var, target: &[usize]) -> Result<Var> {
        if !self.variant.has_trans_stream() {
            return Err(UaganError::Config("variant has no translation stream".into()));
        }
        if x.shape().c() != 1 {
            return Err(UaganError::Shape(format!("generator input must be single-channel, got {}", x.shape())));
        }
        let planes = Var::constant(label_planes(target, self.cfg.modalities, x.shape())?);
        let trans_features = self.encode(Stream::Trans, &concat_channels(&[x.clone(), planes])?)?;
        let seg_features = match self.variant.fusion_enabled {
            true => Some(self.encode(Stream::Seg, x)?),
            false => None,
        };
        self.decode(Stream::Trans, &trans_features, seg_features.as_ref())
    }

    /// Segmentation logits `[N, 2, H, W]`. Two-stream variants condition the
    /// translation branch on the image's own modality.
    pub fn segment(&self, x: &Var, source: &[usize]) -> Result<Var> {
        Ok(self.forward(x, source)?.seg_logits)
    }

    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = self.seg.encoder_params();
        p.extend(self.seg.decoder_params());
        if let Some(t) = &self.trans {
            p.extend(t.encoder_params());
            p.extend(t.decoder_params());
        }
        p.extend(self.seg_attn.iter().flat_map(AttentionBlock::params));
        p.extend(self.trans_attn.iter().flat_map(AttentionBlock::params));
        param::dedup(p)
    }

    /// Parameters shared by both streams.
    pub fn shared_params(&self) -> Vec<ParamRef> {
        let Some(trans) = &self.trans else { return Vec::new() };
        let t: Vec<ParamRef> = trans.encoder_params();
        self.seg.encoder_params().into_iter().filter(|p| t.iter().any(|q| Rc::ptr_eq(p, q))).collect()
    }

    pub fn num_params(&self) -> usize {
        param::count_unique(&self.params())
    }

    /// Parameter counts per submodule; shared blocks are listed once.
    pub fn describe(&self) -> Vec<(String, usize)> {
        let shared = self.shared_params();
        let is_shared = |p: &ParamRef| shared.iter().any(|q| Rc::ptr_eq(p, q));
        let own = |ps: Vec<ParamRef>| -> usize { ps.iter().filter(|p| !is_shared(p)).map(|p| p.numel()).sum() };
        let mut rows = vec![
            ("seg.encoder".to_string(), own(self.seg.encoder_params())),
            ("seg.decoder".to_string(), own(self.seg.decoder_params())),
        ];
        if let Some(t) = &self.trans {
            rows.push(("trans.encoder".into(), own(t.encoder_params())));
            rows.push(("trans.decoder".into(), own(t.decoder_params())));
            rows.push(("shared".into(), param::count_unique(&shared)));
        }
        if !self.seg_attn.is_empty() {
            rows.push(("seg.attention".into(), self.seg_attn.iter().flat_map(|a| a.params()).map(|p| p.numel()).sum()));
            rows.push((
                "trans.attention".into(),
                self.trans_attn.iter().flat_map(|a| a.params()).map(|p| p.numel()).sum(),
            ));
        }
        rows
    }

    /// Attention blocks of the given decoder (empty unless attention is on).
    pub fn attention_blocks(&self, stream: Stream) -> &[AttentionBlock] {
        match stream {
            Stream::Seg => &self.seg_attn,
            Stream::Trans => &self.trans_attn,
        }
    }
}

/// `[N, M, H, W]` constant planes holding each sample's one-hot label.
pub fn label_planes(labels: &[usize], modalities: usize, like: Shape) -> Result<Tensor> {
    let [n, _, h, w] = like.0;
    if labels.len() != n {
        return Err(UaganError::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut data = vec![0.0f32; n * modalities * h * w];
    for (i, &l) in labels.iter().enumerate() {
        if l >= modalities {
            return Err(UaganError::Argument(format!("modality index {l} out of range 0..{modalities}")));
        }
        let start = (i * modalities + l) * h * w;
        data[start..start + h * w].fill(1.0);
    }
    Ok(Tensor::from_vec(Shape::new(n, modalities, h, w), data)?)
}

/// Strided-convolution patch critic with a modality-classification head.
pub struct Discriminator {
    layers: Vec<Conv2d>,
    src: Conv2d,
    cls: Conv2d,
    slope: f32,
}

impl Discriminator {
    pub fn new(cfg: &UNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C_0000);
        let mut layers = Vec::with_capacity(cfg.disc_layers);
        let mut cin = 1;
        for i in 0..cfg.disc_layers {
            let cout = cfg.disc_base_channels << i;
            layers.push(Conv2d::new(&format!("disc.conv{i}"), cin, cout, 4, ConvGeom::new(2, 1), true, &mut rng));
            cin = cout;
        }
        let src = Conv2d::new("disc.src", cin, 1, 3, ConvGeom::new(1, 1), false, &mut rng);
        let cls = Conv2d::pointwise("disc.cls", cin, cfg.modalities, &mut rng);
        Discriminator { layers, src, cls, slope: cfg.disc_slope }
    }

    /// Returns the realness map `[N, 1, h', w']` (no sigmoid) and class logits `[N, M, 1, 1]`.
    pub fn discriminate(&self, x: &Var) -> Result<(Var, Var)> {
        if x.shape().c() != 1 {
            return Err(UaganError::Shape(format!("discriminator input must be single-channel, got {}", x.shape())));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.leaky_relu(self.slope)?;
        }
        let src = self.src.forward(&h)?;
        let [n, c, hh, ww] = h.shape().0;
        let pooled = h.sum_to(Shape::new(n, c, 1, 1))?.mul_scalar(1.0 / (hh * ww) as f32)?;
        let cls = self.cls.forward(&pooled)?;
        Ok((src, cls))
    }

    pub fn params(&self) -> Vec<ParamRef> {
        let mut p: Vec<ParamRef> = self.layers.iter().flat_map(Conv2d::params).collect();
        p.extend(self.src.params());
        p.extend(self.cls.params());
        p
    }

    pub fn num_params(&self) -> usize {
        param::count_unique(&self.params())
    }
}
