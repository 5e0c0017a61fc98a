use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::layers::{Conv, DenseHead, Gdn, ResBlock};
use crate::nn::params::ParamStore;
use crate::nn::{count_macs, Graph, LayerSpec, MacCount, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "proposed")]
    Proposed,
    #[serde(rename = "baseline5x5")]
    Baseline5x5,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(EncoderKind::Proposed),
            "baseline5x5" => Ok(EncoderKind::Baseline5x5),
            other => Err(Error::Config(format!("unknown encoder kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub patch_size: usize,
    pub num_res_blocks: usize,
    pub enc_width: usize,
    pub bottleneck_ch: usize,
    pub dec_width: usize,
    pub classes: usize,
    /// `[H, W]`; inputs always have 3 channels.
    pub input_hw: [usize; 2],
    pub encoder_kind: EncoderKind,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            patch_size: 8,
            num_res_blocks: 4,
            enc_width: 64,
            bottleneck_ch: 48,
            dec_width: 64,
            classes: 10,
            input_hw: [32, 32],
            encoder_kind: EncoderKind::Proposed,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if ![4, 8].contains(&self.patch_size) {
            return bad(format!("patch_size must be 4 or 8, got {}", self.patch_size));
        }
        if self.encoder_kind == EncoderKind::Baseline5x5 && self.patch_size != 4 {
            return bad("baseline5x5 encoder downsamples by 4; set patch_size = 4".into());
        }
        if self.enc_width == 0 || self.bottleneck_ch == 0 || self.dec_width == 0 || self.classes == 0 {
            return bad("all widths and the class count must be at least 1".into());
        }
        if self.bottleneck_ch > u8::MAX as usize {
            return bad(format!("bottleneck_ch {} does not fit the bitstream header", self.bottleneck_ch));
        }
        let [h, w] = self.input_hw;
        // the classifier tail halves the stride-4 map once more
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return bad(format!("input {h}x{w} must be a non-zero multiple of 8"));
        }
        if h > u16::MAX as usize || w > u16::MAX as usize {
            return bad(format!("input {h}x{w} does not fit the bitstream header"));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (3, self.input_hw[0], self.input_hw[1])
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.patch_size;
        (self.bottleneck_ch, self.input_hw[0] / s, self.input_hw[1] / s)
    }

    /// Stride-4 feature map shared by the decoder output and teacher stem.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.dec_width, self.input_hw[0] / 4, self.input_hw[1] / 4)
    }
}

pub(crate) fn check_shape(g: &Graph, x: Var, expect: (usize, usize, usize), what: &str) -> Result<()> {
    let s = g.value(x).shape();
    if s.len() != 4 || (s[1], s[2], s[3]) != expect {
        return Err(Error::Config(format!("{what} expects [B, {}, {}, {}], got {s:?}", expect.0, expect.1, expect.2)));
    }
    Ok(())
}

fn macs_of(specs: &[LayerSpec], input: (usize, usize, usize)) -> MacCount {
    count_macs(specs, input).expect("layer specs built from a valid config").0
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Proposed {
        patch: Conv,
        blocks: Vec<ResBlock>,
        proj: Conv,
    },
    Baseline5x5 {
        conv1: Conv,
        gdn1: Gdn,
        conv2: Conv,
        gdn2: Gdn,
    },
}

impl Encoder {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (ce, m) = (cfg.enc_width, cfg.bottleneck_ch);
        Ok(match cfg.encoder_kind {
            EncoderKind::Proposed => {
                let s = cfg.patch_size;
                let patch = Conv::build(store, &format!("{prefix}.patch"), 3, ce, s, s, 0, rng)?;
                let blocks = (0..cfg.num_res_blocks)
                    .map(|i| ResBlock::build(store, &format!("{prefix}.block{i}"), ce, rng))
                    .collect::<Result<_>>()?;
                let proj = Conv::build(store, &format!("{prefix}.proj"), ce, m, 1, 1, 0, rng)?;
                Encoder::Proposed { patch, blocks, proj }
            }
            EncoderKind::Baseline5x5 => Encoder::Baseline5x5 {
                conv1: Conv::build(store, &format!("{prefix}.conv1"), 3, ce, 5, 2, 2, rng)?,
                gdn1: Gdn::build(store, &format!("{prefix}.gdn1"), ce)?,
                conv2: Conv::build(store, &format!("{prefix}.conv2"), ce, m, 5, 2, 2, rng)?,
                gdn2: Gdn::build(store, &format!("{prefix}.gdn2"), m)?,
            },
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Encoder::Proposed { patch, blocks, proj } => {
                let mut h = patch.forward(g, x)?;
                for b in blocks {
                    h = b.forward(g, h)?;
                }
                proj.forward(g, h)
            }
            Encoder::Baseline5x5 { conv1, gdn1, conv2, gdn2 } => {
                let h = conv1.forward(g, x)?;
                let h = gdn1.forward(g, h)?;
                let h = conv2.forward(g, h)?;
                gdn2.forward(g, h)
            }
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        match self {
            Encoder::Proposed { patch, blocks, proj } => std::iter::once(patch.spec())
                .chain(blocks.iter().map(ResBlock::spec))
                .chain(std::iter::once(proj.spec()))
                .collect(),
            Encoder::Baseline5x5 { conv1, gdn1, conv2, gdn2 } => {
                vec![conv1.spec(), gdn1.spec(), conv2.spec(), gdn2.spec()]
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub input: Conv,
    pub pre: [ResBlock; 2],
    pub upsample: bool,
    pub refine: Conv,
    pub post: ResBlock,
}

impl Decoder {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cd = cfg.dec_width;
        let input = Conv::build(store, &format!("{prefix}.input"), cfg.bottleneck_ch, cd, 1, 1, 0, rng)?;
        let pre = [
            ResBlock::build(store, &format!("{prefix}.pre0"), cd, rng)?,
            ResBlock::build(store, &format!("{prefix}.pre1"), cd, rng)?,
        ];
        let refine = Conv::build(store, &format!("{prefix}.refine"), cd, cd, 3, 1, 1, rng)?;
        let post = ResBlock::build(store, &format!("{prefix}.post"), cd, rng)?;
        Ok(Decoder {
            input,
            pre,
            upsample: cfg.patch_size == 8,
            refine,
            post,
        })
    }

    pub fn forward(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let mut h = self.input.forward(g, y)?;
        for b in &self.pre {
            h = b.forward(g, h)?;
        }
        if self.upsample {
            h = g.upsample2x(h)?;
        }
        h = self.refine.forward(g, h)?;
        self.post.forward(g, h)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut v = vec![self.input.spec(), self.pre[0].spec(), self.pre[1].spec()];
        if self.upsample {
            v.push(LayerSpec::Upsample2x);
        }
        v.push(self.refine.spec());
        v.push(self.post.spec());
        v
    }
}

/// Classifier tail operating on the stride-4 feature map.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub pre: [ResBlock; 2],
    pub down: Conv,
    pub post: [ResBlock; 2],
    pub head: DenseHead,
}

impl Classifier {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cd = cfg.dec_width;
        Ok(Classifier {
            pre: [
                ResBlock::build(store, &format!("{prefix}.pre0"), cd, rng)?,
                ResBlock::build(store, &format!("{prefix}.pre1"), cd, rng)?,
            ],
            down: Conv::build(store, &format!("{prefix}.down"), cd, cd, 3, 2, 1, rng)?,
            post: [
                ResBlock::build(store, &format!("{prefix}.post0"), cd, rng)?,
                ResBlock::build(store, &format!("{prefix}.post1"), cd, rng)?,
            ],
            head: DenseHead::build(store, &format!("{prefix}.head"), cd, cfg.classes, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, feature: Var) -> Result<Var> {
        let mut h = feature;
        for b in &self.pre {
            h = b.forward(g, h)?;
        }
        h = self.down.forward(g, h)?;
        for b in &self.post {
            h = b.forward(g, h)?;
        }
        self.head.forward(g, h)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        vec![
            self.pre[0].spec(),
            self.pre[1].spec(),
            self.down.spec(),
            self.post[0].spec(),
            self.post[1].spec(),
            self.head.spec(),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub stem1: Conv,
    pub block1: ResBlock,
    pub stem2: Conv,
    pub block2: ResBlock,
    pub tail: Classifier,
}

impl Teacher {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let cd = cfg.dec_width;
        Ok(Teacher {
            stem1: Conv::build(store, &format!("{prefix}.stem1"), 3, cd, 3, 2, 1, rng)?,
            block1: ResBlock::build(store, &format!("{prefix}.block1"), cd, rng)?,
            stem2: Conv::build(store, &format!("{prefix}.stem2"), cd, cd, 3, 2, 1, rng)?,
            block2: ResBlock::build(store, &format!("{prefix}.block2"), cd, rng)?,
            tail: Classifier::build(store, &format!("{prefix}.tail"), cfg, rng)?,
        })
    }

    pub fn stem(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.stem1.forward(g, x)?;
        let h = self.block1.forward(g, h)?;
        let h = self.stem2.forward(g, h)?;
        self.block2.forward(g, h)
    }

    /// Returns `(stem feature, logits)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let f = self.stem(g, x)?;
        let logits = self.tail.forward(g, f)?;
        Ok((f, logits))
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut v = vec![self.stem1.spec(), self.block1.spec(), self.stem2.spec(), self.block2.spec()];
        v.extend(self.tail.specs());
        v
    }
}

/// MACs per image for each part of a model built from `cfg`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub encoder: u64,
    pub decoder: u64,
    pub classifier: u64,
    pub teacher: u64,
}

pub fn mac_breakdown(cfg: &ArchConfig) -> Result<MacBreakdown> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let enc = Encoder::build(&mut store, "e", cfg, &mut rng)?;
    let dec = Decoder::build(&mut store, "d", cfg, &mut rng)?;
    let cls = Classifier::build(&mut store, "c", cfg, &mut rng)?;
    let t = Teacher::build(&mut store, "t", cfg, &mut rng)?;
    Ok(MacBreakdown {
        encoder: macs_of(&enc.specs(), cfg.input_shape()).macs,
        decoder: macs_of(&dec.specs(), cfg.latent_shape()).macs,
        classifier: macs_of(&cls.specs(), cfg.feature_shape()).macs,
        teacher: macs_of(&t.specs(), cfg.input_shape()).macs,
    })
}
