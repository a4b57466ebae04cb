//! Full networks: the ResUNet++ wiring and a plain U-Net baseline, plus the
//! closed-form parameter count that pins both layouts.
//!
//! ResUNet++ data path (resolutions relative to the input):
//!   stem f0 @1 -> enc1 f1 @1/2 -> enc2 f2 @1/4 -> enc3 f3 @1/8
//!   -> aspp1 f4 @1/8 (bridge)
//!   -> dec1 f3 @1/4 (skip enc2) -> dec2 f2 @1/2 (skip enc1)
//!   -> dec3 f1 @1 (skip stem) -> aspp2 f0 -> 1x1 conv -> sigmoid.
//! The sigmoid is clamped into [eps, 1-eps] (eps per precision) so the head
//! output is strictly inside (0, 1) even where the sigmoid saturates.

use serde::{Deserialize, Serialize};

use crate::blocks::{Aspp, ConvUnit, DecoderBlock, DoubleConv, EncoderBlock, Stem};
use crate::element::{Dtype, Element};
use crate::error::{ModelError, TensorError};
use crate::params::{ForwardCx, Registry};
use crate::rng::SeedStream;
use crate::tape::{Mode, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Resunetpp,
    UnetBaseline,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Resunetpp => "resunetpp",
            Arch::UnetBaseline => "unet_baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Widths for stem/enc1/enc2/enc3/bridge; decoders mirror them back down.
    pub filters: [usize; 5],
    pub se_reduction: usize,
    pub aspp_rates: Vec<usize>,
    /// Square input edge; must be a multiple of 8 for the three halvings.
    pub input_size: usize,
    pub arch: Arch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            filters: [16, 32, 64, 128, 256],
            se_reduction: 8,
            aspp_rates: vec![1, 6, 12, 18],
            input_size: 256,
            arch: Arch::Resunetpp,
        }
    }
}

impl ModelConfig {
    /// The toy layout used by gradient checks and fast training fixtures.
    pub fn toy(input_size: usize) -> ModelConfig {
        ModelConfig {
            filters: [4, 8, 16, 32, 64],
            se_reduction: 2,
            input_size,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 {
            return Err(ModelError::NoInputChannels);
        }
        if self.filters.windows(2).any(|w| w[0] > w[1]) {
            return Err(ModelError::FiltersNotMonotone(self.filters.to_vec()));
        }
        if self.se_reduction == 0 {
            return Err(ModelError::SeReductionMismatch {
                width: self.filters[0],
                r: 0,
            });
        }
        // SE gates the stem and all three encoders.
        for &width in &self.filters[..4] {
            if width % self.se_reduction != 0 {
                return Err(ModelError::SeReductionMismatch {
                    width,
                    r: self.se_reduction,
                });
            }
        }
        if self.input_size < 8 || self.input_size % 8 != 0 {
            return Err(ModelError::BadInputSize(self.input_size));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.iter().any(|&r| r == 0) {
            return Err(ModelError::BadAsppRates(self.aspp_rates.clone()));
        }
        Ok(())
    }
}

/// Intermediate feature handles from one traced forward pass; lets tests and
/// shape audits read stage resolutions without replumbing the wiring.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub stem: Var,
    pub enc1: Var,
    pub enc2: Var,
    pub enc3: Var,
    pub bridge: Var,
    pub dec1: Var,
    pub dec2: Var,
    pub dec3: Var,
}

#[derive(Debug, Clone)]
struct ResunetppNet {
    stem: Stem,
    enc1: EncoderBlock,
    enc2: EncoderBlock,
    enc3: EncoderBlock,
    aspp1: Aspp,
    dec1: DecoderBlock,
    dec2: DecoderBlock,
    dec3: DecoderBlock,
    aspp2: Aspp,
    head: ConvUnit,
}

impl ResunetppNet {
    fn new<T: Element>(
        reg: &mut Registry<T>,
        cfg: &ModelConfig,
        stream: &mut SeedStream,
    ) -> ResunetppNet {
        let [f0, f1, f2, f3, f4] = cfg.filters;
        let cin = cfg.in_channels;
        let r = cfg.se_reduction;
        let bridge_hw = cfg.input_size / 8;
        ResunetppNet {
            stem: Stem::new(reg, "stem", cin, f0, r, stream),
            enc1: EncoderBlock::new(reg, "enc1", f0, f1, r, stream),
            enc2: EncoderBlock::new(reg, "enc2", f1, f2, r, stream),
            enc3: EncoderBlock::new(reg, "enc3", f2, f3, r, stream),
            aspp1: Aspp::new(reg, "aspp1", f3, f4, &cfg.aspp_rates, bridge_hw, stream),
            dec1: DecoderBlock::new(reg, "dec1", f2, f4, f3, stream),
            dec2: DecoderBlock::new(reg, "dec2", f1, f3, f2, stream),
            dec3: DecoderBlock::new(reg, "dec3", f0, f2, f1, stream),
            aspp2: Aspp::new(reg, "aspp2", f1, f0, &cfg.aspp_rates, cfg.input_size, stream),
            head: ConvUnit::k1(reg, "head", f0, 1, 1, true, stream),
        }
    }

    fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<(Var, StageVars), TensorError> {
        let s0 = self.stem.forward(cx, x)?;
        let e1 = self.enc1.forward(cx, s0)?;
        let e2 = self.enc2.forward(cx, e1)?;
        let e3 = self.enc3.forward(cx, e2)?;
        let bridge = self.aspp1.forward(cx, e3)?;
        let d1 = self.dec1.forward(cx, e2, bridge)?;
        let d2 = self.dec2.forward(cx, e1, d1)?;
        let d3 = self.dec3.forward(cx, s0, d2)?;
        let y = self.aspp2.forward(cx, d3)?;
        let y = self.head.forward(cx, y)?;
        let y = cx.tape.sigmoid(y);
        let y = cx.tape.clamp_unit(y, prob_eps::<T>())?;
        Ok((
            y,
            StageVars {
                stem: s0,
                enc1: e1,
                enc2: e2,
                enc3: e3,
                bridge,
                dec1: d1,
                dec2: d2,
                dec3: d3,
            },
        ))
    }
}

#[derive(Debug, Clone)]
struct UnetNet {
    down1: DoubleConv,
    down2: DoubleConv,
    bottom: DoubleConv,
    up2: DoubleConv,
    up1: DoubleConv,
    head: ConvUnit,
}

impl UnetNet {
    fn new<T: Element>(
        reg: &mut Registry<T>,
        cfg: &ModelConfig,
        stream: &mut SeedStream,
    ) -> UnetNet {
        let [f0, f1, f2, _, _] = cfg.filters;
        let cin = cfg.in_channels;
        UnetNet {
            down1: DoubleConv::new(reg, "down1", cin, f0, stream),
            down2: DoubleConv::new(reg, "down2", f0, f1, stream),
            bottom: DoubleConv::new(reg, "bottom", f1, f2, stream),
            up2: DoubleConv::new(reg, "up2", f2 + f1, f1, stream),
            up1: DoubleConv::new(reg, "up1", f1 + f0, f0, stream),
            head: ConvUnit::k1(reg, "head", f0, 1, 1, true, stream),
        }
    }

    fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let d1 = self.down1.forward(cx, x)?;
        let p1 = cx.tape.maxpool2d(d1, 2, 2)?;
        let d2 = self.down2.forward(cx, p1)?;
        let p2 = cx.tape.maxpool2d(d2, 2, 2)?;
        let b = self.bottom.forward(cx, p2)?;
        let u2 = cx.tape.upsample_nearest(b, 2)?;
        let u2 = cx.tape.concat_channels(u2, d2)?;
        let u2 = self.up2.forward(cx, u2)?;
        let u1 = cx.tape.upsample_nearest(u2, 2)?;
        let u1 = cx.tape.concat_channels(u1, d1)?;
        let u1 = self.up1.forward(cx, u1)?;
        let y = self.head.forward(cx, u1)?;
        let y = cx.tape.sigmoid(y);
        cx.tape.clamp_unit(y, prob_eps::<T>())
    }
}

#[derive(Debug, Clone)]
enum Net {
    Resunetpp(Box<ResunetppNet>),
    Unet(Box<UnetNet>),
}

/// Head clamp width per precision: comfortably inside what the dtype can
/// represent next to 0 and 1.
fn prob_eps<T: Element>() -> f64 {
    match T::DTYPE {
        Dtype::F32 => 1e-7,
        Dtype::F64 => 1e-12,
    }
}

/// A built network: config, parameter registry, and wiring.
#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub reg: Registry<T>,
    net: Net,
}

/// One in-flight forward pass. `cx` owns the tape; `out` is the head output;
/// `stages` is present for the ResUNet++ wiring.
pub struct TracedForward<'r, T: Element> {
    pub cx: ForwardCx<'r, T>,
    pub out: Var,
    pub stages: Option<StageVars>,
}

impl<T: Element> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model<T>, ModelError> {
        config.validate()?;
        let mut reg = Registry::new();
        let mut stream = SeedStream::derived(seed, "model.init", &[]);
        let net = match config.arch {
            Arch::Resunetpp => {
                Net::Resunetpp(Box::new(ResunetppNet::new(&mut reg, &config, &mut stream)))
            }
            Arch::UnetBaseline => {
                Net::Unet(Box::new(UnetNet::new(&mut reg, &config, &mut stream)))
            }
        };
        Ok(Model { config, reg, net })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let ok = match x.shape().as_nchw() {
            Some((n, c, h, w)) => {
                n >= 1 && c == self.config.in_channels && h == self.config.input_size && w == h
            }
            None => false,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::WrongInput {
                c: self.config.in_channels,
                s: self.config.input_size,
                got: x.shape().to_string(),
            })
        }
    }

    /// Forward pass leaving the tape alive, for callers that will attach a
    /// loss and run backward.
    pub fn trace(&mut self, x: &Tensor<T>, mode: Mode) -> Result<TracedForward<'_, T>, ModelError> {
        self.check_input(x)?;
        let Model { reg, net, .. } = self;
        let mut cx = ForwardCx::new(reg, mode);
        let xv = cx.tape.constant(x.clone());
        let (out, stages) = match net {
            Net::Resunetpp(n) => {
                let (y, st) = n.forward(&mut cx, xv)?;
                (y, Some(st))
            }
            Net::Unet(n) => (n.forward(&mut cx, xv)?, None),
        };
        Ok(TracedForward { cx, out, stages })
    }

    /// Probability map in (0, 1), shape [N, 1, S, S].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, ModelError> {
        let t = self.trace(x, mode)?;
        Ok(t.cx.tape.value(t.out).clone())
    }

    pub fn param_count(&self) -> usize {
        self.reg.total_values()
    }

    /// Registry plus a wiring-only forward closure, for callers that drive
    /// their own tape (gradient checking perturbs parameters in place).
    /// Skips the input-shape check that `trace` performs.
    pub fn split_forward(
        &mut self,
    ) -> (
        &mut Registry<T>,
        impl Fn(&mut ForwardCx<'_, T>, Var) -> Result<Var, TensorError> + '_,
    ) {
        let Model { reg, net, .. } = self;
        let net: &Net = net;
        let fwd = move |cx: &mut ForwardCx<'_, T>, x: Var| match net {
            Net::Resunetpp(n) => n.forward(cx, x).map(|(y, _)| y),
            Net::Unet(n) => n.forward(cx, x),
        };
        (reg, fwd)
    }
}

/// Rates surviving the ASPP clamp at a given feature-map edge (the drop rule
/// plus the rate-1 fallback), without building anything.
pub fn aspp_rates_kept(rates: &[usize], feature_hw: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &r in rates {
        if !kept.contains(&r) && 2 * r + 1 <= feature_hw {
            kept.push(r);
        }
    }
    if kept.is_empty() {
        kept.push(1);
    }
    kept
}

/// Closed-form learnable-value count for a config; the registry total of the
/// built model must equal this exactly. Written from the wiring definition,
/// independent of the registration code. `convb` carries a bias, `convnb`
/// feeds a batchnorm and has none.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let convb = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let convnb = |cin: usize, cout: usize, k: usize| cout * cin * k * k;
    let bn = |c: usize| 2 * c;
    let [f0, f1, f2, f3, f4] = cfg.filters;
    let cin = cfg.in_channels;
    match cfg.arch {
        Arch::Resunetpp => {
            let r = cfg.se_reduction;
            let se = |c: usize| convb(c, c / r, 1) + convb(c / r, c, 1);
            let stem = convnb(cin, f0, 3)
                + bn(f0)
                + convb(f0, f0, 3)
                + convnb(cin, f0, 1)
                + bn(f0)
                + se(f0);
            let enc = |a: usize, b: usize| {
                bn(a) + convnb(a, b, 3) + bn(b) + convb(b, b, 3) + convnb(a, b, 1) + bn(b) + se(b)
            };
            let aspp = |a: usize, b: usize, hw: usize| {
                let n = aspp_rates_kept(&cfg.aspp_rates, hw).len();
                n * (convnb(a, b, 3) + bn(b)) + convb(b, b, 1)
            };
            let att = |ce: usize, cd: usize| {
                bn(ce) + convnb(ce, cd, 3) + bn(cd) + convnb(cd, cd, 3) + bn(cd) + convb(cd, cd, 3)
            };
            let dec = |ce: usize, cd: usize, f: usize| {
                let ccat = cd + ce;
                att(ce, cd)
                    + bn(ccat)
                    + convnb(ccat, f, 3)
                    + bn(f)
                    + convb(f, f, 3)
                    + convnb(ccat, f, 1)
                    + bn(f)
            };
            stem + enc(f0, f1)
                + enc(f1, f2)
                + enc(f2, f3)
                + aspp(f3, f4, cfg.input_size / 8)
                + dec(f2, f4, f3)
                + dec(f1, f3, f2)
                + dec(f0, f2, f1)
                + aspp(f1, f0, cfg.input_size)
                + convb(f0, 1, 1)
        }
        Arch::UnetBaseline => {
            let dc = |a: usize, b: usize| convnb(a, b, 3) + bn(b) + convnb(b, b, 3) + bn(b);
            dc(cin, f0) + dc(f0, f1) + dc(f1, f2) + dc(f2 + f1, f1) + dc(f1 + f0, f0)
                + convb(f0, 1, 1)
        }
    }
}
