//! Composite network blocks. Each block registers its parameters under a
//! stable dotted prefix at construction and replays pure tape ops in
//! `forward`, so a config always yields the same registry layout and the
//! same checkpoint record order.
//!
//! Parameter counts per block (conv k×k: cout·cin·k²+cout; BN: 2c) are given
//! on each block and pinned by tests.

use crate::element::Element;
use crate::error::TensorError;
use crate::kernels::Conv2dCfg;
use crate::params::{BnId, ForwardCx, ParamId, Registry};
use crate::rng::SeedStream;
use crate::tensor::{Shape, Tensor};
use crate::tape::Var;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn shape4<T: Element>(
    cx: &ForwardCx<'_, T>,
    v: Var,
    op: &'static str,
) -> Result<(usize, usize, usize, usize), TensorError> {
    cx.tape.value(v).shape().as_nchw().ok_or_else(|| TensorError::Contract {
        op,
        message: format!("expected a rank-4 input, got {}", cx.tape.value(v).shape()),
    })
}

/// Convolution with He-normal weights (fan-in). `bias: false` for convs
/// whose output feeds straight into a batchnorm: the mean subtraction makes
/// such a bias gradient identically zero, so it would be untrainable dead
/// weight that no finite-difference check can validate.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub(crate) w: ParamId,
    pub(crate) b: Option<ParamId>,
    pub(crate) cfg: Conv2dCfg,
}

impl ConvUnit {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        cfg: Conv2dCfg,
        bias: bool,
        stream: &mut SeedStream,
    ) -> ConvUnit {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::randn(Shape::new(vec![cout, cin, k, k]).expect("rank 4"), stream)
            .map(|v| v * T::from_f64(std));
        let w = reg.add_param(format!("{name}.w"), w);
        let b = bias.then(|| {
            reg.add_param(
                format!("{name}.b"),
                Tensor::zeros(Shape::new(vec![cout]).expect("rank 1")),
            )
        });
        ConvUnit { w, b, cfg }
    }

    /// 3×3 kernel, padding = dilation (preserves H,W at stride 1).
    #[allow(clippy::too_many_arguments)]
    pub fn k3<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
        stream: &mut SeedStream,
    ) -> ConvUnit {
        let cfg = Conv2dCfg {
            stride,
            dilation,
            padding: dilation,
        };
        ConvUnit::new(reg, name, cin, cout, 3, cfg, bias, stream)
    }

    /// 1×1 kernel, no padding (projection shortcuts, SE gates, heads).
    pub fn k1<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
        stream: &mut SeedStream,
    ) -> ConvUnit {
        let cfg = Conv2dCfg {
            stride,
            dilation: 1,
            padding: 0,
        };
        ConvUnit::new(reg, name, cin, cout, 1, cfg, bias, stream)
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = cx.param(self.w);
        let b = match self.b {
            Some(id) => cx.param(id),
            None => {
                let cout = cx.tape.value(w).shape()[0];
                cx.tape
                    .constant(Tensor::zeros(Shape::new(vec![cout]).expect("rank 1")))
            }
        };
        cx.tape.conv2d(x, w, b, self.cfg)
    }
}

/// Batchnorm with learnable gamma (init 1) and beta (init 0).
#[derive(Debug, Clone)]
pub struct BnUnit {
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
    pub(crate) bn: BnId,
}

impl BnUnit {
    pub fn new<T: Element>(reg: &mut Registry<T>, name: &str, channels: usize) -> BnUnit {
        let shape = Shape::new(vec![channels]).expect("rank 1");
        let gamma = reg.add_param(format!("{name}.gamma"), Tensor::full(shape.clone(), T::ONE));
        let beta = reg.add_param(format!("{name}.beta"), Tensor::zeros(shape));
        let bn = reg.add_bn(name, channels);
        BnUnit { gamma, beta, bn }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        cx.batchnorm(x, self.gamma, self.beta, self.bn, BN_MOMENTUM, BN_EPS)
    }
}

/// Pre-activation trio BN → ReLU → conv3×3, the repeating motif of the
/// residual units and the attention branches.
#[derive(Debug, Clone)]
pub struct PreactConv {
    pub(crate) bn: BnUnit,
    pub(crate) conv: ConvUnit,
}

impl PreactConv {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
        stream: &mut SeedStream,
    ) -> PreactConv {
        let bn = BnUnit::new(reg, &format!("{name}.bn"), cin);
        let conv = ConvUnit::k3(reg, &format!("{name}.conv"), cin, cout, stride, 1, bias, stream);
        PreactConv { bn, conv }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let y = self.bn.forward(cx, x)?;
        let y = cx.tape.relu(y);
        self.conv.forward(cx, y)
    }
}

/// Channel gate: sigmoid(W2·relu(W1·avgpool(x))) scaling each channel.
/// Gate values are strictly inside (0,1), so |output| ≤ |input| elementwise.
/// Parameters: 2c²/r + c/r + c.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub(crate) w1: ConvUnit,
    pub(crate) w2: ConvUnit,
}

impl SqueezeExcite {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        stream: &mut SeedStream,
    ) -> SqueezeExcite {
        assert!(
            reduction >= 1 && channels % reduction == 0,
            "{name}: {channels} channels not divisible by reduction {reduction}"
        );
        let mid = channels / reduction;
        let w1 = ConvUnit::k1(reg, &format!("{name}.w1"), channels, mid, 1, true, stream);
        let w2 = ConvUnit::k1(reg, &format!("{name}.w2"), mid, channels, 1, true, stream);
        SqueezeExcite { w1, w2 }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let z = cx.tape.global_avg_pool(x)?;
        let h = self.w1.forward(cx, z)?;
        let h = cx.tape.relu(h);
        let g = self.w2.forward(cx, h)?;
        let g = cx.tape.sigmoid(g);
        cx.tape.mul_channel(x, g)
    }
}

/// Entry block at full resolution: conv3×3(cin→f0) → BN → ReLU →
/// conv3×3(f0→f0), plus a conv1×1 → BN shortcut, summed and gated by SE.
#[derive(Debug, Clone)]
pub struct Stem {
    pub(crate) conv1: ConvUnit,
    pub(crate) bn1: BnUnit,
    pub(crate) conv2: ConvUnit,
    pub(crate) sc: ConvUnit,
    pub(crate) sc_bn: BnUnit,
    pub(crate) se: SqueezeExcite,
}

impl Stem {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        cin: usize,
        f0: usize,
        se_reduction: usize,
        stream: &mut SeedStream,
    ) -> Stem {
        Stem {
            conv1: ConvUnit::k3(reg, &format!("{name}.conv1"), cin, f0, 1, 1, false, stream),
            bn1: BnUnit::new(reg, &format!("{name}.bn1"), f0),
            conv2: ConvUnit::k3(reg, &format!("{name}.conv2"), f0, f0, 1, 1, true, stream),
            sc: ConvUnit::k1(reg, &format!("{name}.sc"), cin, f0, 1, false, stream),
            sc_bn: BnUnit::new(reg, &format!("{name}.sc_bn"), f0),
            se: SqueezeExcite::new(reg, &format!("{name}.se"), f0, se_reduction, stream),
        }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let m = self.conv1.forward(cx, x)?;
        let m = self.bn1.forward(cx, m)?;
        let m = cx.tape.relu(m);
        let m = self.conv2.forward(cx, m)?;
        let s = self.sc.forward(cx, x)?;
        let s = self.sc_bn.forward(cx, s)?;
        let y = cx.tape.add(m, s)?;
        self.se.forward(cx, y)
    }
}

/// Full pre-activation residual block that halves H and W: BN→ReLU→conv3×3
/// stride 2, BN→ReLU→conv3×3, conv1×1 stride 2 → BN shortcut, sum, SE.
/// Requires even spatial dims so the two paths and later skips line up.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub(crate) pre1: PreactConv,
    pub(crate) pre2: PreactConv,
    pub(crate) sc: ConvUnit,
    pub(crate) sc_bn: BnUnit,
    pub(crate) se: SqueezeExcite,
}

impl EncoderBlock {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        cin: usize,
        f: usize,
        se_reduction: usize,
        stream: &mut SeedStream,
    ) -> EncoderBlock {
        EncoderBlock {
            pre1: PreactConv::new(reg, &format!("{name}.pre1"), cin, f, 2, false, stream),
            pre2: PreactConv::new(reg, &format!("{name}.pre2"), f, f, 1, true, stream),
            sc: ConvUnit::k1(reg, &format!("{name}.sc"), cin, f, 2, false, stream),
            sc_bn: BnUnit::new(reg, &format!("{name}.sc_bn"), f),
            se: SqueezeExcite::new(reg, &format!("{name}.se"), f, se_reduction, stream),
        }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let (_, _, h, w) = shape4(cx, x, "encoder_block")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Contract {
                op: "encoder_block",
                message: format!("needs even spatial dims to halve, got {h}x{w}"),
            });
        }
        let m = self.pre1.forward(cx, x)?;
        let m = self.pre2.forward(cx, m)?;
        let s = self.sc.forward(cx, x)?;
        let s = self.sc_bn.forward(cx, s)?;
        let y = cx.tape.add(m, s)?;
        self.se.forward(cx, y)
    }
}

/// Parallel dilated 3×3 convolutions (padding = rate, one BN each) summed
/// and fused by a 1×1 conv. Rates whose effective kernel 2·rate+1 exceeds
/// the feature map are dropped with a warning; if that would drop them all,
/// rate 1 is kept so the bridge still exists at very small feature maps.
#[derive(Debug, Clone)]
pub struct Aspp {
    pub(crate) branches: Vec<AsppBranch>,
    pub(crate) fuse: ConvUnit,
}

#[derive(Debug, Clone)]
pub struct AsppBranch {
    pub(crate) rate: usize,
    pub(crate) conv: ConvUnit,
    pub(crate) bn: BnUnit,
}

impl Aspp {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rates: &[usize],
        feature_hw: usize,
        stream: &mut SeedStream,
    ) -> Aspp {
        let mut kept: Vec<usize> = Vec::new();
        for &r in rates {
            assert!(r >= 1, "{name}: dilation rates start at 1");
            if kept.contains(&r) {
                log::warn!("{name}: duplicate rate {r} ignored");
                continue;
            }
            if 2 * r + 1 > feature_hw {
                log::warn!(
                    "{name}: rate {r} spans {}px but the feature map is only {feature_hw}px; dropped",
                    2 * r + 1
                );
                continue;
            }
            kept.push(r);
        }
        if kept.is_empty() {
            log::warn!(
                "{name}: all requested rates exceed the {feature_hw}px feature map; keeping rate 1"
            );
            kept.push(1);
        }
        let branches = kept
            .into_iter()
            .map(|rate| AsppBranch {
                rate,
                conv: ConvUnit::k3(reg, &format!("{name}.r{rate}.conv"), cin, cout, 1, rate, false, stream),
                bn: BnUnit::new(reg, &format!("{name}.r{rate}.bn"), cout),
            })
            .collect();
        let fuse = ConvUnit::k1(reg, &format!("{name}.fuse"), cout, cout, 1, true, stream);
        Aspp { branches, fuse }
    }

    pub fn rates(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.rate).collect()
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let mut acc: Option<Var> = None;
        for branch in &self.branches {
            let y = branch.conv.forward(cx, x)?;
            let y = branch.bn.forward(cx, y)?;
            acc = Some(match acc {
                None => y,
                Some(a) => cx.tape.add(a, y)?,
            });
        }
        let fused = acc.expect("aspp keeps at least one branch");
        self.fuse.forward(cx, fused)
    }
}

/// Additive attention over a skip `e` (at 2× resolution) and decoder state
/// `d`: both branches project to d's width, the pooled skip meets d, and a
/// third BN→ReLU→conv turns the sum into a full-resolution multiplicative
/// map applied to d.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub(crate) e_pre: PreactConv,
    pub(crate) d_pre: PreactConv,
    pub(crate) a_pre: PreactConv,
}

impl AttentionBlock {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        ce: usize,
        cd: usize,
        stream: &mut SeedStream,
    ) -> AttentionBlock {
        AttentionBlock {
            e_pre: PreactConv::new(reg, &format!("{name}.e"), ce, cd, 1, false, stream),
            d_pre: PreactConv::new(reg, &format!("{name}.d"), cd, cd, 1, false, stream),
            a_pre: PreactConv::new(reg, &format!("{name}.a"), cd, cd, 1, true, stream),
        }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        e: Var,
        d: Var,
    ) -> Result<Var, TensorError> {
        let (ne, _, he, we) = shape4(cx, e, "attention_block")?;
        let (nd, _, hd, wd) = shape4(cx, d, "attention_block")?;
        if ne != nd || he != 2 * hd || we != 2 * wd {
            return Err(TensorError::Contract {
                op: "attention_block",
                message: format!(
                    "skip must be exactly 2x the decoder feature, got {he}x{we} vs {hd}x{wd}"
                ),
            });
        }
        let be = self.e_pre.forward(cx, e)?;
        let be = cx.tape.maxpool2d(be, 2, 2)?;
        let bd = self.d_pre.forward(cx, d)?;
        let s = cx.tape.add(be, bd)?;
        let a = self.a_pre.forward(cx, s)?;
        cx.tape.mul(a, d)
    }
}

/// Decoder stage: attention-gate d by skip e, upsample ×2, concatenate the
/// skip, then a stride-1 pre-activation residual unit down to f channels.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub(crate) att: AttentionBlock,
    pub(crate) pre1: PreactConv,
    pub(crate) pre2: PreactConv,
    pub(crate) sc: ConvUnit,
    pub(crate) sc_bn: BnUnit,
}

impl DecoderBlock {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        ce: usize,
        cd: usize,
        f: usize,
        stream: &mut SeedStream,
    ) -> DecoderBlock {
        let ccat = cd + ce;
        DecoderBlock {
            att: AttentionBlock::new(reg, &format!("{name}.att"), ce, cd, stream),
            pre1: PreactConv::new(reg, &format!("{name}.pre1"), ccat, f, 1, false, stream),
            pre2: PreactConv::new(reg, &format!("{name}.pre2"), f, f, 1, true, stream),
            sc: ConvUnit::k1(reg, &format!("{name}.sc"), ccat, f, 1, false, stream),
            sc_bn: BnUnit::new(reg, &format!("{name}.sc_bn"), f),
        }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        e: Var,
        d: Var,
    ) -> Result<Var, TensorError> {
        let a = self.att.forward(cx, e, d)?;
        let u = cx.tape.upsample_nearest(a, 2)?;
        let c = cx.tape.concat_channels(u, e)?;
        let m = self.pre1.forward(cx, c)?;
        let m = self.pre2.forward(cx, m)?;
        let s = self.sc.forward(cx, c)?;
        let s = self.sc_bn.forward(cx, s)?;
        cx.tape.add(m, s)
    }
}

/// U-Net building block: (conv3×3 → BN → ReLU) twice, resolution preserved.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub(crate) conv1: ConvUnit,
    pub(crate) bn1: BnUnit,
    pub(crate) conv2: ConvUnit,
    pub(crate) bn2: BnUnit,
}

impl DoubleConv {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stream: &mut SeedStream,
    ) -> DoubleConv {
        DoubleConv {
            conv1: ConvUnit::k3(reg, &format!("{name}.conv1"), cin, cout, 1, 1, false, stream),
            bn1: BnUnit::new(reg, &format!("{name}.bn1"), cout),
            conv2: ConvUnit::k3(reg, &format!("{name}.conv2"), cout, cout, 1, 1, false, stream),
            bn2: BnUnit::new(reg, &format!("{name}.bn2"), cout),
        }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut ForwardCx<'_, T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.bn1.forward(cx, y)?;
        let y = cx.tape.relu(y);
        let y = self.conv2.forward(cx, y)?;
        let y = self.bn2.forward(cx, y)?;
        Ok(cx.tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{BnState, Mode};
    use proptest::prelude::*;

    fn stream() -> SeedStream {
        SeedStream::derived(99, "blocks.test", &[])
    }

    fn run_train<F>(reg: &mut Registry<f64>, x: Tensor<f64>, f: F) -> Tensor<f64>
    where
        F: FnOnce(&mut ForwardCx<'_, f64>, Var) -> Result<Var, TensorError>,
    {
        let mut cx = ForwardCx::new(reg, Mode::Train);
        let xv = cx.tape.constant(x);
        let y = f(&mut cx, xv).unwrap();
        cx.tape.value(y).clone()
    }

    #[test]
    fn stem_preserves_resolution_and_sets_width() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let stem = Stem::new(&mut reg, "stem", 3, 8, 4, &mut s);
        let x = Tensor::randn(Shape::nchw(2, 3, 16, 16), &mut s);
        let y = run_train(&mut reg, x, |cx, x| stem.forward(cx, x));
        assert_eq!(y.shape().as_nchw(), Some((2, 8, 16, 16)));
    }

    #[test]
    fn stem_with_zeroed_main_path_is_the_shortcut_pipeline() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let stem = Stem::new(&mut reg, "stem", 2, 4, 2, &mut s);
        let zero_w = Tensor::zeros(reg.param(stem.conv2.w).value.shape().clone());
        reg.param_mut(stem.conv2.w).value = zero_w;
        let x = Tensor::randn(Shape::nchw(2, 2, 8, 8), &mut s);

        let full = run_train(&mut reg, x.clone(), |cx, x| stem.forward(cx, x));
        let shortcut_only = run_train(&mut reg, x, |cx, x| {
            let s = stem.sc.forward(cx, x)?;
            let s = stem.sc_bn.forward(cx, s)?;
            stem.se.forward(cx, s)
        });
        assert_eq!(full, shortcut_only);
    }

    #[test]
    fn encoder_halves_resolution() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let enc = EncoderBlock::new(&mut reg, "enc1", 4, 8, 2, &mut s);
        let x = Tensor::randn(Shape::nchw(1, 4, 16, 16), &mut s);
        let y = run_train(&mut reg, x, |cx, x| enc.forward(cx, x));
        assert_eq!(y.shape().as_nchw(), Some((1, 8, 8, 8)));
    }

    #[test]
    fn encoder_rejects_odd_input() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let enc = EncoderBlock::new(&mut reg, "enc1", 2, 4, 2, &mut s);
        let x = Tensor::randn(Shape::nchw(1, 2, 15, 16), &mut s);
        let mut cx = ForwardCx::new(&mut reg, Mode::Train);
        let xv = cx.tape.constant(x);
        let msg = enc.forward(&mut cx, xv).unwrap_err().to_string();
        assert!(msg.contains("even"), "{msg}");
    }

    #[test]
    fn se_with_zero_weights_halves_the_input() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let se = SqueezeExcite::new(&mut reg, "se", 4, 2, &mut s);
        for id in [se.w1.w, se.w1.b.unwrap(), se.w2.w, se.w2.b.unwrap()] {
            let z = Tensor::zeros(reg.param(id).value.shape().clone());
            reg.param_mut(id).value = z;
        }
        let x = Tensor::randn(Shape::nchw(1, 4, 4, 4), &mut s);
        let y = run_train(&mut reg, x.clone(), |cx, x| se.forward(cx, x));
        let expect = x.map(|v| v * 0.5);
        assert_eq!(y, expect);
    }

    #[test]
    fn se_never_amplifies() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let se = SqueezeExcite::new(&mut reg, "se", 4, 2, &mut s);
        let x = Tensor::randn(Shape::nchw(2, 4, 5, 5), &mut s);
        let y = run_train(&mut reg, x.clone(), |cx, x| se.forward(cx, x));
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(a.abs() <= b.abs(), "gate must stay below 1: {a} vs {b}");
        }
    }

    #[test]
    fn aspp_clamps_rates_to_the_feature_map() {
        let rates = [1, 6, 12, 18];
        let expect = [
            (2usize, vec![1]),  // everything dropped, rate-1 fallback
            (8, vec![1]),
            (16, vec![1, 6]),
            (32, vec![1, 6, 12]),
            (64, vec![1, 6, 12, 18]),
        ];
        for (hw, kept) in expect {
            let mut reg = Registry::<f64>::new();
            let mut s = stream();
            let aspp = Aspp::new(&mut reg, "aspp", 4, 4, &rates, hw, &mut s);
            assert_eq!(aspp.rates(), kept, "at {hw}px");
        }
    }

    #[test]
    fn aspp_preserves_shape() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let aspp = Aspp::new(&mut reg, "aspp", 4, 6, &[1, 6], 16, &mut s);
        let x = Tensor::randn(Shape::nchw(1, 4, 16, 16), &mut s);
        let y = run_train(&mut reg, x, |cx, x| aspp.forward(cx, x));
        assert_eq!(y.shape().as_nchw(), Some((1, 6, 16, 16)));
    }

    #[test]
    fn aspp_constant_field_interior_matches_tap_count() {
        // All-ones kernels on a constant-1 field: each dilated 3x3 branch
        // sums 9·cin at interior positions; identity BN divides by
        // sqrt(1+eps); an identity fuse then adds the branches.
        let cin = 4;
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let aspp = Aspp::new(&mut reg, "aspp", cin, cin, &[1, 6], 16, &mut s);
        for branch in &aspp.branches {
            let ones = Tensor::full(reg.param(branch.conv.w).value.shape().clone(), 1.0);
            reg.param_mut(branch.conv.w).value = ones;
            reg.bn_mut(branch.bn.bn).state = BnState {
                running_mean: vec![0.0; cin],
                running_var: vec![1.0; cin],
                initialized: true,
            };
        }
        let eye = Tensor::from_fn(Shape::nchw(cin, cin, 1, 1), |i| {
            if i / cin == i % cin {
                1.0
            } else {
                0.0
            }
        });
        reg.param_mut(aspp.fuse.w).value = eye;

        let x = Tensor::full(Shape::nchw(1, cin, 16, 16), 1.0);
        let mut cx = ForwardCx::new(&mut reg, Mode::Infer);
        let xv = cx.tape.constant(x);
        let y = aspp.forward(&mut cx, xv).unwrap();
        let y = cx.tape.value(y);
        // interior w.r.t. the largest kept rate (6): row=col=8
        let got = y.data()[y.offset4(0, 0, 8, 8)];
        let expect = 2.0 * 9.0 * cin as f64 / (1.0 + BN_EPS).sqrt();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn attention_with_unit_map_passes_d_through() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let att = AttentionBlock::new(&mut reg, "att", 2, 4, &mut s);
        let zero_w = Tensor::zeros(reg.param(att.a_pre.conv.w).value.shape().clone());
        reg.param_mut(att.a_pre.conv.w).value = zero_w;
        let b = att.a_pre.conv.b.unwrap();
        let ones_b = Tensor::full(reg.param(b).value.shape().clone(), 1.0);
        reg.param_mut(b).value = ones_b;

        let e = Tensor::randn(Shape::nchw(1, 2, 8, 8), &mut s);
        let d = Tensor::randn(Shape::nchw(1, 4, 4, 4), &mut s);
        let mut cx = ForwardCx::new(&mut reg, Mode::Train);
        let ev = cx.tape.constant(e);
        let dv = cx.tape.constant(d.clone());
        let y = att.forward(&mut cx, ev, dv).unwrap();
        assert_eq!(cx.tape.value(y), &d);
    }

    #[test]
    fn attention_rejects_wrong_ratio() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let att = AttentionBlock::new(&mut reg, "att", 2, 4, &mut s);
        let e = Tensor::<f64>::zeros(Shape::nchw(1, 2, 6, 6));
        let d = Tensor::<f64>::zeros(Shape::nchw(1, 4, 4, 4));
        let mut cx = ForwardCx::new(&mut reg, Mode::Train);
        let ev = cx.tape.constant(e);
        let dv = cx.tape.constant(d);
        let msg = att.forward(&mut cx, ev, dv).unwrap_err().to_string();
        assert!(msg.contains("2x"), "{msg}");
    }

    #[test]
    fn decoder_doubles_resolution_to_the_skip() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let dec = DecoderBlock::new(&mut reg, "dec1", 4, 8, 6, &mut s);
        let e = Tensor::randn(Shape::nchw(1, 4, 8, 8), &mut s);
        let d = Tensor::randn(Shape::nchw(1, 8, 4, 4), &mut s);
        let mut cx = ForwardCx::new(&mut reg, Mode::Train);
        let ev = cx.tape.constant(e);
        let dv = cx.tape.constant(d);
        let y = dec.forward(&mut cx, ev, dv).unwrap();
        assert_eq!(cx.tape.value(y).shape().as_nchw(), Some((1, 6, 8, 8)));
    }

    #[test]
    fn double_conv_preserves_shape() {
        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        let dc = DoubleConv::new(&mut reg, "down1", 3, 8, &mut s);
        let x = Tensor::randn(Shape::nchw(1, 3, 12, 12), &mut s);
        let y = run_train(&mut reg, x, |cx, x| dc.forward(cx, x));
        assert_eq!(y.shape().as_nchw(), Some((1, 8, 12, 12)));
    }

    #[test]
    fn parameter_counts_match_closed_forms() {
        // convb carries a bias; convnb feeds a batchnorm and has none.
        let convb = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let convnb = |cin: usize, cout: usize, k: usize| cout * cin * k * k;
        let bn = |c: usize| 2 * c;
        let se = |c: usize, r: usize| convb(c, c / r, 1) + convb(c / r, c, 1);

        let mut reg = Registry::<f64>::new();
        let mut s = stream();
        Stem::new(&mut reg, "stem", 3, 8, 4, &mut s);
        let stem_expect =
            convnb(3, 8, 3) + bn(8) + convb(8, 8, 3) + convnb(3, 8, 1) + bn(8) + se(8, 4);
        assert_eq!(reg.total_values(), stem_expect);

        let mut reg = Registry::<f64>::new();
        EncoderBlock::new(&mut reg, "enc", 8, 16, 4, &mut s);
        let enc_expect = bn(8)
            + convnb(8, 16, 3)
            + bn(16)
            + convb(16, 16, 3)
            + convnb(8, 16, 1)
            + bn(16)
            + se(16, 4);
        assert_eq!(reg.total_values(), enc_expect);

        let mut reg = Registry::<f64>::new();
        Aspp::new(&mut reg, "aspp", 16, 32, &[1, 6], 16, &mut s);
        let aspp_expect = 2 * (convnb(16, 32, 3) + bn(32)) + convb(32, 32, 1);
        assert_eq!(reg.total_values(), aspp_expect);

        let mut reg = Registry::<f64>::new();
        DecoderBlock::new(&mut reg, "dec", 4, 8, 6, &mut s);
        let att = bn(4) + convnb(4, 8, 3) + bn(8) + convnb(8, 8, 3) + bn(8) + convb(8, 8, 3);
        let ccat = 8 + 4;
        let dec_expect = att
            + bn(ccat)
            + convnb(ccat, 6, 3)
            + bn(6)
            + convb(6, 6, 3)
            + convnb(ccat, 6, 1)
            + bn(6);
        assert_eq!(reg.total_values(), dec_expect);

        let mut reg = Registry::<f64>::new();
        DoubleConv::new(&mut reg, "down", 3, 8, &mut s);
        assert_eq!(
            reg.total_values(),
            convnb(3, 8, 3) + bn(8) + convnb(8, 8, 3) + bn(8)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        // Shape contracts over random power-of-two sizes and widths.
        #[test]
        fn block_shape_contracts_hold(
            exp in 3u32..=6,
            cin in 1usize..=3,
            half_f0 in 1usize..=3,
        ) {
            let size = 1usize << exp; // 8..64
            let f0 = 2 * half_f0;
            let f1 = 2 * f0;
            let mut reg = Registry::<f64>::new();
            let mut s = stream();
            let stem = Stem::new(&mut reg, "stem", cin, f0, 2, &mut s);
            let enc = EncoderBlock::new(&mut reg, "enc1", f0, f1, 2, &mut s);
            let dec = DecoderBlock::new(&mut reg, "dec1", f0, f1, f0, &mut s);
            let x = Tensor::randn(Shape::nchw(1, cin, size, size), &mut s);

            let mut cx = ForwardCx::new(&mut reg, Mode::Train);
            let xv = cx.tape.constant(x);
            let s0 = stem.forward(&mut cx, xv).unwrap();
            prop_assert_eq!(cx.tape.value(s0).shape().as_nchw(), Some((1, f0, size, size)));
            let e1 = enc.forward(&mut cx, s0).unwrap();
            prop_assert_eq!(cx.tape.value(e1).shape().as_nchw(), Some((1, f1, size / 2, size / 2)));
            let d1 = dec.forward(&mut cx, s0, e1).unwrap();
            prop_assert_eq!(cx.tape.value(d1).shape().as_nchw(), Some((1, f0, size, size)));
        }
    }
}
