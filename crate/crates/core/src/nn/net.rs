//! A small 3D encoder-decoder in the V-Net family.
//!
//! Level `l` carries `base_channels * 2^l` channels at `1 / 2^l` resolution.
//! The encoder is a 3x3x3 conv per level with strided 2x2x2 convs between
//! levels; the decoder mirrors it with transposed convs and additive skips.
//! Dropout sits on the deepest encoder level and on the bottleneck, so
//! everything above that point is deterministic and can be shared across
//! Monte-Carlo passes.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, Act, ConvKind, ConvSaved};
use super::params::{fill_normal, ParamLayout};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    /// Decoder levels at or above this use 3x3x3 convs; finer levels use
    /// 1x1x1 convs to keep full-resolution cost down.
    pub decoder_k3_from_level: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_channels: 8,
            depth: 3,
            dropout_rate: 0.5,
            decoder_k3_from_level: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 || self.num_classes != 2 {
            return Err(Error::Config(
                "only single-channel input and two classes are supported".into(),
            ));
        }
        if self.base_channels == 0 || self.depth == 0 || self.depth > 5 {
            return Err(Error::Config(format!(
                "base_channels must be >= 1 and depth in 1..=5 (got {}, {})",
                self.base_channels, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels of the pre-classification feature map.
    pub fn feature_dim(&self) -> usize {
        self.base_channels
    }

    /// Length of the pooled bottleneck feature.
    pub fn bottleneck_dim(&self) -> usize {
        self.channels(self.depth)
    }

    pub fn required_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input_dims(&self, dims: [usize; 3]) -> Result<()> {
        let m = self.required_multiple();
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::Shape(format!(
                "input shape {dims:?} must be a positive multiple of {m} on every axis (depth {})",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn decoder_kind(&self, level: usize) -> ConvKind {
        if level >= self.decoder_k3_from_level {
            ConvKind::K3
        } else {
            ConvKind::K1
        }
    }

    /// Closed-form parameter count, independent of the layout builder.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, taps: usize| cin * cout * taps + cout;
        let c = |l| self.channels(l);
        let mut n = conv(self.in_channels, c(0), 27);
        for l in 1..=self.depth {
            n += conv(c(l - 1), c(l), 8) + conv(c(l), c(l), 27);
        }
        for l in 0..self.depth {
            n += conv(c(l + 1), c(l), 8) + conv(c(l), c(l), self.decoder_kind(l).taps());
        }
        n + conv(c(0), self.num_classes, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout off; deterministic.
    Eval,
    /// Dropout on, masks keyed by `seed`.
    Train { seed: u64 },
    /// Dropout on, masks keyed by `seed`; gradients are never requested.
    McDropout { seed: u64 },
}

impl ForwardMode {
    fn dropout_seed(self) -> Option<u64> {
        match self {
            ForwardMode::Eval => None,
            ForwardMode::Train { seed } | ForwardMode::McDropout { seed } => Some(seed),
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    kind: ConvKind,
    cin: usize,
    cout: usize,
    w: Range<usize>,
    b: Range<usize>,
}

/// Output of the network for one volume.
#[derive(Debug, Clone)]
pub struct ForwardTaps {
    pub logits: Act,
    pub theta: Act,
    pub f_img: Vec<f64>,
}

/// Features before the classifier.
#[derive(Debug, Clone)]
pub struct Features {
    pub theta: Act,
    pub f_img: Vec<f64>,
}

/// Deterministic encoder activations up to (not including) the first dropout.
#[derive(Debug, Clone)]
pub struct Prefix {
    enc: Vec<Act>,
    saved: Option<PrefixSaved>,
}

#[derive(Debug, Clone)]
struct PrefixSaved {
    enc_conv: Vec<ConvSaved>,
    down: Vec<ConvSaved>,
    down_out: Vec<Act>,
}

#[derive(Debug, Clone)]
struct SuffixSaved {
    mask_e: Option<Vec<f64>>,
    down_b: ConvSaved,
    b0: Act,
    bott: ConvSaved,
    b: Act,
    mask_b: Option<Vec<f64>>,
    up: Vec<Option<ConvSaved>>,
    u: Vec<Option<Act>>,
    dec: Vec<Option<ConvSaved>>,
    d: Vec<Option<Act>>,
}

/// Everything the backward pass needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    prefix: Prefix,
    suffix: SuffixSaved,
}

#[derive(Debug, Clone)]
pub struct SegNet {
    cfg: NetConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    enc: Vec<Layer>,
    down: Vec<Layer>,
    up: Vec<Layer>,
    dec: Vec<Layer>,
    cls: Layer,
}

impl SegNet {
    /// Builds a network with He-normal weights and zero biases.
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::new();
        let mut layer = |name: String, kind: ConvKind, cin: usize, cout: usize| {
            let wshape = match kind {
                ConvKind::K3 => vec![cout, cin, 3, 3, 3],
                ConvKind::K1 => vec![cout, cin],
                ConvKind::Down => vec![cout, cin, 2, 2, 2],
                ConvKind::Up => vec![cout, 8, cin],
            };
            let w = layout.push(format!("{name}.weight"), &wshape);
            let b = layout.push(format!("{name}.bias"), &[cout]);
            Layer {
                kind,
                cin,
                cout,
                w,
                b,
            }
        };
        let c = |l| cfg.channels(l);
        let mut enc = vec![layer("enc0".into(), ConvKind::K3, cfg.in_channels, c(0))];
        let mut down = Vec::new();
        for l in 1..=cfg.depth {
            down.push(layer(format!("down{l}"), ConvKind::Down, c(l - 1), c(l)));
            enc.push(layer(format!("enc{l}"), ConvKind::K3, c(l), c(l)));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.depth {
            up.push(layer(format!("up{l}"), ConvKind::Up, c(l + 1), c(l)));
            dec.push(layer(format!("dec{l}"), cfg.decoder_kind(l), c(l), c(l)));
        }
        let cls = layer("cls".into(), ConvKind::K1, c(0), cfg.num_classes);

        let mut params = vec![0.0; layout.len()];
        let mut rng = rng_for(seed, &[tag::INIT]);
        for l in enc.iter().chain(&down).chain(&up).chain(&dec).chain([&cls]) {
            let fan_in = match l.kind {
                ConvKind::Up => l.cin,
                k => l.cin * k.taps(),
            };
            fill_normal(&mut params[l.w.clone()], (2.0 / fan_in as f64).sqrt(), &mut rng);
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            params,
            enc,
            down,
            up,
            dec,
            cls,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Classifier weights `[classes][C_theta]` and bias.
    pub fn classifier(&self) -> (&[f64], &[f64]) {
        (&self.params[self.cls.w.clone()], &self.params[self.cls.b.clone()])
    }

    /// Ranges of the classifier weight and bias inside the flat vector.
    pub fn classifier_ranges(&self) -> (Range<usize>, Range<usize>) {
        (self.cls.w.clone(), self.cls.b.clone())
    }

    fn run(&self, l: &Layer, x: &Act, save: bool) -> (Act, Option<ConvSaved>) {
        let (mut y, saved) = kernels::conv_forward(
            l.kind,
            x,
            &self.params[l.w.clone()],
            &self.params[l.b.clone()],
            l.cout,
            save,
        );
        kernels::relu_inplace(&mut y);
        (y, saved)
    }

    fn back(&self, l: &Layer, saved: &ConvSaved, in_dims: [usize; 3], dout: &Act, grads: &mut [f64], need: bool) -> Option<Act> {
        let (gw, gb) = split_two(grads, l.w.clone(), l.b.clone());
        kernels::conv_backward(
            l.kind,
            saved,
            l.cin,
            in_dims,
            &self.params[l.w.clone()],
            dout,
            gw,
            gb,
            need,
        )
    }

    /// Runs the encoder up to the deepest encoder level, before its dropout.
    pub fn encode_prefix(&self, x: &Act, save: bool) -> Result<Prefix> {
        self.cfg.check_input_dims(x.dims)?;
        if x.channels != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channel(s), got {}",
                self.cfg.in_channels, x.channels
            )));
        }
        let depth = self.cfg.depth;
        let mut enc_out = Vec::with_capacity(depth);
        let mut enc_conv = Vec::new();
        let mut down = Vec::new();
        let mut down_out = Vec::new();
        let (e0, s0) = self.run(&self.enc[0], x, save);
        enc_conv.extend(s0);
        enc_out.push(e0);
        for l in 1..depth {
            let (h, sd) = self.run(&self.down[l - 1], &enc_out[l - 1], save);
            let (e, se) = self.run(&self.enc[l], &h, save);
            down.extend(sd);
            enc_conv.extend(se);
            if save {
                down_out.push(h);
            }
            enc_out.push(e);
        }
        Ok(Prefix {
            enc: enc_out,
            saved: save.then_some(PrefixSaved {
                enc_conv,
                down,
                down_out,
            }),
        })
    }

    fn dropout_mask(&self, seed: u64, site: u64, len: usize) -> Option<Vec<f64>> {
        let p = self.cfg.dropout_rate;
        if p == 0.0 {
            return None;
        }
        let scale = 1.0 / (1.0 - p);
        let mut rng = rng_for(derive_seed(seed, &[tag::DROPOUT]), &[site]);
        Some(
            (0..len)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
                .collect(),
        )
    }

    fn apply_mask(a: &Act, mask: Option<&Vec<f64>>) -> Act {
        match mask {
            None => a.clone(),
            Some(m) => Act {
                channels: a.channels,
                dims: a.dims,
                data: a.data.iter().zip(m).map(|(v, s)| v * s).collect(),
            },
        }
    }

    fn suffix(&self, prefix: &Prefix, mode: ForwardMode, save: bool) -> (Features, Option<SuffixSaved>) {
        let depth = self.cfg.depth;
        let seed = mode.dropout_seed();
        let e_last = &prefix.enc[depth - 1];
        let mask_e = seed.and_then(|s| self.dropout_mask(s, 0, e_last.data.len()));
        let e_drop = Self::apply_mask(e_last, mask_e.as_ref());

        let (b0, down_b) = self.run(&self.down[depth - 1], &e_drop, save);
        let (b, bott) = self.run(&self.enc[depth], &b0, save);
        let f_img = b.global_average();
        let mask_b = seed.and_then(|s| self.dropout_mask(s, 1, b.data.len()));
        let mut d = Self::apply_mask(&b, mask_b.as_ref());

        let mut up_s = vec![None; depth];
        let mut u_s = vec![None; depth];
        let mut dec_s = vec![None; depth];
        let mut d_s = vec![None; depth];
        for l in (0..depth).rev() {
            let (mut u, su) = self.run(&self.up[l], &d, save);
            if save {
                u_s[l] = Some(u.clone());
            }
            let skip = if l == depth - 1 { &e_drop } else { &prefix.enc[l] };
            u.add_assign(skip);
            let (dn, sdec) = self.run(&self.dec[l], &u, save);
            up_s[l] = su;
            dec_s[l] = sdec;
            if save {
                d_s[l] = Some(dn.clone());
            }
            d = dn;
        }
        let saved = save.then(|| SuffixSaved {
            mask_e,
            down_b: down_b.expect("saved"),
            b0,
            bott: bott.expect("saved"),
            b,
            mask_b,
            up: up_s,
            u: u_s,
            dec: dec_s,
            d: d_s,
        });
        (Features { theta: d, f_img }, saved)
    }

    /// Decoder and bottleneck pass from a shared prefix, without caching.
    pub fn features_from_prefix(&self, prefix: &Prefix, mode: ForwardMode) -> Features {
        self.suffix(prefix, mode, false).0
    }

    pub fn features(&self, x: &Act, mode: ForwardMode) -> Result<Features> {
        let prefix = self.encode_prefix(x, false)?;
        Ok(self.features_from_prefix(&prefix, mode))
    }

    /// Forward pass that keeps everything needed by [`SegNet::backward`].
    pub fn features_train(&self, x: &Act, mode: ForwardMode) -> Result<(Features, NetCache)> {
        let prefix = self.encode_prefix(x, true)?;
        Ok(self.features_train_from_prefix(prefix, mode))
    }

    /// As [`SegNet::features_train`], starting from a prefix computed with
    /// `save = true`.
    pub fn features_train_from_prefix(&self, prefix: Prefix, mode: ForwardMode) -> (Features, NetCache) {
        assert!(prefix.saved.is_some(), "prefix was computed without saved state");
        let (f, saved) = self.suffix(&prefix, mode, true);
        (
            f,
            NetCache {
                prefix,
                suffix: saved.expect("saved"),
            },
        )
    }

    /// Plain classification conv on the feature map.
    pub fn classify(&self, theta: &Act) -> Act {
        let (w, b) = self.classifier();
        kernels::conv_forward(ConvKind::K1, theta, w, b, self.cfg.num_classes, false).0
    }

    pub fn forward(&self, x: &Act, mode: ForwardMode) -> Result<ForwardTaps> {
        let f = self.features(x, mode)?;
        Ok(ForwardTaps {
            logits: self.classify(&f.theta),
            theta: f.theta,
            f_img: f.f_img,
        })
    }

    pub fn forward_batch(&self, xs: &[Act], mode: ForwardMode) -> Result<Vec<ForwardTaps>> {
        xs.iter().map(|x| self.forward(x, mode)).collect()
    }

    /// Backward through the classifier; accumulates its gradients and
    /// returns the gradient w.r.t. its input.
    pub fn classify_backward(&self, input: &Act, dlogits: &Act, grads: &mut [f64]) -> Act {
        let saved = ConvSaved::Input(input.clone());
        self.back(&self.cls, &saved, input.dims, dlogits, grads, true)
            .expect("input gradient requested")
    }

    /// Accumulates parameter gradients given gradients w.r.t. Θ and
    /// (optionally) the pooled bottleneck feature.
    pub fn backward(&self, cache: &NetCache, d_theta: &Act, d_fimg: Option<&[f64]>, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        let depth = self.cfg.depth;
        let s = &cache.suffix;
        let ps = cache.prefix.saved.as_ref().expect("prefix saved for training");
        let enc = &cache.prefix.enc;

        let mut skip_grads: Vec<Option<Act>> = vec![None; depth];
        let mut dd = d_theta.clone();
        for l in 0..depth {
            let d_out = s.d[l].as_ref().expect("saved");
            kernels::relu_backward(d_out, &mut dd);
            let u = s.u[l].as_ref().expect("saved");
            let ds = self
                .back(&self.dec[l], s.dec[l].as_ref().expect("saved"), u.dims, &dd, grads, true)
                .expect("input gradient");
            let mut du = ds.clone();
            kernels::relu_backward(u, &mut du);
            skip_grads[l] = Some(ds);
            let in_dims = kernels::half(u.dims);
            dd = self
                .back(&self.up[l], s.up[l].as_ref().expect("saved"), in_dims, &du, grads, true)
                .expect("input gradient");
        }

        // dd is now the gradient w.r.t. the dropped bottleneck.
        let mut db = dd;
        if let Some(m) = &s.mask_b {
            for (g, k) in db.data.iter_mut().zip(m) {
                *g *= k;
            }
        }
        if let Some(df) = d_fimg {
            let n = s.b.voxels() as f64;
            for (c, &g) in df.iter().enumerate() {
                for v in db.channel_mut(c) {
                    *v += g / n;
                }
            }
        }
        kernels::relu_backward(&s.b, &mut db);
        let mut db0 = self
            .back(&self.enc[depth], &s.bott, s.b0.dims, &db, grads, true)
            .expect("input gradient");
        kernels::relu_backward(&s.b0, &mut db0);
        let e_last = &enc[depth - 1];
        let mut de = self
            .back(&self.down[depth - 1], &s.down_b, e_last.dims, &db0, grads, true)
            .expect("input gradient");
        de.add_assign(skip_grads[depth - 1].as_ref().expect("skip"));
        if let Some(m) = &s.mask_e {
            for (g, k) in de.data.iter_mut().zip(m) {
                *g *= k;
            }
        }

        for l in (0..depth).rev() {
            kernels::relu_backward(&enc[l], &mut de);
            if l == 0 {
                self.back(&self.enc[0], &ps.enc_conv[0], enc[0].dims, &de, grads, false);
                break;
            }
            let h = &ps.down_out[l - 1];
            let mut dh = self
                .back(&self.enc[l], &ps.enc_conv[l], h.dims, &de, grads, true)
                .expect("input gradient");
            kernels::relu_backward(h, &mut dh);
            let mut prev = self
                .back(&self.down[l - 1], &ps.down[l - 1], enc[l - 1].dims, &dh, grads, true)
                .expect("input gradient");
            prev.add_assign(skip_grads[l - 1].as_ref().expect("skip"));
            de = prev;
        }
    }
}

/// Two disjoint mutable sub-slices of `v`.
pub(crate) fn split_two(v: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start || b.end <= a.start, "ranges overlap");
    if a.start < b.start {
        let (lo, hi) = v.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = v.split_at_mut(a.start);
        (&mut hi[..a.end - a.start], &mut lo[b])
    }
}

/// Wraps a volume as a single-channel activation.
pub fn volume_input(v: &crate::volume::Volume) -> Act {
    Act::from_vec(1, v.grid().dims(), v.to_f64())
}

/// Three independently initialized networks of identical architecture.
pub fn init_triplet(cfg: &NetConfig, seeds: [u64; 3]) -> Result<[SegNet; 3]> {
    if seeds[0] == seeds[1] || seeds[0] == seeds[2] || seeds[1] == seeds[2] {
        return Err(Error::Config(format!(
            "sub-network seeds must be pairwise distinct, got {seeds:?}"
        )));
    }
    Ok([
        SegNet::new(cfg, seeds[0])?,
        SegNet::new(cfg, seeds[1])?,
        SegNet::new(cfg, seeds[2])?,
    ])
}
