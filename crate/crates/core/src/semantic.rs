//! Text-guided feature modulation.
//!
//! A frozen embedding provider maps a rendered class prompt to a vector, a
//! shared trainable adapter refines it, and a per-network fusion MLP turns
//! `[w ; f_img]` into two per-channel offsets that are broadcast onto the
//! pre-classification features before the final 1x1x1 conv.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{self, Act, ConvKind, ConvSaved};
use crate::nn::params::{fill_normal, ParamLayout};
use crate::seed::mix64;

pub const CLS_PLACEHOLDERS: [&str; 2] = ["[CLS]", "[cls]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPrompt {
    pub template: String,
    pub cls_name: String,
}

impl TextPrompt {
    pub fn new(template: impl Into<String>, cls_name: impl Into<String>) -> Self {
        Self {
            template: template.into(),
            cls_name: cls_name.into(),
        }
    }

    pub fn render(&self) -> Result<String> {
        let mut s = self.template.clone();
        for p in CLS_PLACEHOLDERS {
            s = s.replace(p, &self.cls_name);
        }
        if CLS_PLACEHOLDERS.iter().any(|p| s.contains(p)) {
            return Err(Error::Config(format!("prompt {s:?} still contains a class placeholder")));
        }
        Ok(s)
    }
}

/// The shipped prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptPreset {
    /// No text: the fusion MLP sees a zero text vector.
    None,
    Photo,
    CtMri,
    #[default]
    Background,
}

impl PromptPreset {
    pub const ALL: [PromptPreset; 4] = [
        PromptPreset::None,
        PromptPreset::Photo,
        PromptPreset::CtMri,
        PromptPreset::Background,
    ];

    pub fn template(self) -> Option<&'static str> {
        match self {
            PromptPreset::None => None,
            PromptPreset::Photo => Some("A photo of a [cls]."),
            PromptPreset::CtMri => Some(
                "There is a [cls] in this computerized tomography/magnetic resonance imaging.",
            ),
            PromptPreset::Background => {
                Some("An image containing the [cls], with the rest being background.")
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptPreset::None => "none",
            PromptPreset::Photo => "photo",
            PromptPreset::CtMri => "ct-mri",
            PromptPreset::Background => "background",
        }
    }
}

impl fmt::Display for PromptPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PromptPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt preset {s:?}")))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic unit vector for a prompt.
///
/// State starts at `fnv1a64(prompt) ^ mix64(seed)`; a SplitMix64 stream
/// supplies uniform pairs `(u1, u2)` in `(0, 1]` from the top 53 bits, each
/// pair gives one normal `sqrt(-2 ln u1) * cos(2 pi u2)`, and the result is
/// scaled to unit length.
pub fn stub_embedding(prompt: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut state = fnv1a64(prompt.as_bytes()) ^ mix64(seed);
    let mut next_uniform = || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let z = mix64(state.wrapping_sub(0x9E37_79B9_7F4A_7C15));
        ((z >> 11) as f64 + 1.0) / (1u64 << 53) as f64
    };
    let mut v: Vec<f64> = (0..dim)
        .map(|_| {
            let u1 = next_uniform();
            let u2 = next_uniform();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    #[default]
    Stub,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub dim: usize,
    pub seed: u64,
    /// JSON object mapping rendered prompts to vectors (file kind only).
    pub path: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Stub,
            dim: 512,
            seed: 0,
            path: None,
        }
    }
}

/// Frozen text encoder stand-in. Holds no trainable state.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingProvider {
    Stub { dim: usize, seed: u64 },
    File { dim: usize, table: BTreeMap<String, Vec<f64>> },
}

impl EmbeddingProvider {
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        match cfg.kind {
            ProviderKind::Stub => Ok(Self::Stub {
                dim: cfg.dim,
                seed: cfg.seed,
            }),
            ProviderKind::File => {
                let path = cfg.path.as_ref().ok_or_else(|| {
                    Error::Config("file embedding provider requires a path".into())
                })?;
                Self::from_file(path, cfg.dim)
            }
        }
    }

    pub fn from_file(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_table(table, dim)
    }

    pub fn from_table(table: BTreeMap<String, Vec<f64>>, dim: usize) -> Result<Self> {
        for (k, v) in &table {
            if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!(
                    "embedding for {k:?} must have {dim} finite entries, has {}",
                    v.len()
                )));
            }
        }
        Ok(Self::File { dim, table })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Stub { dim, .. } | Self::File { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, prompt: &TextPrompt) -> Result<Vec<f64>> {
        let key = prompt.render()?;
        match self {
            Self::Stub { dim, seed } => Ok(stub_embedding(&key, *seed, *dim)),
            Self::File { table, .. } => table.get(&key).cloned().ok_or_else(|| Error::Embedding {
                key,
                available: table.keys().cloned().collect(),
            }),
        }
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    layout: ParamLayout,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Vec<f64>,
    h: Vec<f64>,
}

impl Mlp {
    /// He-normal first layer, zero biases; the second layer is zero when
    /// `zero_output` is set, He-normal otherwise.
    pub fn new(prefix: &str, in_dim: usize, hidden: usize, out_dim: usize, zero_output: bool, rng: &mut impl Rng) -> Self {
        let mut layout = ParamLayout::new();
        let w1 = layout.push(format!("{prefix}.fc1.weight"), &[hidden, in_dim]);
        let b1 = layout.push(format!("{prefix}.fc1.bias"), &[hidden]);
        let w2 = layout.push(format!("{prefix}.fc2.weight"), &[out_dim, hidden]);
        let b2 = layout.push(format!("{prefix}.fc2.bias"), &[out_dim]);
        let mut params = vec![0.0; layout.len()];
        fill_normal(&mut params[w1.clone()], (2.0 / in_dim as f64).sqrt(), rng);
        if !zero_output {
            fill_normal(&mut params[w2.clone()], (2.0 / hidden as f64).sqrt(), rng);
        }
        Self {
            in_dim,
            hidden,
            out_dim,
            layout,
            w1,
            b1,
            w2,
            b2,
            params,
        }
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

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "MLP expects input length {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let p = &self.params;
        let h: Vec<f64> = affine(&p[self.w1.clone()], &p[self.b1.clone()], x)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let y = affine(&p[self.w2.clone()], &p[self.b2.clone()], &h);
        Ok((y, MlpCache { x: x.to_vec(), h }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let p = &self.params;
        let w2 = &p[self.w2.clone()];
        let mut dh = vec![0.0; self.hidden];
        for (o, &g) in dy.iter().enumerate() {
            grads[self.b2.start + o] += g;
            let row = &mut grads[self.w2.start + o * self.hidden..][..self.hidden];
            for (gw, &h) in row.iter_mut().zip(&cache.h) {
                *gw += g * h;
            }
            for (d, &w) in dh.iter_mut().zip(&w2[o * self.hidden..][..self.hidden]) {
                *d += g * w;
            }
        }
        for (d, &h) in dh.iter_mut().zip(&cache.h) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let w1 = &p[self.w1.clone()];
        let mut dx = vec![0.0; self.in_dim];
        for (j, &g) in dh.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads[self.b1.start + j] += g;
            let row = &mut grads[self.w1.start + j * self.in_dim..][..self.in_dim];
            for (gw, &x) in row.iter_mut().zip(&cache.x) {
                *gw += g * x;
            }
            for (d, &w) in dx.iter_mut().zip(&w1[j * self.in_dim..][..self.in_dim]) {
                *d += g * w;
            }
        }
        dx
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + w[o * x.len()..][..x.len()].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Bottleneck adapter `dim -> dim/4 -> dim`, shared by all sub-networks.
pub fn new_adapter(dim: usize, rng: &mut impl Rng) -> Result<Mlp> {
    if dim < 4 {
        return Err(Error::Config(format!("embedding dim must be >= 4, got {dim}")));
    }
    Ok(Mlp::new("adapter", dim, dim / 4, dim, false, rng))
}

/// Per-network fusion MLP `[w ; f_img] -> 2 * C_theta`, output layer zeroed
/// so modulation starts at the identity.
pub fn new_fusion_mlp(role: &str, dim: usize, f_img_dim: usize, theta_dim: usize, rng: &mut impl Rng) -> Mlp {
    Mlp::new(&format!("fusion_{role}"), dim + f_img_dim, dim, 2 * theta_dim, true, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalParams {
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
}

impl CrossModalParams {
    pub fn zeros(c: usize) -> Self {
        Self {
            gamma1: vec![0.0; c],
            gamma2: vec![0.0; c],
        }
    }
}

/// Concatenates `[w ; f_img]` and splits the MLP output into two halves.
pub fn fuse(mlp: &Mlp, w: &[f64], f_img: &[f64]) -> Result<(CrossModalParams, MlpCache)> {
    let x: Vec<f64> = w.iter().chain(f_img).copied().collect();
    let (y, cache) = mlp.forward(&x)?;
    if y.len() % 2 != 0 {
        return Err(Error::Shape(format!("fusion output length {} is odd", y.len())));
    }
    let (g1, g2) = y.split_at(y.len() / 2);
    Ok((
        CrossModalParams {
            gamma1: g1.to_vec(),
            gamma2: g2.to_vec(),
        },
        cache,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `Θ + γ1 + γ2`
    #[default]
    Additive,
    /// `(1 + γ1) Θ + γ2`
    Film,
}

/// Modulated features fed to the classifier.
pub fn modulate(theta: &Act, gamma: &CrossModalParams, mode: FusionMode) -> Result<Act> {
    let c = theta.channels;
    if gamma.gamma1.len() != c || gamma.gamma2.len() != c {
        return Err(Error::Shape(format!(
            "gamma length {}/{} does not match {c} feature channels",
            gamma.gamma1.len(),
            gamma.gamma2.len()
        )));
    }
    let mut out = theta.clone();
    for ch in 0..c {
        let (g1, g2) = (gamma.gamma1[ch], gamma.gamma2[ch]);
        let plane = out.channel_mut(ch);
        match mode {
            FusionMode::Additive => {
                let s = g1 + g2;
                for v in plane {
                    *v += s;
                }
            }
            FusionMode::Film => {
                for v in plane {
                    *v = (1.0 + g1) * *v + g2;
                }
            }
        }
    }
    Ok(out)
}

/// `Conv1x1(modulate(Θ, γ))`.
pub fn classify_fused(theta: &Act, gamma: &CrossModalParams, w: &[f64], b: &[f64], mode: FusionMode) -> Result<Act> {
    let cout = b.len();
    if w.len() != cout * theta.channels {
        return Err(Error::Shape(format!(
            "classifier expects {} input channels, features have {}",
            w.len() / cout.max(1),
            theta.channels
        )));
    }
    let m = modulate(theta, gamma, mode)?;
    Ok(kernels::conv_forward(ConvKind::K1, &m, w, b, cout, false).0)
}

/// Gradients of [`classify_fused`].
#[derive(Debug, Clone)]
pub struct FusedGrads {
    pub d_theta: Act,
    pub d_gamma: CrossModalParams,
}

/// Backward of [`classify_fused`]: accumulates classifier weight/bias
/// gradients into `dw`/`db` and returns gradients for Θ and γ.
#[allow(clippy::too_many_arguments)]
pub fn classify_fused_backward(
    theta: &Act,
    gamma: &CrossModalParams,
    w: &[f64],
    mode: FusionMode,
    dlogits: &Act,
    dw: &mut [f64],
    db: &mut [f64],
) -> Result<FusedGrads> {
    let m = modulate(theta, gamma, mode)?;
    let dm = kernels::conv_backward(
        ConvKind::K1,
        &ConvSaved::Input(m),
        theta.channels,
        theta.dims,
        w,
        dlogits,
        dw,
        db,
        true,
    )
    .expect("input gradient requested");
    let c = theta.channels;
    let mut d_gamma = CrossModalParams::zeros(c);
    let mut d_theta = dm.clone();
    for ch in 0..c {
        let g = dm.channel(ch);
        let sum: f64 = g.iter().sum();
        d_gamma.gamma2[ch] = sum;
        match mode {
            FusionMode::Additive => d_gamma.gamma1[ch] = sum,
            FusionMode::Film => {
                d_gamma.gamma1[ch] = g.iter().zip(theta.channel(ch)).map(|(a, t)| a * t).sum();
                let s = 1.0 + gamma.gamma1[ch];
                for v in d_theta.channel_mut(ch) {
                    *v *= s;
                }
            }
        }
    }
    Ok(FusedGrads { d_theta, d_gamma })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticConfig {
    pub enabled: bool,
    pub prompt: PromptPreset,
    pub cls_name: String,
    pub provider: ProviderConfig,
    pub fusion: FusionMode,
    /// Computes the fusion path but replaces γ with zeros and blocks its
    /// gradient.
    pub force_zero_gamma: bool,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            prompt: PromptPreset::Background,
            cls_name: "foreground organ".into(),
            provider: ProviderConfig::default(),
            fusion: FusionMode::Additive,
            force_zero_gamma: false,
        }
    }
}

impl SemanticConfig {
    /// Raw (pre-adapter) text vector, or `None` for the text-free preset.
    pub fn raw_embedding(&self) -> Result<Option<Vec<f64>>> {
        let Some(template) = self.prompt.template() else {
            return Ok(None);
        };
        let provider = EmbeddingProvider::from_config(&self.provider)?;
        let v = provider.embed(&TextPrompt::new(template, self.cls_name.clone()))?;
        Ok(Some(v))
    }
}
