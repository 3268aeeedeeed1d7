//! Losses over two-class probability maps and the training schedules.
//!
//! Every loss takes the per-voxel foreground probability `p` (background is
//! `1 - p`) and returns its value together with gradients w.r.t. both class
//! probabilities, which [`crate::nn::kernels::softmax2_backward`] maps onto
//! the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clamped inside logarithms.
pub const PROB_FLOOR: f64 = 1e-15;
pub const DICE_EPS: f64 = 1e-6;

/// Gradient w.r.t. the two class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrad {
    pub d_bg: Vec<f64>,
    pub d_fg: Vec<f64>,
}

impl ProbGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_bg: vec![0.0; n],
            d_fg: vec![0.0; n],
        }
    }

    pub fn add_scaled(&mut self, other: &ProbGrad, s: f64) {
        for (a, b) in self.d_bg.iter_mut().zip(&other.d_bg) {
            *a += s * b;
        }
        for (a, b) in self.d_fg.iter_mut().zip(&other.d_fg) {
            *a += s * b;
        }
    }
}

fn check_lens(p: &[f64], y: &[u8], w: &[f64]) -> Result<()> {
    if p.len() != y.len() || p.len() != w.len() {
        return Err(Error::Shape(format!(
            "loss inputs differ in length: p {}, labels {}, weights {}",
            p.len(),
            y.len(),
            w.len()
        )));
    }
    Ok(())
}

fn weight_sum(w: &[f64]) -> Result<f64> {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        Ok(s)
    } else {
        Err(Error::DegenerateWeight)
    }
}

#[inline]
fn neg_log(p: f64) -> (f64, f64) {
    if p < PROB_FLOOR {
        (-PROB_FLOOR.ln(), 0.0)
    } else {
        (-p.ln(), -1.0 / p)
    }
}

/// `-(1/Σw) Σ w_i log p_i[y_i]` over both classes.
pub fn weighted_ce(p: &[f64], y: &[u8], w: &[f64]) -> Result<(f64, ProbGrad)> {
    check_lens(p, y, w)?;
    let sw = weight_sum(w)?;
    let mut g = ProbGrad::zeros(p.len());
    let mut acc = 0.0;
    for i in 0..p.len() {
        if w[i] == 0.0 {
            continue;
        }
        let (pc, slot) = if y[i] == 1 {
            (p[i], &mut g.d_fg[i])
        } else {
            (1.0 - p[i], &mut g.d_bg[i])
        };
        let (v, d) = neg_log(pc);
        acc += w[i] * v;
        *slot = w[i] * d / sw;
    }
    Ok((acc / sw, g))
}

/// `1 - 2 Σ w p y / max(Σ w (p² + y²), ε)`.
pub fn weighted_dice(p: &[f64], y: &[u8], w: &[f64]) -> Result<(f64, ProbGrad)> {
    check_lens(p, y, w)?;
    weight_sum(w)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..p.len() {
        let yi = y[i] as f64;
        num += 2.0 * w[i] * p[i] * yi;
        den += w[i] * (p[i] * p[i] + yi * yi);
    }
    let mut g = ProbGrad::zeros(p.len());
    let value;
    if den > DICE_EPS {
        value = 1.0 - num / den;
        let d2 = den * den;
        for i in 0..p.len() {
            let yi = y[i] as f64;
            g.d_fg[i] = -(2.0 * w[i] * yi * den - num * 2.0 * w[i] * p[i]) / d2;
        }
    } else {
        value = 1.0 - num / DICE_EPS;
        for i in 0..p.len() {
            g.d_fg[i] = -2.0 * w[i] * y[i] as f64 / DICE_EPS;
        }
    }
    Ok((value, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupLoss {
    pub wce: f64,
    pub dice: f64,
    pub sup: f64,
    pub weight_sum: f64,
}

/// `½ WCE + ½ Dice`.
pub fn supervised_loss(p: &[f64], y: &[u8], w: &[f64]) -> Result<(SupLoss, ProbGrad)> {
    let (wce, gw) = weighted_ce(p, y, w)?;
    let (dice, gd) = weighted_dice(p, y, w)?;
    let mut g = ProbGrad::zeros(p.len());
    g.add_scaled(&gw, 0.5);
    g.add_scaled(&gd, 0.5);
    Ok((
        SupLoss {
            wce,
            dice,
            sup: 0.5 * wce + 0.5 * dice,
            weight_sum: w.iter().sum(),
        },
        g,
    ))
}

/// How the two peer terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TvdtCombine {
    #[default]
    Mean,
    Sum,
    /// Uses peer `t mod 2` only.
    Alternate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvdtLoss {
    pub value: f64,
    /// Per-peer masked CE; `None` when that peer's mask was empty.
    pub per_peer: [Option<f64>; 2],
    pub skipped: bool,
}

/// Masked CE of `p` against two peer pseudo labels, each with its own
/// selection mask. A peer whose mask is empty contributes zero.
pub fn tvdt_loss(
    p: &[f64],
    pseudo: [&[u8]; 2],
    masks: [&[f64]; 2],
    combine: TvdtCombine,
    t: u64,
) -> Result<(TvdtLoss, ProbGrad)> {
    let mut g = ProbGrad::zeros(p.len());
    let mut per_peer = [None, None];
    let coeff = |k: usize| match combine {
        TvdtCombine::Mean => 0.5,
        TvdtCombine::Sum => 1.0,
        TvdtCombine::Alternate => {
            if (t % 2) as usize == k {
                1.0
            } else {
                0.0
            }
        }
    };
    let mut value = 0.0;
    for k in 0..2 {
        check_lens(p, pseudo[k], masks[k])?;
        match weighted_ce(p, pseudo[k], masks[k]) {
            Ok((v, gk)) => {
                per_peer[k] = Some(v);
                let c = coeff(k);
                if c != 0.0 {
                    value += c * v;
                    g.add_scaled(&gk, c);
                }
            }
            Err(Error::DegenerateWeight) => {
                log::debug!("tvdt: peer {k} selected no voxels, term skipped");
            }
            Err(e) => return Err(e),
        }
    }
    let skipped = per_peer.iter().any(Option::is_none);
    Ok((
        TvdtLoss {
            value,
            per_peer,
            skipped,
        },
        g,
    ))
}

/// `(1 - α) sup + α tvdt`.
pub fn total_loss(sup: f64, tvdt: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * sup + alpha * tvdt
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    #[default]
    Dynamic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSchedule {
    pub alpha0: f64,
    pub step_every: u64,
    pub increment: f64,
    pub alpha_max: f64,
    pub mode: AlphaMode,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            alpha0: 0.1,
            step_every: 150,
            increment: 0.02,
            alpha_max: 0.9,
            mode: AlphaMode::Dynamic,
        }
    }
}

impl AlphaSchedule {
    pub fn fixed(alpha: f64) -> Self {
        Self {
            mode: AlphaMode::Fixed(alpha),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |a: f64| (0.0..1.0).contains(&a);
        let ok = match self.mode {
            AlphaMode::Dynamic => {
                self.step_every > 0
                    && in_unit(self.alpha0)
                    && in_unit(self.alpha_max)
                    && self.increment >= 0.0
            }
            AlphaMode::Fixed(a) => in_unit(a),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid alpha schedule {self:?}")))
        }
    }

    pub fn alpha(&self, t: u64) -> f64 {
        match self.mode {
            AlphaMode::Fixed(a) => a,
            AlphaMode::Dynamic => {
                (self.alpha0 + self.increment * (t / self.step_every) as f64).min(self.alpha_max)
            }
        }
    }
}

/// Polynomial decay with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base: f64,
    pub floor: f64,
    pub power: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.01,
            floor: 1e-4,
            power: 0.9,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, t: u64, total: u64) -> f64 {
        let frac = 1.0 - (t as f64 / total.max(1) as f64).min(1.0);
        (self.base * frac.powf(self.power)).max(self.floor)
    }
}

/// Per-role, per-iteration loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub l_wce: f64,
    pub l_dice: f64,
    pub l_sup: f64,
    pub l_tvdt: f64,
    pub l_total: f64,
    pub weight_sum: f64,
    pub tvdt_skipped: bool,
}
