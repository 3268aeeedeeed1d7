//! Monte-Carlo dropout uncertainty and entropy-based voxel selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{softmax2_foreground, Act};
use crate::nn::{ForwardMode, SegNet};
use crate::seed::{derive_seed, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// `(0.75 + 0.25 min(t / total, 1)) ln 2`
    #[default]
    Ramped,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyConfig {
    pub passes: usize,
    pub threshold: ThresholdMode,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            passes: 8,
            threshold: ThresholdMode::Ramped,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes < 2 {
            return Err(Error::Config(format!(
                "uncertainty needs at least 2 passes, got {}",
                self.passes
            )));
        }
        if let ThresholdMode::Fixed(v) = self.threshold {
            if !(v > 0.0 && v <= std::f64::consts::LN_2) {
                return Err(Error::Config(format!(
                    "fixed threshold must lie in (0, ln 2], got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn threshold(&self, t: u64, total: u64) -> f64 {
        match self.threshold {
            ThresholdMode::Fixed(v) => v,
            ThresholdMode::Ramped => {
                let frac = (t as f64 / total.max(1) as f64).min(1.0);
                (0.75 + 0.25 * frac) * std::f64::consts::LN_2
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    /// Mean foreground probability over the passes.
    pub mean_fg: Vec<f64>,
    pub entropy: Vec<f64>,
}

/// Binary predictive entropy in nats; `0 ln 0 = 0`.
pub fn binary_entropy(p_fg: f64) -> f64 {
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    h(p_fg) + h(1.0 - p_fg)
}

/// Seed of MC pass `pass` under base seed `seed`.
pub fn pass_seed(seed: u64, pass: usize) -> u64 {
    derive_seed(seed, &[tag::MC, pass as u64])
}

/// Averages `passes` stochastic predictions in pass order.
pub fn mc_predict_with<F>(passes: usize, seed: u64, mut predict: F) -> Result<McPrediction>
where
    F: FnMut(u64) -> Result<Vec<f64>>,
{
    if passes == 0 {
        return Err(Error::Config("at least one MC pass is required".into()));
    }
    let mut mean = predict(pass_seed(seed, 0))?;
    for k in 1..passes {
        let p = predict(pass_seed(seed, k))?;
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v;
        }
    }
    let inv = 1.0 / passes as f64;
    for m in &mut mean {
        *m *= inv;
    }
    let entropy = mean.iter().map(|&p| binary_entropy(p)).collect();
    Ok(McPrediction {
        mean_fg: mean,
        entropy,
    })
}

/// MC-dropout prediction of a bare network, reusing the deterministic
/// encoder prefix across passes.
pub fn mc_predict(net: &SegNet, x: &Act, passes: usize, seed: u64) -> Result<McPrediction> {
    if net.config().dropout_rate == 0.0 && passes > 1 {
        log::warn!("mc_predict: dropout is disabled; all {passes} passes are identical");
    }
    let prefix = net.encode_prefix(x, false)?;
    mc_predict_with(passes, seed, |s| {
        let f = net.features_from_prefix(&prefix, ForwardMode::McDropout { seed: s });
        Ok(softmax2_foreground(&net.classify(&f.theta)))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub m: Vec<u8>,
    pub selected_fraction: f64,
}

impl SelectionMask {
    pub fn weights(&self) -> Vec<f64> {
        self.m.iter().map(|&v| v as f64).collect()
    }
}

/// Selects voxels with entropy strictly below `threshold`.
pub fn select_mask(entropy: &[f64], threshold: f64) -> SelectionMask {
    let m: Vec<u8> = entropy.iter().map(|&h| u8::from(h < threshold)).collect();
    let count = m.iter().filter(|&&v| v == 1).count();
    SelectionMask {
        selected_fraction: if m.is_empty() {
            0.0
        } else {
            count as f64 / m.len() as f64
        },
        m,
    }
}

/// Hard labels; exactly 0.5 resolves to background.
pub fn make_pseudo_label(mean_fg: &[f64]) -> Vec<u8> {
    mean_fg.iter().map(|&p| u8::from(p > 0.5)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;
    use std::f64::consts::LN_2;

    #[test]
    fn entropy_extremes() {
        assert!((binary_entropy(0.5) - LN_2).abs() < 1e-15);
        assert_eq!(binary_entropy(1.0), 0.0);
        assert_eq!(binary_entropy(0.0), 0.0);
    }

    #[test]
    fn selection_limits() {
        let h = [0.0, 0.1, 0.5, LN_2];
        assert_eq!(select_mask(&h, LN_2 + 1e-9).m, vec![1, 1, 1, 1]);
        assert_eq!(select_mask(&h, 1e-300).m, vec![1, 0, 0, 0]);
        assert_eq!(select_mask(&h, 0.5).selected_fraction, 0.5);
    }

    #[test]
    fn pseudo_label_tie_goes_to_background() {
        assert_eq!(make_pseudo_label(&[0.9, 0.5, 0.1]), vec![1, 0, 0]);
    }

    #[test]
    fn no_dropout_reduces_to_single_pass() {
        let cfg = NetConfig {
            base_channels: 2,
            depth: 2,
            dropout_rate: 0.0,
            ..NetConfig::default()
        };
        let net = SegNet::new(&cfg, 4).unwrap();
        let x = Act::from_vec(1, [8, 8, 8], (0..512).map(|i| (i as f64 * 0.37).sin()).collect());
        let mc = mc_predict(&net, &x, 4, 9).unwrap();
        let single = softmax2_foreground(&net.forward(&x, ForwardMode::Eval).unwrap().logits);
        for (a, b) in mc.mean_fg.iter().zip(&single) {
            assert!((a - b).abs() < 1e-15);
        }
        for (h, p) in mc.entropy.iter().zip(&single) {
            assert!((h - binary_entropy(*p)).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_endpoints() {
        let c = UncertaintyConfig::default();
        assert!((c.threshold(0, 100) - 0.75 * LN_2).abs() < 1e-15);
        assert!((c.threshold(100, 100) - LN_2).abs() < 1e-15);
        assert!((c.threshold(500, 100) - LN_2).abs() < 1e-15);
    }
}
