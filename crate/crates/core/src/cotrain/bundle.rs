//! The three role networks together with the text-guided head.

use crate::annotation::Role;
use crate::error::{Error, Result};
use crate::nn::kernels::{softmax2_foreground, Act};
use crate::nn::{init_triplet, Features, ForwardMode, NetCache, NetConfig, Prefix, SegNet};
use crate::seed::{derive_seed, rng_for, tag};
use crate::semantic::{
    classify_fused, classify_fused_backward, fuse, new_adapter, new_fusion_mlp, CrossModalParams, Mlp,
    MlpCache, SemanticConfig,
};
use crate::uncertainty::{mc_predict_with, McPrediction};

/// Adapted text vector for one step, shared by all roles.
#[derive(Debug, Clone)]
pub struct TextForward {
    pub w: Vec<f64>,
    cache: Option<MlpCache>,
}

#[derive(Debug, Clone)]
pub struct RoleOutput {
    pub logits: Act,
    pub p_fg: Vec<f64>,
    pub theta: Act,
    pub f_img: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RoleCache {
    net: NetCache,
    theta: Act,
    gamma: Option<CrossModalParams>,
    fusion: Option<MlpCache>,
}

/// Gradient buffers laid out like [`Bundle::group`].
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrads {
    pub groups: Vec<Vec<f64>>,
}

impl BundleGrads {
    pub fn zeros_like(b: &Bundle) -> Self {
        Self {
            groups: (0..b.num_groups()).map(|g| vec![0.0; b.group(g).len()]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    net_cfg: NetConfig,
    sem_cfg: SemanticConfig,
    nets: [SegNet; 3],
    fusion: Option<[Mlp; 3]>,
    adapter: Option<Mlp>,
    text_raw: Option<Vec<f64>>,
}

impl Bundle {
    pub fn new(net_cfg: &NetConfig, sem_cfg: &SemanticConfig, seeds: [u64; 3]) -> Result<Self> {
        let nets = init_triplet(net_cfg, seeds)?;
        let (fusion, adapter, text_raw) = if sem_cfg.enabled {
            let text_raw = sem_cfg.raw_embedding()?;
            let dim = sem_cfg.provider.dim;
            let mk = |r: Role| {
                let mut rng = rng_for(seeds[r.index()], &[tag::SEMANTIC]);
                new_fusion_mlp(r.name(), dim, net_cfg.bottleneck_dim(), net_cfg.feature_dim(), &mut rng)
            };
            let fusion = [mk(Role::S), mk(Role::C), mk(Role::A)];
            let adapter = match text_raw {
                Some(_) => {
                    let mut rng = rng_for(derive_seed(seeds[0], &seeds[1..]), &[tag::SEMANTIC]);
                    Some(new_adapter(dim, &mut rng)?)
                }
                None => None,
            };
            (Some(fusion), adapter, text_raw)
        } else {
            (None, None, None)
        };
        Ok(Self {
            net_cfg: net_cfg.clone(),
            sem_cfg: sem_cfg.clone(),
            nets,
            fusion,
            adapter,
            text_raw,
        })
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.net_cfg
    }

    pub fn semantic_config(&self) -> &SemanticConfig {
        &self.sem_cfg
    }

    pub fn net(&self, role: Role) -> &SegNet {
        &self.nets[role.index()]
    }

    pub fn fusion_mlp(&self, role: Role) -> Option<&Mlp> {
        self.fusion.as_ref().map(|f| &f[role.index()])
    }

    pub fn adapter(&self) -> Option<&Mlp> {
        self.adapter.as_ref()
    }

    /// Frozen provider output; never modified by training.
    pub fn raw_text_embedding(&self) -> Option<&[f64]> {
        self.text_raw.as_deref()
    }

    /// Whether the text path receives gradients and updates.
    pub fn semantic_trainable(&self) -> bool {
        self.sem_cfg.enabled && !self.sem_cfg.force_zero_gamma
    }

    /// Parameter groups: the three networks, then (if present) the three
    /// fusion MLPs, then the adapter.
    pub fn num_groups(&self) -> usize {
        3 + if self.fusion.is_some() { 3 } else { 0 } + usize::from(self.adapter.is_some())
    }

    pub fn group_name(&self, g: usize) -> String {
        match g {
            0..=2 => format!("net_{}", Role::ALL[g].name()),
            3..=5 if self.fusion.is_some() => format!("fusion_{}", Role::ALL[g - 3].name()),
            _ => "adapter".into(),
        }
    }

    pub fn group(&self, g: usize) -> &[f64] {
        match g {
            0..=2 => self.nets[g].params(),
            3..=5 if self.fusion.is_some() => self.fusion.as_ref().expect("fusion")[g - 3].params(),
            _ => self.adapter.as_ref().expect("adapter group").params(),
        }
    }

    pub fn group_mut(&mut self, g: usize) -> &mut [f64] {
        match g {
            0..=2 => self.nets[g].params_mut(),
            3..=5 if self.fusion.is_some() => self.fusion.as_mut().expect("fusion")[g - 3].params_mut(),
            _ => self.adapter.as_mut().expect("adapter group").params_mut(),
        }
    }

    /// Groups that receive gradients and optimizer updates.
    pub fn trainable_group(&self, g: usize) -> bool {
        g < 3 || self.semantic_trainable()
    }

    fn adapter_group(&self) -> Option<usize> {
        self.adapter.as_ref().map(|_| 6)
    }

    /// Text vector for the current parameters; `None` when the head is off.
    pub fn text(&self) -> Result<Option<TextForward>> {
        if !self.sem_cfg.enabled {
            return Ok(None);
        }
        match (&self.adapter, &self.text_raw) {
            (Some(a), Some(raw)) => {
                let (w, cache) = a.forward(raw)?;
                Ok(Some(TextForward { w, cache: Some(cache) }))
            }
            _ => Ok(Some(TextForward {
                w: vec![0.0; self.sem_cfg.provider.dim],
                cache: None,
            })),
        }
    }

    fn head(&self, role: Role, f: &Features, text: Option<&TextForward>) -> Result<(Act, Option<CrossModalParams>, Option<MlpCache>)> {
        let net = self.net(role);
        match (self.fusion_mlp(role), text) {
            (Some(mlp), Some(text)) => {
                let (mut gamma, cache) = fuse(mlp, &text.w, &f.f_img)?;
                if self.sem_cfg.force_zero_gamma {
                    gamma = CrossModalParams::zeros(f.theta.channels);
                }
                let (w, b) = net.classifier();
                let logits = classify_fused(&f.theta, &gamma, w, b, self.sem_cfg.fusion)?;
                Ok((logits, Some(gamma), Some(cache)))
            }
            (Some(_), None) => Err(Error::Config("text vector required when the semantic head is on".into())),
            (None, _) => Ok((net.classify(&f.theta), None, None)),
        }
    }

    fn output(logits: Act, f: Features) -> RoleOutput {
        RoleOutput {
            p_fg: softmax2_foreground(&logits),
            logits,
            theta: f.theta,
            f_img: f.f_img,
        }
    }

    pub fn forward_role(&self, role: Role, x: &Act, mode: ForwardMode, text: Option<&TextForward>) -> Result<RoleOutput> {
        let f = self.net(role).features(x, mode)?;
        let (logits, _, _) = self.head(role, &f, text)?;
        Ok(Self::output(logits, f))
    }

    /// Training forward from a prefix computed with saved state.
    pub fn forward_role_train(
        &self,
        role: Role,
        prefix: Prefix,
        mode: ForwardMode,
        text: Option<&TextForward>,
    ) -> Result<(RoleOutput, RoleCache)> {
        let (f, net_cache) = self.net(role).features_train_from_prefix(prefix, mode);
        let (logits, gamma, fusion) = self.head(role, &f, text)?;
        let cache = RoleCache {
            net: net_cache,
            theta: f.theta.clone(),
            gamma,
            fusion,
        };
        Ok((Self::output(logits, f), cache))
    }

    /// MC-dropout prediction of one role from a shared prefix.
    pub fn mc_predict(
        &self,
        role: Role,
        prefix: &Prefix,
        passes: usize,
        seed: u64,
        text: Option<&TextForward>,
    ) -> Result<McPrediction> {
        let net = self.net(role);
        mc_predict_with(passes, seed, |s| {
            let f = net.features_from_prefix(prefix, ForwardMode::McDropout { seed: s });
            let (logits, _, _) = self.head(role, &f, text)?;
            Ok(softmax2_foreground(&logits))
        })
    }

    /// Accumulates gradients of one role's loss given d(loss)/d(logits).
    /// The text-vector gradient is added to `d_text` when the head trains.
    pub fn backward_role(
        &self,
        role: Role,
        cache: &RoleCache,
        dlogits: &Act,
        grads: &mut BundleGrads,
        d_text: &mut [f64],
    ) -> Result<()> {
        let r = role.index();
        let net = self.net(role);
        let (wr, br) = net.classifier_ranges();
        let (d_theta, d_fimg) = match &cache.gamma {
            None => {
                let d = net.classify_backward(&cache.theta, dlogits, &mut grads.groups[r]);
                (d, None)
            }
            Some(gamma) => {
                let (w, _) = net.classifier();
                let (gw, gb) = crate::nn::net::split_two(&mut grads.groups[r], wr, br);
                let fg = classify_fused_backward(&cache.theta, gamma, w, self.sem_cfg.fusion, dlogits, gw, gb)?;
                let mut d_fimg = None;
                if self.semantic_trainable() {
                    let mlp = self.fusion_mlp(role).expect("fusion present");
                    let dy: Vec<f64> = fg.d_gamma.gamma1.iter().chain(&fg.d_gamma.gamma2).copied().collect();
                    let dx = mlp.backward(cache.fusion.as_ref().expect("fusion cache"), &dy, &mut grads.groups[3 + r]);
                    let (dw, df) = dx.split_at(d_text.len());
                    for (a, b) in d_text.iter_mut().zip(dw) {
                        *a += b;
                    }
                    d_fimg = Some(df.to_vec());
                }
                (fg.d_theta, d_fimg)
            }
        };
        net.backward(&cache.net, &d_theta, d_fimg.as_deref(), &mut grads.groups[r]);
        Ok(())
    }

    /// Backward through the shared adapter with the summed text gradient.
    pub fn backward_text(&self, text: &TextForward, d_text: &[f64], grads: &mut BundleGrads) {
        if !self.semantic_trainable() {
            return;
        }
        if let (Some(a), Some(cache), Some(g)) = (&self.adapter, &text.cache, self.adapter_group()) {
            a.backward(cache, d_text, &mut grads.groups[g]);
        }
    }

    /// Eval-mode foreground probabilities of one role.
    pub fn predict_prob(&self, role: Role, x: &Act) -> Result<Vec<f64>> {
        let text = self.text()?;
        Ok(self.forward_role(role, x, ForwardMode::Eval, text.as_ref())?.p_fg)
    }
}
