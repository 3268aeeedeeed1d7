//! Triplet co-training: batch assembly, per-role supervision, peer
//! pseudo-labelling, optimization, history and checkpoints.
//!
//! A step is synchronous. Pseudo labels, losses and gradients of all three
//! roles are computed from the pre-step parameters before any update is
//! applied, so the result does not depend on the order roles are visited.
//! Every random draw is keyed by `(seed, t, role, slot)`, which makes a run
//! resumable from a checkpoint without stored generator state.

mod bundle;
mod checkpoint;
mod history;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use bundle::{Bundle, BundleGrads, RoleCache, RoleOutput, TextForward};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use history::{history_to_csv, parse_history, read_history, write_history, HistoryRow, EDGES, HISTORY_COLUMNS};

use crate::annotation::{sparse_label, Role, SliceSet, SparseAnnotation, Strategy};
use crate::dataset::{annotations_for, load_cases, Case, Manifest};
use crate::error::{Error, Result};
use crate::nn::kernels::{softmax2_backward, Act};
use crate::nn::{volume_input, ForwardMode, NetConfig};
use crate::objectives::{
    supervised_loss, total_loss, tvdt_loss, AlphaSchedule, LossReport, LrSchedule, ProbGrad, TvdtCombine,
};
use crate::semantic::{fnv1a64, SemanticConfig};
use crate::seed::{derive_seed, rng_for, tag};
use crate::uncertainty::{make_pseudo_label, select_mask, UncertaintyConfig};
use crate::volume::{Grid3, LabelMask, Volume};

/// Unlabeled slots are offset so their dropout streams never collide with
/// labeled ones.
const UNLABELED_SLOT_BASE: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iterations: u64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: AlphaSchedule,
    pub uncertainty: UncertaintyConfig,
    pub tvdt_combine: TvdtCombine,
    pub tvdt_enabled: bool,
    pub strategy: Strategy,
    pub seed: u64,
    pub net_seeds: [u64; 3],
    /// Write a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: u64,
    pub net: NetConfig,
    pub semantic: SemanticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 600,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha: AlphaSchedule {
                step_every: 15,
                ..AlphaSchedule::default()
            },
            uncertainty: UncertaintyConfig::default(),
            tvdt_combine: TvdtCombine::Mean,
            tvdt_enabled: true,
            strategy: Strategy::Sca,
            seed: 0,
            net_seeds: [1, 2, 3],
            checkpoint_every: 0,
            net: NetConfig::default(),
            semantic: SemanticConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The 6000-iteration schedule with α stepping every 150 iterations.
    pub fn paper_scale() -> Self {
        Self {
            total_iterations: 6000,
            alpha: AlphaSchedule::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be >= 1".into()));
        }
        if self.labeled_per_batch == 0 {
            return Err(Error::Config("labeled_per_batch must be >= 1".into()));
        }
        if self.tvdt_enabled && self.unlabeled_per_batch == 0 {
            return Err(Error::Config("unlabeled_per_batch must be >= 1 when tvdt is enabled".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        self.alpha.validate()?;
        self.uncertainty.validate()?;
        self.net.validate()
    }
}

/// One labeled volume as the trainer sees it: masked labels and weights per
/// role. The dense ground truth is not retained.
#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub id: String,
    pub x: Act,
    pub labels: [Vec<u8>; 3],
    pub weights: [Vec<f64>; 3],
}

#[derive(Debug, Clone)]
pub struct UnlabeledItem {
    pub id: String,
    pub x: Act,
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<LabeledItem>,
    pub unlabeled: Vec<UnlabeledItem>,
}

impl TrainData {
    pub fn from_parts(labeled: &[(Case, SliceSet)], unlabeled: &[Case]) -> Result<Self> {
        let labeled = labeled
            .iter()
            .map(|(case, slices)| {
                let ann = SparseAnnotation::new(case.mask.clone(), slices.clone())?;
                let per_role = |r: Role| -> Result<(Vec<u8>, Vec<f64>)> {
                    let sl = sparse_label(ann.dense_gt(), ann.weight(r))?;
                    let w = sl.weights.as_slice().iter().map(|&v| v as f64).collect();
                    Ok((sl.labels.into_vec(), w))
                };
                let (ls, ws) = per_role(Role::S)?;
                let (lc, wc) = per_role(Role::C)?;
                let (la, wa) = per_role(Role::A)?;
                Ok(LabeledItem {
                    id: case.id.clone(),
                    x: volume_input(&case.image),
                    labels: [ls, lc, la],
                    weights: [ws, wc, wa],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = unlabeled
            .iter()
            .map(|c| UnlabeledItem {
                id: c.id.clone(),
                x: volume_input(&c.image),
            })
            .collect();
        Ok(Self { labeled, unlabeled })
    }

    pub fn from_manifest(manifest: &Manifest, strategy: Strategy) -> Result<Self> {
        let split = manifest.split();
        let cases = load_cases(manifest, &split.labeled_ids)?;
        let ann = annotations_for(manifest, &split.labeled_ids, strategy)?;
        let labeled: Vec<(Case, SliceSet)> = cases
            .into_iter()
            .map(|c| {
                let s = ann[&c.id].clone();
                (c, s)
            })
            .collect();
        let unlabeled = load_cases(manifest, &split.unlabeled_ids)?;
        Self::from_parts(&labeled, &unlabeled)
    }
}

/// Indices of the labeled and unlabeled volumes used at step `t`.
pub fn sample_batch(seed: u64, t: u64, n_labeled: usize, n_unlabeled: usize, k_l: usize, k_u: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(seed, &[tag::BATCH, t]);
    let l = sample(&mut rng, n_labeled, k_l.min(n_labeled)).into_vec();
    let u = if k_u == 0 || n_unlabeled == 0 {
        Vec::new()
    } else {
        sample(&mut rng, n_unlabeled, k_u.min(n_unlabeled)).into_vec()
    };
    (l, u)
}

/// Structural facts about one step, for invariant checks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// `(producer, consumer)` of every pseudo-label set consumed.
    pub pseudo_edges: Vec<(Role, Role)>,
    /// Digest of the weights each role was supervised with, per labeled slot.
    pub weight_digests: Vec<[u64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub t: u64,
    pub lr: f64,
    pub alpha: f64,
    pub losses: [LossReport; 3],
    /// Selected fraction per producer→consumer edge, in [`EDGES`] order.
    pub selected: [f64; 6],
    pub trace: StepTrace,
}

/// Trainer state: parameters, momentum buffers, iteration counter, history.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    bundle: Bundle,
    momentum: Vec<Vec<f64>>,
    t: u64,
    history: Vec<HistoryRow>,
}

fn weight_digest(ws: &[&[f64]]) -> u64 {
    let bytes: Vec<u8> = ws.iter().flat_map(|w| w.iter().map(|&v| (v != 0.0) as u8)).collect();
    fnv1a64(&bytes)
}

struct Pseudo {
    labels: Vec<u8>,
    mask: Vec<f64>,
    fraction: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bundle = Bundle::new(&cfg.net, &cfg.semantic, cfg.net_seeds)?;
        let momentum = (0..bundle.num_groups()).map(|g| vec![0.0; bundle.group(g).len()]).collect();
        Ok(Self {
            cfg,
            bundle,
            momentum,
            t: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn bundle(&self) -> &Bundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> Bundle {
        self.bundle
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn momentum(&self) -> &[Vec<f64>] {
        &self.momentum
    }

    pub(crate) fn from_parts(cfg: TrainConfig, bundle: Bundle, momentum: Vec<Vec<f64>>, t: u64, history: Vec<HistoryRow>) -> Self {
        Self {
            cfg,
            bundle,
            momentum,
            t,
            history,
        }
    }

    /// Direct parameter access, e.g. for perturbation studies.
    pub fn bundle_mut(&mut self) -> &mut Bundle {
        &mut self.bundle
    }

    pub fn is_finished(&self) -> bool {
        self.t >= self.cfg.total_iterations
    }

    /// Loss values and parameter gradients at the current parameters,
    /// without updating anything.
    pub fn compute_step(&self, data: &TrainData) -> Result<(StepReport, BundleGrads)> {
        let cfg = &self.cfg;
        let bundle = &self.bundle;
        let t = self.t;
        if data.labeled.is_empty() {
            return Err(Error::Config("training needs at least one labeled volume".into()));
        }
        if cfg.tvdt_enabled && data.unlabeled.is_empty() {
            return Err(Error::Config("tvdt needs at least one unlabeled volume".into()));
        }
        let lr = cfg.lr.lr(t, cfg.total_iterations);
        let alpha = cfg.alpha.alpha(t);
        let k_u = if cfg.tvdt_enabled { cfg.unlabeled_per_batch } else { 0 };
        let (lab_idx, unl_idx) =
            sample_batch(cfg.seed, t, data.labeled.len(), data.unlabeled.len(), cfg.labeled_per_batch, k_u);
        let text = bundle.text()?;
        let text_ref = text.as_ref();

        // Prefixes and pseudo labels from the pre-step parameters.
        let threshold = cfg.uncertainty.threshold(t, cfg.total_iterations);
        let mut prefixes = Vec::with_capacity(unl_idx.len());
        let mut pseudo: Vec<[Pseudo; 3]> = Vec::with_capacity(unl_idx.len());
        for (slot, &ui) in unl_idx.iter().enumerate() {
            let x = &data.unlabeled[ui].x;
            let mut pre = Vec::with_capacity(3);
            let mut ps = Vec::with_capacity(3);
            for r in Role::ALL {
                let prefix = bundle.net(r).encode_prefix(x, true)?;
                let mc_seed = derive_seed(cfg.seed, &[tag::MC, t, r.index() as u64, slot as u64]);
                let mc = bundle.mc_predict(r, &prefix, cfg.uncertainty.passes, mc_seed, text_ref)?;
                let sel = select_mask(&mc.entropy, threshold);
                ps.push(Pseudo {
                    labels: make_pseudo_label(&mc.mean_fg),
                    mask: sel.weights(),
                    fraction: sel.selected_fraction,
                });
                pre.push(Some(prefix));
            }
            prefixes.push(pre);
            pseudo.push(ps.try_into().ok().expect("three roles"));
        }

        let mut grads = BundleGrads::zeros_like(bundle);
        let mut d_text = vec![0.0; text.as_ref().map_or(0, |t| t.w.len())];
        let mut losses = [LossReport::default(); 3];
        let mut edges = Vec::new();
        let mut weight_digests = vec![[0u64; 3]; lab_idx.len()];

        for role in Role::ALL {
            let r = role.index();
            let dropout = |slot: u64| ForwardMode::Train {
                seed: derive_seed(cfg.seed, &[tag::DROPOUT, t, r as u64, slot]),
            };

            // Supervised part, pooled over the labeled batch.
            let mut outs = Vec::new();
            for (slot, &li) in lab_idx.iter().enumerate() {
                let item = &data.labeled[li];
                weight_digests[slot][r] = weight_digest(&[&item.weights[r]]);
                if !item.weights[r].iter().any(|&w| w > 0.0) {
                    log::warn!("step {t}: labeled volume {} has no weight for role {role}; skipped", item.id);
                    continue;
                }
                let prefix = bundle.net(role).encode_prefix(&item.x, true)?;
                let (out, cache) = bundle.forward_role_train(role, prefix, dropout(slot as u64), text_ref)?;
                outs.push((li, out, cache));
            }
            let sup_scale = if cfg.tvdt_enabled { 1.0 - alpha } else { 1.0 };
            let mut report = LossReport::default();
            if !outs.is_empty() {
                let p: Vec<f64> = outs.iter().flat_map(|(_, o, _)| o.p_fg.iter().copied()).collect();
                let y: Vec<u8> = outs
                    .iter()
                    .flat_map(|(li, _, _)| data.labeled[*li].labels[r].iter().copied())
                    .collect();
                let w: Vec<f64> = outs
                    .iter()
                    .flat_map(|(li, _, _)| data.labeled[*li].weights[r].iter().copied())
                    .collect();
                let (sup, g) = supervised_loss(&p, &y, &w)?;
                report.l_wce = sup.wce;
                report.l_dice = sup.dice;
                report.l_sup = sup.sup;
                report.weight_sum = sup.weight_sum;
                self.backprop_pooled(role, &outs, &g, sup_scale, &mut grads, &mut d_text)?;
            }
            drop(outs);

            // Cross supervision on the unlabeled batch.
            if cfg.tvdt_enabled {
                let mut outs = Vec::new();
                for slot in 0..unl_idx.len() {
                    let prefix = prefixes[slot][r].take().expect("prefix used once");
                    let mode = dropout(UNLABELED_SLOT_BASE + slot as u64);
                    let (out, cache) = bundle.forward_role_train(role, prefix, mode, text_ref)?;
                    outs.push((slot, out, cache));
                }
                let peers = role.peers();
                for peer in peers {
                    edges.push((peer, role));
                }
                let p: Vec<f64> = outs.iter().flat_map(|(_, o, _)| o.p_fg.iter().copied()).collect();
                let gather_labels = |k: usize| -> Vec<u8> {
                    pseudo.iter().flat_map(|ps| ps[peers[k].index()].labels.iter().copied()).collect()
                };
                let gather_masks = |k: usize| -> Vec<f64> {
                    pseudo.iter().flat_map(|ps| ps[peers[k].index()].mask.iter().copied()).collect()
                };
                let (l0, l1) = (gather_labels(0), gather_labels(1));
                let (m0, m1) = (gather_masks(0), gather_masks(1));
                let (tv, g) = tvdt_loss(&p, [&l0, &l1], [&m0, &m1], cfg.tvdt_combine, t)?;
                if tv.skipped {
                    log::debug!("step {t}: role {role} tvdt term had an empty peer mask");
                }
                report.l_tvdt = tv.value;
                report.tvdt_skipped = tv.skipped;
                self.backprop_pooled(role, &outs, &g, alpha, &mut grads, &mut d_text)?;
                report.l_total = total_loss(report.l_sup, report.l_tvdt, alpha);
            } else {
                report.l_total = report.l_sup;
            }
            losses[r] = report;
        }
        if let Some(text) = &text {
            bundle.backward_text(text, &d_text, &mut grads);
        }

        let mut selected = [0.0; 6];
        if !pseudo.is_empty() {
            for (e, (producer, _)) in EDGES.iter().enumerate() {
                selected[e] =
                    pseudo.iter().map(|ps| ps[producer.index()].fraction).sum::<f64>() / pseudo.len() as f64;
            }
        }
        Ok((
            StepReport {
                t,
                lr,
                alpha,
                losses,
                selected,
                trace: StepTrace {
                    pseudo_edges: edges,
                    weight_digests,
                },
            },
            grads,
        ))
    }

    fn backprop_pooled<K>(
        &self,
        role: Role,
        outs: &[(K, RoleOutput, RoleCache)],
        g: &ProbGrad,
        scale: f64,
        grads: &mut BundleGrads,
        d_text: &mut [f64],
    ) -> Result<()> {
        let mut off = 0;
        for (_, out, cache) in outs {
            let n = out.p_fg.len();
            let d_bg: Vec<f64> = g.d_bg[off..off + n].iter().map(|v| v * scale).collect();
            let d_fg: Vec<f64> = g.d_fg[off..off + n].iter().map(|v| v * scale).collect();
            let dlogits = softmax2_backward(&out.p_fg, &d_bg, &d_fg, out.logits.dims);
            self.bundle.backward_role(role, cache, &dlogits, grads, d_text)?;
            off += n;
        }
        Ok(())
    }

    /// SGD with momentum and coupled weight decay:
    /// `v = μ v + (g + λ θ)`, `θ -= lr v`.
    fn apply(&mut self, grads: &BundleGrads, lr: f64) {
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for g in 0..self.bundle.num_groups() {
            if !self.bundle.trainable_group(g) {
                continue;
            }
            let buf = &mut self.momentum[g];
            let params = self.bundle.group_mut(g);
            for ((p, v), &d) in params.iter_mut().zip(buf.iter_mut()).zip(&grads.groups[g]) {
                *v = mu * *v + (d + wd * *p);
                *p -= lr * *v;
            }
        }
    }

    /// One synchronous training iteration.
    pub fn step(&mut self, data: &TrainData) -> Result<StepReport> {
        let (report, grads) = self.compute_step(data)?;
        self.apply(&grads, report.lr);
        self.t += 1;
        self.history.push(HistoryRow::from_report(&report));
        Ok(report)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many iterations are complete.
    pub stop_after: Option<u64>,
}

pub const HISTORY_FILE: &str = "history.csv";
pub const FINAL_CHECKPOINT: &str = "final.sgck";

pub fn checkpoint_name(t: u64) -> String {
    format!("ckpt_{t:06}.sgck")
}

/// Runs (or resumes) training, writing `history.csv` and checkpoints into
/// `out_dir`.
pub fn run_training(data: &TrainData, cfg: &TrainConfig, out_dir: &Path, opts: &RunOptions) -> Result<Trainer> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let tr = load_checkpoint(path)?;
            if tr.config() != cfg {
                return Err(Error::Checkpoint(format!(
                    "{} was written with a different training configuration",
                    path.display()
                )));
            }
            tr
        }
        None => Trainer::new(cfg.clone())?,
    };
    let stop = opts.stop_after.unwrap_or(cfg.total_iterations).min(cfg.total_iterations);
    while trainer.iteration() < stop {
        let rep = trainer.step(data)?;
        let done = trainer.iteration();
        if done % 10 == 0 || done == stop {
            let l = &rep.losses;
            log::info!(
                "iter {done}/{} lr {:.5} alpha {:.3} total s/c/a {:.4}/{:.4}/{:.4}",
                cfg.total_iterations,
                rep.lr,
                rep.alpha,
                l[0].l_total,
                l[1].l_total,
                l[2].l_total
            );
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_iterations {
            save_checkpoint(&trainer, &out_dir.join(checkpoint_name(done)))?;
            history::write_history(&out_dir.join(HISTORY_FILE), trainer.history())?;
        }
    }
    history::write_history(&out_dir.join(HISTORY_FILE), trainer.history())?;
    if trainer.is_finished() {
        save_checkpoint(&trainer, &out_dir.join(FINAL_CHECKPOINT))?;
    } else {
        save_checkpoint(&trainer, &out_dir.join(checkpoint_name(trainer.iteration())))?;
    }
    Ok(trainer)
}

/// How the three role predictions are combined at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum FusionRule {
    #[default]
    MeanSoftmax,
    MajorityVote,
    SingleRole(Role),
}

impl FusionRule {
    pub const ALL: [FusionRule; 5] = [
        FusionRule::MeanSoftmax,
        FusionRule::MajorityVote,
        FusionRule::SingleRole(Role::S),
        FusionRule::SingleRole(Role::C),
        FusionRule::SingleRole(Role::A),
    ];
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionRule::MeanSoftmax => f.write_str("mean-softmax"),
            FusionRule::MajorityVote => f.write_str("majority-vote"),
            FusionRule::SingleRole(r) => write!(f, "single-{r}"),
        }
    }
}

impl FromStr for FusionRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FusionRule::ALL
            .into_iter()
            .find(|r| r.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion rule {s:?}")))
    }
}

impl TryFrom<String> for FusionRule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FusionRule> for String {
    fn from(r: FusionRule) -> Self {
        r.to_string()
    }
}

/// Eval-mode foreground probabilities of all three roles.
pub fn role_probabilities(bundle: &Bundle, x: &Act) -> Result<[Vec<f64>; 3]> {
    let text = bundle.text()?;
    let mut out = Vec::with_capacity(3);
    for r in Role::ALL {
        out.push(bundle.forward_role(r, x, ForwardMode::Eval, text.as_ref())?.p_fg);
    }
    Ok(out.try_into().expect("three roles"))
}

/// Combines per-role foreground probabilities into hard labels.
pub fn fuse_predictions(probs: &[Vec<f64>; 3], rule: FusionRule) -> Vec<u8> {
    let n = probs[0].len();
    (0..n)
        .map(|i| match rule {
            FusionRule::MeanSoftmax => u8::from((probs[0][i] + probs[1][i] + probs[2][i]) / 3.0 > 0.5),
            FusionRule::MajorityVote => u8::from(probs.iter().filter(|p| p[i] > 0.5).count() >= 2),
            FusionRule::SingleRole(r) => u8::from(probs[r.index()][i] > 0.5),
        })
        .collect()
}

pub fn predict_volume(bundle: &Bundle, x: &Volume, rule: FusionRule) -> Result<LabelMask> {
    let probs = role_probabilities(bundle, &volume_input(x))?;
    LabelMask::new(Grid3::from_vec(x.dims(), fuse_predictions(&probs, rule))?, x.spacing())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sampling_is_keyed_and_distinct() {
        let (l, u) = sample_batch(7, 3, 2, 18, 2, 2);
        assert_eq!(l.len(), 2);
        assert_ne!(l[0], l[1]);
        assert_ne!(u[0], u[1]);
        assert_eq!(sample_batch(7, 3, 2, 18, 2, 2), (l, u));
    }

    #[test]
    fn fusion_rule_tokens() {
        for r in FusionRule::ALL {
            assert_eq!(r.to_string().parse::<FusionRule>().unwrap(), r);
        }
    }

    #[test]
    fn vote_and_mean_can_differ() {
        let probs = [vec![0.9], vec![0.4], vec![0.45]];
        assert_eq!(fuse_predictions(&probs, FusionRule::MeanSoftmax), vec![1]);
        assert_eq!(fuse_predictions(&probs, FusionRule::MajorityVote), vec![0]);
        assert_eq!(fuse_predictions(&probs, FusionRule::SingleRole(Role::S)), vec![1]);
    }
}
