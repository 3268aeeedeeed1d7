//! Independent oracles shared by the integration tests and the acceptance
//! suite: brute-force surface distances, central finite differences, and
//! random instance generators.

#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgtc::cotrain::{TrainConfig, TrainData, Trainer};
use sgtc::dataset::Case;
use sgtc::nn::kernels::{softmax2_backward, softmax2_foreground, Act};
use sgtc::nn::{ForwardMode, NetConfig, SegNet};
use sgtc::objectives::{supervised_loss, tvdt_loss, weighted_ce, weighted_dice, ProbGrad, TvdtCombine};
use sgtc::phantom::{generate_phantom, PhantomSpec};
use sgtc::semantic::{classify_fused, classify_fused_backward, new_adapter, new_fusion_mlp, CrossModalParams, FusionMode, Mlp};
use sgtc::volume::{Grid3, LabelMask, Spacing};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Surface distances by exhaustive search

/// Foreground voxels with a 6-neighbour that is background or off-grid.
pub fn brute_boundary(mask: &LabelMask) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = mask.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.is_foreground(x, y, z) {
                    continue;
                }
                let c = [x as i64, y as i64, z as i64];
                let dims = [nx as i64, ny as i64, nz as i64];
                let mut on_edge = false;
                for axis in 0..3 {
                    for step in [-1i64, 1] {
                        let mut n = c;
                        n[axis] += step;
                        let outside = n.iter().zip(dims).any(|(&v, d)| v < 0 || v >= d);
                        if outside || !mask.is_foreground(n[0] as usize, n[1] as usize, n[2] as usize) {
                            on_edge = true;
                        }
                    }
                }
                if on_edge {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn nearest(from: [usize; 3], to: &[[usize; 3]], sp: [f64; 3]) -> f64 {
    to.iter()
        .map(|b| {
            (0..3)
                .map(|k| {
                    let d = (from[k] as f64 - b[k] as f64) * sp[k];
                    d * d
                })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// `(hd95, asd)` over the pooled symmetric boundary distances, O(B²).
pub fn brute_surface(pred: &LabelMask, gt: &LabelMask, sp: [f64; 3]) -> (f64, f64) {
    let bp = brute_boundary(pred);
    let bg = brute_boundary(gt);
    let mut pool: Vec<f64> = bp.iter().map(|&v| nearest(v, &bg, sp)).collect();
    pool.extend(bg.iter().map(|&v| nearest(v, &bp, sp)));
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = pool.len();
    let h = 0.95 * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let hd95 = pool[lo] + (h - lo as f64) * (pool[hi] - pool[lo]);
    let asd = pool.iter().sum::<f64>() / n as f64;
    (hd95, asd)
}

/// A random non-empty blob mask: a union of a few random boxes and balls.
pub fn random_mask(rng: &mut impl Rng, dims: [usize; 3], spacing: Spacing) -> LabelMask {
    let parts = rng.random_range(1..=3);
    let mut shapes = Vec::new();
    for _ in 0..parts {
        let c: [f64; 3] = std::array::from_fn(|k| rng.random_range(0.0..dims[k] as f64));
        let r: [f64; 3] = std::array::from_fn(|k| rng.random_range(1.0..(dims[k] as f64 / 2.0).max(1.5)));
        let ball = rng.random_bool(0.5);
        shapes.push((c, r, ball));
    }
    let mut mask = LabelMask::from_fn(dims, spacing, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        shapes.iter().any(|(c, r, ball)| {
            if *ball {
                (0..3).map(|k| ((p[k] - c[k]) / r[k]).powi(2)).sum::<f64>() <= 1.0
            } else {
                (0..3).all(|k| (p[k] - c[k]).abs() <= r[k])
            }
        })
    })
    .unwrap();
    if mask.foreground_count() == 0 {
        let mut g = mask.grid().clone();
        g.set(dims[0] / 2, dims[1] / 2, dims[2] / 2, 1);
        mask = LabelMask::new(g, spacing).unwrap();
    }
    mask
}

pub fn random_dims(rng: &mut impl Rng, lo: usize, hi: usize) -> [usize; 3] {
    std::array::from_fn(|_| rng.random_range(lo..=hi))
}

pub fn random_spacing(rng: &mut impl Rng) -> Spacing {
    Spacing(std::array::from_fn(|_| rng.random_range(0.5f32..2.0)))
}

pub fn scaled_mask(mask: &LabelMask, c: f32) -> LabelMask {
    let s = mask.spacing().0;
    LabelMask::new(mask.grid().clone(), Spacing([s[0] * c, s[1] * c, s[2] * c])).unwrap()
}

pub fn grid_of(dims: [usize; 3], data: Vec<u8>) -> Grid3<u8> {
    Grid3::from_vec(dims, data).unwrap()
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-4;

/// Relative error with a small absolute floor so that vanishing
/// gradients are compared in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, 1e-6)
}

pub fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` at `x` along the listed coordinates.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let dn = f(&xp);
            xp[i] = orig;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between `analytic[coords]` and central differences.
/// Each coordinate is measured at `h` and `h/10`, and at smaller steps
/// when both disagree beyond 1e-5: a ReLU kink within `h` of the evaluation point
/// biases the wide stencil but not a narrow one, whereas a wrong analytic
/// gradient disagrees at every step.
pub fn max_fd_error(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: &[usize]) -> f64 {
    max_fd_error_floor(f, x, analytic, coords, 1e-6)
}

/// [`max_fd_error`] with an explicit absolute floor on the denominator.
pub fn max_fd_error_floor(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    floor: f64,
) -> f64 {
    let err = |a: f64, n: f64| rel_err_floor(a, n, floor);
    let wide = central_diff(&mut f, x, coords, FD_STEP);
    let narrow = central_diff(&mut f, x, coords, FD_STEP / 10.0);
    let mut worst = 0.0f64;
    for ((&i, a), b) in coords.iter().zip(wide).zip(narrow) {
        let mut e = err(analytic[i], a).min(err(analytic[i], b));
        if e >= 1e-5 {
            for h in [FD_STEP / 100.0, FD_STEP / 1000.0] {
                let alt = central_diff(&mut f, x, &[i], h)[0];
                e = e.min(err(analytic[i], alt));
            }
        }
        worst = worst.max(e);
    }
    worst
}

pub fn all_coords(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Net gradient on the foreground probability when both class slots are
/// driven by one `p`.
fn dp(g: &ProbGrad) -> Vec<f64> {
    g.d_fg.iter().zip(&g.d_bg).map(|(f, b)| f - b).collect()
}

fn random_probs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.05..0.95)).collect()
}

fn random_labels(rng: &mut impl Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_bool(0.5) as u8).collect()
}

fn random_weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.random_bool(0.6) as u8 as f64).collect();
    w[0] = 1.0;
    w
}

/// Gradient checks of every loss on a 4³ instance; returns the worst error.
pub fn grad_check_losses(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 64;
    let p = random_probs(&mut r, n);
    let y = random_labels(&mut r, n);
    let w = random_weights(&mut r, n);
    let coords = all_coords(n);
    let mut worst = 0.0f64;

    let (_, g) = weighted_ce(&p, &y, &w).unwrap();
    worst = worst.max(max_fd_error(|q| weighted_ce(q, &y, &w).unwrap().0, &p, &dp(&g), &coords));
    let (_, g) = weighted_dice(&p, &y, &w).unwrap();
    worst = worst.max(max_fd_error(|q| weighted_dice(q, &y, &w).unwrap().0, &p, &dp(&g), &coords));
    let (_, g) = supervised_loss(&p, &y, &w).unwrap();
    worst = worst.max(max_fd_error(|q| supervised_loss(q, &y, &w).unwrap().0.sup, &p, &dp(&g), &coords));

    let y2 = random_labels(&mut r, n);
    let m1 = random_weights(&mut r, n);
    let m2 = random_weights(&mut r, n);
    for combine in [TvdtCombine::Mean, TvdtCombine::Sum, TvdtCombine::Alternate] {
        for t in [0, 1] {
            let f = |q: &[f64]| tvdt_loss(q, [&y, &y2], [&m1, &m2], combine, t).unwrap().0.value;
            let (_, g) = tvdt_loss(&p, [&y, &y2], [&m1, &m2], combine, t).unwrap();
            worst = worst.max(max_fd_error(f, &p, &dp(&g), &coords));
        }
    }

    // Through the two-class softmax: d sup / d logits.
    let dims = [4, 4, 4];
    let logits: Vec<f64> = (0..2 * n).map(|_| r.random_range(-2.0..2.0)).collect();
    let loss_of = |l: &[f64]| {
        let pf = softmax2_foreground(&Act::from_vec(2, dims, l.to_vec()));
        supervised_loss(&pf, &y, &w).unwrap().0.sup
    };
    let pf = softmax2_foreground(&Act::from_vec(2, dims, logits.clone()));
    let (_, g) = supervised_loss(&pf, &y, &w).unwrap();
    let dl = softmax2_backward(&pf, &g.d_bg, &g.d_fg, dims);
    worst.max(max_fd_error(loss_of, &logits, &dl.data, &all_coords(2 * n)))
}

/// Small network for gradient checks on 8³ inputs.
pub fn tiny_net_config() -> NetConfig {
    NetConfig {
        base_channels: 2,
        depth: 2,
        dropout_rate: 0.3,
        decoder_k3_from_level: 1,
        ..NetConfig::default()
    }
}

fn random_act(r: &mut impl Rng, channels: usize, dims: [usize; 3]) -> Act {
    let n = channels * dims.iter().product::<usize>();
    Act::from_vec(channels, dims, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Network gradient check: supervised loss on the classifier output plus a
/// linear functional of the global image feature, under a fixed dropout mask.
pub fn grad_check_network(seed: u64) -> f64 {
    let cfg = tiny_net_config();
    let mut r = rng(seed);
    let dims = [8, 8, 8];
    let n = 512;
    let x = random_act(&mut r, 1, dims);
    let y = random_labels(&mut r, n);
    let w = random_weights(&mut r, n);
    let c_img: Vec<f64> = (0..cfg.bottleneck_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
    let mode = ForwardMode::Train { seed: seed ^ 0x5eed };
    let mut base = SegNet::new(&cfg, seed).unwrap();
    jitter(base.params_mut(), &mut r);

    let loss_of = |params: &[f64]| {
        let mut net = base.clone();
        net.params_mut().copy_from_slice(params);
        let f = net.features(&x, mode).unwrap();
        let pf = softmax2_foreground(&net.classify(&f.theta));
        let lin: f64 = f.f_img.iter().zip(&c_img).map(|(a, b)| a * b).sum();
        supervised_loss(&pf, &y, &w).unwrap().0.sup + lin
    };

    let (f, cache) = base.features_train(&x, mode).unwrap();
    let logits = base.classify(&f.theta);
    let pf = softmax2_foreground(&logits);
    let (_, g) = supervised_loss(&pf, &y, &w).unwrap();
    let dlogits = softmax2_backward(&pf, &g.d_bg, &g.d_fg, dims);
    let mut grads = vec![0.0; base.num_params()];
    let d_theta = base.classify_backward(&f.theta, &dlogits, &mut grads);
    base.backward(&cache, &d_theta, Some(&c_img), &mut grads);
    max_fd_error(loss_of, base.params(), &grads, &all_coords(base.num_params()))
}

/// Moves parameters off their initialization so that zero biases do not
/// pin pre-activations exactly at a ReLU kink.
pub fn jitter(params: &mut [f64], r: &mut impl Rng) {
    for v in params {
        *v += r.random_range(-0.05..0.05);
    }
}

fn randomize(mlp: &mut Mlp, r: &mut impl Rng) {
    for v in mlp.params_mut() {
        *v = r.random_range(-0.5..0.5);
    }
}

/// Gradient of `Σ c·mlp(x)` with respect to parameters and input.
fn grad_check_mlp(mlp: &Mlp, r: &mut impl Rng) -> f64 {
    let x: Vec<f64> = (0..mlp.in_dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..mlp.out_dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let lin = |y: &[f64]| y.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    let (_, cache) = mlp.forward(&x).unwrap();
    let mut grads = vec![0.0; mlp.params().len()];
    let dx = mlp.backward(&cache, &c, &mut grads);
    let by_params = max_fd_error(
        |p| {
            let mut m = mlp.clone();
            m.params_mut().copy_from_slice(p);
            lin(&m.forward(&x).unwrap().0)
        },
        mlp.params(),
        &grads,
        &all_coords(grads.len()),
    );
    let by_input = max_fd_error(|xi| lin(&mlp.forward(xi).unwrap().0), &x, &dx, &all_coords(x.len()));
    by_params.max(by_input)
}

pub fn grad_check_adapter(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut a = new_adapter(32, &mut r).unwrap();
    randomize(&mut a, &mut r);
    grad_check_mlp(&a, &mut r)
}

pub fn grad_check_fusion_mlp(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut m = new_fusion_mlp("s", 16, 8, 4, &mut r);
    randomize(&mut m, &mut r);
    grad_check_mlp(&m, &mut r)
}

/// Fused classifier gradients with respect to Θ, γ, and the 1×1 weights.
pub fn grad_check_fused_classifier(seed: u64, mode: FusionMode) -> f64 {
    let mut r = rng(seed);
    let (c, dims) = (3, [4, 4, 4]);
    let nv = 64;
    let theta = random_act(&mut r, c, dims);
    let gamma = CrossModalParams {
        gamma1: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        gamma2: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
    };
    let w: Vec<f64> = (0..2 * c).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..2).map(|_| r.random_range(-0.5..0.5)).collect();
    let y = random_labels(&mut r, nv);
    let wt = random_weights(&mut r, nv);

    let loss = |theta: &Act, gamma: &CrossModalParams, w: &[f64], b: &[f64]| {
        let pf = softmax2_foreground(&classify_fused(theta, gamma, w, b, mode).unwrap());
        supervised_loss(&pf, &y, &wt).unwrap().0.sup
    };
    let logits = classify_fused(&theta, &gamma, &w, &b, mode).unwrap();
    let pf = softmax2_foreground(&logits);
    let (_, g) = supervised_loss(&pf, &y, &wt).unwrap();
    let dl = softmax2_backward(&pf, &g.d_bg, &g.d_fg, dims);
    let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; b.len()]);
    let fg = classify_fused_backward(&theta, &gamma, &w, mode, &dl, &mut dw, &mut db).unwrap();

    let e_theta = max_fd_error(
        |t| loss(&Act::from_vec(c, dims, t.to_vec()), &gamma, &w, &b),
        &theta.data,
        &fg.d_theta.data,
        &all_coords(theta.data.len()),
    );
    let flat: Vec<f64> = gamma.gamma1.iter().chain(&gamma.gamma2).copied().collect();
    let d_flat: Vec<f64> = fg.d_gamma.gamma1.iter().chain(&fg.d_gamma.gamma2).copied().collect();
    let e_gamma = max_fd_error(
        |v| {
            let gm = CrossModalParams {
                gamma1: v[..c].to_vec(),
                gamma2: v[c..].to_vec(),
            };
            loss(&theta, &gm, &w, &b)
        },
        &flat,
        &d_flat,
        &all_coords(2 * c),
    );
    let e_w = max_fd_error(|v| loss(&theta, &gamma, v, &b), &w, &dw, &all_coords(w.len()));
    let e_b = max_fd_error(|v| loss(&theta, &gamma, &w, v), &b, &db, &all_coords(b.len()));
    e_theta.max(e_gamma).max(e_w).max(e_b)
}

/// Tiny phantom cases on an 8³ grid for end-to-end checks.
pub fn tiny_cases(seed: u64, count: usize) -> Vec<Case> {
    (0..count)
        .map(|i| {
            let mut spec = PhantomSpec::ellipsoid([16, 16, 16], [2.5, 3.0, 2.8], seed + i as u64);
            spec.noise_sigma = 0.3;
            let (image, mask) = generate_phantom(&spec).unwrap();
            let image = crop8(&image);
            let mask = crop8_mask(&mask);
            Case {
                id: format!("t{i}"),
                image,
                mask,
            }
        })
        .collect()
}

fn crop8(v: &sgtc::volume::Volume) -> sgtc::volume::Volume {
    let g = v.grid();
    let out = Grid3::from_fn([8, 8, 8], |x, y, z| g.get(x + 4, y + 4, z + 4));
    sgtc::volume::Volume::new(out, v.spacing()).unwrap()
}

fn crop8_mask(m: &LabelMask) -> LabelMask {
    let g = m.grid();
    LabelMask::new(Grid3::from_fn([8, 8, 8], |x, y, z| g.get(x + 4, y + 4, z + 4)), m.spacing()).unwrap()
}

/// Training data on 8³ crops: two SCA-labeled and two unlabeled volumes.
pub fn tiny_train_data(seed: u64) -> TrainData {
    let cases = tiny_cases(seed, 4);
    let labeled: Vec<_> = cases[..2]
        .iter()
        .map(|c| {
            let s = sgtc::annotation::select_slices(&c.mask, sgtc::annotation::Strategy::Sca).unwrap();
            (c.clone(), s)
        })
        .collect();
    TrainData::from_parts(&labeled, &cases[2..]).unwrap()
}

pub fn tiny_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.net = tiny_net_config();
    cfg.semantic.provider.dim = 16;
    cfg.total_iterations = 50;
    cfg.seed = seed;
    cfg.net_seeds = [seed * 3 + 11, seed * 3 + 12, seed * 3 + 13];
    cfg
}

/// Full training-objective gradient check through every role, the fusion
/// MLPs, and the shared adapter. The objective is the sum of the three
/// roles' total losses; pseudo labels are recomputed but piecewise constant.
/// The objective pools thousands of log terms and carries about 1e-12 of
/// rounding noise, so the relative error of each group is floored at 1e-3
/// of that group's largest gradient.
pub fn grad_check_bundle(seed: u64, fusion: FusionMode) -> f64 {
    let data = tiny_train_data(seed);
    let mut cfg = tiny_train_config(seed);
    cfg.semantic.fusion = fusion;
    // Fixed threshold keeps the selection identical under perturbation
    // unless an entropy sits exactly at the boundary.
    cfg.uncertainty.threshold = sgtc::uncertainty::ThresholdMode::Fixed(0.6);
    let mut trainer = Trainer::new(cfg).unwrap();
    // Off the zero-initialized biases and fusion output layers, so every
    // parameter has a nonzero gradient path and no ReLU sits at its kink.
    let mut r = rng(seed ^ 0xf00d);
    for g in 0..trainer.bundle().num_groups() {
        jitter(trainer.bundle_mut().group_mut(g), &mut r);
    }
    let (_, grads) = trainer.compute_step(&data).unwrap();
    let objective = |t: &Trainer| {
        let (rep, _) = t.compute_step(&data).unwrap();
        rep.losses.iter().map(|l| l.l_total).sum::<f64>()
    };
    let mut worst = 0.0f64;
    for g in 0..trainer.bundle().num_groups() {
        let x = trainer.bundle().group(g).to_vec();
        let n = x.len();
        // Every parameter of small groups, a strided subset of large ones.
        let stride = (n / 60).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let mut probe = Trainer::new(trainer.config().clone()).unwrap();
        for gg in 0..trainer.bundle().num_groups() {
            probe.bundle_mut().group_mut(gg).copy_from_slice(trainer.bundle().group(gg));
        }
        let scale = grads.groups[g].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let e = max_fd_error_floor(
            |p| {
                probe.bundle_mut().group_mut(g).copy_from_slice(p);
                objective(&probe)
            },
            &x,
            &grads.groups[g],
            &coords,
            (1e-3 * scale).max(1e-6),
        );
        worst = worst.max(e);
    }
    worst
}
