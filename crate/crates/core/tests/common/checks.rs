//! Self-contained pass/fail checks. Each returns a short detail line on
//! success and the first violation on failure.

use rand::Rng;

use sgtc::annotation::{build_weight_matrix, select_slices, Role, SliceSet, SliceTriple, Strategy};
use sgtc::cotrain::{TrainData, Trainer};
use sgtc::dataset::Case;
use sgtc::metrics::{dice_jaccard, surface_distances};
use sgtc::objectives::{
    supervised_loss, total_loss, tvdt_loss, weighted_ce, weighted_dice, AlphaSchedule, LrSchedule, TvdtCombine,
};
use sgtc::volume::{Grid3, LabelMask, Spacing};

use super::*;

pub type Check = std::result::Result<String, String>;

fn close(name: &str, got: f64, want: f64, tol: f64) -> std::result::Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got:.15}, want {want:.15} (tol {tol:e})"))
    }
}

/// Worked loss values evaluated by hand.
pub fn loss_exactness() -> Check {
    let ln2 = std::f64::consts::LN_2;
    for n in [1usize, 7, 64] {
        let (v, _) = weighted_ce(&vec![0.5; n], &vec![1; n], &vec![1.0; n]).map_err(|e| e.to_string())?;
        close(&format!("wce uniform N={n}"), v, ln2, 1e-9)?;
    }
    let y = [1u8, 1, 1, 1, 0, 0, 0, 0];
    let (dice, _) = weighted_dice(&[0.5; 8], &y, &[1.0; 8]).map_err(|e| e.to_string())?;
    close("dice worked case", dice, 1.0 / 3.0, 1e-9)?;
    let p = [0.25, 0.9, 0.1];
    let pseudo = [1u8, 1, 0];
    let m = [1.0, 0.0, 0.0];
    let (tv, _) = tvdt_loss(&p, [&pseudo, &pseudo], [&m, &m], TvdtCombine::Mean, 0).map_err(|e| e.to_string())?;
    close("tvdt single voxel", tv.value, 4f64.ln(), 1e-9)?;

    let mut r = rng(11);
    for _ in 0..20 {
        let n = r.random_range(8..200);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.99)).collect();
        let y: Vec<u8> = (0..n).map(|_| r.random_bool(0.4) as u8).collect();
        let mut w: Vec<f64> = (0..n).map(|_| r.random_bool(0.5) as u8 as f64).collect();
        w[0] = 1.0;
        let (s, _) = supervised_loss(&p, &y, &w).map_err(|e| e.to_string())?;
        close("sup composition", s.sup, 0.5 * s.wce + 0.5 * s.dice, 1e-12)?;
        let (a, b) = (r.random_range(0.0..3.0), r.random_range(0.0..3.0));
        let alpha = r.random_range(0.0..0.9);
        close("total composition", total_loss(a, b, alpha), (1.0 - alpha) * a + alpha * b, 1e-12)?;
    }
    let (s, _) = supervised_loss(&[0.5; 8], &y, &[1.0; 8]).map_err(|e| e.to_string())?;
    close("sup of worked cases", s.sup, 0.5 * ln2 + 1.0 / 6.0, 1e-9)?;
    Ok(format!("wce={ln2:.12} dice={dice:.12} tvdt={:.12}", tv.value))
}

/// Gradient checks on every differentiable path; returns the worst error.
pub fn gradient_checks() -> Check {
    let mut worst = Vec::new();
    worst.push(("losses", (0..3).map(grad_check_losses).fold(0.0, f64::max)));
    worst.push(("network", (0..2).map(grad_check_network).fold(0.0, f64::max)));
    worst.push(("adapter", grad_check_adapter(5)));
    worst.push(("fusion-mlp", grad_check_fusion_mlp(6)));
    for mode in [FusionMode::Additive, FusionMode::Film] {
        let name = if mode == FusionMode::Additive { "classifier-additive" } else { "classifier-film" };
        worst.push((name, grad_check_fused_classifier(7, mode)));
    }
    worst.push(("objective", grad_check_bundle(8, FusionMode::Additive)));
    let detail = worst.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect::<Vec<_>>().join(" ");
    match worst.iter().find(|(_, e)| !(*e < 1e-4)) {
        Some((n, e)) => Err(format!("{n}: rel err {e:e} >= 1e-4; {detail}")),
        None => Ok(detail),
    }
}

/// Expected popcount of each role's weight matrix for a slice triple.
pub fn expected_popcount(dims: [usize; 3], role: Role) -> usize {
    let [nx, ny, nz] = dims;
    match role {
        // coronal ∪ axial
        Role::S => nx * nz + nx * ny - nx,
        // sagittal ∪ axial
        Role::C => ny * nz + nx * ny - ny,
        // sagittal ∪ coronal
        Role::A => ny * nz + nx * nz - nz,
    }
}

pub fn weight_popcounts(seed: u64, shapes: usize) -> Check {
    let mut r = rng(seed);
    for _ in 0..shapes {
        let dims = random_dims(&mut r, 2, 40);
        let t = SliceTriple {
            p: r.random_range(0..dims[0]),
            q: r.random_range(0..dims[1]),
            r: r.random_range(0..dims[2]),
        };
        let set = SliceSet::from(t);
        for role in Role::ALL {
            let w = build_weight_matrix(dims, &set, role).map_err(|e| e.to_string())?;
            let want = expected_popcount(dims, role);
            if w.popcount() != want {
                return Err(format!("{dims:?} {t:?} role {role}: popcount {} != {want}", w.popcount()));
            }
        }
    }
    Ok(format!("{shapes} shapes"))
}

/// Perturbing predictions, labels, or pseudo labels where the weight (or
/// selection) is zero leaves every loss bit-identical.
pub fn sparsity_leak(seed: u64, instances: usize) -> Check {
    let mut r = rng(seed);
    for k in 0..instances {
        let dims = random_dims(&mut r, 2, 12);
        let n = dims.iter().product::<usize>();
        let t = SliceTriple {
            p: r.random_range(0..dims[0]),
            q: r.random_range(0..dims[1]),
            r: r.random_range(0..dims[2]),
        };
        let role = Role::ALL[k % 3];
        let w: Vec<f64> = build_weight_matrix(dims, &SliceSet::from(t), role)
            .map_err(|e| e.to_string())?
            .data
            .as_slice()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.99)).collect();
        let y: Vec<u8> = (0..n).map(|_| r.random_bool(0.5) as u8).collect();
        let m: Vec<f64> = (0..n).map(|_| r.random_bool(0.5) as u8 as f64).collect();
        let y2: Vec<u8> = (0..n).map(|_| r.random_bool(0.5) as u8).collect();
        let (mut p2, mut yy, mut yb) = (p.clone(), y.clone(), y2.clone());
        for i in 0..n {
            if w[i] == 0.0 {
                p2[i] = r.random_range(0.01..0.99);
                yy[i] = 1 - yy[i];
            }
        }
        let (a, _) = supervised_loss(&p, &y, &w).map_err(|e| e.to_string())?;
        let (b, _) = supervised_loss(&p2, &yy, &w).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("instance {k}: supervised loss {a:?} vs {b:?}"));
        }
        let mut p3 = p.clone();
        for i in 0..n {
            if m[i] == 0.0 {
                p3[i] = r.random_range(0.01..0.99);
                yb[i] = 1 - yb[i];
            }
        }
        let (c, _) = tvdt_loss(&p, [&y2, &y2], [&m, &m], TvdtCombine::Mean, 0).map_err(|e| e.to_string())?;
        let (d, _) = tvdt_loss(&p3, [&yb, &yb], [&m, &m], TvdtCombine::Mean, 0).map_err(|e| e.to_string())?;
        if c.value.to_bits() != d.value.to_bits() {
            return Err(format!("instance {k}: tvdt loss {} vs {}", c.value, d.value));
        }
    }
    Ok(format!("{instances} instances"))
}

/// Training-level leak: ground truth changed away from the annotated
/// slices leaves a full training step bit-identical.
pub fn training_sparsity_leak(seed: u64) -> Check {
    let cases = tiny_cases(seed, 4);
    let with_gt = |flip: bool| -> sgtc::Result<TrainData> {
        let labeled: Vec<(Case, SliceSet)> = cases[..2]
            .iter()
            .map(|c| {
                let s = select_slices(&c.mask, Strategy::Sca)?;
                let mut case = c.clone();
                if flip {
                    let mut any = Grid3::filled(c.mask.dims(), 0u8);
                    for role in Role::ALL {
                        let wm = build_weight_matrix(c.mask.dims(), &s, role)?;
                        for (a, b) in any.as_mut_slice().iter_mut().zip(wm.data.as_slice()) {
                            *a |= *b;
                        }
                    }
                    let g: Vec<u8> = c
                        .mask
                        .data()
                        .iter()
                        .zip(any.as_slice())
                        .map(|(&y, &wv)| if wv == 1 { y } else { 1 - y })
                        .collect();
                    case.mask = LabelMask::new(Grid3::from_vec(c.mask.dims(), g)?, c.mask.spacing())?;
                }
                Ok((case, s))
            })
            .collect::<sgtc::Result<_>>()?;
        TrainData::from_parts(&labeled, &cases[2..])
    };
    let a = with_gt(false).map_err(|e| e.to_string())?;
    let b = with_gt(true).map_err(|e| e.to_string())?;
    let cfg = tiny_train_config(seed);
    let (ra, ga) = Trainer::new(cfg.clone()).unwrap().compute_step(&a).map_err(|e| e.to_string())?;
    let (rb, gb) = Trainer::new(cfg).unwrap().compute_step(&b).map_err(|e| e.to_string())?;
    if ra.losses != rb.losses || ga != gb {
        return Err("flipping labels off the annotated slices changed the step".into());
    }
    Ok("step unchanged".into())
}

/// Surface distances against the exhaustive oracle, plus the overlap set
/// identity and spacing linearity.
pub fn metric_oracle(seed: u64, pairs: usize) -> Check {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for k in 0..pairs {
        let dims = random_dims(&mut r, 4, 16);
        let sp = random_spacing(&mut r);
        let a = random_mask(&mut r, dims, sp);
        let b = random_mask(&mut r, dims, sp);
        let got = surface_distances(&a, &b, sp).map_err(|e| e.to_string())?;
        let (hd, asd) = brute_surface(&a, &b, sp.as_f64());
        let err = (got.hd95 - hd).abs().max((got.asd - asd).abs());
        worst = worst.max(err);
        if err > 1e-9 {
            return Err(format!("pair {k} {dims:?}: hd95 {} vs {hd}, asd {} vs {asd}", got.hd95, got.asd));
        }
        let (d, j) = dice_jaccard(&a, &b).map_err(|e| e.to_string())?;
        if (d - 2.0 * j / (1.0 + j)).abs() > 1e-12 {
            return Err(format!("pair {k}: dice {d} vs 2j/(1+j) with j={j}"));
        }
        for c in [0.5f32, 2.0] {
            let scaled = Spacing(sp.0.map(|v| v * c));
            let s = surface_distances(&a, &b, scaled).map_err(|e| e.to_string())?;
            let c = c as f64;
            if (s.hd95 - c * got.hd95).abs() > 1e-9 * (1.0 + got.hd95) || (s.asd - c * got.asd).abs() > 1e-9 * (1.0 + got.asd) {
                return Err(format!("pair {k}: spacing x{c} gives hd95 {} vs {}", s.hd95, c * got.hd95));
            }
        }
    }
    Ok(format!("{pairs} pairs, worst |diff| {worst:.1e}"))
}

/// Schedule values at the reference iterations.
pub fn schedule_exactness() -> Check {
    let a = AlphaSchedule::default();
    let formula = |t: u64| (0.1 + 0.02 * (t / 150) as f64).min(0.9);
    let end = 6000u64;
    for t in [0, 149, 150, 300, end] {
        close(&format!("alpha({t})"), a.alpha(t), formula(t), 1e-12)?;
    }
    close("alpha(0)", a.alpha(0), 0.1, 0.0)?;
    close("alpha(149)", a.alpha(149), 0.1, 1e-12)?;
    close("alpha(150)", a.alpha(150), 0.12, 1e-12)?;
    let lr = LrSchedule::default();
    for total in [600u64, 6000] {
        close("lr(0)", lr.lr(0, total), 0.01, 1e-15)?;
        close("lr(end)", lr.lr(total, total), 1e-4, 1e-15)?;
        for t in 0..=total {
            let want = (0.01 * (1.0 - t as f64 / total as f64).powf(0.9)).max(1e-4);
            close(&format!("lr({t})"), lr.lr(t, total), want, 1e-15)?;
        }
    }
    Ok(format!("alpha(end)={} lr(0)={} lr(end)={}", a.alpha(end), lr.lr(0, 600), lr.lr(600, 600)))
}

/// Cross-supervision and role-disparity invariants on every step.
pub fn structural_invariants(iterations: u64) -> Check {
    let data = tiny_train_data(21);
    let mut cfg = tiny_train_config(21);
    cfg.total_iterations = iterations;
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    while !trainer.is_finished() {
        let rep = trainer.step(&data).map_err(|e| e.to_string())?;
        let t = rep.t;
        for role in Role::ALL {
            let mut producers: Vec<Role> =
                rep.trace.pseudo_edges.iter().filter(|(_, c)| *c == role).map(|(p, _)| *p).collect();
            producers.sort_by_key(|r| r.index());
            let mut peers = role.peers().to_vec();
            peers.sort_by_key(|r| r.index());
            if producers.contains(&role) {
                return Err(format!("step {t}: role {role} consumed its own pseudo labels"));
            }
            if producers != peers {
                return Err(format!("step {t}: role {role} consumed from {producers:?}, expected {peers:?}"));
            }
        }
        for (slot, d) in rep.trace.weight_digests.iter().enumerate() {
            if d[0] == d[1] || d[0] == d[2] || d[1] == d[2] {
                return Err(format!("step {t}: labeled slot {slot} has coinciding role weights {d:?}"));
            }
        }
    }
    Ok(format!("{iterations} steps"))
}

/// Zeroed γ reproduces the plain networks' per-iteration losses bit-exactly.
pub fn sgal_off_equivalence(iterations: u64) -> Check {
    let data = tiny_train_data(31);
    let mut plain = tiny_train_config(31);
    plain.total_iterations = iterations;
    plain.semantic.enabled = false;
    let mut zeroed = plain.clone();
    zeroed.semantic.enabled = true;
    zeroed.semantic.force_zero_gamma = true;
    let mut a = Trainer::new(plain).map_err(|e| e.to_string())?;
    let mut b = Trainer::new(zeroed).map_err(|e| e.to_string())?;
    while !a.is_finished() {
        let ra = a.step(&data).map_err(|e| e.to_string())?;
        let rb = b.step(&data).map_err(|e| e.to_string())?;
        if ra.losses != rb.losses {
            return Err(format!("step {}: losses differ {:?} vs {:?}", ra.t, ra.losses, rb.losses));
        }
    }
    for g in 0..3 {
        if a.bundle().group(g) != b.bundle().group(g) {
            return Err(format!("network {g} parameters diverged"));
        }
    }
    Ok(format!("{iterations} steps bit-identical"))
}
