//! Acceptance suite. Each test checks one criterion and prints a single
//! `[PASS]`/`[FAIL]` line straight to stdout so the lines show up even when
//! libtest captures output.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use cloc::cli::{pipeline, run, Cli, RunConfig};
use cloc::evaluation::{default_bins, random_pose_baseline, threshold_accuracy, EvalReport, PoseError, RunMeta};
use cloc::mining::{covisibility_positives, negatives_of, pose_positives, MiningConfig};
use cloc::model::{count_parameters, gem_pool, Descriptor, Model, NetworkConfig};
use cloc::numerics::{ops, Graph, PairLabel, Tensor};
use cloc::retrieval::{apply_whitening, learn_whitening, DescriptorIndex, IndexEntry};
use cloc::synthworld::{generate_dataset, CameraPose, CapturedImage, ConditionId, ConditionTable, Dataset, Split};
use cloc::training::train;

use clap::Parser;

fn verdict(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] {name}: {detail}");
    let _ = out.flush();
    assert!(pass, "{name}: {detail}");
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(b)).max(1e-8)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

fn condition_names() -> Vec<String> {
    ConditionTable::default().names().map(str::to_string).collect()
}

// ---------------------------------------------------------------------------
// Gradient suite

/// Relative errors of the analytic gradient against central differences
/// for every op and the full descriptor + loss path, for one seed.
fn gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut errs = Vec::new();

    // Conv block: loss = Σ conv(x, w, b)², gradients for x, w and b.
    {
        let x = uniform(&mut rng, &[6, 5, 3], 0.0, 1.0);
        let w = uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let b = uniform(&mut rng, &[4], -0.1, 0.1);
        let stride = 1 + (seed as usize % 2);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.leaf(x.clone(), true), g.leaf(w.clone(), true), g.leaf(b.clone(), true));
        let y = g.conv_block(xn, wn, bn, stride).unwrap();
        let sq = g.square(y).unwrap();
        let loss = g.sum(&[sq]).unwrap();
        g.forward().unwrap();
        let grads = g.backward(loss).unwrap();
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            cloc::numerics::conv_block_forward(x, w, b, stride)
                .unwrap()
                .data()
                .iter()
                .map(|v| v * v)
                .sum()
        };
        let all = |t: &Tensor| (0..t.len()).collect::<Vec<_>>();
        let fd_x = central_diff(
            &mut |v| f(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &w, &b),
            x.data(),
            &all(&x),
            h,
        );
        let fd_w = central_diff(
            &mut |v| f(&x, &Tensor::new(w.shape().to_vec(), v.to_vec()).unwrap(), &b),
            w.data(),
            &all(&w),
            h,
        );
        let fd_b = central_diff(
            &mut |v| f(&x, &w, &Tensor::vector(v.to_vec())),
            b.data(),
            &all(&b),
            h,
        );
        errs.push(("conv input", rel_err(grads.get(xn).data(), &fd_x)));
        errs.push(("conv weights", rel_err(grads.get(wn).data(), &fd_w)));
        errs.push(("conv bias", rel_err(grads.get(bn).data(), &fd_b)));
    }

    // GeM, through a random linear read-out so the upstream gradient is
    // not uniform.
    {
        let x = uniform(&mut rng, &[3, 4, 5], 0.05, 1.0);
        let p = [1.0, 2.0, 3.0, 4.5][seed as usize % 4];
        let r = uniform(&mut rng, &[5], -1.0, 1.0);
        let f = |v: &[f64]| -> f64 {
            let pooled = ops::gem_forward(&Tensor::new(vec![3, 4, 5], v.to_vec()).unwrap(), p).unwrap();
            pooled.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let d = ops::gem_forward(&x, p).unwrap();
        let analytic = ops::gem_backward(&x, p, &d, &r).unwrap();
        let fd = central_diff(&mut |v| f(v), x.data(), &(0..x.len()).collect::<Vec<_>>(), h);
        errs.push(("gem", rel_err(analytic.data(), &fd)));
    }

    // L2 normalization through a random read-out.
    {
        let x = uniform(&mut rng, &[7], -1.0, 1.0);
        let r = uniform(&mut rng, &[7], -1.0, 1.0);
        let f = |v: &[f64]| -> f64 {
            let n = norm(v);
            v.iter().zip(r.data()).map(|(a, b)| a / n * b).sum()
        };
        let y = ops::l2_normalize(&x).unwrap();
        let analytic = ops::l2_normalize_backward(&x, &y, &r).unwrap();
        let fd = central_diff(&mut |v| f(v), x.data(), &(0..7).collect::<Vec<_>>(), h);
        errs.push(("l2 normalize", rel_err(analytic.data(), &fd)));
    }

    // Contrastive pair loss, both labels; negatives are kept at least
    // 1e-3 away from the hinge.
    for label in [PairLabel::Positive, PairLabel::Negative] {
        let margin = 0.7;
        let (a, b) = loop {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let dist = norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
            if (dist - margin).abs() > 1e-3 {
                break (a, b);
            }
        };
        let dist = |a: &[f64]| norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
        // Written out independently of the library.
        let f = |a: &[f64]| match label {
            PairLabel::Positive => dist(a).powi(2),
            PairLabel::Negative => (margin - dist(a)).max(0.0).powi(2),
        };
        let analytic = ops::pair_loss_grad_a(&a, &b, label, margin);
        let fd = central_diff(&mut |v| f(v), &a, &(0..6).collect::<Vec<_>>(), h);
        errs.push(("pair loss", rel_err(&analytic, &fd)));
    }

    // Full path: two images through the routed network, pair loss,
    // gradients for pixels and for every parameter tensor (sampled
    // coordinates).
    {
        let names = condition_names();
        let cfg = NetworkConfig {
            specific_blocks: (seed % 5) as usize,
            ..NetworkConfig::default()
        };
        let model = Model::init(cfg, &names, seed).unwrap();
        let img_a = uniform(&mut rng, &[10, 9, 3], 0.0, 1.0);
        let img_b = uniform(&mut rng, &[10, 9, 3], 0.0, 1.0);
        let (ca, cb) = (ConditionId(4), ConditionId(0));
        let label = if seed % 2 == 0 { PairLabel::Positive } else { PairLabel::Negative };
        // A large margin keeps negatives inside the active hinge.
        let margin = 1.9;

        let mut g = Graph::new();
        let leaves = model.register_params(&mut g);
        let xa = g.leaf(img_a.clone(), true);
        let xb = g.leaf(img_b.clone(), false);
        let da = model.descriptor_node(&mut g, &leaves, xa, ca).unwrap();
        let db = model.descriptor_node(&mut g, &leaves, xb, cb).unwrap();
        let loss = g.pair_loss(da, db, label, margin).unwrap();
        g.forward().unwrap();
        let mut grads = g.backward(loss).unwrap();
        let pixel_grad = grads.get(xa);
        let param_grads = model.collect_grads(&leaves, &mut grads);

        let direct = |m: &Model, a: &Tensor| -> f64 {
            let d1 = m.forward_descriptor(a, ca).unwrap();
            let d2 = m.forward_descriptor(&img_b, cb).unwrap();
            ops::pair_loss(d1.as_slice(), d2.as_slice(), label, margin)
        };
        let coords: Vec<usize> = (0..img_a.len()).step_by(7).collect();
        let fd = central_diff(
            &mut |v| direct(&model, &Tensor::new(img_a.shape().to_vec(), v.to_vec()).unwrap()),
            img_a.data(),
            &coords,
            h,
        );
        let analytic: Vec<f64> = coords.iter().map(|&i| pixel_grad.data()[i]).collect();
        errs.push(("pipeline pixels", rel_err(&analytic, &fd)));

        let grad_tensors: Vec<Tensor> = param_grads.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let mut analytic = Vec::new();
        let mut fd = Vec::new();
        for (k, gt) in grad_tensors.iter().enumerate() {
            let coords: Vec<usize> = (0..3).map(|_| rng.gen_range(0..gt.len())).collect();
            for &i in &coords {
                let base = model.clone();
                let value = base.params.named_tensors()[k].1.data()[i];
                let eval = |v: f64| {
                    let mut m = base.clone();
                    m.params.named_params_mut()[k].value.data_mut()[i] = v;
                    direct(&m, &img_a)
                };
                fd.push((eval(value + h) - eval(value - h)) / (2.0 * h));
                analytic.push(gt.data()[i]);
            }
        }
        errs.push(("pipeline params", rel_err(&analytic, &fd)));
    }
    errs
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..20).collect();
    let results: Vec<Vec<(&str, f64)>> = seeds.par_iter().map(|&s| gradient_errors(s)).collect();
    let elapsed = start.elapsed().as_secs_f64();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for (name, e) in results.iter().flatten() {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(*e);
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = format!(
        "20 seeds, worst relative error {max:.2e} (limit 1e-4), {elapsed:.1}s (limit 60s); per op {:?}",
        worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect::<Vec<_>>()
    );
    verdict("gradient suite", max < 1e-4 && elapsed < 60.0, &detail);
}

// ---------------------------------------------------------------------------
// GeM suite

#[test]
fn gem_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ok = true;
    let mut notes = Vec::new();

    let x = uniform(&mut rng, &[4, 5, 100], 0.0, 2.0);
    let mean: Vec<f64> = (0..100)
        .map(|k| (0..20).map(|i| x.data()[i * 100 + k]).sum::<f64>() / 20.0)
        .collect();
    let p1 = gem_pool(&x, 1.0).unwrap();
    let dev = p1.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ok &= dev < 1e-12;
    notes.push(format!("p=1 vs mean {dev:.1e}"));

    let ps = [1.0, 2.0, 3.0, 8.0, 64.0];
    let pooled: Vec<Vec<f64>> = ps.iter().map(|&p| gem_pool(&x, p).unwrap()).collect();
    let monotone = pooled.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| a <= b));
    ok &= monotone;
    notes.push(format!("monotone in p over 100 channels: {monotone}"));

    let y = uniform(&mut rng, &[4, 5, 100], 0.1, 1.0);
    let p64 = gem_pool(&y, 64.0).unwrap();
    let worst = (0..100)
        .map(|k| {
            let max = (0..20).map(|i| y.data()[i * 100 + k]).fold(0.0, f64::max);
            (max - p64[k]).abs() / max
        })
        .fold(0.0, f64::max);
    ok &= worst < 0.05;
    notes.push(format!("p=64 within {:.2}% of max", worst * 100.0));

    let small = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 2.0, 3.0]).unwrap();
    let v = gem_pool(&small, 3.0).unwrap()[0];
    // (1 + 8 + 8 + 27) / 4 = 11.
    let dev = (v - 11f64.powf(1.0 / 3.0)).abs();
    ok &= dev < 1e-9;
    notes.push(format!("[1,2,2,3] p=3 off by {dev:.1e}"));

    verdict("GeM suite", ok, &notes.join("; "));
}

// ---------------------------------------------------------------------------
// Routing suite

#[test]
fn routing_suite() {
    let names = condition_names();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = uniform(&mut rng, &[24, 24, 3], 0.0, 1.0);
    let mut notes = Vec::new();
    let mut ok = true;

    // Identical branches.
    let model = Model::init(NetworkConfig::default(), &names, 9).unwrap();
    let reference = model.forward_descriptor(&img, ConditionId(0)).unwrap();
    let identical = (1..names.len()).all(|c| model.forward_descriptor(&img, ConditionId(c)).unwrap() == reference);
    ok &= identical;
    notes.push(format!("identical branches bit-identical: {identical}"));

    // Perturb every block of one branch; conditions routed elsewhere see
    // neither a value change nor a gradient on it.
    let night = ConditionId(names.iter().position(|n| n == "night").unwrap());
    let target_branch = model.branch_of(night).unwrap();
    let mut perturbed = model.clone();
    for block in &mut perturbed.params.theta[target_branch] {
        let w = Arc::make_mut(&mut block.weight);
        for v in w.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let mut unchanged = true;
    let mut zero_grad = true;
    for c in 0..names.len() {
        let cond = ConditionId(c);
        if model.branch_of(cond).unwrap() == target_branch {
            continue;
        }
        unchanged &= perturbed.forward_descriptor(&img, cond).unwrap() == model.forward_descriptor(&img, cond).unwrap();
        let mut g = Graph::new();
        let leaves = perturbed.register_params(&mut g);
        let x = g.leaf(img.clone(), false);
        let d = perturbed.descriptor_node(&mut g, &leaves, x, cond).unwrap();
        let t = g.leaf(Tensor::vector(vec![0.0; 32]), false);
        let loss = g.pair_loss(d, t, PairLabel::Positive, 0.7).unwrap();
        g.forward().unwrap();
        let mut grads = g.backward(loss).unwrap();
        let pg = perturbed.collect_grads(&leaves, &mut grads);
        zero_grad &= pg.theta[target_branch]
            .iter()
            .all(|b| b.weight.data().iter().chain(b.bias.data()).all(|v| *v == 0.0));
    }
    let perturbed_differs = perturbed.forward_descriptor(&img, night).unwrap() != model.forward_descriptor(&img, night).unwrap();
    ok &= unchanged && zero_grad && perturbed_differs;
    notes.push(format!(
        "other conditions unchanged: {unchanged}, exact zero gradient: {zero_grad}, perturbed branch moves: {perturbed_differs}"
    ));

    // Multiply-add counts do not depend on the branch count.
    let mut macs_equal = true;
    let mut counts = Vec::new();
    for ns in 0..=4 {
        let one = NetworkConfig {
            specific_blocks: ns,
            num_branches: 1,
            branch_map: names.iter().map(|n| (n.clone(), 0)).collect(),
            ..NetworkConfig::default()
        };
        let six = NetworkConfig {
            specific_blocks: ns,
            num_branches: 6,
            branch_map: names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
            ..NetworkConfig::default()
        };
        let m1 = Model::init(one, &names, 1).unwrap().forward_macs(&img, ConditionId(3)).unwrap();
        let m6 = Model::init(six, &names, 1).unwrap().forward_macs(&img, ConditionId(3)).unwrap();
        macs_equal &= m1 == m6 && m1 > 0;
        counts.push(m1);
    }
    ok &= macs_equal;
    notes.push(format!("MACs N_c=1 == N_c=6 for N_S 0..4: {macs_equal} ({})", counts[0]));

    verdict("routing suite", ok, &notes.join("; "));
}

// ---------------------------------------------------------------------------
// Parameter accounting

#[test]
fn parameter_accounting() {
    // Per block: Cout·Cin·9 + Cout.
    let block = [8 * 3 * 9 + 8, 16 * 8 * 9 + 16, 16 * 16 * 9 + 16, 32 * 16 * 9 + 32];
    let names = condition_names();
    let mut ok = true;
    let mut rows = Vec::new();
    for ns in 0..=4usize {
        let cfg = NetworkConfig {
            specific_blocks: ns,
            ..NetworkConfig::default()
        };
        let c = count_parameters(&cfg);
        let specific: usize = block[..ns].iter().sum();
        let agnostic: usize = block[ns..].iter().sum();
        let stored = Model::init(cfg.clone(), &names, 0).unwrap().params.num_values();
        ok &= c.per_branch_specific == specific
            && c.agnostic == agnostic
            && c.total == c.agnostic + cfg.num_branches * c.per_branch_specific
            && c.total == stored;
        ok &= (ns != 0 || c.per_branch_specific == 0) && (ns != 4 || c.agnostic == 0);
        rows.push(format!("N_S={ns}: {}+5×{}={}", c.agnostic, c.per_branch_specific, c.total));
    }
    verdict("parameter accounting", ok, &rows.join(", "));
}

// ---------------------------------------------------------------------------
// Mining oracle

fn angle_deg(a: &CameraPose, b: &CameraPose) -> f64 {
    let dot: f64 = a.rotation.iter().zip(&b.rotation).map(|(x, y)| x * y).sum();
    2.0 * dot.abs().min(1.0).acos().to_degrees()
}

fn distance(a: &CameraPose, b: &CameraPose) -> f64 {
    a.translation
        .iter()
        .zip(&b.translation)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn synthetic(id: u32, condition: usize, pose: CameraPose, visible: Vec<u32>) -> CapturedImage {
    CapturedImage {
        image_id: id,
        split: Split::Mixed,
        condition: ConditionId(condition),
        pose,
        pixels: Tensor::zeros(&[1, 1, 3]),
        visible_ids: visible,
    }
}

/// The 60 images closest to the first reference camera, so neighbours
/// share landmarks and poses.
fn sixty_image_set() -> Vec<CapturedImage> {
    let (_, ds) = generate_dataset(&RunConfig::default().dataset).unwrap();
    let origin = ds.images[0].pose;
    let mut all: Vec<&CapturedImage> = ds.images.iter().collect();
    all.sort_by(|a, b| distance(&a.pose, &origin).total_cmp(&distance(&b.pose, &origin)).then(a.image_id.cmp(&b.image_id)));
    all.into_iter().take(60).cloned().collect()
}

#[test]
fn mining_oracle() {
    let images = sixty_image_set();
    let cfg = MiningConfig::default();
    let mut ok = images.len() == 60;
    let mut counts = [0usize; 3];

    for q in &images {
        let qset: HashSet<u32> = q.visible_ids.iter().copied().collect();
        let shared = |c: &CapturedImage| c.visible_ids.iter().filter(|v| qset.contains(v)).count();

        let brute_cov: BTreeSet<u32> = images
            .iter()
            .filter(|c| c.image_id != q.image_id && shared(c) as f64 / qset.len() as f64 > cfg.t_i)
            .map(|c| c.image_id)
            .collect();
        let got: BTreeSet<u32> = covisibility_positives(q, &images, cfg.t_i).unwrap().into_iter().collect();
        ok &= got == brute_cov;
        counts[0] += got.len();

        for cond in 0..6 {
            let brute: BTreeSet<u32> = images
                .iter()
                .filter(|c| {
                    c.image_id != q.image_id
                        && c.condition.0 == cond
                        && angle_deg(&q.pose, &c.pose) < cfg.t_r_deg
                        && distance(&q.pose, &c.pose) < cfg.t_t
                })
                .map(|c| c.image_id)
                .collect();
            let got: BTreeSet<u32> = pose_positives(q, &images, cfg.t_r_deg, cfg.t_t, ConditionId(cond))
                .into_iter()
                .collect();
            ok &= got == brute;
            counts[1] += got.len();
        }

        // Complement construction: everything, minus the query, minus
        // anything sharing a landmark, minus anything inside either pose
        // threshold.
        let mut brute_neg: BTreeSet<u32> = images.iter().map(|c| c.image_id).collect();
        brute_neg.remove(&q.image_id);
        for c in &images {
            if shared(c) > 0 || angle_deg(&q.pose, &c.pose) < cfg.t_r_deg || distance(&q.pose, &c.pose) < cfg.t_t {
                brute_neg.remove(&c.image_id);
            }
        }
        let got: BTreeSet<u32> = negatives_of(q, &images, &cfg).into_iter().collect();
        ok &= got == brute_neg;
        counts[2] += got.len();
    }
    ok &= counts.iter().all(|&c| c > 0);

    // Asymmetric co-visibility: 7 of the query's 10 landmarks are seen by
    // a candidate that sees 27.
    let ident = CameraPose::identity();
    let a = synthetic(1, 0, ident, (1..=10).collect());
    let b = synthetic(2, 0, ident, (1..=7).chain(11..=30).collect());
    let asym = covisibility_positives(&a, [&b], 0.6).unwrap() == vec![2] && covisibility_positives(&b, [&a], 0.6).unwrap().is_empty();
    ok &= asym;

    // Boundaries.
    let half = synthetic(3, 0, ident, (1..=5).chain(100..=104).collect());
    let ratio_half = covisibility_positives(&a, [&half], 0.6).unwrap().is_empty();
    let yaw15 = CameraPose::new([(7.5f64).to_radians().cos(), 0.0, 0.0, (7.5f64).to_radians().sin()], [0.0; 3]).unwrap();
    let rotated = synthetic(4, 0, yaw15, vec![1]);
    let rot_excluded = pose_positives(&a, [&rotated], 10.0, 8.0, ConditionId(0)).is_empty();
    let moved = synthetic(5, 0, CameraPose::new([1.0, 0.0, 0.0, 0.0], [10.0, 0.0, 0.0]).unwrap(), vec![1]);
    let trans_excluded = pose_positives(&a, [&moved], 10.0, 8.0, ConditionId(0)).is_empty();
    ok &= ratio_half && rot_excluded && trans_excluded;

    verdict(
        "mining oracle",
        ok,
        &format!(
            "60 images, set equality for {} co-visibility / {} pose / {} negative ids; asymmetric case {asym}; \
             ratio 0.5 excluded {ratio_half}, 15° excluded {rot_excluded}, 10 m excluded {trans_excluded}",
            counts[0], counts[1], counts[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// Retrieval exactness

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn retrieval_exactness() {
    let mut ok = true;
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let dim = 8;
        // Shuffled ids and a block of duplicated descriptors force ties.
        let mut ids: Vec<u32> = (0..200).map(|i| i * 3 + 1).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
        let shared = random_unit(&mut rng, dim);
        let vectors: Vec<Vec<f64>> = (0..200)
            .map(|i| if i % 10 == 0 { shared.clone() } else { random_unit(&mut rng, dim) })
            .collect();
        let entries: Vec<IndexEntry> = ids
            .iter()
            .zip(&vectors)
            .map(|(&id, v)| IndexEntry {
                image_id: id,
                descriptor: Descriptor::from_unit(v.clone()).unwrap(),
                pose: CameraPose::identity(),
            })
            .collect();
        let index = DescriptorIndex::from_entries(entries, None).unwrap();
        for query in [shared.clone(), random_unit(&mut rng, dim)] {
            let mut brute: Vec<(f64, u32)> = ids
                .iter()
                .zip(&vectors)
                .map(|(&id, v)| (v.iter().zip(&query).map(|(a, b)| a * b).sum(), id))
                .collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for k in [1, 5, 37, 200] {
                let got = index.query_topk(&query, k).unwrap();
                let want = &brute[..k];
                ok &= got.len() == k
                    && got.iter().zip(want).all(|(m, (s, id))| m.image_id == *id && m.similarity == *s);
                checked += 1;
            }
        }
    }
    verdict(
        "retrieval exactness",
        ok,
        &format!("{checked} top-k queries over 20 seeds × 200 entries match brute force with ascending-id ties"),
    );
}

// ---------------------------------------------------------------------------
// Whitening

#[test]
fn whitening_suite() {
    let mut worst = 0.0f64;
    let mut unit_dev = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let dim = 16;
        // Anisotropic ensemble: coordinate scales spread over two decades.
        let scales: Vec<f64> = (0..dim).map(|i| 0.1 * 1.3f64.powi(i as i32)).collect();
        let descs: Vec<Vec<f64>> = (0..120)
            .map(|_| scales.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let pairs: Vec<(usize, usize)> = (0..300).map(|_| (rng.gen_range(0..120), rng.gen_range(0..120))).filter(|(a, b)| a != b).collect();
        let refs: Vec<&[f64]> = descs.iter().map(Vec::as_slice).collect();
        let t = learn_whitening(&refs, &pairs, 0.0).unwrap();

        // Independent C and W·C·Wᵀ.
        let mut c = vec![vec![0.0; dim]; dim];
        for &(i, j) in &pairs {
            let d: Vec<f64> = descs[i].iter().zip(&descs[j]).map(|(a, b)| a - b).collect();
            for r in 0..dim {
                for s in 0..dim {
                    c[r][s] += d[r] * d[s] / pairs.len() as f64;
                }
            }
        }
        let w = |r: usize, s: usize| t.w[r * dim + s];
        for r in 0..dim {
            for s in 0..dim {
                let mut v = 0.0;
                for a in 0..dim {
                    for b in 0..dim {
                        v += w(r, a) * c[a][b] * w(s, b);
                    }
                }
                let target = if r == s { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        for d in &descs {
            let out = apply_whitening(&t, d).unwrap();
            unit_dev = unit_dev.max((norm(out.as_slice()) - 1.0).abs());
        }
    }
    verdict(
        "whitening",
        worst < 1e-6 && unit_dev < 1e-12,
        &format!("max |W·C·Wᵀ − I| = {worst:.2e} (limit 1e-6), max unit-norm deviation {unit_dev:.1e}"),
    );
}

// ---------------------------------------------------------------------------
// Evaluation metrics

#[test]
fn evaluation_metrics() {
    let e = |t: f64, r: f64| PoseError {
        translation_m: t,
        rotation_deg: r,
    };
    // Bins (0.25 m, 2°), (0.5 m, 5°), (5 m, 10°).
    //            fine  medium coarse
    let errors = [
        e(0.10, 0.5),  // y y y
        e(0.25, 2.0),  // y y y   (inclusive)
        e(0.30, 1.0),  // n y y
        e(0.20, 3.0),  // n y y
        e(0.45, 4.9),  // n y y
        e(0.60, 1.0),  // n n y
        e(4.90, 9.0),  // n n y
        e(5.00, 10.0), // n n y
        e(5.10, 1.0),  // n n n
        e(0.10, 12.0), // n n n
    ];
    let hand = [20.0, 50.0, 80.0];
    let got = threshold_accuracy(&errors, &default_bins()).unwrap();
    let tally_ok = got.iter().zip(hand).all(|(a, b)| (a - b).abs() < 1e-12);
    let single = threshold_accuracy(&[e(0.3, 1.0)], &default_bins()).unwrap();
    let case_ok = single == vec![0.0, 100.0, 100.0];
    let monotone = got.windows(2).all(|w| w[0] <= w[1]);
    verdict(
        "evaluation metrics",
        tally_ok && case_ok && monotone,
        &format!("hand tally {hand:?} vs {got:?}; (0.3 m, 1°) → {single:?}; monotone {monotone}"),
    );
}

// ---------------------------------------------------------------------------
// End-to-end directional claim

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn coarse_night(
    model: &Model,
    dataset: &Dataset,
    cfg: &RunConfig,
    multiscale: bool,
    seed: u64,
) -> (f64, EvalReport) {
    let mut options = cfg.retrieval.clone();
    options.multiscale = multiscale;
    let index = pipeline::index_reference(model, dataset, &cfg.mining, &options, seed).unwrap();
    let predictions = pipeline::localize_queries(&index, model, dataset, &options).unwrap();
    let meta = RunMeta {
        run_id: format!("NS{}-{multiscale}-{seed}", model.config.specific_blocks),
        config_hash: String::new(),
        seed,
        specific_blocks: model.config.specific_blocks,
        multiscale,
    };
    let report = pipeline::evaluate_predictions(dataset, &predictions, &cfg.evaluation.bins, meta).unwrap();
    let all = report.condition(pipeline::ALL_QUERIES).unwrap();
    (*all.accuracy.last().unwrap(), report)
}

#[test]
fn end_to_end_directional() {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let (_, dataset) = generate_dataset(&cfg.dataset).unwrap();
    let queries: Vec<CameraPose> = dataset.split(Split::Query).map(|q| q.pose).collect();
    let reference: Vec<CameraPose> = dataset.split(Split::Reference).map(|r| r.pose).collect();
    let random = *random_pose_baseline(&queries, &reference, &cfg.evaluation.bins).unwrap().last().unwrap();

    let seeds = [0u64, 1, 2];
    let jobs: Vec<(u64, usize)> = seeds.iter().flat_map(|&s| [(s, 4), (s, 0)]).collect();
    let runs: Vec<(u64, usize, Vec<(bool, f64, EvalReport)>)> = jobs
        .par_iter()
        .map(|&(seed, ns)| {
            let network = NetworkConfig {
                specific_blocks: ns,
                ..cfg.network.clone()
            };
            let (model, _) = train(&dataset, network, &cfg.training, &cfg.mining, seed).unwrap();
            let variants: &[bool] = if ns == 4 { &[true, false] } else { &[true] };
            let evals = variants
                .iter()
                .map(|&ms| {
                    let (acc, rep) = coarse_night(&model, &dataset, &cfg, ms, seed);
                    (ms, acc, rep)
                })
                .collect();
            (seed, ns, evals)
        })
        .collect();

    let pick = |ns: usize, ms: bool| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.1 == ns)
            .flat_map(|r| r.2.iter().filter(|e| e.0 == ms).map(|e| e.1))
            .collect()
    };
    let (routed, routed_ss, base) = (pick(4, true), pick(4, false), pick(0, true));
    let monotone = runs.iter().flat_map(|r| &r.2).all(|(_, _, rep)| {
        rep.conditions.iter().all(|c| c.accuracy.windows(2).all(|w| w[0] <= w[1]))
    });
    let (m_routed, m_ss, m_base) = (median3(routed.clone()), median3(routed_ss.clone()), median3(base.clone()));
    let elapsed = start.elapsed().as_secs_f64();
    let detail = format!(
        "coarse night median over seeds {seeds:?}: N_S=4 {m_routed:.2}% {routed:?}, N_S=0 {m_base:.2}% {base:?}, \
         N_S=4 single-scale {m_ss:.2}% {routed_ss:?}; random {random:.3}% (3× = {:.3}%); {elapsed:.0}s",
        3.0 * random
    );
    verdict("end-to-end: bin monotonicity on all reports", monotone, "all conditions, all runs");
    let a = m_routed >= m_base;
    let b = m_routed >= 3.0 * random && m_base >= 3.0 * random;
    let c = m_routed >= m_ss;
    let mut out = std::io::stdout().lock();
    for (name, pass) in [
        ("end-to-end: routed N_S=4 ≥ N_S=0", a),
        ("end-to-end: both ≥ 3× random-pose baseline", b),
        ("end-to-end: multi-scale ≥ single-scale (routed)", c),
    ] {
        let _ = writeln!(out, "[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    drop(out);
    assert!(a && b && c, "{detail}");
}

// ---------------------------------------------------------------------------
// Determinism

fn pipeline_run(root: &Path, config: &Path) {
    for cmd in ["generate", "mine", "train", "index", "localize", "evaluate"] {
        let cli = Cli::try_parse_from([
            "cloc",
            cmd,
            "--config",
            config.to_str().unwrap(),
            "--out",
            root.to_str().unwrap(),
        ])
        .unwrap();
        run(&cli).unwrap_or_else(|e| panic!("{cmd}: {e}"));
    }
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
        }
    }
    out
}

#[test]
fn determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.training.epochs = 2;
    let config = tmp.path().join("config.json");
    std::fs::write(&config, cfg.to_json()).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline_run(&a, &config);
    pipeline_run(&b, &config);

    let pa = std::fs::read(a.join("predictions.csv")).unwrap();
    let pb = std::fs::read(b.join("predictions.csv")).unwrap();
    let (ra, rb) = (files_under(&a.join("report")), files_under(&b.join("report")));
    let ok = pa == pb && !ra.is_empty() && ra == rb;
    verdict(
        "determinism",
        ok,
        &format!("predictions.csv ({} bytes) and {} report files byte-identical across two runs", pa.len(), ra.len()),
    );
}
