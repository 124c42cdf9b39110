#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use segkit::loss_metrics::{combined_loss_graph, JaccardVariant};
use segkit::nets::Network;
use segkit::tensor::{Graph, Mode, Tensor};

pub fn normal_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Training-mode loss of `net` on one batch, without touching running
/// stats, plus the branch pattern of the evaluation.
pub fn loss_of(net: &Network<f64>, input: &Tensor<f64>, labels: &Tensor<f64>, variant: JaccardVariant) -> (f64, Vec<u64>) {
    let mut g = Graph::<f64>::new();
    let x = g.input(input.clone());
    let out = net.forward(&mut g, x, Mode::Train).unwrap();
    let terms = combined_loss_graph(&mut g, out.probs, labels, variant).unwrap();
    (g.value(terms.loss).unwrap().item().unwrap(), g.branch_pattern())
}

pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    pub rel_err: f64,
}

pub struct GradReport {
    pub worst: GradMismatch,
    /// Worst relative error with every entry differenced at the nominal
    /// step, kinks and truncation included.
    pub fixed_step_worst: f64,
    pub checked: usize,
    /// Entries whose nominal step crossed a ReLU / max-pool / clamp branch.
    pub kink_crossings: usize,
    /// Entries whose nominal step was truncation-dominated.
    pub refinements: usize,
}

/// `|a - n| / max(|a|, |n|)`; pairs where both magnitudes are below
/// `floor` are compared absolutely against `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite differences over every scalar parameter of `net`.
///
/// Central differences are only a valid oracle on a smooth piece of the
/// loss and when the step's O(h^2) truncation term is negligible. The step
/// starts at `h` and is divided by 10 while `theta +- step` lands on a
/// different branch pattern than `theta`. If the estimate at the accepted
/// step differs from the one at `step / 10` by more than `settle`
/// (relative, with `floor`), the truncation term dominates and the finer
/// estimate is used. The analytic gradient plays no part in choosing the
/// step.
pub fn finite_difference_check(
    net: &Network<f64>,
    input: &Tensor<f64>,
    labels: &Tensor<f64>,
    variant: JaccardVariant,
    h: f64,
    floor: f64,
    settle: f64,
) -> GradReport {
    let mut g = Graph::<f64>::new();
    let x = g.input(input.clone());
    let out = net.forward(&mut g, x, Mode::Train).unwrap();
    let terms = combined_loss_graph(&mut g, out.probs, labels, variant).unwrap();
    let grads = g.backward(terms.loss).unwrap();
    let base_pattern = g.branch_pattern();

    let mut report = GradReport {
        worst: GradMismatch {
            param: String::new(),
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            step: h,
            rel_err: 0.0,
        },
        fixed_step_worst: 0.0,
        checked: 0,
        kink_crossings: 0,
        refinements: 0,
    };
    let mut probe = net.clone();
    let min_step = h * 1e-6;
    for (pi, param) in net.params().iter().enumerate() {
        let analytic = grads.param(pi).unwrap();
        for i in 0..param.value.len() {
            let orig = param.value.data()[i];
            let mut central = |step: f64| {
                probe.params_mut()[pi].value.data_mut()[i] = orig + step;
                let (plus, pp) = loss_of(&probe, input, labels, variant);
                probe.params_mut()[pi].value.data_mut()[i] = orig - step;
                let (minus, pm) = loss_of(&probe, input, labels, variant);
                probe.params_mut()[pi].value.data_mut()[i] = orig;
                ((plus - minus) / (2.0 * step), pp == base_pattern && pm == base_pattern)
            };
            let a = analytic.data()[i];
            let (nominal, nominal_smooth) = central(h);
            report.fixed_step_worst = report.fixed_step_worst.max(relative_error(a, nominal, floor));
            if !nominal_smooth {
                report.kink_crossings += 1;
            }
            let mut step = h;
            let mut current = (nominal, nominal_smooth);
            while !current.1 && step > 5.0 * min_step {
                step /= 10.0;
                current = central(step);
            }
            let mut numeric = current.0;
            if current.1 && step >= h * 1e-2 {
                let finer = central(step / 10.0);
                if finer.1 && relative_error(current.0, finer.0, floor) > settle {
                    report.refinements += 1;
                    step /= 10.0;
                    numeric = finer.0;
                }
            }
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.worst.rel_err {
                report.worst = GradMismatch {
                    param: param.name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    step,
                    rel_err: err,
                };
            }
        }
    }
    report
}

/// Component stats from breadth-first flood fill: `(area, centroid)` in
/// row-major order of each component's first pixel.
pub fn flood_fill_components(mask: &segkit::mask::BinaryMask, eight: bool) -> Vec<(usize, (f64, f64))> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut offsets = vec![(-1isize, 0isize), (1, 0), (0, -1), (0, 1)];
    if eight {
        offsets.extend([(-1, -1), (-1, 1), (1, -1), (1, 1)]);
    }
    for r0 in 0..h {
        for c0 in 0..w {
            if !mask.get(r0, c0) || seen[r0 * w + c0] {
                continue;
            }
            let mut queue = std::collections::VecDeque::from([(r0, c0)]);
            seen[r0 * w + c0] = true;
            let (mut area, mut sr, mut sc) = (0usize, 0.0f64, 0.0f64);
            while let Some((r, c)) = queue.pop_front() {
                area += 1;
                sr += r as f64;
                sc += c as f64;
                for &(dr, dc) in &offsets {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask.get(nr, nc) && !seen[nr * w + nc] {
                        seen[nr * w + nc] = true;
                        queue.push_back((nr, nc));
                    }
                }
            }
            out.push((area, (sr / area as f64, sc / area as f64)));
        }
    }
    out
}

pub fn random_mask(size: usize, density: f64, rng: &mut ChaCha8Rng) -> segkit::mask::BinaryMask {
    segkit::mask::BinaryMask::from_fn(size, size, |_, _| rng.random::<f64>() < density)
}
