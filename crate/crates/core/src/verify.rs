//! Independent oracles for the numerical core: central finite differences
//! against reverse-mode gradients (run in wide precision), and an exhaustive
//! selection oracle for mask generation. These run in the default test suite;
//! a sweep is only trustworthy once every check passes.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Architecture, ForwardOpts, Model};
use crate::prune::{generate_mask, PruneMethod, PruneScope, PruneSpec, ScoreEntry, ScoreVector};
use crate::tape::Tape;
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-6;

/// Outcome of one oracle check.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seed: u64,
    /// Coordinates checked against the oracle.
    pub checked: usize,
    /// Coordinates sitting on a ReLU/maxpool kink, where central differences
    /// are not a valid oracle for the subgradient. Bounded to a small
    /// fraction of `checked`.
    pub skipped_kinks: usize,
    /// Coordinates of the worst offender (empty when everything agrees).
    pub worst: String,
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "check={} status={} max_rel_err={:.3e} max_abs_err={:.3e} tolerance={:.1e} checked={} kinks_skipped={} seed={}{}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.max_abs_err,
            self.tolerance,
            self.checked,
            self.skipped_kinks,
            self.seed,
            if self.worst.is_empty() {
                String::new()
            } else {
                format!(" worst={}", self.worst)
            }
        )
    }
}

// ── Finite-difference harness ──────────────────────────────────────────

/// Compare analytic gradients to central differences on sampled coordinates.
/// `loss` must be a pure function of the parameter vectors.
///
/// A coordinate counts as agreeing when either the h or the h/8 central
/// difference is within tolerance. When both disagree, one-sided slopes
/// decide whether the point sits on a kink (FD is no oracle there; the
/// coordinate is skipped and counted) or the gradient is genuinely wrong.
fn fd_compare<F>(
    name: &str,
    seed: u64,
    tolerance: f64,
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    samples_per_tensor: usize,
    loss: F,
) -> OracleReport
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let base = loss(&work);
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut failed = false;

    let rel_err = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
    let central = |work: &mut [Vec<f64>], pi: usize, ci: usize, orig: f64, h: f64| {
        work[pi][ci] = orig + h;
        let fp = loss(work);
        work[pi][ci] = orig - h;
        let fm = loss(work);
        work[pi][ci] = orig;
        ((fp - fm) / (2.0 * h), fp, fm)
    };

    for (pi, p) in params.iter().enumerate() {
        let mut coords: Vec<usize> = (0..p.len()).collect();
        if p.len() > samples_per_tensor {
            coords.shuffle(&mut rng);
            coords.truncate(samples_per_tensor);
        }
        for ci in coords {
            checked += 1;
            let orig = work[pi][ci];
            let a = analytic[pi][ci];
            let (fd1, _, _) = central(&mut work, pi, ci, orig, FD_STEP);
            let mut abs = (a - fd1).abs();
            let mut rel = rel_err(a, fd1);
            let mut numeric = fd1;
            if rel > tolerance {
                let fine = FD_STEP / 8.0;
                let (fd2, fp2, fm2) = central(&mut work, pi, ci, orig, fine);
                abs = (a - fd2).abs();
                rel = rel_err(a, fd2);
                numeric = fd2;
                if rel > tolerance {
                    let slope_right = (fp2 - base) / fine;
                    let slope_left = (base - fm2) / fine;
                    let jump = (slope_right - slope_left).abs();
                    if jump > 0.05 * slope_right.abs().max(slope_left.abs()).max(1e-3) {
                        skipped += 1;
                        continue;
                    }
                }
            }
            if abs > max_abs {
                max_abs = abs;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = format!("tensor {pi} coord {ci}: analytic {a:.9e} vs fd {numeric:.9e}");
            }
            if rel > tolerance {
                failed = true;
            }
        }
    }

    // a kink-riddled sample would not be a meaningful check
    let passed = !failed && skipped * 10 <= checked;
    OracleReport {
        name: name.into(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        tolerance,
        passed,
        seed,
        checked,
        skipped_kinks: skipped,
        worst: if passed { String::new() } else { worst },
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Dense layer under a linear readout: the loss is linear in every input, so
/// central differences are exact up to roundoff.
pub fn finite_difference_dense(seed: u64, tolerance: f64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (3usize, 5, 4);
    let x = random_vec(&mut rng, n * d, -1.0, 1.0);
    let w = random_vec(&mut rng, d * k, -1.0, 1.0);
    let b = random_vec(&mut rng, k, -0.5, 0.5);
    let readout = random_vec(&mut rng, n * k, -1.0, 1.0);

    let build = |p: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![n, d], p[0].clone()).unwrap().with_requires_grad());
        let w = tape.leaf(Tensor::new(vec![d, k], p[1].clone()).unwrap().with_requires_grad());
        let b = tape.leaf(Tensor::new(vec![k], p[2].clone()).unwrap().with_requires_grad());
        let r = tape.constant(Tensor::new(vec![n, k], readout.clone()).unwrap());
        let y = tape.dense(x, w, b).unwrap();
        let weighted = tape.mul(y, r).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.data(loss)[0]
    };

    let params = vec![x, w, b];
    let analytic = {
        let mut tape = Tape::new();
        let xi = tape.leaf(Tensor::new(vec![n, d], params[0].clone()).unwrap().with_requires_grad());
        let wi = tape.leaf(Tensor::new(vec![d, k], params[1].clone()).unwrap().with_requires_grad());
        let bi = tape.leaf(Tensor::new(vec![k], params[2].clone()).unwrap().with_requires_grad());
        let r = tape.constant(Tensor::new(vec![n, k], readout.clone()).unwrap());
        let y = tape.dense(xi, wi, bi).unwrap();
        let weighted = tape.mul(y, r).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.backward(loss).unwrap();
        vec![
            tape.grad(xi).unwrap().to_vec(),
            tape.grad(wi).unwrap().to_vec(),
            tape.grad(bi).unwrap().to_vec(),
        ]
    };
    fd_compare("fd-dense", seed, tolerance, &params, &analytic, 200, build)
}

/// conv2d + relu + maxpool2 under a linear readout.
pub fn finite_difference_conv_stack(seed: u64, tolerance: f64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w, f) = (2usize, 2, 6, 6, 3);
    let x = random_vec(&mut rng, n * c * h * w, -1.0, 1.0);
    let kern = random_vec(&mut rng, f * c * 9, -1.0, 1.0);
    let bias = random_vec(&mut rng, f, -0.5, 0.5);
    let readout = random_vec(&mut rng, n * f * (h / 2) * (w / 2), -1.0, 1.0);

    let build = |p: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![n, c, h, w], p[0].clone()).unwrap().with_requires_grad());
        let k = tape.leaf(Tensor::new(vec![f, c, 3, 3], p[1].clone()).unwrap().with_requires_grad());
        let b = tape.leaf(Tensor::new(vec![f], p[2].clone()).unwrap().with_requires_grad());
        let r = tape.constant(Tensor::new(vec![n, f, h / 2, w / 2], readout.clone()).unwrap());
        let conv = tape.conv2d(x, k, b, 1, 1).unwrap();
        let act = tape.relu(conv).unwrap();
        let pool = tape.maxpool2(act).unwrap();
        let weighted = tape.mul(pool, r).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.data(loss)[0]
    };

    let params = vec![x, kern, bias];
    let analytic = {
        let mut tape = Tape::new();
        let xi = tape.leaf(Tensor::new(vec![n, c, h, w], params[0].clone()).unwrap().with_requires_grad());
        let ki = tape.leaf(Tensor::new(vec![f, c, 3, 3], params[1].clone()).unwrap().with_requires_grad());
        let bi = tape.leaf(Tensor::new(vec![f], params[2].clone()).unwrap().with_requires_grad());
        let r = tape.constant(Tensor::new(vec![n, f, h / 2, w / 2], readout.clone()).unwrap());
        let conv = tape.conv2d(xi, ki, bi, 1, 1).unwrap();
        let act = tape.relu(conv).unwrap();
        let pool = tape.maxpool2(act).unwrap();
        let weighted = tape.mul(pool, r).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.backward(loss).unwrap();
        vec![
            tape.grad(xi).unwrap().to_vec(),
            tape.grad(ki).unwrap().to_vec(),
            tape.grad(bi).unwrap().to_vec(),
        ]
    };
    fd_compare("fd-conv-relu-maxpool", seed, tolerance, &params, &analytic, 200, build)
}

/// Cross-entropy directly on leaf logits.
pub fn finite_difference_cross_entropy(seed: u64, tolerance: f64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (4usize, 6);
    let logits = random_vec(&mut rng, n * k, -2.0, 2.0);
    let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();

    let labels_c = labels.clone();
    let build = move |p: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(vec![n, k], p[0].clone()).unwrap().with_requires_grad());
        let loss = tape.cross_entropy_mean(l, &labels_c).unwrap();
        tape.data(loss)[0]
    };

    let params = vec![logits];
    let analytic = {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(vec![n, k], params[0].clone()).unwrap().with_requires_grad());
        let loss = tape.cross_entropy_mean(l, &labels).unwrap();
        tape.backward(loss).unwrap();
        vec![tape.grad(l).unwrap().to_vec()]
    };
    fd_compare("fd-cross-entropy", seed, tolerance, &params, &analytic, 200, build)
}

/// Degenerate zero-input case: gradients on both routes are zero.
pub fn finite_difference_zero_input(tolerance: f64) -> OracleReport {
    let (n, d, k) = (2usize, 4, 3);
    let build = |p: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![n, d]));
        let w = tape.leaf(Tensor::new(vec![d, k], p[0].clone()).unwrap().with_requires_grad());
        let b = tape.constant(Tensor::zeros(vec![k]));
        let y = tape.dense(x, w, b).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.data(loss)[0]
    };
    let params = vec![vec![0.3; d * k]];
    let analytic = vec![vec![0.0; d * k]];
    fd_compare("fd-zero-input", 0, tolerance, &params, &analytic, 200, build)
}

/// End-to-end MiniCNN: cross-entropy gradients for parameters and pixels.
pub fn finite_difference_mini_cnn(seed: u64, tolerance: f64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture::MiniCnn {
        in_channels: 1,
        height: 8,
        width: 8,
        num_classes: 4,
    };
    let base: Model<f64> = Model::new(arch.clone(), seed);
    let n = 3usize;
    let pixels = random_vec(&mut rng, n * 64, 0.0, 1.0);
    let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4)).collect();

    // parameter vectors in declaration order, pixels appended last
    let mut params: Vec<Vec<f64>> = base
        .params()
        .entries()
        .iter()
        .map(|e| e.tensor.data().to_vec())
        .collect();
    params.push(pixels);

    let arch_c = arch.clone();
    let base_c = base.clone();
    let labels_c = labels.clone();
    let build = move |p: &[Vec<f64>]| -> f64 {
        let mut model = base_c.clone();
        for (entry, data) in model.params_mut().entries_mut().iter_mut().zip(p) {
            entry.tensor.data_mut().copy_from_slice(data);
        }
        let images = Tensor::new(vec![n, 1, 8, 8], p.last().unwrap().clone()).unwrap();
        let mut tape = Tape::new();
        let fp = model
            .forward(&mut tape, images, ForwardOpts::inference())
            .unwrap();
        let loss = tape.cross_entropy_mean(fp.logits_id, &labels_c).unwrap();
        let _ = &arch_c;
        tape.data(loss)[0]
    };

    let analytic = {
        let images = Tensor::new(vec![n, 1, 8, 8], params.last().unwrap().clone()).unwrap();
        let mut tape = Tape::new();
        let fp = base
            .forward(
                &mut tape,
                images,
                ForwardOpts {
                    apply_masks: true,
                    param_grads: true,
                    input_grad: true,
                },
            )
            .unwrap();
        let loss = tape.cross_entropy_mean(fp.logits_id, &labels).unwrap();
        tape.backward(loss).unwrap();
        let mut grads: Vec<Vec<f64>> = fp
            .param_ids
            .iter()
            .map(|&id| tape.grad(id).unwrap().to_vec())
            .collect();
        grads.push(tape.grad(fp.input_id).unwrap().to_vec());
        grads
    };
    fd_compare("fd-mini-cnn", seed, tolerance, &params, &analytic, 32, build)
}

// ── Mask selection oracle ──────────────────────────────────────────────

/// Naive selection oracle: remove the lowest-scored still-kept entry `k`
/// times, lowest flat index on ties. Written independently of the mask
/// generator.
fn oracle_keep(scores: &[f64], k: usize) -> Vec<u8> {
    let mut keep = vec![1u8; scores.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if keep[i] == 0 {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if scores[i] < scores[b] => Some(i),
                other => other,
            };
        }
        match best {
            Some(b) => keep[b] = 0,
            None => break,
        }
    }
    keep
}

fn oracle_pruned_count(n: usize, p: f64) -> usize {
    if p.is_infinite() {
        n
    } else {
        ((n as f64) * (1.0 - 1.0 / p)).round().min(n as f64) as usize
    }
}

/// Exhaustively compare `generate_mask` to the selection oracle on small
/// score vectors, including duplicate scores with boundary ties.
pub fn mask_oracle_check(seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fixtures: Vec<Vec<f64>> = vec![
        vec![0.1, 0.5, 0.3, 0.9],
        vec![1.0; 7],                                  // all equal
        vec![0.2, 0.5, 0.2, 0.5, 0.2, 0.5, 0.1, 0.9], // boundary ties
        vec![0.0],
    ];
    for n in [2usize, 5, 11, 20] {
        // coarse grid makes duplicates likely
        fixtures.push((0..n).map(|_| f64::from(rng.gen_range(0..5)) / 4.0).collect());
    }

    let mut failures = 0usize;
    let mut worst = String::new();
    let mut checked = 0usize;

    for scores in &fixtures {
        let n = scores.len();
        let ps = [1.0, 4.0 / 3.0, 2.0, 2.5, n as f64];
        for &p in &ps {
            let spec = PruneSpec::new(PruneMethod::Magnitude, PruneScope::Global, p, 0);
            let sv = ScoreVector::new(
                PruneMethod::Magnitude,
                vec![ScoreEntry {
                    name: "layer".into(),
                    shape: vec![n],
                    scores: scores.clone(),
                }],
            )
            .unwrap();
            let result = generate_mask(&sv, &spec).unwrap();
            let got = &result.masks.entries()[0].keep;
            let expect = oracle_keep(scores, oracle_pruned_count(n, p));
            checked += 1;
            if *got != expect {
                failures += 1;
                if worst.is_empty() {
                    worst = format!("scores {scores:?} p={p}: got {got:?}, oracle {expect:?}");
                }
            }
        }
    }

    OracleReport {
        name: "mask-oracle".into(),
        max_abs_err: failures as f64,
        max_rel_err: failures as f64 / checked as f64,
        tolerance: 0.0,
        passed: failures == 0,
        seed,
        checked,
        skipped_kinks: 0,
        worst,
    }
}

/// Every registered check with its default tolerance. All must pass before
/// a sweep is trusted.
pub fn run_default_checks(seed: u64) -> Vec<OracleReport> {
    vec![
        finite_difference_dense(seed, 1e-6),
        finite_difference_conv_stack(seed.wrapping_add(1), 1e-4),
        finite_difference_cross_entropy(seed.wrapping_add(2), 1e-4),
        finite_difference_zero_input(1e-6),
        finite_difference_mini_cnn(seed.wrapping_add(3), 1e-4),
        mask_oracle_check(seed.wrapping_add(4)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_checks_all_pass() {
        for report in run_default_checks(2024) {
            println!("{report}");
            assert!(report.passed, "{report}");
        }
    }

    #[test]
    fn oracle_keep_breaks_ties_by_index() {
        assert_eq!(oracle_keep(&[1.0, 1.0, 1.0, 1.0, 1.0], 3), vec![0, 0, 0, 1, 1]);
        assert_eq!(oracle_keep(&[0.3, 0.1, 0.3, 0.2], 2), vec![1, 0, 1, 0]);
    }
}
