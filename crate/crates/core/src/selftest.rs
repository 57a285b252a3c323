//! Oracle suites behind `fineprune selftest`.
//!
//! Each check compares a production code path against an independent
//! computation (direct matrix inverse, Monte Carlo, finite differences,
//! element-wise re-derivation of masks) on seeded random instances.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::bo::{self, BoConfig, Evaluation};
use crate::error::Result;
use crate::gp::{kernel, GpModel, HyperChoice, KernelHyper};
use crate::nnet::{Activation, Batch, LayerSpec, MaskedNetwork};
use crate::rng::{self, Rng};
use crate::surgery::{self, LayerThreshold, PruningBounds, PruningParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&r, &s| m[r * n + col].abs().total_cmp(&m[s * n + col].abs()))?;
        if m[pivot * n + col] == 0.0 {
            return None;
        }
        for k in 0..n {
            m.swap(col * n + k, pivot * n + k);
            inv.swap(col * n + k, pivot * n + k);
        }
        let d = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        m[r * n + k] -= f * m[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Posterior mean and variance from an explicit inverse of the Gram matrix.
pub fn naive_posterior(
    xs: &[Vec<f64>],
    ys: &[f64],
    hyper: &KernelHyper,
    diag: f64,
    point: &[f64],
) -> Result<(f64, f64)> {
    let n = xs.len();
    let mu0 = ys.iter().sum::<f64>() / n as f64;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = kernel(&xs[i], &xs[j], hyper)?;
        }
        k[i * n + i] += diag;
    }
    let inv = gauss_jordan_inverse(&k, n).expect("gram matrix with positive diagonal noise is invertible");
    let kstar: Vec<f64> = xs.iter().map(|x| kernel(point, x, hyper)).collect::<Result<_>>()?;
    let mut mean = mu0;
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            mean += kstar[i] * inv[i * n + j] * (ys[j] - mu0);
            quad += kstar[i] * inv[i * n + j] * kstar[j];
        }
    }
    Ok((mean, kernel(point, point, hyper)? - quad))
}

fn uniform_point(r: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| r.random::<f64>()).collect()
}

/// Factorized GP posterior against [`naive_posterior`] on random instances
/// (d <= 8, n <= 20), plus the prior-variance bound.
pub fn gp_oracle(instances: usize, seed: u64) -> Result<Check> {
    let mut r = rng::rng_for(seed, &[101]);
    let mut worst: f64 = 0.0;
    let mut over_prior: f64 = f64::NEG_INFINITY;
    for _ in 0..instances {
        let dim = r.random_range(1..=8);
        let n = r.random_range(1..=20);
        let hyper = KernelHyper {
            signal_variance: r.random_range(0.25..4.0),
            length_scales: (0..dim).map(|_| r.random_range(0.1..2.0)).collect(),
            noise_variance: 10f64.powf(r.random_range(-4.0..-1.0)),
        };
        let xs: Vec<Vec<f64>> = (0..n).map(|_| uniform_point(&mut r, dim)).collect();
        let ys: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let model = GpModel::fit(dim, &xs, &ys, HyperChoice::Fixed(hyper.clone()))?;
        let queries: Vec<Vec<f64>> = (0..5)
            .map(|_| uniform_point(&mut r, dim))
            .chain(xs.iter().take(3).cloned())
            .collect();
        for q in &queries {
            let (m, v) = model.posterior(q)?;
            let (mo, vo) = naive_posterior(&xs, &ys, &hyper, model.diagonal_noise(), q)?;
            worst = worst.max((m - mo).abs()).max((v - vo.max(0.0)).abs());
            over_prior = over_prior.max(v - hyper.signal_variance);
        }
    }
    Ok(Check::new(
        "gp_oracle",
        worst <= 1e-8 && over_prior <= 1e-8,
        format!("{instances} instances, max |factorized - direct inverse| = {worst:.3e}, max(var - prior) = {over_prior:.3e}"),
    ))
}

/// Closed-form EI against a Monte Carlo mean of `max(0, best - f)`, EI >= 0
/// on a grid, and EI = 0 at the incumbent of a noiseless model.
pub fn ei_monte_carlo(triples: usize, samples: usize, seed: u64) -> Result<Check> {
    let mut r = rng::rng_for(seed, &[102]);
    let mut worst: f64 = 0.0;
    for _ in 0..triples {
        let mean = r.random_range(-1.0..1.0);
        let sd = r.random_range(0.05..1.0);
        let best = r.random_range(-1.0..1.0);
        let mut acc = 0.0;
        for _ in 0..samples {
            let z: f64 = StandardNormal.sample(&mut r);
            acc += (best - (mean + sd * z)).max(0.0);
        }
        let mc = acc / samples as f64;
        worst = worst.max((bo::expected_improvement_closed_form(mean, sd, best) - mc).abs());
    }

    let mut min_ei = f64::INFINITY;
    for i in 0..=40 {
        for j in 0..=40 {
            for best in [-3.0, 0.0, 3.0] {
                let mean = -4.0 + 0.2 * i as f64;
                let sd = if j == 0 {
                    0.0
                } else {
                    10f64.powf(-6.0 + 0.175 * j as f64)
                };
                min_ei = min_ei.min(bo::expected_improvement_closed_form(mean, sd, best));
            }
        }
    }

    let xs: Vec<Vec<f64>> = (0..6).map(|_| uniform_point(&mut r, 3)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.iter().map(|v| (v - 0.4).powi(2)).sum()).collect();
    let model = GpModel::fit(
        3,
        &xs,
        &ys,
        HyperChoice::Fixed(KernelHyper::isotropic(3, 0.5, 1.0, 0.0)),
    )?;
    let (arg, best) = ys
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &y)| if y < acc.1 { (i, y) } else { acc });
    let at_incumbent = bo::expected_improvement(&model, &xs[arg], best)?;

    Ok(Check::new(
        "ei_monte_carlo",
        worst <= 3e-3 && min_ei >= 0.0 && at_incumbent == 0.0,
        format!(
            "{triples} triples x {samples} samples, max |closed - MC| = {worst:.3e}; min EI on grid = {min_ei:.3e}; EI at noiseless incumbent = {at_incumbent:e}"
        ),
    ))
}

/// BO on `sum (x - 0.3)^2` over the 4-cube with a budget of 50, against
/// random search with the same budget.
pub fn bo_quadratic(seeds: u64, budget: usize) -> Result<Check> {
    let dim = 4;
    let bounds = PruningBounds::default();
    let f = |x: &[f64]| x.iter().map(|v| (v - 0.3).powi(2)).sum::<f64>();
    let mut bo_best = Vec::new();
    let mut random_best = Vec::new();
    for seed in 0..seeds {
        let config = BoConfig {
            budget,
            seed,
            record_timing: false,
            ..BoConfig::default()
        };
        let outcome = bo::bo_round(
            dim,
            &bounds,
            &config,
            1,
            Vec::new(),
            |x| {
                let l = f(x);
                Ok(Evaluation { eps: l, s: 0.0, l })
            },
            |_| Ok(()),
        )?;
        bo_best.push(outcome.best.l);
        let mut r = rng::rng_for(seed, &[103]);
        random_best.push(
            (0..budget)
                .map(|_| f(&uniform_point(&mut r, dim)))
                .fold(f64::INFINITY, f64::min),
        );
    }
    let hits = bo_best.iter().filter(|&&b| b <= 0.01).count();
    let (bo_med, rnd_med) = (median(&bo_best), median(&random_best));
    let needed = (seeds as usize * 8).div_ceil(10);
    Ok(Check::new(
        "bo_quadratic",
        hits >= needed && bo_med < rnd_med,
        format!(
            "best <= 0.01 in {hits}/{seeds} seeds (need {needed}); median best BO {bo_med:.3e} vs random {rnd_med:.3e}"
        ),
    ))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn random_masks(net: &mut MaskedNetwork, keep: f64, r: &mut Rng) {
    for layer in net.layers_mut() {
        for m in layer.mask.iter_mut() {
            *m = r.random::<f64>() < keep;
        }
    }
}

fn random_batch(r: &mut Rng, features: usize, classes: usize, n: usize) -> Result<Batch> {
    let inputs = (0..n * features).map(|_| StandardNormal.sample(&mut *r)).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Batch::new(inputs, features, labels)
}

/// Small dense and convolutional architectures, each under 1000 parameters.
pub fn small_architectures() -> Vec<Vec<LayerSpec>> {
    vec![
        vec![
            LayerSpec::dense(3, 8, Activation::Relu),
            LayerSpec::dense(8, 6, Activation::Relu),
            LayerSpec::dense(6, 4, Activation::Softmax),
        ],
        vec![
            LayerSpec::conv2d(1, 2, 3, 1, (5, 5), Activation::Relu),
            LayerSpec::dense(18, 3, Activation::Softmax),
        ],
        vec![
            LayerSpec::conv2d(2, 3, 2, 2, (6, 6), Activation::Relu),
            LayerSpec::dense(27, 5, Activation::Identity),
            LayerSpec::dense(5, 2, Activation::Softmax),
        ],
    ]
}

/// Backprop against central differences (h = 1e-5) of the loss with respect
/// to every effective weight, masked positions included, and every bias.
#[allow(clippy::needless_range_loop)]
pub fn gradient_check(seeds: u64) -> Result<Check> {
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut largest = 0usize;
    for seed in 0..seeds {
        for (k, specs) in small_architectures().into_iter().enumerate() {
            let mut r = rng::rng_for(seed, &[104, k as u64]);
            let mut net = MaskedNetwork::init(specs, rng::derive(seed, &[105, k as u64]))?;
            largest = largest.max(net.parameter_count());
            random_masks(&mut net, 0.7, &mut r);
            // zero biases put pre-activations of units with no live inputs exactly on the ReLU kink
            for layer in net.layers_mut() {
                for b in layer.bias.iter_mut() {
                    *b = r.random_range(-0.5..0.5);
                }
            }
            let batch = random_batch(&mut r, net.input_len(), net.classes(), 4)?;
            let (_, grads) = net.gradients(&batch)?;
            for li in 0..net.layers().len() {
                for wi in 0..net.layers()[li].weights.len() {
                    let layer = &net.layers()[li];
                    let (w0, m0) = (layer.weights[wi], layer.mask[wi]);
                    let base = if m0 { w0 } else { 0.0 };
                    let mut probe = |v: f64| -> Result<f64> {
                        let l = &mut net.layers_mut()[li];
                        l.weights[wi] = v;
                        l.mask[wi] = true;
                        let out = net.loss(&batch);
                        let l = &mut net.layers_mut()[li];
                        l.weights[wi] = w0;
                        l.mask[wi] = m0;
                        out
                    };
                    let fd = (probe(base + h)? - probe(base - h)?) / (2.0 * h);
                    worst = worst.max(rel(grads[li].weights[wi], fd));
                    checked += 1;
                }
                for bi in 0..net.layers()[li].bias.len() {
                    let b0 = net.layers()[li].bias[bi];
                    let mut probe = |v: f64| -> Result<f64> {
                        net.layers_mut()[li].bias[bi] = v;
                        let out = net.loss(&batch);
                        net.layers_mut()[li].bias[bi] = b0;
                        out
                    };
                    let fd = (probe(b0 + h)? - probe(b0 - h)?) / (2.0 * h);
                    worst = worst.max(rel(grads[li].bias[bi], fd));
                    checked += 1;
                }
            }
        }
    }
    Ok(Check::new(
        "gradient_check",
        worst <= 1e-4 && largest <= 1000,
        format!("{checked} partials over {seeds} seeds (largest net {largest} params), max relative error {worst:.3e}"),
    ))
}

/// Masked weights never reach the forward pass, and SGD still moves them by
/// `-lr * grad` of their effective position.
pub fn mask_semantics(cases: usize, seed: u64) -> Result<Check> {
    let archs = small_architectures();
    let mut inert_fail = 0;
    let mut update_fail = 0;
    let mut moved_cases = 0;
    for case in 0..cases {
        let mut r = rng::rng_for(seed, &[106, case as u64]);
        let specs = archs[case % archs.len()].clone();
        let mut net = MaskedNetwork::init(specs, rng::derive(seed, &[107, case as u64]))?;
        random_masks(&mut net, r.random_range(0.2..0.9), &mut r);
        let batch = random_batch(&mut r, net.input_len(), net.classes(), 3)?;

        let before = net.forward(&batch)?;
        let mut perturbed = net.clone();
        for layer in perturbed.layers_mut() {
            for (w, m) in layer.weights.iter_mut().zip(&layer.mask) {
                if !m {
                    *w += r.random_range(-10.0..10.0);
                }
            }
        }
        let after = perturbed.forward(&batch)?;
        if before.iter().map(|v| v.to_bits()).ne(after.iter().map(|v| v.to_bits())) {
            inert_fail += 1;
        }

        let lr = 0.1;
        let (_, grads) = net.gradients(&batch)?;
        let old = net.clone();
        net.sgd_step(&batch, lr)?;
        let mut moved = false;
        for ((new, old), g) in net.layers().iter().zip(old.layers()).zip(&grads) {
            for i in 0..new.weights.len() {
                let expect = old.weights[i] - lr * g.weights[i];
                if (new.weights[i] - expect).abs() > 1e-12 * (1.0 + expect.abs()) || new.mask[i] != old.mask[i] {
                    update_fail += 1;
                }
                moved |= !old.mask[i] && new.weights[i] != old.weights[i];
            }
        }
        if moved {
            moved_cases += 1;
        }
    }
    Ok(Check::new(
        "mask_semantics",
        inert_fail == 0 && update_fail == 0 && moved_cases > 0,
        format!(
            "{cases} cases: {inert_fail} forward changes under masked perturbation, {update_fail} weights off the dense SGD update, masked weights moved in {moved_cases} cases"
        ),
    ))
}

fn random_params(r: &mut Rng, layers: usize, p0: f64) -> PruningParams {
    PruningParams {
        layers: (0..layers)
            .map(|_| LayerThreshold {
                a: r.random_range(0.0..3.0),
                m: r.random_range(0.0..1.0),
            })
            .collect(),
        p0,
        kappa: r.random_range(0.0..10.0),
    }
}

/// Dead-zone hysteresis, monotonicity in `a`, and invariance of the masks
/// under rescaling a layer's weights, re-derived element by element.
pub fn surgery_properties(cases: usize, seed: u64) -> Result<Check> {
    let archs = small_architectures();
    let (mut hysteresis_fail, mut monotone_fail, mut scale_fail) = (0, 0, 0);
    for case in 0..cases {
        let mut r = rng::rng_for(seed, &[108, case as u64]);
        let mut net = MaskedNetwork::init(
            archs[case % archs.len()].clone(),
            rng::derive(seed, &[109, case as u64]),
        )?;
        random_masks(&mut net, 0.5, &mut r);
        let nl = net.layers().len();
        let params = random_params(&mut r, nl, 1.0);

        // with p0 = 1 every layer updates at iteration 0
        let mut updated = net.clone();
        surgery::update_masks(&mut updated, &params, 0, &mut rng::rng(case as u64))?;
        for ((old, new), t) in net.layers().iter().zip(updated.layers()).zip(&params.layers) {
            let sigma = surgery::weight_std(&old.weights);
            for i in 0..old.weights.len() {
                let mag = old.weights[i].abs();
                let expect = if mag < t.a * sigma {
                    false
                } else if mag >= (t.a + t.m) * sigma {
                    true
                } else {
                    old.mask[i]
                };
                if new.mask[i] != expect {
                    hysteresis_fail += 1;
                }
            }
        }

        let mut higher = params.clone();
        for t in &mut higher.layers {
            t.a += r.random_range(0.0..1.0);
        }
        let mut raised = net.clone();
        surgery::update_masks(&mut raised, &higher, 0, &mut rng::rng(case as u64))?;
        for (lo, hi) in updated.layers().iter().zip(raised.layers()) {
            if lo.mask.iter().zip(&hi.mask).any(|(&l, &h)| h && !l) {
                monotone_fail += 1;
            }
        }

        let c = 10f64.powf(r.random_range(-1.0..1.0));
        let mut scaled = net.clone();
        for layer in scaled.layers_mut() {
            for w in layer.weights.iter_mut() {
                *w *= c;
            }
        }
        surgery::update_masks(&mut scaled, &params, 0, &mut rng::rng(case as u64))?;
        for (((orig, a), b), t) in net
            .layers()
            .iter()
            .zip(updated.layers())
            .zip(scaled.layers())
            .zip(&params.layers)
        {
            let sigma = surgery::weight_std(&orig.weights);
            for i in 0..a.mask.len() {
                let mag = orig.weights[i].abs();
                let near = |thr: f64| (mag - thr * sigma).abs() <= 1e-9 * sigma.max(mag);
                if a.mask[i] != b.mask[i] && !near(t.a) && !near(t.a + t.m) {
                    scale_fail += 1;
                }
            }
        }
    }
    Ok(Check::new(
        "surgery_properties",
        hysteresis_fail + monotone_fail + scale_fail == 0,
        format!(
            "{cases} cases: {hysteresis_fail} hysteresis violations, {monotone_fail} monotonicity violations, {scale_fail} scale-covariance violations"
        ),
    ))
}

/// All oracle suites with their standard sizes.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        gp_oracle(50, seed)?,
        ei_monte_carlo(20, 1_000_000, seed)?,
        bo_quadratic(10, 50)?,
        gradient_check(10)?,
        mask_semantics(100, seed)?,
        surgery_properties(100, seed)?,
    ])
}
