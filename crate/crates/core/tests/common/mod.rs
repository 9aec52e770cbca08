//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use hmm_vrso::model::RealizedTransitions;
use hmm_vrso::sim::{DiveConfig, simulate_dives};
use hmm_vrso::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `log f_i(y)` for every state, written out from the model definitions.
pub fn log_densities(em: &EmissionParams, y: &[f64]) -> Vec<f64> {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    match em {
        EmissionParams::Gaussian(g) => (0..g.n)
            .map(|i| {
                (0..g.d)
                    .map(|k| {
                        let var = g.log_vars[i * g.d + k].exp();
                        let z = y[k] - g.means[i * g.d + k];
                        -0.5 * (ln_2pi + var.ln() + z * z / var)
                    })
                    .sum()
            })
            .collect(),
        EmissionParams::NormalBernoulli(nb) => (0..nb.means.len())
            .map(|i| {
                let var = nb.log_vars[i].exp();
                let z = y[0] - nb.means[i];
                let p = match nb.end_fixed[i] {
                    Some(p) => p,
                    None => 1.0 / (1.0 + (-nb.end_logits[i]).exp()),
                };
                let mass = if y[1] == 1.0 { p } else { 1.0 - p };
                -0.5 * (ln_2pi + var.ln() + z * z / var) + mass.ln()
            })
            .collect(),
        EmissionParams::Categorical(c) => (0..c.n)
            .map(|i| {
                let row = &c.logits[i * c.symbols..(i + 1) * c.symbols];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                (row[y[0] as usize].exp() / z).ln()
            })
            .collect(),
    }
}

/// Softmax over the unmasked entries; masked entries are exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let z: f64 = logits.iter().zip(mask).filter(|(_, m)| !**m).map(|(l, _)| l.exp()).sum();
    logits.iter().zip(mask).map(|(l, m)| if *m { 0.0 } else { l.exp() / z }).collect()
}

/// `(Γ, δ)` of a homogeneous chain.
pub fn chain(tl: &TransitionLogits) -> (Vec<f64>, Vec<f64>) {
    let n = tl.n;
    let mut g = Vec::with_capacity(n * n);
    for i in 0..n {
        g.extend(masked_softmax(&tl.eta_gamma[i * n..(i + 1) * n], &tl.gamma_mask[i * n..(i + 1) * n]));
    }
    (g, masked_softmax(&tl.eta_delta, &tl.delta_mask))
}

pub struct Brute {
    pub loglik: f64,
    pub gamma: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
}

/// Sums over all `N^T` state paths.
pub fn brute_force(params: &HmmParams, obs: &Observations) -> Brute {
    let TransitionModel::Homogeneous(tl) = &params.transitions else { panic!("homogeneous chains only") };
    let (g, d) = chain(tl);
    let (n, len) = (tl.n, obs.len);
    let dens: Vec<Vec<f64>> = (0..len).map(|t| log_densities(&params.emission, obs.row(t)).iter().map(|v| v.exp()).collect()).collect();
    let mut total = 0.0;
    let mut gamma = vec![vec![0.0; n]; len];
    let mut xi = vec![vec![0.0; n * n]; len];
    let mut path = vec![0usize; len];
    for code in 0..n.pow(len as u32) {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % n;
            c /= n;
        }
        let mut p = d[path[0]] * dens[0][path[0]];
        for t in 1..len {
            p *= g[path[t - 1] * n + path[t]] * dens[t][path[t]];
        }
        total += p;
        for t in 0..len {
            gamma[t][path[t]] += p;
            if t > 0 {
                xi[t][path[t - 1] * n + path[t]] += p;
            }
        }
    }
    for row in gamma.iter_mut().chain(xi.iter_mut()) {
        row.iter_mut().for_each(|v| *v /= total);
    }
    Brute { loglik: total.ln(), gamma, xi }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 { 0.0 } else { x * y.ln() }
}

/// `Q(φ | weights) = Σ γ_1 log δ + Σ ξ_t log Γ + Σ γ_t log f(y_t)`, with the
/// chain read off `trans`.
pub fn q_direct(params: &HmmParams, trans: &RealizedTransitions, cache: &PosteriorCache, obs: &Observations) -> f64 {
    let n = trans.n;
    let mut q: f64 = (0..n).map(|i| xlogy(cache.gamma(0)[i], trans.delta[i])).sum();
    for t in 0..obs.len {
        let lf = log_densities(&params.emission, obs.row(t));
        q += (0..n).map(|i| if cache.gamma(t)[i] == 0.0 { 0.0 } else { cache.gamma(t)[i] * lf[i] }).sum::<f64>();
        if t > 0 {
            let m = trans.matrix(obs.regime(t));
            q += cache.xi(t).unwrap().iter().zip(m).map(|(&w, &p)| xlogy(w, p)).sum::<f64>();
        }
    }
    q
}

/// A random homogeneous model with occasional masked transitions.
pub fn random_model(rng: &mut impl Rng, n: usize, emission: &str, d: usize) -> HmmParams {
    let em = match emission {
        "gaussian" => {
            let means = (0..n * d).map(|_| 2.0 * normal(rng)).collect();
            let log_vars = (0..n * d).map(|_| 0.5 * normal(rng)).collect();
            EmissionParams::Gaussian(DiagGaussian::new(n, d, means, log_vars).unwrap())
        }
        "categorical" => {
            let symbols = d + 1;
            let logits = (0..n * symbols).map(|k| if k % symbols == 0 { 0.0 } else { normal(rng) }).collect();
            EmissionParams::Categorical(Categorical { n, symbols, logits })
        }
        "normal_bernoulli" => {
            let fixed = (0..n).map(|i| if i % 2 == 0 { None } else { Some(rng.random_range(0.05..0.95)) }).collect();
            EmissionParams::NormalBernoulli(
                NormalBernoulli::new(
                    (0..n).map(|_| normal(rng)).collect(),
                    (0..n).map(|_| 0.5 * normal(rng)).collect(),
                    (0..n).map(|_| normal(rng)).collect(),
                    fixed,
                )
                .unwrap(),
            )
        }
        other => panic!("unknown emission {other}"),
    };
    let mut tl = TransitionLogits::uniform(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                if rng.random_bool(0.2) {
                    tl.gamma_mask[i * n + j] = true;
                } else {
                    tl.eta_gamma[i * n + j] = normal(rng);
                }
            }
        }
    }
    for k in 1..n {
        if rng.random_bool(0.2) {
            tl.delta_mask[k] = true;
        } else {
            tl.eta_delta[k] = normal(rng);
        }
    }
    HmmParams::new(em, TransitionModel::Homogeneous(tl)).unwrap()
}

/// Observations drawn to fit the emission kind (not from the model itself).
pub fn random_obs(rng: &mut impl Rng, params: &HmmParams, len: usize) -> Observations {
    match &params.emission {
        EmissionParams::Gaussian(g) => Observations::new(g.d, (0..len * g.d).map(|_| 2.0 * normal(rng)).collect()).unwrap(),
        EmissionParams::Categorical(c) => {
            Observations::new(1, (0..len).map(|_| rng.random_range(0..c.symbols) as f64).collect()).unwrap()
        }
        EmissionParams::NormalBernoulli(_) => {
            let v = (0..len).flat_map(|_| [normal(rng), if rng.random_bool(0.3) { 1.0 } else { 0.0 }]).collect();
            Observations::new(2, v).unwrap()
        }
    }
}

/// Small dive data set with parameters jittered away from the truth.
pub fn random_dive_instance(rng: &mut impl Rng, len: usize, seed: u64) -> (HmmParams, Observations) {
    let cfg = DiveConfig::new(len, seed);
    let sim = simulate_dives(&cfg).unwrap();
    let truth = cfg.params().unwrap();
    let x: Vec<f64> = truth.to_flat().iter().map(|v| v + 0.3 * normal(rng)).collect();
    (truth.with_flat(&x).unwrap(), sim.obs)
}

pub fn jitter(rng: &mut impl Rng, p: &HmmParams, scale: f64) -> HmmParams {
    let x: Vec<f64> = p.to_flat().iter().map(|v| v + scale * normal(rng)).collect();
    p.with_flat(&x).unwrap()
}

/// Central differences of `f` over the flat parameter vector.
pub fn fd_grad(p: &HmmParams, h: f64, f: impl Fn(&HmmParams) -> f64) -> Vec<f64> {
    let x = p.to_flat();
    (0..x.len())
        .map(|k| {
            let mut a = x.clone();
            let mut b = x.clone();
            a[k] += h;
            b[k] -= h;
            (f(&p.with_flat(&a).unwrap()) - f(&p.with_flat(&b).unwrap())) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / s.max(1e-8)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One closed-form Baum-Welch update for a Gaussian chain whose free
/// transition logits are off the diagonal. The start distribution is kept.
pub fn baum_welch(p: &HmmParams, obs: &Observations) -> HmmParams {
    let c = e_step(p, obs).unwrap();
    let n = p.n_states();
    let mut q = p.clone();
    let EmissionParams::Gaussian(g) = &mut q.emission else { panic!("gaussian emissions only") };
    let d = g.d;
    for i in 0..n {
        let w: f64 = (0..obs.len).map(|t| c.gamma(t)[i]).sum();
        for k in 0..d {
            let m = (0..obs.len).map(|t| c.gamma(t)[i] * obs.row(t)[k]).sum::<f64>() / w;
            g.means[i * d + k] = m;
            if !g.fixed_variances {
                let v = (0..obs.len).map(|t| c.gamma(t)[i] * (obs.row(t)[k] - m).powi(2)).sum::<f64>() / w;
                g.log_vars[i * d + k] = v.ln();
            }
        }
    }
    let TransitionModel::Homogeneous(tl) = &mut q.transitions else { panic!("homogeneous chains only") };
    let mut counts = vec![0.0; n * n];
    for t in 1..obs.len {
        counts.iter_mut().zip(c.xi(t).unwrap()).for_each(|(a, b)| *a += b);
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && !tl.gamma_mask[i * n + j] {
                tl.eta_gamma[i * n + j] = (counts[i * n + j] / counts[i * n + i]).ln();
            }
        }
    }
    q
}

/// `∇F(φ | w(φ))`, which is `-∇ log p / T`.
pub fn self_grad(p: &HmmParams, obs: &Observations) -> Vec<f64> {
    let c = e_step(p, obs).unwrap();
    full_grad(p, &c, obs).unwrap().to_flat()
}

/// Drives a Gaussian chain to a stationary point: Baum-Welch to get close,
/// then Newton steps on the library gradient until it sits at rounding
/// level.
pub fn stationary_point(start: &HmmParams, obs: &Observations) -> HmmParams {
    let mut p = start.clone();
    for _ in 0..2000 {
        p = baum_welch(&p, obs);
    }
    for _ in 0..6 {
        let x = p.to_flat();
        let g0 = self_grad(&p, obs);
        let k = x.len();
        let h = 1e-5;
        let mut hess = nalgebra::DMatrix::<f64>::zeros(k, k);
        for j in 0..k {
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            let ga = self_grad(&p.with_flat(&a).unwrap(), obs);
            let gb = self_grad(&p.with_flat(&b).unwrap(), obs);
            for i in 0..k {
                hess[(i, j)] = (ga[i] - gb[i]) / (2.0 * h);
            }
        }
        let step = hess.lu().solve(&nalgebra::DVector::from_vec(g0)).expect("nonsingular Hessian");
        let y: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a - b).collect();
        p = p.with_flat(&y).unwrap();
    }
    p
}

/// Log-likelihoods along the accepted iterates never decrease.
pub fn is_monotone(trace: &RunTrace) -> bool {
    trace.rows.windows(2).all(|w| w[1].loglik >= w[0].loglik)
        && trace.attempts.windows(2).all(|w| w[1].accepted_loglik >= w[0].accepted_loglik)
}
