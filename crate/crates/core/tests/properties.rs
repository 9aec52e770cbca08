mod common;

use common::*;
use hmm_vrso::model::{softmax_masked, BETWEEN, WITHIN};
use hmm_vrso::objective::HmmObjective;
use hmm_vrso::sim::{init_params, simulate_hmm, InitScheme, SimConfig};
use hmm_vrso::vrso::{vrso, VrsoConfig};
use hmm_vrso::*;
use proptest::prelude::*;
use rand::Rng;

fn kind(k: usize) -> &'static str {
    ["gaussian", "categorical", "normal_bernoulli"][k % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_rows_sum_to_one(seed in any::<u64>(), n in 1usize..6) {
        let mut r = rng(seed);
        let p = random_model(&mut r, n, "gaussian", 1);
        let tr = p.realize().unwrap();
        for i in 0..n {
            let s: f64 = tr.matrix(WITHIN)[i * n..(i + 1) * n].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert!((tr.delta.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_ignores_a_common_shift(logits in prop::collection::vec(-30.0f64..30.0, 1..7), shift in -50.0f64..50.0, mask_bits in any::<u8>()) {
        let k = logits.len();
        let mut mask: Vec<bool> = (0..k).map(|j| mask_bits >> j & 1 == 1).collect();
        mask[0] = false;
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let (mut a, mut b) = (vec![0.0; k], vec![0.0; k]);
        softmax_masked(&logits, &mask, &mut a);
        softmax_masked(&shifted, &mask, &mut b);
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
        prop_assert!(a.iter().zip(&mask).all(|(v, m)| !m || *v == 0.0));
    }

    #[test]
    fn flat_vector_round_trip(seed in any::<u64>(), n in 1usize..4, k in 0usize..3, dive in any::<bool>()) {
        let mut r = rng(seed);
        let p = if dive { random_dive_instance(&mut r, 30, seed % 7).0 } else { random_model(&mut r, n, kind(k), 2) };
        let x = p.to_flat();
        prop_assert_eq!(x.len(), p.dim());
        prop_assert_eq!(p.with_flat(&x).unwrap(), p.clone());

        let y: Vec<f64> = x.iter().map(|v| v + normal(&mut r)).collect();
        let q = p.with_flat(&y).unwrap();
        prop_assert_eq!(q.to_flat(), y);
        for (a, b) in p.transitions.blocks().into_iter().zip(q.transitions.blocks()) {
            prop_assert_eq!(&a.gamma_mask, &b.gamma_mask);
            for i in 0..a.n {
                prop_assert_eq!(b.eta_gamma[i * a.n + i], 0.0);
                for j in 0..a.n {
                    if a.gamma_mask[i * a.n + j] {
                        prop_assert_eq!(a.eta_gamma[i * a.n + j], b.eta_gamma[i * a.n + j]);
                    }
                }
            }
            prop_assert_eq!(b.eta_delta[0], 0.0);
        }
        if let (EmissionParams::NormalBernoulli(a), EmissionParams::NormalBernoulli(b)) = (&p.emission, &q.emission) {
            prop_assert_eq!(&a.end_fixed, &b.end_fixed);
        }
    }

    #[test]
    fn dive_realization_matches_explicit_blocks(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (p, _) = random_dive_instance(&mut r, 30, seed % 5);
        let TransitionModel::DiveStructured { coarse, fine } = &p.transitions else { unreachable!() };
        let (gc, dc) = chain(coarse);
        let fines: Vec<Vec<f64>> = fine.iter().map(|f| chain(f).0).collect();
        let (a_n, p_n) = (coarse.n, fine[0].n);
        let n = a_n * p_n;
        let tr = p.realize().unwrap();
        for i in 0..n {
            let expect = if i % p_n == 0 { dc[i / p_n] } else { 0.0 };
            prop_assert!((tr.delta[i] - expect).abs() <= 1e-15);
            for j in 0..n {
                let (a, u, b, v) = (i / p_n, i % p_n, j / p_n, j % p_n);
                let within = if a == b { fines[a][u * p_n + v] } else { 0.0 };
                let between = gc[a * a_n + b] * if v == 0 { 1.0 } else { 0.0 };
                prop_assert!((tr.matrix(WITHIN)[i * n + j] - within).abs() <= 1e-15);
                prop_assert!((tr.matrix(BETWEEN)[i * n + j] - between).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn pairwise_posteriors_marginalize(seed in any::<u64>(), n in 1usize..4, k in 0usize..3, len in 2usize..30) {
        let mut r = rng(seed);
        let p = random_model(&mut r, n, kind(k), 2);
        let obs = random_obs(&mut r, &p, len);
        let c = e_step(&p, &obs).unwrap();
        for t in 1..len {
            let xi = c.xi(t).unwrap();
            for i in 0..n {
                let row: f64 = (0..n).map(|j| xi[i * n + j]).sum();
                let col: f64 = (0..n).map(|j| xi[j * n + i]).sum();
                prop_assert!((row - c.gamma(t - 1)[i]).abs() <= 1e-12);
                prop_assert!((col - c.gamma(t)[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relabeling_states_keeps_the_likelihood(seed in any::<u64>(), len in 1usize..20) {
        let mut r = rng(seed);
        let n = 3;
        let p = random_model(&mut r, n, "gaussian", 2);
        let obs = random_obs(&mut r, &p, len);
        let TransitionModel::Homogeneous(tl) = &p.transitions else { unreachable!() };
        let (g, d) = chain(tl);
        // Swap states 0 and 2 and rebuild the chain with state 0 keeping positive start mass.
        let perm = [2usize, 1, 0];
        let mut g2 = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g2[i * n + j] = g[perm[i] * n + perm[j]];
            }
        }
        let d2: Vec<f64> = perm.iter().map(|&k| d[k]).collect();
        prop_assume!(d2[0] > 0.0);
        let EmissionParams::Gaussian(em) = &p.emission else { unreachable!() };
        let mut em2 = em.clone();
        for i in 0..n {
            for c in 0..em.d {
                em2.means[i * em.d + c] = em.means[perm[i] * em.d + c];
                em2.log_vars[i * em.d + c] = em.log_vars[perm[i] * em.d + c];
            }
        }
        let q = HmmParams::new(
            EmissionParams::Gaussian(em2),
            TransitionModel::Homogeneous(TransitionLogits::from_probabilities(&g2, &d2).unwrap()),
        ).unwrap();
        let (a, b) = (log_likelihood(&p, &obs).unwrap(), log_likelihood(&q, &obs).unwrap());
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn gradient_scales_with_the_weights(seed in any::<u64>(), scale in 0.01f64..50.0) {
        let mut r = rng(seed);
        let p = random_model(&mut r, 3, kind(seed as usize), 2);
        let obs = random_obs(&mut r, &p, 10);
        let c = e_step(&jitter(&mut r, &p, 0.5), &obs).unwrap();
        let t = r.random_range(1..10);
        let w = c.weights(t);
        let gamma: Vec<f64> = w.gamma.iter().map(|v| v * scale).collect();
        let xi: Vec<f64> = w.xi.unwrap().iter().map(|v| v * scale).collect();
        let g1 = grad_loss_t(&p, &obs, t, w).unwrap().to_flat();
        let g2 = grad_loss_t(&p, &obs, t, WeightSlice { gamma: &gamma, xi: Some(&xi) }).unwrap().to_flat();
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert!((a * scale - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn saga_mean_matches_the_store(seed in any::<u64>()) {
        let sim = simulate_hmm(&SimConfig::new(40, 2, 1, seed)).unwrap();
        let (p, mut steps) = init_params(&sim.obs, InitScheme::Sim { n_states: 2 }, seed).unwrap();
        let mut x = p.to_flat();
        let cache = e_step(&p, &sim.obs).unwrap();
        let mut obj = HmmObjective::new(p, cache, &sim.obs).unwrap();
        let mut meter = EpochMeter::new(sim.obs.len);
        let mut store = GradientStore::init(&obj, &mut meter).unwrap();
        let mut sampler = IndexSampler::new(sim.obs.len, seed);
        let cfg = VrsoConfig { algorithm: Algorithm::Saga, partial_e: seed % 2 == 0, iterations: 1, adaptive: true };
        for _ in 0..100 {
            vrso(&mut obj, &mut x, &mut store, &mut steps, &cfg, &mut sampler, &mut meter).unwrap();
            prop_assert!(max_abs_diff(&store.mean, &store.recomputed_mean()) <= 1e-10);
        }
    }

    #[test]
    fn sampler_passes_are_permutations(seed in any::<u64>(), n in 1usize..40) {
        let mut s = IndexSampler::new(n, seed);
        for _ in 0..3 {
            let mut pass: Vec<usize> = (0..n).map(|_| s.next_index()).collect();
            pass.sort_unstable();
            prop_assert_eq!(pass, (0..n).collect::<Vec<_>>());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn accepted_iterates_never_lose_likelihood(seed in any::<u64>(), alg in 0usize..2, partial_e in any::<bool>()) {
        let sim = simulate_hmm(&SimConfig::new(120, 2, 2, seed)).unwrap();
        let (p, steps) = init_params(&sim.obs, InitScheme::Sim { n_states: 2 }, seed).unwrap();
        let algorithm = [Algorithm::Svrg, Algorithm::Saga][alg];
        let cfg = FitConfig::new(algorithm, partial_e, 120, 6, seed);
        let trace = match em_vrso_v1(p, &sim.obs, steps, &cfg) {
            Ok(f) => f.trace,
            Err(e) => e.trace,
        };
        prop_assert!(is_monotone(&trace));
        prop_assert!(trace.attempts.iter().all(|a| a.ell_star >= 1));
    }

    #[test]
    fn fits_are_reproducible(seed in any::<u64>(), partial_e in any::<bool>()) {
        let sim = simulate_hmm(&SimConfig::new(80, 2, 1, seed)).unwrap();
        let (p, steps) = init_params(&sim.obs, InitScheme::Sim { n_states: 2 }, seed).unwrap();
        let cfg = FitConfig::new(Algorithm::Saga, partial_e, 80, 3, seed);
        let a = em_vrso_v1(p.clone(), &sim.obs, steps, &cfg).map(|f| f.params.to_flat()).map_err(|e| e.error.to_string());
        let b = em_vrso_v1(p, &sim.obs, steps, &cfg).map(|f| f.params.to_flat()).map_err(|e| e.error.to_string());
        prop_assert_eq!(a, b);
    }
}
