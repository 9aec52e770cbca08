use hmm_vrso::sim::*;
use hmm_vrso::*;

fn transition_counts(states: &[usize], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for w in states.windows(2) {
        c[w[0] * n + w[1]] += 1.0;
    }
    c
}

fn check_counts(cfg: &SimConfig) {
    let sim = simulate_hmm(cfg).unwrap();
    let n = cfg.n_states;
    let g = cfg.transition_matrix();
    let c = transition_counts(&sim.states, n);
    for i in 0..n {
        let row: f64 = c[i * n..(i + 1) * n].iter().sum();
        assert!(row > 0.0);
        for j in 0..n {
            let p = g[i * n + j];
            let sd = (row * p * (1.0 - p)).sqrt();
            let diff = (c[i * n + j] - row * p).abs();
            assert!(diff <= 3.0 * sd, "({i},{j}): {} vs {} ± {sd}", c[i * n + j], row * p);
        }
    }
}

#[test]
fn transition_counts_follow_the_sticky_matrix() {
    check_counts(&SimConfig::new(100_000, 3, 1, 11));
}

#[test]
fn transition_counts_follow_a_custom_matrix() {
    let mut cfg = SimConfig::new(100_000, 3, 1, 12);
    cfg.gamma = Some(vec![0.5, 0.3, 0.2, 0.1, 0.8, 0.1, 0.25, 0.25, 0.5]);
    check_counts(&cfg);
}

#[test]
fn state_means_match_the_truth() {
    let sim = simulate_hmm(&SimConfig::new(100_000, 3, 2, 13)).unwrap();
    let EmissionParams::Gaussian(em) = &sim.truth.emission else { unreachable!() };
    let sd = (-1.0f64).exp();
    for i in 0..3 {
        let rows: Vec<usize> = (0..sim.obs.len).filter(|&t| sim.states[t] == i).collect();
        let n_i = rows.len() as f64;
        assert!(n_i > 0.0);
        for k in 0..2 {
            let m = rows.iter().map(|&t| sim.obs.row(t)[k]).sum::<f64>() / n_i;
            assert!((m - em.means[i * 2 + k]).abs() <= 4.0 * sd / n_i.sqrt());
            assert_eq!(em.log_vars[i * 2 + k], -2.0);
        }
    }
}

#[test]
fn sticky_entries_cover_the_grid() {
    assert_eq!(sticky_entries(1_000, 3), (0.9, 0.05));
    assert_eq!(sticky_entries(1_000, 6), (0.9, 0.02));
    assert_eq!(sticky_entries(100_000, 3), (0.999, 5e-4));
    assert_eq!(sticky_entries(100_000, 6), (0.999, 2e-4));
    for (len, n) in [(500, 2), (10_000, 4), (50, 5)] {
        let cfg = SimConfig::new(len, n, 1, 0);
        let g = cfg.transition_matrix();
        for i in 0..n {
            assert!((g[i * n..(i + 1) * n].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn presets_parse() {
    let cfg = SimConfig::preset("sim-1e3-n3-d3", 4).unwrap();
    assert_eq!((cfg.len, cfg.n_states, cfg.dim, cfg.seed), (1000, 3, 3, 4));
    let cfg = SimConfig::preset("sim-1e5-n6-d1", 0).unwrap();
    assert_eq!((cfg.len, cfg.n_states, cfg.dim), (100_000, 6, 1));
    for bad in ["sim-1e3-n3", "dive-1e3-n3-d3", "sim-10-n3-d3", "sim-1e3-nx-d3"] {
        assert!(SimConfig::preset(bad, 0).is_err(), "{bad}");
    }
}

#[test]
fn simulation_is_reproducible() {
    let a = simulate_hmm(&SimConfig::new(500, 3, 2, 5)).unwrap();
    let b = simulate_hmm(&SimConfig::new(500, 3, 2, 5)).unwrap();
    let c = simulate_hmm(&SimConfig::new(500, 3, 2, 6)).unwrap();
    assert_eq!(a.obs, b.obs);
    assert_eq!(a.states, b.states);
    assert_ne!(a.obs, c.obs);
    let d1 = simulate_dives(&DiveConfig::new(500, 5)).unwrap();
    let d2 = simulate_dives(&DiveConfig::new(500, 5)).unwrap();
    assert_eq!(d1.obs, d2.obs);
    assert_eq!(d1.states(), d2.states());
}

#[test]
fn bad_simulation_settings_are_rejected() {
    assert!(simulate_hmm(&SimConfig::new(0, 3, 1, 0)).is_err());
    let mut cfg = SimConfig::new(10, 2, 1, 0);
    cfg.gamma = Some(vec![0.5, 0.6, 0.5, 0.5]);
    assert!(simulate_hmm(&cfg).is_err());
    let mut d = DiveConfig::new(10, 0);
    d.fine[0][3] = 0.1;
    d.fine[0][4] = 0.862;
    assert!(simulate_dives(&d).is_err());
}

#[test]
fn dives_are_well_formed() {
    let sim = simulate_dives(&DiveConfig::new(20_000, 3)).unwrap();
    let mut new_dive = true;
    for t in 0..sim.obs.len {
        if new_dive {
            assert_eq!(sim.phase[t], DESCENT);
        } else {
            assert!(sim.phase[t] >= sim.phase[t - 1]);
            assert_eq!(sim.dive_type[t], sim.dive_type[t - 1]);
        }
        let end = sim.obs.row(t)[1] == 1.0;
        assert!(!end || sim.phase[t] == ASCENT);
        new_dive = end;
    }
}

#[test]
fn dive_types_reach_the_stationary_mix() {
    let cfg = DiveConfig::new(400_000, 8);
    let sim = simulate_dives(&cfg).unwrap();
    let g = cfg.coarse_normalized();
    let m = cfg.types();
    let mut pi = vec![1.0 / m as f64; m];
    for _ in 0..1000 {
        pi = (0..m).map(|b| (0..m).map(|a| pi[a] * g[a * m + b]).sum()).collect();
    }
    let mut counts = vec![0.0; m];
    let mut dives = 0.0;
    for t in 0..sim.obs.len {
        if t == 0 || sim.obs.row(t - 1)[1] == 1.0 {
            counts[sim.dive_type[t]] += 1.0;
            dives += 1.0;
        }
    }
    assert!(dives > 5000.0);
    for a in 0..m {
        let f = counts[a] / dives;
        let sd = (pi[a] * (1.0 - pi[a]) / dives).sqrt();
        // Consecutive types are correlated, so allow a wider band than iid.
        assert!((f - pi[a]).abs() <= 6.0 * sd, "type {a}: {f} vs {}", pi[a]);
    }
}

#[test]
fn dive_truth_reproduces_the_configured_chain() {
    let cfg = DiveConfig::new(10, 0);
    let p = cfg.params().unwrap();
    let tr = p.realize().unwrap();
    let g = cfg.coarse_normalized();
    let n = 9;
    for a in 0..3 {
        for u in 0..PHASES {
            for v in 0..PHASES {
                let w = tr.matrix(model::WITHIN)[(a * PHASES + u) * n + a * PHASES + v];
                assert!((w - cfg.fine[a][u * PHASES + v]).abs() < 1e-12);
            }
        }
        for b in 0..3 {
            let x = tr.matrix(model::BETWEEN)[(a * PHASES) * n + b * PHASES + DESCENT];
            assert!((x - g[a * 3 + b]).abs() < 1e-12);
        }
        assert!((tr.delta[a * PHASES] - cfg.coarse_start[a]).abs() < 1e-12);
    }
}

#[test]
fn initial_values_respect_the_data() {
    let sim = simulate_hmm(&SimConfig::new(300, 2, 2, 1)).unwrap();
    let (p, steps) = init_params(&sim.obs, InitScheme::Sim { n_states: 4 }, 1).unwrap();
    assert_eq!(p.n_states(), 4);
    assert_eq!(steps, StepSizes::new(INITIAL_LIPSCHITZ));
    let flat = Observations::new(1, vec![2.0; 10]).unwrap();
    assert!(init_params(&flat, InitScheme::Sim { n_states: 2 }, 0).is_err());
    assert!(init_params(&sim.obs, InitScheme::Dive, 0).is_err());
}

#[test]
fn identity_chain_never_moves() {
    let mut cfg = SimConfig::new(200, 3, 1, 9);
    cfg.gamma = Some(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let sim = simulate_hmm(&cfg).unwrap();
    assert!(sim.states.iter().all(|&x| x == sim.states[0]));
}

#[test]
fn initial_steps_are_a_hundredth() {
    let sim = simulate_hmm(&SimConfig::new(50, 2, 1, 0)).unwrap();
    let (_, steps) = init_params(&sim.obs, InitScheme::Sim { n_states: 2 }, 0).unwrap();
    assert!((steps.lambda_theta() - 0.01).abs() < 1e-15);
    assert!((steps.lambda_eta() - 0.01).abs() < 1e-15);
}
