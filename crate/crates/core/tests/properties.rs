use proptest::prelude::*;
use rand::SeedableRng;

use fedsurrogate::linalg::{quad_form, random_spd, sym_eigen, sym_solve, SymMatrix, Vector};
use fedsurrogate::lrdecay::{decay_step, DecayConfig, DecayState};
use fedsurrogate::problem::{Client, Population, QuadraticExample};
use fedsurrogate::surrogate::{phi, phi_deficit, qa_eigenvalue, surrogate_minimizer, ThetaWeights};

fn sym_strategy(max_d: usize) -> impl Strategy<Value = SymMatrix> {
    (1..=max_d).prop_flat_map(|d| {
        prop::collection::vec(-5.0f64..5.0, d * (d + 1) / 2).prop_map(move |u| SymMatrix::from_upper(d, u).unwrap())
    })
}

fn spd(seed: u64, d: usize, lo: f64, hi: f64) -> SymMatrix {
    let mut r = rand::rngs::StdRng::seed_from_u64(seed);
    random_spd(d, lo, hi, &mut r).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eigen_reconstructs_and_bounds_rayleigh(m in sym_strategy(7), v in prop::collection::vec(-1.0f64..1.0, 7)) {
        let e = sym_eigen(&m).unwrap();
        let scale = m.frobenius_norm().max(1.0);
        prop_assert!(e.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-12 * scale);
        prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        let x = Vector::new(v[..m.dim()].to_vec());
        let n2 = x.norm_sq();
        prop_assume!(n2 > 1e-6);
        let r = quad_form(&m, &x).unwrap() / n2;
        prop_assert!(r >= e.min() - 1e-12 * scale && r <= e.max() + 1e-12 * scale);
    }

    #[test]
    fn solve_inverts_spd(seed in any::<u64>(), d in 1usize..7, b in prop::collection::vec(-3.0f64..3.0, 7)) {
        let a = spd(seed, d, 0.2, 5.0);
        let rhs = Vector::new(b[..d].to_vec());
        let x = sym_solve(&a, &rhs, "test").unwrap();
        prop_assert!(a.mul_vec(&x).unwrap().sub(&rhs).max_abs() <= 1e-12);
    }

    #[test]
    fn theta_trims_trailing_zeros(w in prop::collection::vec(0.0f64..2.0, 1..8), zeros in 0usize..4) {
        prop_assume!(*w.last().unwrap() > 0.0);
        let mut padded = w.clone();
        padded.extend(std::iter::repeat_n(0.0, zeros));
        let t = ThetaWeights::new(padded).unwrap();
        prop_assert_eq!(t.as_slice(), &w[..]);
        prop_assert_eq!(t.k(), w.len());
        prop_assert!((t.poly(1.0) - w.iter().sum::<f64>()).abs() <= 1e-12);
    }

    #[test]
    fn phi_between_zero_and_k_lambda(k in 1usize..60, lambda in 0.01f64..10.0, frac in 0.0f64..1.0) {
        let gamma = frac / lambda;
        let p = phi(k, lambda, gamma);
        let kl = k as f64 * lambda;
        prop_assert!(p > 0.0 && p <= kl * (1.0 + 1e-14));
        prop_assert!((p + phi_deficit(k, lambda, gamma) - kl).abs() <= 1e-12 * kl);
        prop_assert!((p - qa_eigenvalue(lambda, gamma, &ThetaWeights::fedavg(k).unwrap())).abs() <= 1e-10 * kl);
    }

    #[test]
    fn client_loss_matches_example_average(
        seed in any::<u64>(),
        d in 1usize..5,
        n in 1usize..5,
        centers in prop::collection::vec(-3.0f64..3.0, 20),
        probs in prop::collection::vec(0.1f64..1.0, 4),
        x in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let total: f64 = probs[..n].iter().sum();
        let examples: Vec<(QuadraticExample, f64)> = (0..n)
            .map(|j| {
                let a = spd(seed.wrapping_add(j as u64), d, 0.3, 3.0);
                let c = Vector::new(centers[j * d..(j + 1) * d].to_vec());
                (QuadraticExample::new(a, c).unwrap(), probs[j] / total)
            })
            .collect();
        let cl = Client::new(examples.clone()).unwrap();
        let x = Vector::new(x[..d].to_vec());
        let avg: f64 = examples.iter().map(|(e, p)| p * e.loss(&x).unwrap()).sum();
        prop_assert!((cl.loss(&x).unwrap() - avg).abs() <= 1e-10 * (1.0 + avg.abs()));
    }

    #[test]
    fn surrogate_minimizer_at_zero_rate_is_true_minimizer(
        seed in any::<u64>(),
        n in 1usize..6,
        w in prop::collection::vec(0.1f64..1.0, 1..8),
    ) {
        let d = 3;
        let clients: Vec<Client> = (0..n)
            .map(|i| {
                let a = spd(seed.wrapping_add(i as u64), d, 0.5, 2.0);
                let c = Vector::new(vec![i as f64, 1.0 - i as f64, 0.5]);
                Client::single(QuadraticExample::new(a, c).unwrap()).unwrap()
            })
            .collect();
        let pop = Population::uniform(clients).unwrap();
        let x = surrogate_minimizer(&pop, 0.0, &ThetaWeights::new(w).unwrap()).unwrap();
        prop_assert!(x.dist(&pop.stats().x_star) <= 1e-10);
    }

    #[test]
    fn decay_detector_invariants(
        losses in prop::collection::vec(0.0f64..1.0, 1..300),
        window in 1usize..10,
        patience in 1usize..10,
        cooldown in 0usize..10,
    ) {
        let cfg = DecayConfig { window, patience, cooldown, ..Default::default() };
        let mut st = DecayState::new(&cfg);
        let mut last_decay: Option<usize> = None;
        let mut best = f64::INFINITY;
        for (t, &l) in losses.iter().enumerate() {
            let before = st.n_decays;
            let fired = decay_step(&mut st, l, &cfg);
            prop_assert_eq!(st.n_decays, before + usize::from(fired));
            prop_assert!(st.stall_count < patience);
            prop_assert!(st.cooldown_remaining <= cooldown);
            prop_assert!(st.loss_history.len() <= window);
            best = best.min(st.window_avg);
            prop_assert_eq!(st.best_window_avg, best);
            if fired {
                // the first decay needs the initial cooldown plus a full patience run
                let gap = last_decay.map_or(t + 1, |p| t - p);
                prop_assert!(gap >= cooldown + patience);
                last_decay = Some(t);
            }
        }
    }
}
