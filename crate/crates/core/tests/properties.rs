use bestofq::agent::{best_of_q_select, Policy};
use bestofq::env::{generate_world, WorldSpec};
use bestofq::eval::{self, format_money, parse_money, Prob};
use bestofq::iql::{expectile_loss, expectile_loss_grad};
use bestofq::proposer::ProposerConfig;
use proptest::prelude::*;

fn outcomes(min_repeats: usize) -> impl Strategy<Value = Vec<Vec<bool>>> {
    (min_repeats..6, 1usize..5).prop_flat_map(|(n, tasks)| prop::collection::vec(prop::collection::vec(any::<bool>(), n), tasks))
}

proptest! {
    #[test]
    fn expectile_loss_is_asymmetric_square(u in -10.0f64..10.0, tau in 0.01f64..0.99) {
        let l = expectile_loss(u, tau);
        prop_assert!(l >= 0.0);
        prop_assert!((l - expectile_loss(-u, 1.0 - tau)).abs() <= 1e-12 * (1.0 + l));
        let w = if u < 0.0 { 1.0 - tau } else { tau };
        prop_assert!((l - w * u * u).abs() <= 1e-12 * (1.0 + l));
    }

    #[test]
    fn expectile_grad_matches_difference(u in -5.0f64..5.0, tau in 0.01f64..0.99) {
        prop_assume!(u.abs() > 1e-3);
        let h = 1e-6;
        let numeric = (expectile_loss(u + h, tau) - expectile_loss(u - h, tau)) / (2.0 * h);
        prop_assert!((numeric - expectile_loss_grad(u, tau)).abs() < 1e-5);
    }

    #[test]
    fn best_of_q_is_first_argmax(scores in prop::collection::vec(-3i32..3, 1..8), shift in -100.0f64..100.0, scale in 0.1f64..10.0) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let pick = best_of_q_select(&s).unwrap();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s[pick], max);
        prop_assert!(s[..pick].iter().all(|&x| x < max));
        // Strictly increasing transforms keep the choice.
        let t: Vec<f64> = s.iter().map(|x| x * scale + shift).collect();
        prop_assert_eq!(best_of_q_select(&t).unwrap(), pick);
    }

    #[test]
    fn pass_at_k_is_monotone_and_bounded(o in outcomes(1)) {
        let n = o[0].len();
        let successes = o.iter().flatten().filter(|&&x| x).count();
        let mean = Prob::new(successes as i128, (o.len() * n) as i128);
        prop_assert_eq!(eval::pass_at_k_exact(&o, 1).unwrap(), mean);
        let mut prev = Prob::from_integer(0);
        for k in 1..=n {
            let p = eval::pass_at_k_exact(&o, k).unwrap();
            prop_assert!(p >= prev && p <= Prob::from_integer(1));
            prev = p;
        }
        let any = o.iter().filter(|t| t.iter().any(|&x| x)).count();
        prop_assert_eq!(prev, Prob::new(any as i128, o.len() as i128));
    }

    #[test]
    fn task_variance_is_bounded(o in outcomes(2)) {
        let v = eval::task_variance(&o).unwrap();
        prop_assert!((0.0..=0.25).contains(&v));
        let constant = o.iter().all(|t| t.iter().all(|&x| x == t[0]));
        prop_assert_eq!(v == 0.0, constant);
    }

    #[test]
    fn money_round_trips(cents in 0i64..10_000_000, frac in 0u32..1000) {
        let text = format!("{}.{:02}{:03}", cents / 100, cents % 100, frac);
        let m = parse_money(&text).unwrap();
        prop_assert_eq!(parse_money(&format_money(&m)).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn failure_breakdown_partitions_steps(world_seed in 0u64..1000, recall in 0.0f64..=1.0, n in 1usize..5) {
        let spec = WorldSpec { pages: 12, branching: 3, tasks: 3, horizon: 6, ..WorldSpec::default() };
        let world = generate_world(&spec, world_seed).unwrap();
        let proposer = ProposerConfig { golden_recall: recall, n_candidates: n, ..ProposerConfig::default() };
        let (_, eps) = eval::evaluate(&world, &world.tasks, Policy::Random, &proposer, 2, world_seed, 1).unwrap();
        let fb = eval::failure_breakdown(&world, &eps).unwrap();
        let total_steps: usize = eps.iter().map(|e| e.steps.len()).sum();
        prop_assert_eq!(fb.steps + fb.skipped, total_steps as u64);
        if fb.steps > 0 {
            prop_assert!((fb.not_proposed + fb.proposed_selected + fb.proposed_not_selected - 1.0).abs() < 1e-9);
        }
        for e in &eps {
            for s in &e.steps {
                prop_assert!(s.candidates.len() <= n && s.chosen < s.candidates.len());
            }
        }
    }
}
