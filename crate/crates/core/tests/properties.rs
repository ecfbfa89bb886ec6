use marlab_core::envs::{self, GameFlags};
use marlab_core::maddpg::{MaddpgConfig, MaddpgLearner, MaddpgVariant};
use marlab_core::ndiff::{grad_check, Activation, AdamState, DenseNet, Graph, Tensor};
use marlab_core::oracle;
use marlab_core::qmix::{MixMode, QmixConfig, QmixLearner};
use marlab_core::selfplay::{self, CategoricalPolicy, SelfPlayConfig, SelfPlayRun};
use marlab_core::{Action, MarkovGame, ReplayBuffer, TabularMdp};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: u32 = 2000;

fn cfg(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

const ACTS: [Activation; 5] = [
    Activation::Relu,
    Activation::Elu,
    Activation::Tanh,
    Activation::Sigmoid,
    Activation::Identity,
];

fn random_net(rng: &mut ChaCha8Rng) -> DenseNet {
    let depth = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..=8)];
    sizes.extend((0..depth).map(|_| rng.random_range(1..=8)));
    let acts: Vec<Activation> = (0..depth).map(|_| ACTS[rng.random_range(0..ACTS.len())]).collect();
    let mut net = DenseNet::new(&sizes, &acts, rng).unwrap();
    for t in net.params_mut().iter_mut().skip(1).step_by(2) {
        for b in t.value_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    net
}

proptest! {
    #![proptest_config(cfg(CASES))]

    #[test]
    fn random_nets_pass_grad_check(seed in any::<u64>(), loss_kind in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_net(&mut rng);
        let rows = rng.random_range(1..=3);
        let input = net.input_width();
        let x: Vec<f64> = (0..rows * input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut params = net.params().to_vec();
        params.push(Tensor::new(vec![rows, input], x).unwrap().with_grad());
        let np = params.len();
        let width = net.output_width();
        let pick = rng.random_range(0..width);
        let err = grad_check(&mut params, 1e-5, |g, v| {
            let y = net.forward(g, &v[..np - 1], v[np - 1])?;
            Ok(match loss_kind {
                0 => { let s = g.square(y); g.mean(s) }
                1 => {
                    let p = g.softmax(y);
                    let l = g.log(p);
                    let picked = g.select_cols(l, &vec![pick; rows])?;
                    let m = g.mean(picked);
                    g.neg(m)
                }
                2 => { let t = g.tanh(y); let p = g.mul(t, y)?; g.sum(p) }
                _ => { let a = g.abs(y); let s = g.add_scalar(a, 1.0)?; let l = g.log(s); g.mean(l) }
            })
        }).unwrap();
        prop_assert!(err < 1e-4, "rel error {err}");
    }

    #[test]
    fn shared_leaf_gets_sum_of_contributions(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let coefs: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let term = |g: &mut Graph, v, c: f64| {
            let s = g.scale(v, c).unwrap();
            let t = g.tanh(s);
            g.sum(t)
        };

        let t = Tensor::new(vec![1, n], x.clone()).unwrap().with_grad();
        let mut g = Graph::new();
        let v = g.leaf(&t);
        let mut total = g.scalar(0.0);
        for &c in &coefs {
            let s = term(&mut g, v, c);
            total = g.add(total, s).unwrap();
        }
        g.backward(total).unwrap();
        let shared = g.grad(v);

        let mut g = Graph::new();
        let copies: Vec<_> = (0..k).map(|_| g.leaf(&t)).collect();
        let mut total = g.scalar(0.0);
        for (&v, &c) in copies.iter().zip(&coefs) {
            let s = term(&mut g, v, c);
            total = g.add(total, s).unwrap();
        }
        g.backward(total).unwrap();
        let mut summed = vec![0.0; n];
        for &v in &copies {
            for (a, b) in summed.iter_mut().zip(g.grad(v)) {
                *a += b;
            }
        }
        for (a, b) in shared.iter().zip(&summed) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn buffer_keeps_last_capacity_items(cap in 1usize..40, n in 0usize..120) {
        let mut b = ReplayBuffer::new(cap);
        for i in 0..n {
            b.push(i);
        }
        let expect: Vec<usize> = (n.saturating_sub(cap)..n).collect();
        prop_assert_eq!(b.contents(), expect);
        prop_assert_eq!(b.len(), n.min(cap));
    }

    #[test]
    fn zero_sum_and_cooperative_flags_are_enforced(
        k1 in 1usize..4, k2 in 1usize..4, seed in any::<u64>(), bump in 0.01f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let joint = k1 * k2;
        let p1: Vec<f64> = (0..joint).map(|_| rng.random_range(-4..=4) as f64 * 0.5).collect();
        let neg: Vec<f64> = p1.iter().map(|x| -x).collect();
        let zs = GameFlags { cooperative: false, zero_sum: true };
        let coop = GameFlags { cooperative: true, zero_sum: false };

        let g = MarkovGame::matrix("zs", vec![k1, k2], &[p1.clone(), neg.clone()], zs).unwrap();
        for a in g.enumerate_joint_actions().unwrap() {
            let r = g.rewards_discrete(0, &a).unwrap();
            prop_assert_eq!(r[0] + r[1], 0.0);
        }
        let g = MarkovGame::matrix("coop", vec![k1, k2], &[p1.clone(), p1.clone()], coop).unwrap();
        for a in g.enumerate_joint_actions().unwrap() {
            let r = g.rewards_discrete(0, &a).unwrap();
            prop_assert_eq!(r[0], r[1]);
        }

        let mut broken = neg;
        let i = rng.random_range(0..joint);
        broken[i] += bump;
        prop_assert!(MarkovGame::matrix("bad", vec![k1, k2], &[p1.clone(), broken.clone()], zs).is_err());
        prop_assert!(MarkovGame::matrix("bad", vec![k1, k2], &[p1, broken], coop).is_err());
    }

    #[test]
    fn induced_mdp_q_matches_best_response(p in 0.0f64..=1.0, me in 0usize..2) {
        let g = envs::matching_pennies().unwrap();
        let mix = vec![p, 1.0 - p];
        let induced = g.induce_mdp(me, vec![vec![mix.clone()]]).unwrap();
        let q = oracle::tabular_q_iteration(&induced.mdp, 1.0, 1e-10).unwrap();
        let br = oracle::best_response_value(&g, me, &mix).unwrap();
        prop_assert!((q.value(0) - br.value).abs() < 1e-9);
        for a in 0..2 {
            prop_assert!((q.q(0, a) - br.payoffs[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn q_iteration_contracts(seed in any::<u64>(), gamma in 0.1f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ns, na) = (rng.random_range(1..5), rng.random_range(1..4));
        let reward = (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut transition = Vec::new();
        for _ in 0..ns * na {
            let w: Vec<f64> = (0..ns).map(|_| rng.random_range(0.0..1.0)).collect();
            let z: f64 = w.iter().sum();
            transition.extend(w.iter().map(|x| x / z));
        }
        let mdp = TabularMdp { n_states: ns, n_actions: na, reward, transition, terminal: vec![false; ns], horizon: 50 };
        let q = oracle::tabular_q_iteration(&mdp, gamma, 1e-10).unwrap();
        for w in q.deltas.windows(2).skip(1) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{:?}", q.deltas);
        }
    }

    #[test]
    fn zero_sum_nash_satisfies_equilibrium_inequalities(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(2..=3);
        let p1: Vec<f64> = (0..k * k).map(|_| rng.random_range(-3..=3) as f64).collect();
        let p2: Vec<f64> = p1.iter().map(|x| -x).collect();
        let g = MarkovGame::matrix("z", vec![k, k], &[p1, p2], GameFlags { cooperative: false, zero_sum: true }).unwrap();
        let sol = oracle::nash_zero_sum(&g).unwrap();
        let v1 = oracle::best_response_value(&g, 0, &sol.mix2).unwrap().value;
        let v2 = oracle::best_response_value(&g, 1, &sol.mix1).unwrap().value;
        prop_assert!(v1 <= sol.value + 1e-9);
        prop_assert!(v2 <= -sol.value + 1e-9);
    }
}

proptest! {
    #![proptest_config(cfg(20))]

    #[test]
    fn adam_trajectories_are_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = random_net(&mut rng);
            let x: Vec<f64> = (0..net.input_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut adam = AdamState::new(1e-2, net.params());
            let mut traj = Vec::new();
            for _ in 0..100 {
                let mut g = Graph::new();
                let bound = net.bind(&mut g);
                let xv = g.constant(&[1, x.len()], x.clone()).unwrap();
                let y = net.forward(&mut g, &bound, xv).unwrap();
                let s = g.square(y);
                let l = g.sum(s);
                g.backward(l).unwrap();
                net.accumulate_grads(&g, &bound);
                adam.step(net.params_mut()).unwrap();
                traj.push(net.params().iter().flat_map(|t| t.value().iter().map(|v| v.to_bits())).collect::<Vec<_>>());
            }
            traj
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn qmix_mixing_is_monotone(seed in any::<u64>(), fixture in 0usize..3) {
        let name = ["matching_pennies", "coop_climb", "two_step_coop"][fixture];
        let g = envs::fixture(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = QmixConfig { mode: MixMode::Qmix, ..QmixConfig::default() };
        let l = QmixLearner::new(&g, cfg, &mut rng).unwrap();
        for _ in 0..50 {
            let s = g.encode_state(rng.random_range(0..g.n_states()));
            let q: Vec<f64> = (0..g.n_agents()).map(|_| rng.random_range(-10.0..10.0)).collect();
            let grad = l.mix_grad(&q, &s).unwrap();
            for i in 0..q.len() {
                prop_assert!(grad[i] >= -1e-8);
                let h = 1e-5;
                let (mut up, mut dn) = (q.clone(), q.clone());
                up[i] += h;
                dn[i] -= h;
                let fd = (l.mix(&up, &s).unwrap() - l.mix(&dn, &s).unwrap()) / (2.0 * h);
                prop_assert!(fd >= -1e-8);
            }
        }
    }

    #[test]
    fn continuous_actions_stay_in_box(seed in any::<u64>()) {
        let g = envs::coop_cts();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = MaddpgLearner::new(&g, MaddpgConfig::default(), &mut rng).unwrap();
        for _ in 0..50 {
            let (acts, _) = l.act(&g.encode_state(0), true, &mut rng).unwrap();
            for (a, space) in acts.iter().zip(g.action_spaces()) {
                let (Action::Continuous(x), envs::ActionSpace::Box1D { lo, hi }) = (a, space) else {
                    panic!("expected continuous action");
                };
                prop_assert!(*x >= *lo && *x <= *hi);
            }
        }
    }

    #[test]
    fn opponent_models_stay_distributions(seed in any::<u64>()) {
        let g = envs::coop_climb().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MaddpgConfig { variant: MaddpgVariant::Decentralized, ..MaddpgConfig::default() };
        let mut l = MaddpgLearner::new(&g, cfg, &mut rng).unwrap();
        let s = g.encode_state(0);
        for _ in 0..20 {
            let batch: Vec<_> = (0..8).flat_map(|_| l.collect_episode(&g, &mut rng).unwrap()).collect();
            for owner in 0..2 {
                l.opponent_model_update(&batch, owner).unwrap();
                let p = l.model_probs(owner, 1 - owner, &s).unwrap();
                prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selfplay_batches_are_antisymmetric(seed in any::<u64>(), a in 0.05f64..0.9, b in 0.05f64..0.9) {
        let c = (1.0 - a).min(b);
        let probs = [a, c * (1.0 - a), (1.0 - a) * (1.0 - c)];
        let g = envs::rock_paper_scissors().unwrap();
        let mut run = SelfPlayRun::new(&g, SelfPlayConfig::default()).unwrap();
        run.policy = CategoricalPolicy::fixed(&probs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = run.evaluate(300, &mut rng).unwrap();
        prop_assert_eq!(stats.seat1_mean, -stats.seat2_mean);
    }

    #[test]
    fn exploit_leaves_frozen_policy_untouched(seed in any::<u64>(), p in 0.0f64..1.0) {
        let g = envs::matching_pennies().unwrap();
        let frozen = CategoricalPolicy::fixed(&[p, 1.0 - p]).unwrap();
        let before: Vec<u64> = frozen.logits.value().iter().map(|x| x.to_bits()).collect();
        let cfg = SelfPlayConfig { exploit_steps: 50, exploit_eval_episodes: 200, allow_asymmetric: true, ..SelfPlayConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        selfplay::exploit(&frozen, &g, &cfg, None, &mut rng).unwrap();
        let after: Vec<u64> = frozen.logits.value().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(before, after);
    }
}
