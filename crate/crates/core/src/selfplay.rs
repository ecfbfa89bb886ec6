//! Self-play on two-seat zero-sum matrix games: one shared categorical
//! policy plays both seats and is trained by a pooled score-function
//! gradient, plus a probe that trains a fresh opponent against a frozen
//! policy to measure exploitability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{sample_categorical, MarkovGame};
use crate::error::{Error, Result};
use crate::ndiff::{Graph, Tensor};
use crate::oracle::best_response_value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfPlayConfig {
    pub lr: f64,
    pub batch_episodes: usize,
    /// Skip the seat-symmetry check at construction.
    pub allow_asymmetric: bool,
    pub threads: usize,
    pub exploit_lr: f64,
    pub exploit_steps: usize,
    pub exploit_eval_episodes: usize,
}

impl Default for SelfPlayConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_episodes: 256,
            allow_asymmetric: false,
            threads: 1,
            exploit_lr: 0.5,
            exploit_steps: 2000,
            exploit_eval_episodes: 10_000,
        }
    }
}

/// Softmax policy over a matrix game's actions. Matrix games have a single
/// state, so the policy is a free logit vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalPolicy {
    pub logits: Tensor,
}

impl CategoricalPolicy {
    pub fn uniform(k: usize) -> Self {
        Self {
            logits: Tensor::zeros(vec![1, k]).with_grad(),
        }
    }

    pub fn fixed(probs: &[f64]) -> Result<Self> {
        let logits: Vec<f64> = probs.iter().map(|x| x.max(1e-300).ln()).collect();
        Ok(Self {
            logits: Tensor::new(vec![1, probs.len()], logits)?.with_grad(),
        })
    }

    pub fn probs(&self) -> Vec<f64> {
        let z = self.logits.value();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let t: f64 = e.iter().sum();
        e.into_iter().map(|x| x / t).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "logits": self.logits.value() })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let logits: Vec<f64> = serde_json::from_value(v["logits"].clone())?;
        Ok(Self {
            logits: Tensor::new(vec![1, logits.len()], logits)?.with_grad(),
        })
    }

    /// One SGD step on `-mean(log pi(a) * ret)` over the samples.
    fn reinforce_step(&mut self, actions: &[usize], returns: &[f64], lr: f64) -> Result<()> {
        let rows = actions.len();
        let mut g = Graph::new();
        let z = g.leaf(&self.logits);
        let p = g.softmax(z);
        let p = g.repeat_rows(p, rows)?;
        let taken = g.select_cols(p, actions)?;
        let logp = g.log(taken);
        let ret = g.constant(&[rows, 1], returns.to_vec())?;
        let w = g.mul(logp, ret)?;
        let j = g.mean(w);
        let loss = g.neg(j);
        g.backward(loss)?;
        for (x, d) in self.logits.value_mut().iter_mut().zip(g.grad(z)) {
            *x -= lr * d;
        }
        Ok(())
    }
}

/// Checks the self-play preconditions and returns the seat-1 payoff
/// matrix.
pub fn check_game(game: &MarkovGame, allow_asymmetric: bool) -> Result<Vec<Vec<f64>>> {
    if game.n_agents() != 2 || game.n_states() != 1 || !game.is_discrete() {
        return Err(Error::WrongShape("self-play needs a two-seat matrix game".into()));
    }
    for joint in game.enumerate_joint_actions()? {
        let r = game.rewards_discrete(0, &joint)?;
        if r[0] + r[1] != 0.0 {
            return Err(Error::NotZeroSum);
        }
    }
    if !allow_asymmetric && !game.is_seat_symmetric() {
        return Err(Error::NotSymmetric);
    }
    let counts = game.action_counts()?;
    if counts[0] != counts[1] {
        return Err(Error::NotSymmetric);
    }
    game.payoff_matrix(0)
}

/// Seat-1 and seat-2 actions of `n` episodes, each drawn from its own
/// seeded stream so results do not depend on the thread count.
fn play(p1: &[f64], p2: &[f64], seeds: &[u64], threads: usize) -> Vec<(usize, usize)> {
    let one = |seed: &u64| {
        let mut r = ChaCha8Rng::seed_from_u64(*seed);
        let a = sample_categorical(p1, r.random());
        let b = sample_categorical(p2, r.random());
        (a, b)
    };
    if threads <= 1 || seeds.len() < 2 * threads {
        return seeds.iter().map(one).collect();
    }
    let chunk = seeds.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(one).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("episode worker panicked")).collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BatchStats {
    pub seat1_mean: f64,
    pub seat2_mean: f64,
    pub episodes: usize,
}

pub struct SelfPlayRun {
    pub policy: CategoricalPolicy,
    pub cfg: SelfPlayConfig,
    payoff: Vec<Vec<f64>>,
    pub history: Vec<BatchStats>,
}

impl SelfPlayRun {
    pub fn new(game: &MarkovGame, cfg: SelfPlayConfig) -> Result<Self> {
        let payoff = check_game(game, cfg.allow_asymmetric)?;
        let policy = CategoricalPolicy::uniform(payoff.len());
        Ok(Self {
            policy,
            payoff,
            cfg,
            history: Vec::new(),
        })
    }

    pub fn probs(&self) -> Vec<f64> {
        self.policy.probs()
    }

    /// Plays a batch with the shared policy in both seats, then one pooled
    /// policy-gradient step where each seat's sample is weighted by its own
    /// payoff. Returns the batch's seat-1 mean payoff.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        let p = self.probs();
        let seeds: Vec<u64> = (0..self.cfg.batch_episodes).map(|_| rng.random()).collect();
        let eps = play(&p, &p, &seeds, self.cfg.threads);
        let mut actions = Vec::with_capacity(2 * eps.len());
        let mut returns = Vec::with_capacity(2 * eps.len());
        let (mut s1, mut s2) = (0.0, 0.0);
        for &(a, b) in &eps {
            let r1 = self.payoff[a][b];
            let r2 = -r1;
            s1 += r1;
            s2 += r2;
            actions.extend([a, b]);
            returns.extend([r1, r2]);
        }
        self.policy.reinforce_step(&actions, &returns, self.cfg.lr)?;
        let n = eps.len() as f64;
        let stats = BatchStats {
            seat1_mean: s1 / n,
            seat2_mean: s2 / n,
            episodes: eps.len(),
        };
        self.history.push(stats);
        Ok(stats.seat1_mean)
    }

    /// Seat-1 means over consecutive windows of at least `episodes`
    /// episodes.
    pub fn window_means(&self, episodes: usize) -> Vec<f64> {
        let mut out = Vec::new();
        let (mut sum, mut n) = (0.0, 0usize);
        for b in &self.history {
            sum += b.seat1_mean * b.episodes as f64;
            n += b.episodes;
            if n >= episodes {
                out.push(sum / n as f64);
                sum = 0.0;
                n = 0;
            }
        }
        out
    }

    /// Empirical seat payoffs of the current policy against itself.
    pub fn evaluate<R: Rng + ?Sized>(&self, episodes: usize, rng: &mut R) -> Result<BatchStats> {
        let p = self.probs();
        let seeds: Vec<u64> = (0..episodes).map(|_| rng.random()).collect();
        let eps = play(&p, &p, &seeds, self.cfg.threads);
        let s1: f64 = eps.iter().map(|&(a, b)| self.payoff[a][b]).sum();
        Ok(BatchStats {
            seat1_mean: s1 / episodes as f64,
            seat2_mean: -s1 / episodes as f64,
            episodes,
        })
    }

    pub fn exploit<R: Rng + ?Sized>(&self, game: &MarkovGame, rng: &mut R) -> Result<ExploitResult> {
        exploit(&self.policy, game, &self.cfg, None, rng)
    }
}

#[derive(Clone, Debug)]
pub struct ExploitResult {
    pub best_response: CategoricalPolicy,
    pub seat: usize,
    pub exploit_value: f64,
    /// Value reached from each seat.
    pub per_seat: Vec<f64>,
    /// Exact best-response value against the frozen mix, maximised over
    /// the probed seats.
    pub oracle_value: f64,
}

/// Trains a fresh uniform-start opponent against `frozen` with the same
/// score-function rule, then measures its empirical mean payoff. With
/// `seat = None` both seats are probed and the larger value is returned.
pub fn exploit<R: Rng + ?Sized>(
    frozen: &CategoricalPolicy,
    game: &MarkovGame,
    cfg: &SelfPlayConfig,
    seat: Option<usize>,
    rng: &mut R,
) -> Result<ExploitResult> {
    let payoff = check_game(game, true)?;
    let fixed = frozen.probs();
    let seats: Vec<usize> = seat.map_or(vec![0, 1], |s| vec![s]);
    let mut best: Option<ExploitResult> = None;
    let mut per_seat = Vec::new();
    let mut oracle_value = f64::NEG_INFINITY;
    for &me in &seats {
        oracle_value = oracle_value.max(best_response_value(game, me, &fixed)?.value);
        let mut opp = CategoricalPolicy::uniform(fixed.len());
        let my_pay = |a: usize, b: usize| if me == 0 { payoff[a][b] } else { -payoff[b][a] };
        for _ in 0..cfg.exploit_steps {
            let q = opp.probs();
            let seeds: Vec<u64> = (0..cfg.batch_episodes).map(|_| rng.random()).collect();
            let eps = play(&q, &fixed, &seeds, cfg.threads);
            let actions: Vec<usize> = eps.iter().map(|e| e.0).collect();
            let returns: Vec<f64> = eps.iter().map(|&(a, b)| my_pay(a, b)).collect();
            opp.reinforce_step(&actions, &returns, cfg.exploit_lr)?;
        }
        let q = opp.probs();
        let seeds: Vec<u64> = (0..cfg.exploit_eval_episodes).map(|_| rng.random()).collect();
        let eps = play(&q, &fixed, &seeds, cfg.threads);
        let value = eps.iter().map(|&(a, b)| my_pay(a, b)).sum::<f64>() / eps.len().max(1) as f64;
        per_seat.push(value);
        if best.as_ref().is_none_or(|b| value > b.exploit_value) {
            best = Some(ExploitResult {
                best_response: opp,
                seat: me,
                exploit_value: value,
                per_seat: Vec::new(),
                oracle_value: 0.0,
            });
        }
    }
    let mut out = best.expect("at least one seat probed");
    out.per_seat = per_seat;
    out.oracle_value = oracle_value;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn quick() -> SelfPlayConfig {
        SelfPlayConfig {
            exploit_steps: 300,
            exploit_eval_episodes: 10_000,
            ..SelfPlayConfig::default()
        }
    }

    #[test]
    fn preconditions() {
        let mp = envs::matching_pennies().unwrap();
        assert!(matches!(
            SelfPlayRun::new(&mp, SelfPlayConfig::default()),
            Err(Error::NotSymmetric)
        ));
        let cfg = SelfPlayConfig {
            allow_asymmetric: true,
            ..SelfPlayConfig::default()
        };
        assert!(SelfPlayRun::new(&mp, cfg).is_ok());
        assert!(matches!(
            SelfPlayRun::new(&envs::coop_climb().unwrap(), SelfPlayConfig::default()),
            Err(Error::NotZeroSum)
        ));
    }

    #[test]
    fn rps_any_policy_is_balanced() {
        let rps = envs::rock_paper_scissors().unwrap();
        let mut run = SelfPlayRun::new(&rps, SelfPlayConfig::default()).unwrap();
        run.policy = CategoricalPolicy::fixed(&[0.6, 0.3, 0.1]).unwrap();
        let stats = run.evaluate(10_000, &mut rng(2)).unwrap();
        assert!(stats.seat1_mean.abs() <= 0.05, "{stats:?}");
        assert_eq!(stats.seat1_mean, -stats.seat2_mean);
    }

    #[test]
    fn uniform_pennies_is_balanced() {
        let mp = envs::matching_pennies().unwrap();
        let cfg = SelfPlayConfig {
            allow_asymmetric: true,
            ..SelfPlayConfig::default()
        };
        let run = SelfPlayRun::new(&mp, cfg).unwrap();
        assert!(run.evaluate(10_000, &mut rng(4)).unwrap().seat1_mean.abs() <= 0.05);
    }

    #[test]
    fn batch_accounting_is_antisymmetric() {
        let rps = envs::rock_paper_scissors().unwrap();
        let mut run = SelfPlayRun::new(&rps, SelfPlayConfig::default()).unwrap();
        let mut r = rng(6);
        for _ in 0..20 {
            run.step(&mut r).unwrap();
        }
        for b in &run.history {
            assert_eq!(b.seat1_mean, -b.seat2_mean);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let rps = envs::rock_paper_scissors().unwrap();
        let mut a = SelfPlayRun::new(&rps, SelfPlayConfig::default()).unwrap();
        let cfg = SelfPlayConfig {
            threads: 4,
            ..SelfPlayConfig::default()
        };
        let mut b = SelfPlayRun::new(&rps, cfg).unwrap();
        let (mut ra, mut rb) = (rng(8), rng(8));
        for _ in 0..10 {
            assert_eq!(a.step(&mut ra).unwrap(), b.step(&mut rb).unwrap());
        }
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn exploit_examples() {
        let mp = envs::matching_pennies().unwrap();
        let cfg = quick();
        let uniform = CategoricalPolicy::fixed(&[0.5, 0.5]).unwrap();
        let before = uniform.clone();
        let res = exploit(&uniform, &mp, &cfg, None, &mut rng(9)).unwrap();
        assert!(res.exploit_value.abs() <= 0.05, "{res:?}");
        assert_eq!(before, uniform);

        let heads = CategoricalPolicy::fixed(&[1.0, 0.0]).unwrap();
        let res = exploit(&heads, &mp, &cfg, None, &mut rng(10)).unwrap();
        assert!(res.exploit_value >= 0.9, "{res:?}");

        let mix = CategoricalPolicy::fixed(&[0.75, 0.25]).unwrap();
        let res = exploit(&mix, &mp, &cfg, None, &mut rng(11)).unwrap();
        assert!((res.oracle_value - 0.5).abs() < 1e-12);
        assert!(res.exploit_value >= 0.4, "{res:?}");
    }
}
