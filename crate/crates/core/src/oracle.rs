//! Exact solvers for small games: zero-sum equilibria, best responses,
//! exhaustive joint argmax and tabular Q-iteration.

use serde::Serialize;

use crate::envs::{MarkovGame, TabularMdp};
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NashSolution {
    pub mix1: Vec<f64>,
    pub mix2: Vec<f64>,
    /// Value to seat 1.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BestResponse {
    pub action: usize,
    /// Pure mix on `action`.
    pub mix: Vec<f64>,
    pub value: f64,
    /// Expected payoff of every action.
    pub payoffs: Vec<f64>,
}

fn zero_sum_matrix(game: &MarkovGame) -> Result<Vec<Vec<f64>>> {
    if game.n_agents() != 2 || game.n_states() != 1 || !game.is_discrete() {
        return Err(Error::WrongShape(format!(
            "need a 2-player single-state discrete game, got {} players and {} states",
            game.n_agents(),
            game.n_states()
        )));
    }
    for joint in game.enumerate_joint_actions()? {
        let r = game.rewards_discrete(0, &joint)?;
        if (r[0] + r[1]).abs() > 1e-12 {
            return Err(Error::NotZeroSum);
        }
    }
    game.payoff_matrix(0)
}

/// Closed-form equilibrium of a 2×2 zero-sum game from seat 1's payoffs.
/// Returns the first pure saddle point in row-major order if any, else the
/// indifference mix.
pub fn nash_2x2(r: &[[f64; 2]; 2]) -> NashSolution {
    for i in 0..2 {
        for j in 0..2 {
            let row_min = r[i][0].min(r[i][1]);
            let col_max = r[0][j].max(r[1][j]);
            if r[i][j] == row_min && r[i][j] == col_max {
                let mut mix1 = vec![0.0; 2];
                let mut mix2 = vec![0.0; 2];
                mix1[i] = 1.0;
                mix2[j] = 1.0;
                return NashSolution {
                    mix1,
                    mix2,
                    value: r[i][j],
                };
            }
        }
    }
    let [[a, b], [c, d]] = *r;
    let den = a - b - c + d;
    let p = (d - c) / den;
    let q = (d - b) / den;
    NashSolution {
        mix1: vec![p, 1.0 - p],
        mix2: vec![q, 1.0 - q],
        value: (a * d - b * c) / den,
    }
}

pub fn nash_2x2_zero_sum(game: &MarkovGame) -> Result<NashSolution> {
    let m = zero_sum_matrix(game)?;
    if m.len() != 2 || m[0].len() != 2 {
        return Err(Error::WrongShape(format!("{}x{} game", m.len(), m[0].len())));
    }
    Ok(nash_2x2(&[[m[0][0], m[0][1]], [m[1][0], m[1][1]]]))
}

/// Any-size zero-sum equilibrium: closed form for 2×2, else support
/// enumeration.
pub fn nash_zero_sum(game: &MarkovGame) -> Result<NashSolution> {
    let m = zero_sum_matrix(game)?;
    if m.len() == 2 && m[0].len() == 2 {
        return Ok(nash_2x2(&[[m[0][0], m[0][1]], [m[1][0], m[1][1]]]));
    }
    support_enumeration(&m)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

/// Mixed strategy over `support` making the opponent indifferent across
/// `other` with value `v`: unknowns are the weights followed by `v`.
fn indifference(
    payoff: impl Fn(usize, usize) -> f64,
    support: &[usize],
    other: &[usize],
    width: usize,
) -> Option<(Vec<f64>, f64)> {
    let k = support.len();
    let mut a = Vec::with_capacity(k + 1);
    let mut b = Vec::with_capacity(k + 1);
    for &o in other {
        let mut row: Vec<f64> = support.iter().map(|&s| payoff(s, o)).collect();
        row.push(-1.0);
        a.push(row);
        b.push(0.0);
    }
    let mut norm = vec![1.0; k];
    norm.push(0.0);
    a.push(norm);
    b.push(1.0);
    let x = solve_linear(a, b)?;
    if x[..k].iter().any(|&w| w < -1e-12) {
        return None;
    }
    let mut mix = vec![0.0; width];
    for (&s, &w) in support.iter().zip(&x) {
        mix[s] = w.max(0.0);
    }
    Some((mix, x[k]))
}

pub fn support_enumeration(m: &[Vec<f64>]) -> Result<NashSolution> {
    let (rows, cols) = (m.len(), m[0].len());
    for k in 1..=rows.min(cols) {
        for s1 in subsets(rows, k) {
            for s2 in subsets(cols, k) {
                // Seat 1's mix makes seat 2 indifferent over s2 and vice versa.
                let Some((mix1, v1)) = indifference(|i, j| m[i][j], &s1, &s2, rows) else {
                    continue;
                };
                let Some((mix2, v2)) = indifference(|j, i| m[i][j], &s2, &s1, cols) else {
                    continue;
                };
                if (v1 - v2).abs() > 1e-9 {
                    continue;
                }
                let sol = NashSolution {
                    mix1,
                    mix2,
                    value: v1,
                };
                if nash_gap(m, &sol) <= 1e-9 {
                    return Ok(sol);
                }
            }
        }
    }
    Err(Error::NonFinite("no equilibrium found by support enumeration".into()))
}

/// Largest unilateral improvement available to either seat.
pub fn nash_gap(m: &[Vec<f64>], sol: &NashSolution) -> f64 {
    let row_best = (0..m.len())
        .map(|i| (0..m[0].len()).map(|j| sol.mix2[j] * m[i][j]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    let col_worst = (0..m[0].len())
        .map(|j| (0..m.len()).map(|i| sol.mix1[i] * m[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    (row_best - sol.value).max(sol.value - col_worst)
}

/// Best pure reply of seat `me` to the other seat's `frozen_mix` in a
/// 2-player single-state game; ties go to the lowest index.
pub fn best_response_value(game: &MarkovGame, me: usize, frozen_mix: &[f64]) -> Result<BestResponse> {
    if game.n_agents() != 2 || game.n_states() != 1 || me > 1 {
        return Err(Error::WrongShape("best response needs a 2-player matrix game".into()));
    }
    let counts = game.action_counts()?;
    let other = 1 - me;
    if frozen_mix.len() != counts[other] {
        return Err(Error::WrongShape(format!(
            "mix has {} entries, opponent has {} actions",
            frozen_mix.len(),
            counts[other]
        )));
    }
    let mut payoffs = vec![0.0; counts[me]];
    for (a, pay) in payoffs.iter_mut().enumerate() {
        for (b, &p) in frozen_mix.iter().enumerate() {
            let joint = if me == 0 { [a, b] } else { [b, a] };
            *pay += p * game.rewards_discrete(0, &joint)?[me];
        }
    }
    let mut action = 0;
    for (a, &v) in payoffs.iter().enumerate() {
        if v > payoffs[action] {
            action = a;
        }
    }
    let mut mix = vec![0.0; counts[me]];
    mix[action] = 1.0;
    Ok(BestResponse {
        action,
        mix,
        value: payoffs[action],
        payoffs,
    })
}

/// Exhaustive scan over joint actions; the first maximum in lexicographic
/// order wins.
pub fn joint_argmax<F>(game: &MarkovGame, mut f: F) -> Result<(Vec<usize>, f64)>
where
    F: FnMut(&[usize]) -> f64,
{
    let mut best: Option<(Vec<usize>, f64)> = None;
    for joint in game.enumerate_joint_actions()? {
        let v = f(&joint);
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((joint, v));
        }
    }
    best.ok_or(Error::NonDiscrete)
}

/// Optimal action values of a tabular MDP.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TabularQ {
    pub n_states: usize,
    pub n_actions: usize,
    /// `table[s * n_actions + a]`
    pub table: Vec<f64>,
    pub gamma: f64,
    /// Sup-norm change of every sweep.
    pub deltas: Vec<f64>,
}

impl TabularQ {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.table[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.table[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action, lowest index on ties.
    pub fn greedy(&self, s: usize) -> usize {
        argmax(self.row(s))
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Bellman optimality sweeps `Q(s,a) = r(s,a) + gamma * E max Q(s',.)`,
/// with terminal successors contributing nothing. For `gamma < 1` sweeps
/// run until the sup-norm change drops below `tol`; for `gamma = 1` (or a
/// horizon of 1) exactly `horizon` sweeps are run, which gives the
/// finite-horizon values at the start of an episode.
pub fn tabular_q_iteration(mdp: &TabularMdp, gamma: f64, tol: f64) -> Result<TabularQ> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let finite = gamma >= 1.0 || mdp.horizon == 1;
    let max_sweeps = if finite { mdp.horizon } else { 1_000_000 };
    let mut q = vec![0.0; ns * na];
    let mut deltas = Vec::new();
    for _ in 0..max_sweeps {
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                if mdp.terminal[s] {
                    0.0
                } else {
                    q[s * na..(s + 1) * na]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let new = if mdp.terminal[s] {
                    0.0
                } else {
                    let future: f64 = mdp.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                    mdp.reward(s, a) + gamma * future
                };
                if !new.is_finite() {
                    return Err(Error::NonFinite(format!("Q({s},{a}) = {new}")));
                }
                delta = delta.max((new - q[s * na + a]).abs());
                q[s * na + a] = new;
            }
        }
        deltas.push(delta);
        if !finite && delta < tol {
            break;
        }
    }
    Ok(TabularQ {
        n_states: ns,
        n_actions: na,
        table: q,
        gamma,
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{self, GameFlags};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zs(r: [[f64; 2]; 2]) -> MarkovGame {
        let p1: Vec<f64> = r.iter().flatten().copied().collect();
        let p2 = p1.iter().map(|x| -x).collect();
        MarkovGame::matrix(
            "zs",
            vec![2, 2],
            &[p1, p2],
            GameFlags {
                cooperative: false,
                zero_sum: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn matching_pennies_is_uniform() {
        let sol = nash_2x2_zero_sum(&envs::matching_pennies().unwrap()).unwrap();
        assert_eq!(sol.mix1, vec![0.5, 0.5]);
        assert_eq!(sol.mix2, vec![0.5, 0.5]);
        assert_eq!(sol.value, 0.0);
    }

    #[test]
    fn pure_saddle_point() {
        // Row 0 dominates; the column player then prefers column 1.
        let sol = nash_2x2(&[[2.0, 1.0], [0.0, -1.0]]);
        assert_eq!((sol.mix1.clone(), sol.mix2.clone(), sol.value), (vec![1.0, 0.0], vec![0.0, 1.0], 1.0));
        let m = vec![vec![2.0, 1.0], vec![0.0, -1.0]];
        assert!(nash_gap(&m, &sol) <= 1e-12);
    }

    #[test]
    fn scaling_keeps_mixes() {
        let r = [[3.0, -1.0], [-2.0, 4.0]];
        let a = nash_2x2(&r);
        let b = nash_2x2(&r.map(|row| row.map(|x| 3.0 * x)));
        assert_eq!(a.mix1, b.mix1);
        assert_eq!(a.mix2, b.mix2);
        assert!((3.0 * a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_games() {
        assert!(matches!(
            nash_2x2_zero_sum(&envs::coop_climb().unwrap()),
            Err(Error::NotZeroSum) | Err(Error::WrongShape(_))
        ));
        assert!(matches!(
            nash_2x2_zero_sum(&envs::rock_paper_scissors().unwrap()),
            Err(Error::WrongShape(_))
        ));
        assert!(matches!(
            nash_2x2_zero_sum(&envs::two_step_coop().unwrap()),
            Err(Error::WrongShape(_))
        ));
    }

    #[test]
    fn rps_by_support_enumeration() {
        let sol = nash_zero_sum(&envs::rock_paper_scissors().unwrap()).unwrap();
        for p in sol.mix1.iter().chain(&sol.mix2) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(sol.value.abs() < 1e-12);
    }

    #[test]
    fn random_2x2_satisfy_equilibrium_inequalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let r = [[0; 2]; 2].map(|row| row.map(|_: i32| rng.random_range(-5.0..5.0)));
            let sol = nash_2x2(&r);
            let m: Vec<Vec<f64>> = r.iter().map(|x| x.to_vec()).collect();
            assert!(nash_gap(&m, &sol) <= 1e-9, "{r:?} {sol:?}");
            // Cross-check against the generic solver.
            let g = zs(r);
            let br1 = best_response_value(&g, 0, &sol.mix2).unwrap();
            assert!(br1.value <= sol.value + 1e-9);
        }
    }

    #[test]
    fn best_response_examples() {
        let mp = envs::matching_pennies().unwrap();
        let br = best_response_value(&mp, 0, &[0.5, 0.5]).unwrap();
        assert_eq!((br.action, br.value), (0, 0.0));
        let br = best_response_value(&mp, 0, &[1.0, 0.0]).unwrap();
        assert_eq!((br.action, br.value), (0, 1.0));
        let br = best_response_value(&mp, 1, &[1.0, 0.0]).unwrap();
        assert_eq!((br.action, br.value), (1, 1.0));
        let br = best_response_value(&mp, 0, &[0.75, 0.25]).unwrap();
        assert!((br.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn joint_argmax_examples() {
        let g2 = envs::coop_climb().unwrap();
        let (j, v) = joint_argmax(&g2, |a| g2.rewards_discrete(0, a).unwrap()[0]).unwrap();
        assert_eq!((j, v), (vec![0, 0], 11.0));
        let (j, _) = joint_argmax(&g2, |_| 1.0).unwrap();
        assert_eq!(j, vec![0, 0]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let table: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let three = MarkovGame::matrix(
            "t",
            vec![3, 3, 3],
            &[table.clone(), table.clone(), table.clone()],
            GameFlags::default(),
        )
        .unwrap();
        let (j, v) = joint_argmax(&three, |a| table[a[0] * 9 + a[1] * 3 + a[2]]).unwrap();
        let mut naive = (vec![0, 0, 0], f64::NEG_INFINITY);
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    let t = table[x * 9 + y * 3 + z];
                    if t > naive.1 {
                        naive = (vec![x, y, z], t);
                    }
                }
            }
        }
        assert_eq!((j, v), naive);
    }

    #[test]
    fn two_step_q_star() {
        let m1 = envs::two_step_coop().unwrap();
        let q = tabular_q_iteration(&m1.joint_mdp().unwrap(), 0.99, DEFAULT_TOL).unwrap();
        // Hand backup: Q(s1,(1,1)) = 10, Q(s0,(0,0)) = 0.99 * 10.
        assert!((q.q(1, 3) - 10.0).abs() < 1e-12);
        assert!((q.q(0, 0) - 9.9).abs() < 1e-9);
        for w in q.deltas.windows(2).skip(1) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn matrix_game_q_is_payoff() {
        let g2 = envs::coop_climb().unwrap();
        let q = tabular_q_iteration(&g2.joint_mdp().unwrap(), 0.99, DEFAULT_TOL).unwrap();
        for (j, joint) in g2.enumerate_joint_actions().unwrap().iter().enumerate() {
            assert_eq!(q.q(0, j), g2.rewards_discrete(0, joint).unwrap()[0]);
        }
    }

    #[test]
    fn induced_q_matches_best_response() {
        let mp = envs::matching_pennies().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p: f64 = rng.random();
            let ind = mp.induce_mdp(0, vec![vec![vec![p, 1.0 - p]]]).unwrap();
            let q = tabular_q_iteration(&ind.mdp, mp.gamma(), DEFAULT_TOL).unwrap();
            let br = best_response_value(&mp, 0, &[p, 1.0 - p]).unwrap();
            assert!((q.value(0) - br.value).abs() < 1e-9);
            assert_eq!(q.greedy(0), br.action);
        }
        let ind = mp.induce_mdp(0, vec![vec![vec![0.7, 0.3]]]).unwrap();
        let q = tabular_q_iteration(&ind.mdp, 1.0, DEFAULT_TOL).unwrap();
        assert!((q.q(0, 0) - 0.4).abs() < 1e-12);
    }
}
