//! Shapley contributions, Jain's index, equalized odds and the fairness components.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seeding::stream_rng;

/// Shift added before normalizing contributions and floor on equalized odds.
pub const EPSILON: f64 = 1e-6;
/// Largest coalition game solved exactly.
pub const MAX_EXACT_PLAYERS: usize = 12;

/// One sampled client's view of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientRecord {
    pub client_id: usize,
    /// Accuracy of the client's own model on its test split.
    pub accuracy: f64,
    /// Accuracy of the distributed global model on the client's test split.
    pub reward: f64,
    pub shapley: f64,
    /// One entry per attribute; `None` when a group is missing from the test split.
    pub equalized_odds: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub attributes: Vec<String>,
    pub clients: Vec<ClientRecord>,
}

impl RoundRecord {
    fn check(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::invalid("record", format!("round {} has no clients", self.round)));
        }
        for c in &self.clients {
            for (name, v) in [("accuracy", c.accuracy), ("reward", c.reward)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid("record", format!("client {} {name} {v} outside [0, 1]", c.client_id)));
                }
            }
            if !c.shapley.is_finite() {
                return Err(Error::NonFinite(format!("shapley value of client {}", c.client_id)));
            }
        }
        Ok(())
    }
}

/// Jain's index `(Σx)² / (n·Σx²)`. An all-zero vector counts as uniform.
pub fn jfi(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("jfi", "no values"));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid("jfi", format!("value {v} is not a finite non-negative number")));
    }
    let sum: f64 = values.iter().sum();
    let sq: f64 = values.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        log::debug!("jfi over an all-zero vector; returning 1");
        return Ok(1.0);
    }
    Ok((sum * sum / (values.len() as f64 * sq)).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapleyMode {
    Exact,
    MonteCarlo { permutations: usize },
}

impl ShapleyMode {
    /// Exact up to ten players, else `200·n` sampled permutations.
    pub fn default_for(players: usize) -> Self {
        if players <= 10 {
            ShapleyMode::Exact
        } else {
            ShapleyMode::MonteCarlo {
                permutations: 200 * players,
            }
        }
    }
}

fn members(mask: usize, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask & (1 << i) != 0).collect()
}

/// Shapley value of each of `players` players under `value`, which receives
/// the coalition as ascending player positions.
///
/// Monte Carlo permutations come in blocks of `players` cyclic rotations of
/// one uniform random order, so every player takes every position once per
/// block.
pub fn shapley_contributions<F>(players: usize, value: F, mode: ShapleyMode, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if players == 0 {
        return Err(Error::invalid("players", "no players"));
    }
    match mode {
        ShapleyMode::Exact => {
            if players > MAX_EXACT_PLAYERS {
                return Err(Error::invalid(
                    "shapley",
                    format!("exact mode supports at most {MAX_EXACT_PLAYERS} players, got {players}"),
                ));
            }
            let values: Vec<f64> = (0..1usize << players)
                .into_par_iter()
                .map(|mask| value(&members(mask, players)))
                .collect::<Result<_>>()?;
            let mut fact = vec![1.0f64; players + 1];
            for i in 1..=players {
                fact[i] = fact[i - 1] * i as f64;
            }
            let weight: Vec<f64> = (0..players).map(|s| fact[s] * fact[players - s - 1] / fact[players]).collect();
            let mut out = vec![0.0; players];
            for (i, slot) in out.iter_mut().enumerate() {
                let bit = 1 << i;
                let mut acc = 0.0;
                for mask in (0..values.len()).filter(|m| m & bit == 0) {
                    acc += weight[mask.count_ones() as usize] * (values[mask | bit] - values[mask]);
                }
                *slot = acc;
            }
            Ok(out)
        }
        ShapleyMode::MonteCarlo { permutations } => {
            if permutations < 1 {
                return Err(Error::invalid("permutations", "need at least one permutation"));
            }
            let empty = value(&[])?;
            let per_perm: Vec<Vec<f64>> = (0..permutations)
                .into_par_iter()
                .map(|p| {
                    let mut order: Vec<usize> = (0..players).collect();
                    order.shuffle(&mut stream_rng(seed, &[(p / players) as u64]));
                    order.rotate_left(p % players);
                    let mut marginal = vec![0.0; players];
                    let mut coalition = Vec::with_capacity(players);
                    let mut prev = empty;
                    for &i in &order {
                        let pos = coalition.partition_point(|&x| x < i);
                        coalition.insert(pos, i);
                        let v = value(&coalition)?;
                        marginal[i] = v - prev;
                        prev = v;
                    }
                    Ok(marginal)
                })
                .collect::<Result<_>>()?;
            let mut out = vec![0.0; players];
            for m in &per_perm {
                for (o, v) in out.iter_mut().zip(m) {
                    *o += v;
                }
            }
            Ok(out.into_iter().map(|v| v / permutations as f64).collect())
        }
    }
}

/// `(s − min s + ε) / Σ(s − min s + ε)`: strictly positive, summing to one.
pub fn normalize_contributions(s: &[f64]) -> Vec<f64> {
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = s.iter().map(|v| v - min + EPSILON).collect();
    let total: f64 = shifted.iter().sum();
    shifted.into_iter().map(|v| v / total).collect()
}

/// Macro-averaged one-vs-rest rates of the two attribute groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub tpr: [f64; 2],
    pub fpr: [f64; 2],
}

/// `1 − ½(|ΔTPR| + |ΔFPR|)`, floored at [`EPSILON`].
pub fn equalized_odds(rates: &GroupRates) -> f64 {
    let gap = (rates.tpr[1] - rates.tpr[0]).abs() + (rates.fpr[1] - rates.fpr[0]).abs();
    (1.0 - 0.5 * gap).max(EPSILON)
}

/// Jain's index over accuracy per unit of normalized contribution.
pub fn individual_fairness(record: &RoundRecord) -> Result<f64> {
    record.check()?;
    ratio_fairness(record, |c| c.accuracy)
}

/// Jain's index over reward per unit of normalized contribution.
pub fn incentive_fairness(record: &RoundRecord) -> Result<f64> {
    record.check()?;
    ratio_fairness(record, |c| c.reward)
}

fn ratio_fairness(record: &RoundRecord, pick: impl Fn(&ClientRecord) -> f64) -> Result<f64> {
    let s: Vec<f64> = record.clients.iter().map(|c| c.shapley).collect();
    let norm = normalize_contributions(&s);
    let ratios: Vec<f64> = record.clients.iter().zip(&norm).map(|(c, w)| pick(c) / w).collect();
    jfi(&ratios)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over clients of each client's mean equalized-odds score. `None`
/// when no client has a valid attribute score.
pub fn group_fairness(record: &RoundRecord) -> Result<Option<f64>> {
    record.check()?;
    let means: Vec<f64> = record
        .clients
        .iter()
        .filter_map(|c| {
            let valid: Vec<f64> = c.equalized_odds.iter().flatten().copied().collect();
            if valid.is_empty() {
                log::debug!("round {} client {}: no attribute with both groups present", record.round, c.client_id);
                None
            } else {
                Some(valid.iter().sum::<f64>() / valid.len() as f64)
            }
        })
        .collect();
    if means.is_empty() {
        log::warn!("round {}: group fairness undefined, excluded from F_t", record.round);
        return Ok(None);
    }
    Ok(Some(median(means)))
}

/// Mean client accuracy, floored at [`EPSILON`].
pub fn orchestrator_fairness(record: &RoundRecord) -> Result<f64> {
    record.check()?;
    let mean = record.clients.iter().map(|c| c.accuracy).sum::<f64>() / record.clients.len() as f64;
    Ok(mean.max(EPSILON))
}

/// Mean of the components that are present.
pub fn general_fairness(f_j: f64, f_g: Option<f64>, f_r: f64, f_o: f64) -> f64 {
    match f_g {
        Some(g) => (f_j + g + f_r + f_o) / 4.0,
        None => (f_j + f_r + f_o) / 3.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundFairness {
    pub round: usize,
    pub f_j: f64,
    pub f_g: Option<f64>,
    pub f_r: f64,
    pub f_o: f64,
    pub f_t: f64,
}

impl RoundFairness {
    pub fn from_record(record: &RoundRecord) -> Result<Self> {
        let f_j = individual_fairness(record)?;
        let f_g = group_fairness(record)?;
        let f_r = incentive_fairness(record)?;
        let f_o = orchestrator_fairness(record)?;
        Ok(RoundFairness {
            round: record.round,
            f_j,
            f_g,
            f_r,
            f_o,
            f_t: general_fairness(f_j, f_g, f_r, f_o),
        })
    }

    /// Components in the order f_j, f_g, f_r, f_o, F_t.
    pub fn components(&self) -> [Option<f64>; 5] {
        [Some(self.f_j), self.f_g, Some(self.f_r), Some(self.f_o), Some(self.f_t)]
    }
}

pub const COMPONENT_NAMES: [&str; 5] = ["f_j", "f_g", "f_r", "f_o", "F_t"];

/// Mean and population variance of one component across rounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentStats {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FairnessReport {
    pub rounds: Vec<RoundFairness>,
}

impl FairnessReport {
    pub fn from_records(records: &[RoundRecord]) -> Result<Self> {
        Ok(FairnessReport {
            rounds: records.iter().map(RoundFairness::from_record).collect::<Result<_>>()?,
        })
    }

    /// Statistics per component, in [`COMPONENT_NAMES`] order; `None` when
    /// the component never appeared.
    pub fn stats(&self) -> [Option<ComponentStats>; 5] {
        std::array::from_fn(|i| {
            let vals: Vec<f64> = self.rounds.iter().filter_map(|r| r.components()[i]).collect();
            if vals.is_empty() {
                return None;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let variance = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Some(ComponentStats {
                mean,
                variance,
                count: vals.len(),
            })
        })
    }

    pub fn mean_general_fairness(&self) -> Option<f64> {
        self.stats()[4].map(|s| s.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn client(id: usize, accuracy: f64, reward: f64, shapley: f64, eo: Vec<Option<f64>>) -> ClientRecord {
        ClientRecord {
            client_id: id,
            accuracy,
            reward,
            shapley,
            equalized_odds: eo,
        }
    }

    fn record(clients: Vec<ClientRecord>) -> RoundRecord {
        RoundRecord {
            round: 0,
            attributes: vec!["a".into()],
            clients,
        }
    }

    fn brute_force_shapley(n: usize, v: &dyn Fn(&[usize]) -> f64) -> Vec<f64> {
        fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.clone();
                let head = rest.remove(i);
                for mut p in perms(rest) {
                    p.insert(0, head);
                    out.push(p);
                }
            }
            out
        }
        let all = perms((0..n).collect());
        let mut s = vec![0.0; n];
        for p in &all {
            let mut coalition: Vec<usize> = Vec::new();
            for &i in p {
                let before = v(&{
                    let mut c = coalition.clone();
                    c.sort_unstable();
                    c
                });
                coalition.push(i);
                let mut c = coalition.clone();
                c.sort_unstable();
                s[i] += v(&c) - before;
            }
        }
        s.iter().map(|x| x / all.len() as f64).collect()
    }

    #[test]
    fn jfi_examples() {
        assert_eq!(jfi(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(jfi(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.25);
        assert!((jfi(&[1.0, 2.0, 3.0]).unwrap() - 36.0 / 42.0).abs() < 1e-12);
        assert_eq!(jfi(&[0.0, 0.0]).unwrap(), 1.0);
        assert!(jfi(&[]).is_err());
        assert!(jfi(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn shapley_examples() {
        let constant = shapley_contributions(3, |_| Ok(0.7), ShapleyMode::Exact, 0).unwrap();
        assert!(constant.iter().all(|&s| s == 0.0));
        let a = [0.1, 0.3];
        let additive = |c: &[usize]| Ok(c.iter().map(|&i| a[i]).sum::<f64>());
        let s = shapley_contributions(2, additive, ShapleyMode::Exact, 0).unwrap();
        assert!((s[0] - 0.1).abs() < 1e-12 && (s[1] - 0.3).abs() < 1e-12);
        assert!(shapley_contributions(13, |_| Ok(0.0), ShapleyMode::Exact, 0).is_err());
        assert!(shapley_contributions(2, |_| Ok(0.0), ShapleyMode::MonteCarlo { permutations: 0 }, 0).is_err());
    }

    #[test]
    fn exact_shapley_matches_permutation_oracle() {
        let table: Vec<f64> = (0..32).map(|m: usize| ((m * 2654435761) % 1000) as f64 / 1000.0).collect();
        let v = |c: &[usize]| table[c.iter().map(|&i| 1usize << i).sum::<usize>()];
        let exact = shapley_contributions(5, |c| Ok(v(c)), ShapleyMode::Exact, 0).unwrap();
        let oracle = brute_force_shapley(5, &v);
        for (a, b) in exact.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_approaches_exact() {
        let table: Vec<f64> = (0..16).map(|m: usize| ((m * 40503 + 7) % 97) as f64 / 97.0).collect();
        let v = |c: &[usize]| Ok(table[c.iter().map(|&i| 1usize << i).sum::<usize>()]);
        let exact = shapley_contributions(4, v, ShapleyMode::Exact, 0).unwrap();
        let mc = shapley_contributions(4, v, ShapleyMode::MonteCarlo { permutations: 2000 }, 11).unwrap();
        for (a, b) in exact.iter().zip(&mc) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }

    #[test]
    fn default_mode_switches_at_ten() {
        assert_eq!(ShapleyMode::default_for(10), ShapleyMode::Exact);
        assert_eq!(ShapleyMode::default_for(11), ShapleyMode::MonteCarlo { permutations: 2200 });
    }

    #[test]
    fn equalized_odds_examples() {
        let same = GroupRates {
            tpr: [0.7, 0.7],
            fpr: [0.1, 0.1],
        };
        assert_eq!(equalized_odds(&same), 1.0);
        let gap = GroupRates {
            tpr: [0.5, 0.9],
            fpr: [0.2, 0.2],
        };
        assert!((equalized_odds(&gap) - 0.8).abs() < 1e-12);
        let worst = GroupRates {
            tpr: [0.0, 1.0],
            fpr: [1.0, 0.0],
        };
        assert_eq!(equalized_odds(&worst), EPSILON);
    }

    #[test]
    fn individual_fairness_examples() {
        let eq = record(vec![client(0, 0.6, 0.6, 0.2, vec![]), client(1, 0.6, 0.6, 0.2, vec![])]);
        assert!((individual_fairness(&eq).unwrap() - 1.0).abs() < 1e-12);
        // s = (2, 1) normalizes to about (2/3, 1/3); gains are proportional.
        let prop = record(vec![client(0, 0.8, 0.5, 2.0, vec![]), client(1, 0.4, 0.5, 1.0, vec![])]);
        let norm = normalize_contributions(&[2.0, 1.0]);
        let gains = [0.8 / norm[0], 0.4 / norm[1]];
        assert!((individual_fairness(&prop).unwrap() - jfi(&gains).unwrap()).abs() < 1e-12);
        assert!(individual_fairness(&prop).unwrap() > 0.5);
        assert_eq!(jfi(&[1.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn proportional_gains_are_perfectly_fair() {
        assert!((jfi(&[0.8 / (2.0 / 3.0), 0.4 / (1.0 / 3.0)]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn incentive_fairness_examples() {
        let uni = record(vec![client(0, 0.5, 0.5, 0.3, vec![]), client(1, 0.5, 0.5, 0.3, vec![])]);
        assert!((incentive_fairness(&uni).unwrap() - 1.0).abs() < 1e-12);
        // (5/9 + 5)² / (2·(25/81 + 25)) = 0.6098
        assert!((jfi(&[0.5 / 0.9, 0.5 / 0.1]).unwrap() - 0.609756).abs() < 1e-6);
        let single = record(vec![client(0, 0.5, 0.4, -3.0, vec![])]);
        assert_eq!(incentive_fairness(&single).unwrap(), 1.0);
    }

    #[test]
    fn group_fairness_examples() {
        let all_one = record(vec![client(0, 0.5, 0.5, 0.0, vec![Some(1.0)]), client(1, 0.5, 0.5, 0.0, vec![Some(1.0)])]);
        assert_eq!(group_fairness(&all_one).unwrap(), Some(1.0));
        let three = record(vec![
            client(0, 0.5, 0.5, 0.0, vec![Some(0.2)]),
            client(1, 0.5, 0.5, 0.0, vec![Some(0.9)]),
            client(2, 0.5, 0.5, 0.0, vec![Some(0.8)]),
        ]);
        assert!((group_fairness(&three).unwrap().unwrap() - 0.8).abs() < 1e-12);
        let even = record(vec![client(0, 0.5, 0.5, 0.0, vec![Some(0.2)]), client(1, 0.5, 0.5, 0.0, vec![Some(0.6)])]);
        assert!((group_fairness(&even).unwrap().unwrap() - 0.4).abs() < 1e-12);
        let single = record(vec![client(0, 0.5, 0.5, 0.0, vec![Some(0.4), None, Some(0.8)])]);
        assert!((group_fairness(&single).unwrap().unwrap() - 0.6).abs() < 1e-12);
        let none = record(vec![client(0, 0.5, 0.5, 0.0, vec![None])]);
        assert_eq!(group_fairness(&none).unwrap(), None);
    }

    #[test]
    fn orchestrator_and_general_examples() {
        let ones = record(vec![client(0, 1.0, 1.0, 0.0, vec![]), client(1, 1.0, 1.0, 0.0, vec![])]);
        assert_eq!(orchestrator_fairness(&ones).unwrap(), 1.0);
        let three = record(vec![
            client(0, 0.2, 0.0, 0.0, vec![]),
            client(1, 0.4, 0.0, 0.0, vec![]),
            client(2, 0.6, 0.0, 0.0, vec![]),
        ]);
        assert!((orchestrator_fairness(&three).unwrap() - 0.4).abs() < 1e-12);
        let single = record(vec![client(0, 0.7, 0.0, 0.0, vec![])]);
        assert_eq!(orchestrator_fairness(&single).unwrap(), 0.7);
        assert_eq!(general_fairness(1.0, Some(1.0), 1.0, 1.0), 1.0);
        assert_eq!(general_fairness(1.0, Some(0.5), 0.5, 1.0), 0.75);
        assert_eq!(general_fairness(0.9, None, 0.6, 0.3), 0.6);
    }

    #[test]
    fn report_reproduces_components() {
        let rec = record(vec![
            client(0, 0.3, 0.6, 0.1, vec![Some(0.7)]),
            client(1, 0.9, 0.5, -0.2, vec![Some(0.9)]),
        ]);
        let report = FairnessReport::from_records(&[rec.clone(), RoundRecord { round: 1, ..rec }]).unwrap();
        for r in &report.rounds {
            assert_eq!(r.f_t, (r.f_j + r.f_g.unwrap() + r.f_r + r.f_o) / 4.0);
            assert!(r.components().iter().flatten().all(|&v| v > 0.0 && v <= 1.0));
        }
        let stats = report.stats();
        assert_eq!(stats[4].unwrap().variance, 0.0);
        assert_eq!(report.mean_general_fairness(), Some(report.rounds[0].f_t));
    }

    #[test]
    fn records_out_of_range_are_rejected() {
        let bad = record(vec![client(0, 1.5, 0.5, 0.0, vec![])]);
        assert!(individual_fairness(&bad).is_err());
        assert!(orchestrator_fairness(&record(vec![])).is_err());
    }

    fn random_game(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = stream_rng(seed, &[n as u64]);
        (0..1usize << n).map(|m| if m == 0 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn jfi_bounds_and_scale_invariance(v in prop::collection::vec(0.0f64..100.0, 1..20), c in 0.01f64..100.0) {
            prop_assume!(v.iter().any(|&x| x > 0.0));
            let j = jfi(&v).unwrap();
            let n = v.len() as f64;
            prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((jfi(&scaled).unwrap() - j).abs() < 1e-9);
        }

        #[test]
        fn exact_shapley_axioms(n in 1usize..=6, seed in any::<u64>(), dummy in 0usize..6, twin in 0usize..6) {
            let mut table = random_game(n, seed);
            let dummy = dummy % n;
            // Make `dummy` a null player.
            for m in 0..table.len() {
                if m & (1 << dummy) != 0 {
                    table[m] = table[m & !(1 << dummy)];
                }
            }
            let v = |c: &[usize]| Ok(table[c.iter().map(|&i| 1usize << i).sum::<usize>()]);
            let s = shapley_contributions(n, v, ShapleyMode::Exact, 0).unwrap();
            let total: f64 = s.iter().sum();
            prop_assert!((total - (table[(1 << n) - 1] - table[0])).abs() < 1e-12);
            prop_assert!(s[dummy].abs() < 1e-12);
            let twin = twin % n;
            if twin != dummy {
                // Symmetrize `dummy` and `twin`: both null players.
                let mut sym = table.clone();
                for m in 0..sym.len() {
                    sym[m] = table[m & !(1 << twin)];
                }
                let vs = |c: &[usize]| Ok(sym[c.iter().map(|&i| 1usize << i).sum::<usize>()]);
                let s2 = shapley_contributions(n, vs, ShapleyMode::Exact, 0).unwrap();
                prop_assert!((s2[dummy] - s2[twin]).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_contributions_are_positive_and_sum_to_one(s in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let n = normalize_contributions(&s);
            prop_assert!(n.iter().all(|&v| v > 0.0));
            prop_assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn components_stay_in_unit_interval(
            acc in prop::collection::vec(0.0f64..=1.0, 1..12),
            rew in prop::collection::vec(0.0f64..=1.0, 12),
            s in prop::collection::vec(-1.0f64..1.0, 12),
            eo in prop::collection::vec(EPSILON..=1.0, 12),
        ) {
            let clients = acc.iter().enumerate()
                .map(|(i, &a)| client(i, a, rew[i], s[i], vec![Some(eo[i])]))
                .collect();
            let r = RoundFairness::from_record(&record(clients)).unwrap();
            for v in r.components().into_iter().flatten() {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
            prop_assert_eq!(r.f_t, (r.f_j + r.f_g.unwrap() + r.f_r + r.f_o) / 4.0);
        }
    }
}
