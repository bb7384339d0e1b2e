//! Token-level advantages: group-normalised outcome advantage, group-normalised
//! info-gain advantage, and their fusion under the variance gate
//! `g(sigma) = logistic(-sigma / T)`:
//!
//! ```text
//! A_hat[i][k] = A_ext[i][k] + beta * g(sigma_ext) * A_info[i][k]
//! ```
//!
//! Every array is aligned with a trajectory's flattened tokens and is zero on
//! observation tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{group_stats, mean_std, GroupStats, RolloutGroup, DEFAULT_EPSILON};
use crate::infogain::InfoGainTable;

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("advantage arrays are misaligned: {0}")]
    ShapeMismatch(String),
    #[error("gate temperature must be positive, got {0}")]
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub temperature: f64,
    pub beta: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            beta: 0.5,
        }
    }
}

/// Which pieces of the fused advantage are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `A_ext + beta * g * A_info`.
    Full,
    /// Gate fixed to 1.
    NoGate,
    /// Raw `r_info` broadcast without group normalisation.
    NoStd,
    /// `A_hat = A_info`.
    NoExt,
    /// `A_hat = A_ext`.
    Grpo,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoGate,
        Variant::NoStd,
        Variant::NoExt,
        Variant::Grpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGate => "no_gate",
            Variant::NoStd => "no_std",
            Variant::NoExt => "no_ext",
            Variant::Grpo => "grpo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Variant::Full),
            _ => Self::ALL.into_iter().find(|v| v.name() == s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoPooling {
    /// Statistics over every valid turn of the group.
    Group,
    /// Statistics over each trajectory's own valid turns.
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageConfig {
    pub gate: GateConfig,
    pub epsilon: f64,
    pub variant: Variant,
    pub pooling: InfoPooling,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            epsilon: DEFAULT_EPSILON,
            variant: Variant::Full,
            pooling: InfoPooling::Group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTensor {
    pub a_ext: Vec<Vec<f64>>,
    pub a_info: Vec<Vec<f64>>,
    pub a_hat: Vec<Vec<f64>>,
    pub gate_value: f64,
    pub stats: GroupStats,
}

/// `logistic(-sigma_ext / T)`, in `(0, 0.5]` for `sigma_ext >= 0`.
pub fn gate(sigma_ext: f64, cfg: &GateConfig) -> f64 {
    1.0 / (1.0 + (sigma_ext / cfg.temperature).exp())
}

pub fn outcome_advantage(group: &RolloutGroup, stats: &GroupStats) -> Vec<Vec<f64>> {
    group
        .trajectories()
        .iter()
        .zip(group.ext_scores())
        .map(|(traj, &r)| {
            let a = (r - stats.mu_ext) / (stats.sigma_ext + stats.epsilon);
            traj.response_mask().iter().map(|&m| if m == 1 { a } else { 0.0 }).collect()
        })
        .collect()
}

/// Broadcasts a per-turn scalar to the action tokens of that turn.
fn broadcast<F>(group: &RolloutGroup, table: &InfoGainTable, mut per_turn: F) -> Vec<Vec<f64>>
where
    F: FnMut(usize, usize) -> f64,
{
    group
        .trajectories()
        .iter()
        .enumerate()
        .map(|(i, traj)| {
            traj.response_mask()
                .iter()
                .zip(traj.turn_of_token())
                .map(|(&m, &t)| {
                    if m == 0 {
                        return 0.0;
                    }
                    match traj.position_of_turn(t) {
                        Some(p) if table.rows[i].get(p).is_some_and(|e| e.valid) => per_turn(i, p),
                        _ => 0.0,
                    }
                })
                .collect()
        })
        .collect()
}

/// Normalised info-gain advantage using the pooled group statistics.
pub fn info_advantage(group: &RolloutGroup, table: &InfoGainTable, stats: &GroupStats) -> Vec<Vec<f64>> {
    broadcast(group, table, |i, p| {
        (table.rows[i][p].value - stats.mu_info) / (stats.sigma_info + stats.epsilon)
    })
}

/// Normalised info-gain advantage with per-trajectory statistics.
pub fn info_advantage_per_trajectory(group: &RolloutGroup, table: &InfoGainTable, epsilon: f64) -> Vec<Vec<f64>> {
    let local: Vec<(f64, f64)> = table
        .rows
        .iter()
        .map(|row| {
            let vals: Vec<f64> = row.iter().filter(|e| e.valid).map(|e| e.value).collect();
            mean_std(&vals)
        })
        .collect();
    broadcast(group, table, |i, p| {
        let (mu, sigma) = local[i];
        (table.rows[i][p].value - mu) / (sigma + epsilon)
    })
}

/// Raw `r_info` broadcast to action tokens (no normalisation).
pub fn raw_info_advantage(group: &RolloutGroup, table: &InfoGainTable) -> Vec<Vec<f64>> {
    broadcast(group, table, |i, p| table.rows[i][p].value)
}

pub fn fuse(
    a_ext: Vec<Vec<f64>>,
    a_info: Vec<Vec<f64>>,
    gate_value: f64,
    cfg: &GateConfig,
    stats: GroupStats,
) -> Result<AdvantageTensor, AdvantageError> {
    if a_ext.len() != a_info.len() {
        return Err(AdvantageError::ShapeMismatch(format!(
            "{} vs {} trajectories",
            a_ext.len(),
            a_info.len()
        )));
    }
    let mut a_hat = Vec::with_capacity(a_ext.len());
    for (i, (e, n)) in a_ext.iter().zip(&a_info).enumerate() {
        if e.len() != n.len() {
            return Err(AdvantageError::ShapeMismatch(format!(
                "trajectory {i}: {} vs {} tokens",
                e.len(),
                n.len()
            )));
        }
        a_hat.push(e.iter().zip(n).map(|(x, y)| x + cfg.beta * gate_value * y).collect());
    }
    Ok(AdvantageTensor {
        a_ext,
        a_info,
        a_hat,
        gate_value,
        stats,
    })
}

/// Full advantage construction for one group under the configured variant.
pub fn build_advantages(
    group: &RolloutGroup,
    table: &InfoGainTable,
    cfg: &AdvantageConfig,
) -> Result<AdvantageTensor, AdvantageError> {
    if !(cfg.gate.temperature > 0.0) {
        return Err(AdvantageError::Temperature(cfg.gate.temperature));
    }
    if table.rows.len() != group.len() {
        return Err(AdvantageError::ShapeMismatch(format!(
            "{} info rows for {} trajectories",
            table.rows.len(),
            group.len()
        )));
    }
    let stats = group_stats(group, table, cfg.epsilon);
    let a_ext = outcome_advantage(group, &stats);
    let a_info = match (cfg.variant, cfg.pooling) {
        (Variant::NoStd, _) => raw_info_advantage(group, table),
        (_, InfoPooling::Group) => info_advantage(group, table, &stats),
        (_, InfoPooling::Trajectory) => info_advantage_per_trajectory(group, table, cfg.epsilon),
    };
    let gate_value = match cfg.variant {
        Variant::NoGate => 1.0,
        _ => gate(stats.sigma_ext, &cfg.gate),
    };
    match cfg.variant {
        Variant::Grpo => Ok(AdvantageTensor {
            a_hat: a_ext.clone(),
            a_ext,
            a_info,
            gate_value,
            stats,
        }),
        Variant::NoExt => Ok(AdvantageTensor {
            a_hat: a_info.clone(),
            a_ext,
            a_info,
            gate_value,
            stats,
        }),
        _ => fuse(a_ext, a_info, gate_value, &cfg.gate, stats),
    }
}

/// `mean|beta g A_info| / (mean|A_ext| + mean|beta g A_info|)` over action tokens.
pub fn contribution_ratio(groups: &[(&RolloutGroup, &AdvantageTensor)], beta: f64) -> f64 {
    let mut ext = 0.0;
    let mut info = 0.0;
    let mut n = 0usize;
    for (group, adv) in groups {
        for (i, traj) in group.trajectories().iter().enumerate() {
            for (k, &m) in traj.response_mask().iter().enumerate() {
                if m == 1 {
                    ext += adv.a_ext[i][k].abs();
                    info += (beta * adv.gate_value * adv.a_info[i][k]).abs();
                    n += 1;
                }
            }
        }
    }
    if n == 0 || ext + info == 0.0 {
        return 0.0;
    }
    (info / n as f64) / (ext / n as f64 + info / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Token, Trajectory, TurnRecord};
    use crate::infogain::{InfoGainEntry, InfoGainMode};
    use proptest::prelude::*;

    /// Trajectory of `n_turns` two-token actions with one-token observations.
    fn traj(n_turns: usize) -> Trajectory {
        let turns = (1..=n_turns)
            .map(|t| {
                let obs = if t < n_turns { Some(vec![Token(9)]) } else { None };
                TurnRecord::new(t, vec![Token(0), Token(2)], obs)
            })
            .collect();
        Trajectory::new("a", turns, true).unwrap()
    }

    fn group(scores: &[f64], turns: &[usize]) -> RolloutGroup {
        RolloutGroup::new(0, turns.iter().map(|&n| traj(n)).collect(), scores.to_vec()).unwrap()
    }

    fn table(rows: Vec<Vec<(f64, bool)>>) -> InfoGainTable {
        InfoGainTable::new(
            InfoGainMode::Placeholder,
            rows.into_iter()
                .map(|r| r.into_iter().map(|(value, valid)| InfoGainEntry { value, valid }).collect())
                .collect(),
        )
    }

    fn empty_table(n: usize, turns: usize) -> InfoGainTable {
        table(vec![vec![(0.0, false); turns]; n])
    }

    #[test]
    fn outcome_examples() {
        let g = group(&[1.0, 1.0, 1.0], &[1, 1, 1]);
        let s = group_stats(&g, &empty_table(3, 1), DEFAULT_EPSILON);
        assert!(outcome_advantage(&g, &s).iter().flatten().all(|&a| a == 0.0));

        let g = group(&[0.0, 1.0], &[2, 2]);
        let s = group_stats(&g, &empty_table(2, 2), DEFAULT_EPSILON);
        let a = outcome_advantage(&g, &s);
        let expected = 0.5 / (0.5 + 1e-6);
        assert!((a[0][0] + expected).abs() < 1e-15);
        assert!((a[1][0] - expected).abs() < 1e-15);
        assert!((expected - 0.999998).abs() < 1e-6);
        // observation token of turn 1 carries nothing
        assert_eq!(a[1][2], 0.0);

        let g = group(&[0.0, 0.0, 1.0, 1.0, 1.0], &[1; 5]);
        let s = group_stats(&g, &empty_table(5, 1), DEFAULT_EPSILON);
        assert!((s.mu_ext - 0.6).abs() < 1e-15);
        assert!((s.sigma_ext - 0.24f64.sqrt()).abs() < 1e-15);
        let a = outcome_advantage(&g, &s);
        assert!((a[0][0] + 1.2247).abs() < 1e-4);
        assert!((a[4][0] - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn info_examples() {
        // single valid turn normalises to zero
        let g = group(&[0.0, 1.0], &[2, 1]);
        let t = table(vec![vec![(0.7, true), (0.0, false)], vec![(0.0, false)]]);
        let s = group_stats(&g, &t, DEFAULT_EPSILON);
        let a = info_advantage(&g, &t, &s);
        assert!(a.iter().flatten().all(|&x| x == 0.0));

        // {0.1, 0.3}: mu 0.2, sigma 0.1
        let g = group(&[0.0, 1.0], &[2, 2]);
        let t = table(vec![vec![(0.1, true), (5.0, false)], vec![(0.3, true), (0.0, false)]]);
        let s = group_stats(&g, &t, DEFAULT_EPSILON);
        let a = info_advantage(&g, &t, &s);
        let z = 0.1 / (0.1 + 1e-6);
        assert!((a[0][0] + z).abs() < 1e-9);
        assert!((a[0][1] + z).abs() < 1e-9);
        assert!((a[1][0] - z).abs() < 1e-9);
        assert!((z - 0.99999).abs() < 1e-5);
        // invalid turn 2 and observation token
        assert_eq!(&a[0][2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gate_examples() {
        let cfg = GateConfig::default();
        assert_eq!(gate(0.0, &cfg), 0.5);
        assert!((gate(0.5, &cfg) - 0.26894).abs() < 1e-5);
        assert!(gate(1e3, &cfg) < 1e-300);
        let mut prev = gate(0.0, &cfg);
        for i in 1..100 {
            let g = gate(i as f64 * 0.05, &cfg);
            assert!(g < prev && g > 0.0);
            prev = g;
        }
    }

    #[test]
    fn fuse_examples() {
        let stats = GroupStats {
            mu_ext: 0.0,
            sigma_ext: 0.0,
            mu_info: 0.0,
            sigma_info: 0.0,
            epsilon: DEFAULT_EPSILON,
        };
        let cfg = GateConfig {
            beta: 0.0,
            temperature: 0.5,
        };
        let t = fuse(vec![vec![0.3, -0.2]], vec![vec![1.0, 2.0]], 0.4, &cfg, stats).unwrap();
        assert_eq!(t.a_hat, t.a_ext);

        let cfg = GateConfig::default();
        let t = fuse(vec![vec![0.8165]], vec![vec![1.0]], 0.26894, &cfg, stats).unwrap();
        assert!((t.a_hat[0][0] - 0.95097).abs() < 1e-5);

        assert!(matches!(
            fuse(vec![vec![0.0; 2]], vec![vec![0.0; 3]], 0.5, &cfg, stats),
            Err(AdvantageError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_variance_group_is_pure_info() {
        let g = group(&[0.0, 0.0, 0.0], &[3, 2, 2]);
        let t = table(vec![
            vec![(0.2, true), (0.5, true), (0.0, false)],
            vec![(0.1, true), (0.0, false)],
            vec![(0.9, true), (0.0, false)],
        ]);
        let adv = build_advantages(&g, &t, &AdvantageConfig::default()).unwrap();
        assert_eq!(adv.gate_value, 0.5);
        for (h, n) in adv.a_hat.iter().flatten().zip(adv.a_info.iter().flatten()) {
            assert_eq!(*h, 0.5 * 0.5 * n);
        }
    }

    #[test]
    fn ablation_identities() {
        let g = group(&[0.0, 1.0, 1.0], &[3, 2, 2]);
        let t = table(vec![
            vec![(0.2, true), (0.5, true), (0.0, false)],
            vec![(0.1, true), (0.0, false)],
            vec![(0.9, true), (0.0, false)],
        ]);
        let base = AdvantageConfig::default();
        let full = build_advantages(&g, &t, &base).unwrap();
        let stats = full.stats;

        let no_gate = build_advantages(&g, &t, &AdvantageConfig { variant: Variant::NoGate, ..base }).unwrap();
        let manual = fuse(full.a_ext.clone(), full.a_info.clone(), 1.0, &base.gate, stats).unwrap();
        assert_eq!(no_gate.a_hat, manual.a_hat);

        let no_std = build_advantages(&g, &t, &AdvantageConfig { variant: Variant::NoStd, ..base }).unwrap();
        let manual = fuse(full.a_ext.clone(), raw_info_advantage(&g, &t), full.gate_value, &base.gate, stats).unwrap();
        assert_eq!(no_std.a_hat, manual.a_hat);

        let no_ext = build_advantages(&g, &t, &AdvantageConfig { variant: Variant::NoExt, ..base }).unwrap();
        assert_eq!(no_ext.a_hat, full.a_info);

        let grpo = build_advantages(&g, &t, &AdvantageConfig { variant: Variant::Grpo, ..base }).unwrap();
        assert_eq!(grpo.a_hat, full.a_ext);

        // beta = 0 through the fused path equals GRPO bit for bit
        let beta0 = AdvantageConfig {
            gate: GateConfig { beta: 0.0, ..base.gate },
            ..base
        };
        let b = build_advantages(&g, &t, &beta0).unwrap();
        for (x, y) in b.a_hat.iter().flatten().zip(grpo.a_hat.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn fuse_linearity() {
        let stats = GroupStats {
            mu_ext: 0.0,
            sigma_ext: 0.0,
            mu_info: 0.0,
            sigma_info: 0.0,
            epsilon: DEFAULT_EPSILON,
        };
        let cfg = GateConfig::default();
        let a = vec![vec![0.3, -1.1, 0.0]];
        let b = vec![vec![2.0, 0.5, -0.25]];
        let zero = vec![vec![0.0; 3]];
        assert_eq!(fuse(a.clone(), zero.clone(), 0.3, &cfg, stats).unwrap().a_hat, a);
        let only_b = fuse(zero, b.clone(), 0.3, &cfg, stats).unwrap();
        for (h, x) in only_b.a_hat[0].iter().zip(&b[0]) {
            assert_eq!(*h, 0.5 * 0.3 * x);
        }
    }

    #[test]
    fn per_trajectory_pooling() {
        let g = group(&[0.0, 1.0], &[3, 2]);
        let t = table(vec![vec![(0.2, true), (0.4, true), (0.0, false)], vec![(5.0, true), (0.0, false)]]);
        let cfg = AdvantageConfig {
            pooling: InfoPooling::Trajectory,
            ..Default::default()
        };
        let adv = build_advantages(&g, &t, &cfg).unwrap();
        // trajectory 1 has one valid turn -> 0
        assert!(adv.a_info[1].iter().all(|&x| x == 0.0));
        assert!(adv.a_info[0][0] < 0.0 && adv.a_info[0][3] > 0.0);
    }

    #[test]
    fn contribution_ratio_bounds() {
        let g = group(&[0.0, 1.0], &[2, 2]);
        let t = table(vec![vec![(0.1, true), (0.0, false)], vec![(0.3, true), (0.0, false)]]);
        let adv = build_advantages(&g, &t, &AdvantageConfig::default()).unwrap();
        let r = contribution_ratio(&[(&g, &adv)], 0.5);
        assert!(r > 0.0 && r < 0.5);
        assert_eq!(contribution_ratio(&[(&g, &adv)], 0.0), 0.0);
    }

    proptest! {
        #[test]
        fn outcome_deviations_sum_to_zero(scores in proptest::collection::vec(0u8..2, 2..9)) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let (mu, _) = mean_std(&scores);
            let dev: f64 = scores.iter().map(|r| r - mu).sum();
            prop_assert!(dev.abs() < 1e-12);
        }

        #[test]
        fn gate_bounded_and_decreasing(a in 0.0f64..20.0, b in 0.0f64..20.0, temp in 0.01f64..5.0) {
            let cfg = GateConfig { temperature: temp, beta: 0.5 };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(gate(lo, &cfg) <= 0.5 && gate(hi, &cfg) >= 0.0);
            prop_assert!(gate(lo, &cfg) >= gate(hi, &cfg));
        }
    }
}
