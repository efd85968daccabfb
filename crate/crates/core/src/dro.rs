//! Group-DRO weight tracking: per-group size factors, interval loss
//! accumulation, exponentiated weight updates and simplex normalization.
//!
//! Weights live on the simplex (positive, summing to 1). Each update
//! multiplies a group's weight by `exp(lr * C_k * L_avg_k)` — where `C_k`
//! compensates for unequal group sizes and `L_avg_k` is the group's share
//! of the interval's loss — then renormalizes. Groups that keep losing
//! hardest keep gaining weight.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-example loss record for one training step. `group` is the weighted
/// group index, or `None` for residual-group examples, which count toward
/// the interval size but accumulate no group loss.
#[derive(Debug, Clone)]
pub struct LossRecord {
    pub pair_id: String,
    pub group: Option<usize>,
    pub loss: f64,
}

/// One trajectory snapshot, taken at every weight update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub weights: Vec<f64>,
}

/// The full weight-tracker state. Serializable as `weights.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightState {
    /// Number of weighted groups (residual excluded).
    pub n: usize,
    /// Simplex weights, one per weighted group.
    pub weights: Vec<f64>,
    /// Size factors C_k = (1/N_k) * (sum_j N_j / n).
    pub size_factors: Vec<f64>,
    /// The exact initial weight 1/n; kept so the loss multiplier
    /// `w_k * n * C_k` can be computed as `(w_k / w_init) * C_k`, which is
    /// exactly 1 at initialization for uniform sizes.
    uniform_weight: f64,
    pub weight_lr: f64,
    /// Steps between weight updates.
    pub update_interval: usize,
    /// Per-group loss sums for the current interval.
    pub loss_accumulator: Vec<f64>,
    /// Per-group example counts for the current interval; only consulted
    /// when `per_group_mean` is set.
    #[serde(default)]
    pub group_counter: Vec<usize>,
    /// Examples seen in the current interval (residual included).
    pub example_counter: usize,
    /// Training steps recorded so far.
    pub step: usize,
    /// Experimental deviation: average each group's loss over its own
    /// in-interval example count instead of the interval size, separating
    /// group difficulty from group frequency. Off by default.
    #[serde(default)]
    pub per_group_mean: bool,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Uniform initial weights, size factors from group sizes, zeroed
/// accumulators.
pub fn init_weights(
    group_sizes: &[usize],
    weight_lr: f64,
    update_interval: usize,
) -> Result<WeightState> {
    if group_sizes.is_empty() {
        return Err(Error::InvalidInput(
            "cannot initialize weights for zero groups".into(),
        ));
    }
    if let Some(k) = group_sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidInput(format!(
            "group {k} has size 0; merge empty groups before initializing weights"
        )));
    }
    if update_interval == 0 {
        return Err(Error::InvalidConfig("update_interval must be >= 1".into()));
    }
    let n = group_sizes.len();
    let total: f64 = group_sizes.iter().map(|&s| s as f64).sum();
    let mean_size = total / n as f64;
    let size_factors: Vec<f64> = group_sizes
        .iter()
        .map(|&s| (1.0 / s as f64) * mean_size)
        .collect();
    let uniform_weight = 1.0 / n as f64;
    Ok(WeightState {
        n,
        weights: vec![uniform_weight; n],
        size_factors,
        uniform_weight,
        weight_lr,
        update_interval,
        loss_accumulator: vec![0.0; n],
        group_counter: vec![0; n],
        example_counter: 0,
        step: 0,
        per_group_mean: false,
        trajectory: Vec::new(),
    })
}

impl WeightState {
    /// Accumulate one step's per-example losses. Residual examples bump the
    /// interval counter but no accumulator. Non-finite or negative losses
    /// signal divergence and are rejected.
    pub fn record_losses(&mut self, report: &[LossRecord]) -> Result<()> {
        for rec in report {
            if !rec.loss.is_finite() || rec.loss < 0.0 {
                return Err(Error::NonFiniteLoss {
                    step: self.step + 1,
                    value: rec.loss,
                });
            }
            if let Some(g) = rec.group {
                if g >= self.n {
                    return Err(Error::GroupOutOfRange {
                        index: g,
                        n: self.n,
                    });
                }
                self.loss_accumulator[g] += rec.loss;
                self.group_counter[g] += 1;
            }
        }
        self.example_counter += report.len();
        self.step += 1;
        Ok(())
    }

    /// True exactly at interval boundaries with something accumulated.
    pub fn should_update(&self) -> bool {
        self.step > 0 && self.step.is_multiple_of(self.update_interval) && self.example_counter > 0
    }

    /// Per-group average losses L_avg_k for the current interval: the
    /// group's accumulated loss over the interval's example count, or over
    /// the group's own count under `per_group_mean`.
    fn interval_mean_losses(&self) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                let denom = if self.per_group_mean {
                    self.group_counter[k] as f64
                } else {
                    self.example_counter as f64
                };
                if denom == 0.0 {
                    0.0
                } else {
                    self.loss_accumulator[k] / denom
                }
            })
            .collect()
    }

    /// The unnormalized intermediate weights `w_k * exp(lr * C_k * L_avg_k)`
    /// in their plain (unstabilized) form. Diagnostic companion to
    /// [`WeightState::update_weights`].
    pub fn intermediate_weights(&self) -> Vec<f64> {
        let l_avg = self.interval_mean_losses();
        (0..self.n)
            .map(|k| self.weights[k] * (self.weight_lr * self.size_factors[k] * l_avg[k]).exp())
            .collect()
    }

    /// Apply one weight update from the accumulated interval: average the
    /// per-group loss over the interval's example count, exponentiate, and
    /// renormalize onto the simplex. Exponents are stabilized by
    /// max-subtraction, which cancels in the normalization. Accumulators
    /// reset; a trajectory snapshot is appended.
    pub fn update_weights(&mut self) -> Result<()> {
        if self.example_counter == 0 {
            return Err(Error::InvalidInput(
                "update_weights called with no recorded examples".into(),
            ));
        }
        let l_avg = self.interval_mean_losses();
        let exponents: Vec<f64> = (0..self.n)
            .map(|k| self.weight_lr * self.size_factors[k] * l_avg[k])
            .collect();
        let max_exp = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let factors: Vec<f64> = exponents.iter().map(|&e| (e - max_exp).exp()).collect();

        // A uniform factor of exactly 1 (e.g. weight_lr = 0) is a no-op:
        // multiplying and renormalizing an already-normalized vector must
        // leave the weights bit-identical.
        if factors.iter().any(|&f| f != 1.0) {
            // Floor keeps every weight strictly positive; sustained extreme
            // pressure differences would otherwise underflow the cold
            // groups to exactly zero.
            const FLOOR: f64 = 1e-300;
            for (w, f) in self.weights.iter_mut().zip(&factors) {
                *w = (*w * f).max(FLOOR);
            }
            let sum: f64 = self.weights.iter().sum();
            for w in &mut self.weights {
                *w /= sum;
            }
        }

        self.loss_accumulator.iter_mut().for_each(|a| *a = 0.0);
        self.group_counter.iter_mut().for_each(|c| *c = 0);
        self.example_counter = 0;
        self.trajectory.push(TrajectoryPoint {
            step: self.step,
            weights: self.weights.clone(),
        });
        Ok(())
    }

    /// Loss multiplier `w_k * n * C_k` for a weighted group, or exactly 1
    /// for the residual group, which is trained unweighted.
    pub fn weighted_multiplier(&self, group: Option<usize>) -> Result<f64> {
        match group {
            None => Ok(1.0),
            Some(k) => {
                if k >= self.n {
                    return Err(Error::GroupOutOfRange {
                        index: k,
                        n: self.n,
                    });
                }
                // w * n computed as w / (1/n): exact where it matters, at
                // and around the uniform initialization.
                Ok(self.weights[k] / self.uniform_weight * self.size_factors[k])
            }
        }
    }

    /// Reset weights to uniform and clear the interval accumulators,
    /// keeping size factors, learning rate, interval, step counter and the
    /// recorded trajectory.
    pub fn reinit(&mut self) {
        self.weights = vec![self.uniform_weight; self.n];
        self.loss_accumulator.iter_mut().for_each(|a| *a = 0.0);
        self.group_counter.iter_mut().for_each(|c| *c = 0);
        self.example_counter = 0;
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("serialization cannot fail");
        std::fs::write(path, json.as_bytes())?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<WeightState> {
        let content = std::fs::read_to_string(path)?;
        let mut state: WeightState =
            serde_json::from_str(&content).map_err(|e| Error::MalformedLine {
                path: path.display().to_string(),
                line: 0,
                msg: e.to_string(),
            })?;
        if state.group_counter.len() != state.n {
            state.group_counter = vec![0; state.n];
        }
        Ok(state)
    }

    /// Write the trajectory as CSV: `step,group_0,...,group_{n-1}`.
    pub fn write_trajectory_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        write!(w, "step")?;
        for k in 0..self.n {
            write!(w, ",group_{k}")?;
        }
        writeln!(w)?;
        for point in &self.trajectory {
            write!(w, "{}", point.step)?;
            for v in &point.weights {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn record(group: Option<usize>, loss: f64) -> LossRecord {
        LossRecord {
            pair_id: "p".into(),
            group,
            loss,
        }
    }

    #[test]
    fn size_factors_are_one_for_uniform_sizes() {
        let state = init_weights(&[100, 100, 100], 3e-4, 500).unwrap();
        for &c in &state.size_factors {
            assert_eq!(c, 1.0);
        }
    }

    #[test]
    fn size_factors_match_direct_evaluation() {
        let state = init_weights(&[100, 300], 3e-4, 500).unwrap();
        // (1/N_k) * (sum N_j / n) evaluated by hand.
        assert!((state.size_factors[0] - (1.0 / 100.0) * 200.0).abs() < 1e-15);
        assert!((state.size_factors[1] - (1.0 / 300.0) * 200.0).abs() < 1e-15);
        assert!((state.size_factors[0] - 2.0).abs() < 1e-15);
        assert!((state.size_factors[1] - 0.6666666666666666).abs() < 1e-12);
    }

    #[test]
    fn initial_weights_are_uniform() {
        let state = init_weights(&[10, 20, 30, 40], 0.1, 5).unwrap();
        for &w in &state.weights {
            assert_eq!(w, 0.25);
        }
        assert!(init_weights(&[], 0.1, 5).is_err());
        assert!(init_weights(&[3, 0, 4], 0.1, 5).is_err());
    }

    #[test]
    fn size_identity_holds_for_random_size_vectors() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.random_range(1..60usize);
            let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..5000usize)).collect();
            let state = init_weights(&sizes, 0.1, 5).unwrap();
            let total: f64 = sizes.iter().map(|&s| s as f64).sum();
            let weighted: f64 = sizes
                .iter()
                .zip(&state.size_factors)
                .map(|(&s, &c)| s as f64 * c)
                .sum();
            assert!(
                (weighted - total).abs() <= 1e-9 * total,
                "sum N_k C_k = {weighted} vs sum N_j = {total}"
            );
        }
    }

    #[test]
    fn record_accumulates_and_skips_residual() {
        let mut state = init_weights(&[10, 10, 10, 10], 0.1, 500).unwrap();
        state.record_losses(&[record(Some(3), 2.0)]).unwrap();
        assert_eq!(state.loss_accumulator[3], 2.0);
        assert_eq!(state.example_counter, 1);

        // A batch entirely in the residual group counts but accumulates
        // nowhere.
        state
            .record_losses(&[record(None, 5.0), record(None, 7.0)])
            .unwrap();
        assert_eq!(state.loss_accumulator, vec![0.0, 0.0, 0.0, 2.0]);
        assert_eq!(state.example_counter, 3);

        // Accumulation spans steps until an update.
        state.record_losses(&[record(Some(3), 1.5)]).unwrap();
        assert_eq!(state.loss_accumulator[3], 3.5);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn non_finite_or_negative_losses_are_rejected() {
        let mut state = init_weights(&[5, 5], 0.1, 10).unwrap();
        assert!(state.record_losses(&[record(Some(0), f64::NAN)]).is_err());
        assert!(state
            .record_losses(&[record(Some(0), f64::INFINITY)])
            .is_err());
        assert!(state.record_losses(&[record(Some(0), -0.5)]).is_err());
    }

    #[test]
    fn update_matches_hand_derived_two_group_example() {
        // n=2, C=[1,1], w=[0.5,0.5], lr=0.1, L_avg=[2.0,1.0]:
        // w' = [0.5 e^0.2, 0.5 e^0.1], normalized.
        let mut state = init_weights(&[10, 10], 0.1, 1).unwrap();
        state
            .record_losses(&[record(Some(0), 4.0), record(Some(1), 2.0)])
            .unwrap();
        state.update_weights().unwrap();
        let e2 = 0.5 * (0.2f64).exp();
        let e1 = 0.5 * (0.1f64).exp();
        let expected = [e2 / (e2 + e1), e1 / (e2 + e1)];
        assert!((state.weights[0] - expected[0]).abs() < 1e-12);
        assert!((state.weights[1] - expected[1]).abs() < 1e-12);
        // The spec-level sanity anchor.
        assert!((state.weights[0] - 0.5250).abs() < 1e-4);
        assert!((state.weights[1] - 0.4750).abs() < 1e-4);
    }

    #[test]
    fn zero_lr_update_is_bitwise_identity() {
        let mut state = init_weights(&[3, 9, 27], 0.0, 1).unwrap();
        let before: Vec<u64> = state.weights.iter().map(|w| w.to_bits()).collect();
        for step in 0..1000 {
            state
                .record_losses(&[record(Some(step % 3), 1.0 + step as f64)])
                .unwrap();
            state.update_weights().unwrap();
        }
        let after: Vec<u64> = state.weights.iter().map(|w| w.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn single_group_batch_leaves_other_intermediates_unmodified() {
        let mut state = init_weights(&[10, 20, 30], 0.05, 1).unwrap();
        state
            .record_losses(&[record(Some(1), 3.0), record(Some(1), 1.0)])
            .unwrap();
        let inter = state.intermediate_weights();
        // Groups 0 and 2 saw no loss: their pre-normalization weights are
        // exactly their current weights.
        assert_eq!(inter[0].to_bits(), state.weights[0].to_bits());
        assert_eq!(inter[2].to_bits(), state.weights[2].to_bits());
        assert!(inter[1] > state.weights[1]);

        // The stabilized update agrees with naive normalization of the
        // intermediates.
        let naive_sum: f64 = inter.iter().sum();
        let naive: Vec<f64> = inter.iter().map(|w| w / naive_sum).collect();
        state.update_weights().unwrap();
        for (a, b) in state.weights.iter().zip(&naive) {
            let rel = (a - b).abs() / b.abs().max(1e-300);
            assert!(rel < 1e-12, "stabilized {a} vs naive {b}");
        }
    }

    #[test]
    fn per_group_mean_separates_difficulty_from_frequency() {
        // Group 0 contributes two examples averaging 3.0, group 1 one
        // example of 3.0. The interval mean conflates frequency (L_avg =
        // [2, 1]); the per-group mean sees equal difficulty ([3, 3]).
        let run = |per_group: bool| {
            let mut state = init_weights(&[10, 10], 0.1, 1).unwrap();
            state.per_group_mean = per_group;
            state
                .record_losses(&[
                    record(Some(0), 2.0),
                    record(Some(0), 4.0),
                    record(Some(1), 3.0),
                ])
                .unwrap();
            state.update_weights().unwrap();
            state.weights
        };
        let conflated = run(false);
        assert!(conflated[0] > conflated[1]);
        let separated = run(true);
        assert_eq!(separated[0], separated[1]);
    }

    #[test]
    fn update_requires_recorded_examples() {
        let mut state = init_weights(&[10, 10], 0.1, 1).unwrap();
        assert!(state.update_weights().is_err());
    }

    #[test]
    fn simplex_invariant_under_randomized_updates() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let sizes: Vec<usize> = (0..17).map(|_| rng.random_range(1..500usize)).collect();
        let mut state = init_weights(&sizes, 0.3, 1).unwrap();
        for _ in 0..2000 {
            let report: Vec<LossRecord> = (0..8)
                .map(|_| {
                    let g = rng.random_range(0..18usize);
                    record(
                        if g == 17 { None } else { Some(g) },
                        rng.random_range(0.0..8.0),
                    )
                })
                .collect();
            state.record_losses(&report).unwrap();
            state.update_weights().unwrap();
            let sum: f64 = state.weights.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "sum drifted to {sum}");
            assert!(state.weights.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn stronger_pressure_gives_strictly_larger_ratio() {
        // Within one update, C_a L_a > C_b L_b implies w_a grows by a
        // strictly larger factor.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let sizes: Vec<usize> = (0..6).map(|_| rng.random_range(1..200usize)).collect();
            let mut state = init_weights(&sizes, 0.2, 1).unwrap();
            // Perturb weights off uniform with one throwaway update.
            state
                .record_losses(&(0..6).map(|g| record(Some(g), g as f64)).collect::<Vec<_>>())
                .unwrap();
            state.update_weights().unwrap();
            let prev = state.weights.clone();

            let report: Vec<LossRecord> =
                (0..6).map(|g| record(Some(g), rng.random_range(0.0..5.0))).collect();
            state.record_losses(&report).unwrap();
            let pressure: Vec<f64> = (0..6)
                .map(|k| state.size_factors[k] * state.loss_accumulator[k])
                .collect();
            state.update_weights().unwrap();
            for a in 0..6 {
                for b in 0..6 {
                    if pressure[a] > pressure[b] {
                        let ra = state.weights[a] / prev[a];
                        let rb = state.weights[b] / prev[b];
                        assert!(ra > rb, "pressure {} vs {} but ratios {ra} vs {rb}", pressure[a], pressure[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn persistent_pressure_makes_weight_strictly_increase() {
        let mut state = init_weights(&[50, 50, 50], 0.1, 1).unwrap();
        let mut last = state.weights[1];
        for _ in 0..50 {
            state
                .record_losses(&[
                    record(Some(0), 0.5),
                    record(Some(1), 4.0),
                    record(Some(2), 0.7),
                ])
                .unwrap();
            state.update_weights().unwrap();
            assert!(state.weights[1] > last, "hard group stopped climbing");
            last = state.weights[1];
        }
    }

    #[test]
    fn multiplier_is_exactly_one_at_uniform_initialization() {
        for n in [2usize, 3, 5, 7, 12, 49, 103] {
            let sizes = vec![100usize; n];
            let state = init_weights(&sizes, 0.1, 10).unwrap();
            for k in 0..n {
                assert_eq!(state.weighted_multiplier(Some(k)).unwrap(), 1.0, "n={n}");
            }
            assert_eq!(state.weighted_multiplier(None).unwrap(), 1.0);
        }
    }

    #[test]
    fn multiplier_matches_size_factor_scaling_at_init() {
        let state = init_weights(&[100, 300], 0.1, 10).unwrap();
        // w*n*C at initialization reduces to C: [2.0, 0.6667].
        assert!((state.weighted_multiplier(Some(0)).unwrap() - 2.0).abs() < 1e-12);
        assert!((state.weighted_multiplier(Some(1)).unwrap() - 0.6666666666666666).abs() < 1e-12);
        assert!(state.weighted_multiplier(Some(2)).is_err());
    }

    #[test]
    fn reinit_resets_weights_but_keeps_trajectory() {
        let mut state = init_weights(&[10, 30], 0.2, 1).unwrap();
        state
            .record_losses(&[record(Some(0), 3.0), record(Some(1), 0.5)])
            .unwrap();
        state.update_weights().unwrap();
        assert_ne!(state.weights[0], 0.5);
        let traj_len = state.trajectory.len();
        let factors = state.size_factors.clone();

        state.reinit();
        assert_eq!(state.weights, vec![0.5, 0.5]);
        assert_eq!(state.trajectory.len(), traj_len);
        assert_eq!(state.size_factors, factors);
        assert_eq!(state.example_counter, 0);

        // Updates after reinit behave exactly like updates after init.
        let mut fresh = init_weights(&[10, 30], 0.2, 1).unwrap();
        let report = [record(Some(0), 1.0), record(Some(1), 2.0)];
        state.record_losses(&report).unwrap();
        fresh.record_losses(&report).unwrap();
        state.update_weights().unwrap();
        fresh.update_weights().unwrap();
        for (a, b) in state.weights.iter().zip(&fresh.weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn state_round_trips_through_json_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = init_weights(&[40, 60], 0.1, 2).unwrap();
        state
            .record_losses(&[record(Some(0), 1.0), record(Some(1), 2.0)])
            .unwrap();
        state.record_losses(&[record(Some(0), 0.5)]).unwrap();
        state.update_weights().unwrap();

        let wpath = dir.path().join("weights.json");
        state.save_json(&wpath).unwrap();
        let loaded = WeightState::load_json(&wpath).unwrap();
        assert_eq!(loaded.n, state.n);
        assert_eq!(loaded.weights, state.weights);
        assert_eq!(loaded.trajectory.len(), 1);
        assert_eq!(loaded.step, 2);

        let cpath = dir.path().join("trajectory.csv");
        state.write_trajectory_csv(&cpath).unwrap();
        let csv = std::fs::read_to_string(&cpath).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,group_0,group_1");
        assert!(lines.next().unwrap().starts_with("2,"));
    }
}
