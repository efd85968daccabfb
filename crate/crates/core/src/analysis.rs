//! Diagnostic instruments: 2-D loss-landscape grids under random parameter
//! perturbations, weight-rank reports over trained groups, and
//! rank-targeted pair resampling for retraining experiments.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::clusterer::GroupAssignment;
use crate::corpus::ContrastivePair;
use crate::dro::WeightState;
use crate::encoder::{loss_forward, EncoderParams, TrainBatch};
use crate::error::{Error, Result};
use crate::par::map_chunks;
use crate::text::standard_normal;

/// Loss values over a square grid of perturbations `params + a*d1 + b*d2`.
#[derive(Debug, Clone)]
pub struct LandscapeGrid {
    /// Points per axis (odd, so the exact center is on the grid).
    pub resolution: usize,
    /// Symmetric bound: alpha and beta range over [-range, range].
    pub range: f64,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// values[(i, j)] = loss at (alphas[i], betas[j]).
    pub values: Array2<f64>,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        self.values[(self.resolution / 2, self.resolution / 2)]
    }

    /// Write `alpha,beta,loss` rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "alpha,beta,loss")?;
        for (i, &a) in self.alphas.iter().enumerate() {
            for (j, &b) in self.betas.iter().enumerate() {
                writeln!(w, "{a},{b},{}", self.values[(i, j)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn grid_axis(resolution: usize, range: f64) -> Vec<f64> {
    let half = (resolution / 2) as isize;
    (-half..=half)
        .map(|i| range * i as f64 / half.max(1) as f64)
        .collect()
}

/// Gaussian direction matrix rescaled so its Frobenius norm matches the
/// projection's (the whole matrix treated as one filter).
fn random_direction(params: &EncoderParams, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let mut dir = Array2::from_shape_fn(params.projection.raw_dim(), |_| standard_normal(rng));
    let dir_norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let param_norm = params.projection.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dir_norm > 0.0 {
        dir *= param_norm / dir_norm;
    }
    dir
}

/// Evaluate the mean contrastive loss of `batch` over the perturbation grid
/// spanned by two explicit directions.
pub fn loss_landscape_with_directions(
    params: &EncoderParams,
    batch: &TrainBatch,
    resolution: usize,
    range: f64,
    d1: &Array2<f64>,
    d2: &Array2<f64>,
    threads: usize,
) -> Result<LandscapeGrid> {
    if resolution.is_multiple_of(2) || resolution < 1 {
        return Err(Error::InvalidConfig(format!(
            "landscape resolution must be odd, got {resolution}"
        )));
    }
    if d1.raw_dim() != params.projection.raw_dim() || d2.raw_dim() != params.projection.raw_dim() {
        return Err(Error::InvalidInput(
            "direction matrices must match the projection shape".into(),
        ));
    }
    let alphas = grid_axis(resolution, range);
    let betas = grid_axis(resolution, range);
    let cells = resolution * resolution;
    let chunks = map_chunks(cells, threads, |cell_range| {
        let mut out = Vec::with_capacity(cell_range.len());
        for cell in cell_range {
            let i = cell / resolution;
            let j = cell % resolution;
            let mut perturbed = params.projection.clone();
            perturbed.scaled_add(alphas[i], d1);
            perturbed.scaled_add(betas[j], d2);
            let p = EncoderParams {
                projection: perturbed,
                temperature: params.temperature,
            };
            out.push(loss_forward(batch, &p).map(|f| f.mean_loss()));
        }
        out
    });
    let mut values = Array2::zeros((resolution, resolution));
    let mut cell = 0usize;
    for chunk in chunks {
        for v in chunk {
            values[(cell / resolution, cell % resolution)] = v?;
            cell += 1;
        }
    }
    Ok(LandscapeGrid {
        resolution,
        range,
        alphas,
        betas,
        values,
    })
}

/// Landscape over two seeded random directions, Frobenius-matched to the
/// projection.
pub fn loss_landscape(
    params: &EncoderParams,
    batch: &TrainBatch,
    resolution: usize,
    range: f64,
    seed: u64,
    threads: usize,
) -> Result<LandscapeGrid> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let d1 = random_direction(params, &mut rng);
    let d2 = random_direction(params, &mut rng);
    loss_landscape_with_directions(params, batch, resolution, range, &d1, &d2, threads)
}

/// Fraction of grid cells with loss at most `threshold_multiplier` times
/// the center loss — a scalar flatness proxy for comparing two models. A
/// zero center degenerates to the fraction of exactly-zero cells.
pub fn flat_region_area(grid: &LandscapeGrid, threshold_multiplier: f64) -> f64 {
    let center = grid.center();
    let total = (grid.resolution * grid.resolution) as f64;
    let count = if center == 0.0 {
        grid.values.iter().filter(|&&v| v == 0.0).count()
    } else {
        let cutoff = threshold_multiplier * center;
        grid.values.iter().filter(|&&v| v <= cutoff).count()
    };
    count as f64 / total
}

// ---------------------------------------------------------------------------
// Weight-rank reports and resampling
// ---------------------------------------------------------------------------

/// Groups ranked by final weight (descending, ties by group id), with the
/// top-m and bottom-m id sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRankReport {
    pub m: usize,
    /// (group id, weight), sorted by weight descending, ties by id.
    pub ranked: Vec<(usize, f64)>,
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
    /// Sizes of the weighted groups, indexed by group id.
    pub group_sizes: Vec<usize>,
}

impl GroupRankReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("serialization cannot fail");
        std::fs::write(path, json.as_bytes())?;
        Ok(())
    }
}

/// Rank weighted groups by their trained weights.
pub fn group_rank_report(
    state: &WeightState,
    assignment: &GroupAssignment,
    m: usize,
) -> Result<GroupRankReport> {
    if m > state.n {
        return Err(Error::InvalidInput(format!(
            "cannot take top/bottom {m} of {} groups",
            state.n
        )));
    }
    let sizes = assignment.weighted_group_sizes();
    if sizes.len() != state.n {
        return Err(Error::InvalidInput(format!(
            "assignment has {} weighted groups but the state tracks {}",
            sizes.len(),
            state.n
        )));
    }
    let mut ranked: Vec<(usize, f64)> = state.weights.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("weights are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    let top = ranked[..m].iter().map(|&(g, _)| g).collect();
    let bottom = ranked[state.n - m..].iter().map(|&(g, _)| g).collect();
    Ok(GroupRankReport {
        m,
        ranked,
        top,
        bottom,
        group_sizes: sizes,
    })
}

/// Which pool to resample from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleWhich {
    Top,
    Bottom,
    Random,
}

/// Uniform seeded sample of `budget` pairs from the top-m groups, the
/// bottom-m groups, or all pairs. The sample preserves input order.
pub fn resample_by_rank(
    pairs: &[ContrastivePair],
    assignment: &GroupAssignment,
    report: &GroupRankReport,
    which: ResampleWhich,
    budget: usize,
    seed: u64,
) -> Result<Vec<ContrastivePair>> {
    let selected: Option<std::collections::BTreeSet<usize>> = match which {
        ResampleWhich::Top => Some(report.top.iter().copied().collect()),
        ResampleWhich::Bottom => Some(report.bottom.iter().copied().collect()),
        ResampleWhich::Random => None,
    };
    let pool: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| match &selected {
            None => true,
            Some(groups) => assignment
                .weighted_group_of(&p.pair_id)
                .flatten()
                .is_some_and(|g| groups.contains(&g)),
        })
        .map(|(i, _)| i)
        .collect();
    if budget > pool.len() {
        return Err(Error::InvalidInput(format!(
            "budget {budget} exceeds pool of {} pairs",
            pool.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut picks = crate::text::sample_distinct(&mut rng, pool.len(), budget);
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| pairs[pool[i]].clone()).collect())
}
