//! Monte Carlo equilibrium simulation, used as an independent check on every
//! closed-form moment in this crate, plus the fixed-point iteration whose
//! partial sums define stability.
//!
//! Each draw `i` gets its own ChaCha8 stream (`stream = i`) under a key derived
//! from the seed, so any split of the draw range, sequential or parallel,
//! reproduces exactly the same rows.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{apply_plan, plan_is_stable, ControlError, ControlPlan};
use crate::effects::total_effects;
use crate::estimation::{Dataset, EstimationError};
use crate::linalg::{self, SINGULAR_CONDITION};
use crate::model::{StructuralModel, VertexPartition, STABILITY_TOLERANCE};

pub const RNG_ALGORITHM: &str = "ChaCha8, one stream per draw (stream = draw index)";

const CHUNK_ROWS: usize = 4096;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("I - A is singular; the equilibrium is not unique")]
    SingularSystem,
    #[error("n_draws must be at least 1")]
    NoDraws,
    #[error(
        "control plan is unstable: |a'gamma_fx| = {abs_loop_gain} but the plan requires |a'gamma_fx| < 1"
    )]
    UnstablePlan { abs_loop_gain: f64 },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Effects(#[from] crate::effects::EffectsError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Data(#[from] EstimationError),
}

/// Zero-mean disturbance law, scaled to each variable's variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceLaw {
    #[default]
    Gaussian,
    /// Uniform on `[-sqrt(3 s), sqrt(3 s)]`.
    Uniform,
}

impl DisturbanceLaw {
    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            DisturbanceLaw::Gaussian => rng.sample(StandardNormal),
            DisturbanceLaw::Uniform => 3f64.sqrt() * rng.random_range(-1.0..1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub law: DisturbanceLaw,
}

impl SimulationConfig {
    pub fn new(n_draws: usize, seed: u64) -> Self {
        Self {
            n_draws,
            seed,
            law: DisturbanceLaw::Gaussian,
        }
    }
}

/// Written next to simulated CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub n_draws: usize,
    pub rng: String,
    pub law: DisturbanceLaw,
    pub model_hash: String,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub metadata: RunMetadata,
    /// Set when `A` is not convergent: the equilibrium exists but iteration
    /// would not reach it.
    pub unstable: bool,
}

struct Sampler {
    solve: DMatrix<f64>,
    intercepts: DVector<f64>,
    sd: DVector<f64>,
    key: [u8; 32],
    law: DisturbanceLaw,
}

impl Sampler {
    fn new(model: &StructuralModel, config: &SimulationConfig) -> Result<Self, SimulationError> {
        let n = model.len();
        let solve = linalg::inverse_checked(
            &(DMatrix::identity(n, n) - model.coefficients()),
            SINGULAR_CONDITION,
        )
        .ok_or(SimulationError::SingularSystem)?;
        Ok(Self {
            solve,
            intercepts: model.intercepts().clone(),
            sd: model.disturbance_variances().map(|v| v.max(0.0).sqrt()),
            key: ChaCha8Rng::seed_from_u64(config.seed).get_seed(),
            law: config.law,
        })
    }

    fn fill(&self, first_draw: u64, out: &mut [f64]) {
        let p = self.sd.len();
        let mut shock = vec![0.0; p];
        for (k, row) in out.chunks_exact_mut(p).enumerate() {
            let mut rng = ChaCha8Rng::from_seed(self.key);
            rng.set_stream(first_draw + k as u64);
            for (j, e) in shock.iter_mut().enumerate() {
                *e = self.intercepts[j] + self.sd[j] * self.law.sample(&mut rng);
            }
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = shock
                    .iter()
                    .enumerate()
                    .map(|(j, e)| self.solve[(i, j)] * e)
                    .sum();
            }
        }
    }
}

/// Draws `range` of the equilibrium sample defined by `config.seed`.
pub fn draw_equilibrium_range(
    model: &StructuralModel,
    config: &SimulationConfig,
    range: Range<u64>,
) -> Result<Dataset, SimulationError> {
    let sampler = Sampler::new(model, config)?;
    let p = model.len();
    let n = (range.end.saturating_sub(range.start)) as usize;
    let mut data = vec![0.0; n * p];
    data.par_chunks_mut(CHUNK_ROWS * p)
        .enumerate()
        .for_each(|(c, chunk)| sampler.fill(range.start + (c * CHUNK_ROWS) as u64, chunk));
    Ok(Dataset::new(model.names().to_vec(), data)?)
}

/// Independent equilibrium draws `v = (I - A)^-1 (mu + eps)`.
pub fn draw_equilibrium(
    model: &StructuralModel,
    config: &SimulationConfig,
) -> Result<Simulation, SimulationError> {
    if config.n_draws == 0 {
        return Err(SimulationError::NoDraws);
    }
    let dataset = draw_equilibrium_range(model, config, 0..config.n_draws as u64)?;
    let unstable = model.spectral_radius()? >= 1.0 - STABILITY_TOLERANCE;
    Ok(Simulation {
        dataset,
        metadata: RunMetadata {
            seed: config.seed,
            n_draws: config.n_draws,
            rng: RNG_ALGORITHM.to_string(),
            law: config.law,
            model_hash: model.content_hash(),
        },
        unstable,
    })
}

/// Equilibrium draws after replacing the treatment's equation by `plan`.
/// Plans violating the loop-gain condition are rejected unless
/// `allow_unstable` is set.
pub fn simulate_plan(
    model: &StructuralModel,
    partition: &VertexPartition,
    plan: &ControlPlan,
    config: &SimulationConfig,
    allow_unstable: bool,
) -> Result<Simulation, SimulationError> {
    if !allow_unstable {
        let effects = total_effects(model, partition)?;
        let s = plan_is_stable(&effects, plan)?;
        if !s.stable {
            return Err(SimulationError::UnstablePlan {
                abs_loop_gain: s.loop_gain.abs(),
            });
        }
    }
    let post = apply_plan(model, partition, plan)?;
    draw_equilibrium(&post, config)
}

/// `k` steps of `v <- mu + A v + eps` with `eps` held fixed; returns all
/// `k + 1` states starting from `v0`.
pub fn iterate_equilibrium(
    model: &StructuralModel,
    v0: &DVector<f64>,
    eps: &DVector<f64>,
    k: usize,
) -> Vec<DVector<f64>> {
    let forcing = model.intercepts() + eps;
    let mut out = Vec::with_capacity(k + 1);
    out.push(v0.clone());
    for _ in 0..k {
        let next = &forcing + model.coefficients() * out.last().expect("nonempty");
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::sample_moments;

    fn model(a: &[f64], n: usize, mu: &[f64], var: &[f64]) -> StructuralModel {
        StructuralModel::from_coefficients(
            (0..n).map(|i| format!("v{i}")).collect(),
            DMatrix::from_row_slice(n, n, a),
            DVector::from_row_slice(mu),
            DVector::from_row_slice(var),
        )
        .unwrap()
    }

    #[test]
    fn empty_graph_recovers_disturbances() {
        let m = model(&[0.0; 4], 2, &[1.0, -1.0], &[2.0, 0.5]);
        let sim = draw_equilibrium(&m, &SimulationConfig::new(200_000, 3)).unwrap();
        let mo = sample_moments(&sim.dataset).unwrap();
        // 4-5 standard errors
        assert!((mo.mean()[0] - 1.0).abs() < 5.0 * (2.0f64 / 2e5).sqrt());
        assert!((mo.var("v0").unwrap() - 2.0).abs() < 5.0 * 2.0 * (2.0f64 / 2e5).sqrt());
        assert!((mo.var("v1").unwrap() - 0.5).abs() < 5.0 * 0.5 * (2.0f64 / 2e5).sqrt());
        assert!(!sim.unstable);
    }

    #[test]
    fn same_seed_same_rows() {
        let m = model(&[0.0, 0.4, -0.3, 0.0], 2, &[0.0, 1.0], &[1.0, 1.0]);
        let c = SimulationConfig::new(10_000, 42);
        let a = draw_equilibrium(&m, &c).unwrap();
        let b = draw_equilibrium(&m, &c).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let other = draw_equilibrium(&m, &SimulationConfig::new(10_000, 43)).unwrap();
        assert_ne!(a.dataset, other.dataset);
    }

    #[test]
    fn chunked_draws_match_single_pass() {
        let m = model(&[0.0, 0.4, -0.3, 0.0], 2, &[0.0, 1.0], &[1.0, 1.0]);
        let c = SimulationConfig::new(10_000, 9);
        let whole = draw_equilibrium(&m, &c).unwrap().dataset;
        let mut pieces = Vec::new();
        for range in [0..17u64, 17..5000, 5000..5001, 5001..10_000] {
            pieces.extend_from_slice(draw_equilibrium_range(&m, &c, range).unwrap().as_slice());
        }
        assert_eq!(pieces, whole.as_slice());
    }

    #[test]
    fn unstable_model_is_flagged_but_solved() {
        let m = model(&[0.0, 1.5, 0.8, 0.0], 2, &[0.0, 0.0], &[1.0, 1.0]);
        let sim = draw_equilibrium(&m, &SimulationConfig::new(10, 0)).unwrap();
        assert!(sim.unstable);
        let singular = model(&[0.0, 1.0, 1.0, 0.0], 2, &[0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(
            draw_equilibrium(&singular, &SimulationConfig::new(10, 0)),
            Err(SimulationError::SingularSystem)
        ));
    }

    #[test]
    fn iteration_converges_or_diverges() {
        let stable = model(&[0.0, 0.5, 0.6, 0.0], 2, &[1.0, 2.0], &[1.0, 1.0]);
        let eps = DVector::from_vec(vec![0.3, -0.2]);
        let traj = iterate_equilibrium(&stable, &DVector::zeros(2), &eps, 200);
        let target = (DMatrix::identity(2, 2) - stable.coefficients())
            .lu()
            .solve(&(stable.intercepts() + &eps))
            .unwrap();
        assert!((traj.last().unwrap() - target).norm() < 1e-12);

        let unstable = model(&[0.0, 1.5, 0.8, 0.0], 2, &[0.0, 0.0], &[1.0, 1.0]);
        let traj = iterate_equilibrium(&unstable, &DVector::from_vec(vec![1.0, 1.0]), &eps, 200);
        assert!(traj.last().unwrap().norm() > 1e6);
    }
}
