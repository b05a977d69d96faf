#![allow(dead_code)]

use cyclic_sem::control::{plan_is_stable, post_plan_stability, ControlPlan};
use cyclic_sem::effects::{
    implied_moments, plan_blocks, total_effects, EffectSummary, MomentSummary, RegressionBlocks,
};
use cyclic_sem::linalg::spectral_radius;
use cyclic_sem::model::{partition_vertices, StructuralModel, VertexPartition};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One member of the random model family used across the property tests.
///
/// Vertex 0 is `X`, vertex 1 is `Y`, `X <-> Y` is always a feedback loop,
/// `D*` vertices are descendants of `X` and `T*` vertices are
/// nondescendants (at least one). The coefficient matrix is rescaled so its
/// spectral radius lies in `[0.3, 0.8]`, and the descendant block `A_ss` is
/// kept below 0.9 so that setting `X` leaves a convergent system.
pub struct Case {
    pub model: StructuralModel,
    pub f: Vec<String>,
    pub w: Vec<String>,
    pub descendants: Vec<String>,
    pub nondescendants: Vec<String>,
}

impl Case {
    pub fn partition(&self) -> VertexPartition {
        partition_vertices(&self.model, "X", "Y", &self.f, &self.w).unwrap()
    }

    pub fn partition_with(&self, f: &[String], w: &[String]) -> VertexPartition {
        partition_vertices(&self.model, "X", "Y", f, w).unwrap()
    }

    pub fn effects(&self) -> EffectSummary {
        total_effects(&self.model, &self.partition()).unwrap()
    }

    pub fn moments(&self) -> MomentSummary {
        implied_moments(&self.model).unwrap()
    }

    pub fn blocks(&self) -> RegressionBlocks {
        plan_blocks(&self.moments(), &self.effects()).unwrap()
    }
}

fn coef(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(0.2..1.0);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// `only_y` restricts `F` to `{Y}`.
pub fn random_case(rng: &mut ChaCha8Rng, only_y: bool) -> Case {
    loop {
        let case = draw_case(rng, only_y);
        let p = case.partition();
        let s = p.s();
        let a = case.model.coefficients();
        let a_ss = DMatrix::from_fn(s.len(), s.len(), |i, j| a[(s[i], s[j])]);
        if spectral_radius(&a_ss).unwrap() < 0.9 {
            return case;
        }
    }
}

fn draw_case(rng: &mut ChaCha8Rng, only_y: bool) -> Case {
    let n = rng.random_range(3..=8usize);
    let n_t = rng.random_range(1..=(n - 2));
    let n_d = n - 2 - n_t;
    let mut names = vec!["X".to_string(), "Y".to_string()];
    let descendants: Vec<String> = (0..n_d).map(|i| format!("D{i}")).collect();
    let nondescendants: Vec<String> = (0..n_t).map(|i| format!("T{i}")).collect();
    names.extend(descendants.iter().cloned());
    names.extend(nondescendants.iter().cloned());
    let upper: Vec<usize> = (0..2 + n_d).collect();
    let lower: Vec<usize> = (2 + n_d..n).collect();

    // a[(i, j)] is the coefficient of j in the equation of i.
    let mut a = DMatrix::zeros(n, n);
    a[(1, 0)] = coef(rng);
    a[(0, 1)] = coef(rng);
    for &d in &upper[2..] {
        let from = if rng.random_bool(0.5) { 0 } else { 1 };
        a[(d, from)] = coef(rng);
    }
    for &i in &upper {
        for &j in &upper {
            if i != j && a[(i, j)] == 0.0 && rng.random_bool(0.3) {
                a[(i, j)] = coef(rng);
            }
        }
        for &j in &lower {
            if rng.random_bool(0.5) {
                a[(i, j)] = coef(rng);
            }
        }
    }
    for &i in &lower {
        for &j in &lower {
            if i != j && rng.random_bool(0.3) {
                a[(i, j)] = coef(rng);
            }
        }
    }
    let rho = spectral_radius(&a).unwrap();
    let target = rng.random_range(0.3..0.8);
    if rho > 0.0 {
        a *= target / rho;
    }
    let mu = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let var = DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0));
    let model = StructuralModel::from_coefficients(names, a, mu, var).unwrap();

    let mut f = vec!["Y".to_string()];
    if !only_y {
        for d in &descendants {
            if rng.random_bool(0.5) {
                f.push(d.clone());
            }
        }
    }
    let mut w: Vec<String> = nondescendants
        .iter()
        .filter(|_| rng.random_bool(0.6))
        .cloned()
        .collect();
    if w.is_empty() {
        w.push(nondescendants[0].clone());
    }
    Case {
        model,
        f,
        w,
        descendants,
        nondescendants,
    }
}

/// Random plan that satisfies the loop-gain condition with `|a'gamma| <= 0.7`
/// and leaves the post-plan coefficient matrix convergent.
pub fn random_plan(rng: &mut ChaCha8Rng, case: &Case) -> ControlPlan {
    let effects = case.effects();
    let gamma = effects.gamma_fx();
    let partition = case.partition();
    for _ in 0..1000 {
        let mut a = DVector::from_fn(gamma.len(), |_, _| rng.random_range(-1.0..1.0));
        let lg = a.dot(&gamma);
        let target = rng.random_range(-0.7..0.7);
        if lg.abs() > 1e-6 {
            a *= target / lg;
        }
        let b: Vec<f64> = (0..case.w.len())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let plan = ControlPlan::new(
            rng.random_range(-2.0..2.0),
            a.iter().copied().collect(),
            b,
            rng.random_range(0.0..1.5),
        )
        .unwrap();
        let ok = plan_is_stable(&effects, &plan).unwrap().stable
            && post_plan_stability(&case.model, &partition, &plan)
                .unwrap()
                .stable;
        if ok {
            return plan;
        }
    }
    ControlPlan::new(0.0, vec![0.0; gamma.len()], vec![0.0; case.w.len()], 1.0).unwrap()
}

/// `count` cases with a stable plan each, drawn from one seed.
pub fn family(seed: u64, count: usize, only_y: bool) -> Vec<(Case, ControlPlan)> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let case = random_case(&mut r, only_y);
            let plan = random_plan(&mut r, &case);
            (case, plan)
        })
        .collect()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
