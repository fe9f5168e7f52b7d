//! Exact discrete structural causal model on the fixed graph
//! `Z → X → M → Y` with `Z → Y`.
//!
//! Z confounds X and Y; M mediates every X→Y path. Under this graph the
//! back-door (through Z) and front-door (through M) adjustments both identify
//! `P(Y | do(X))`, which [`truncated_do`] computes directly from the
//! mechanisms. The front-door estimator only sees the observational joint
//! `P(X, M, Y)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ROW_TOL: f64 = 1e-12;
pub const VERIFY_TOLERANCE: f64 = 1e-9;

/// Compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(self) -> f64 {
        self.sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cardinalities {
    pub z: usize,
    pub x: usize,
    pub m: usize,
    pub y: usize,
}

impl Cardinalities {
    pub fn new(z: usize, x: usize, m: usize, y: usize) -> Self {
        Self { z, x, m, y }
    }
}

impl std::str::FromStr for Cardinalities {
    type Err = Error;

    /// Parses `"z,x,m,y"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad cardinalities '{s}': {e}")))?;
        match parts[..] {
            [z, x, m, y] => Ok(Self { z, x, m, y }),
            _ => Err(Error::invalid(format!(
                "expected 4 cardinalities, got '{s}'"
            ))),
        }
    }
}

pub type Distribution = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScm {
    sizes: Cardinalities,
    p_z: Vec<f64>,
    /// `[z][x]`
    p_x_given_z: Vec<Vec<f64>>,
    /// `[x][m]`
    p_m_given_x: Vec<Vec<f64>>,
    /// `[m][z][y]`
    p_y_given_mz: Vec<Vec<Vec<f64>>>,
}

fn check_row(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::Probability(format!(
            "{what}: row of length {} where {len} expected",
            row.len()
        )));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Probability(format!(
            "{what}: negative or non-finite entry"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::Probability(format!("{what}: row sums to {total}")));
    }
    Ok(())
}

impl DiscreteScm {
    pub fn new(
        p_z: Vec<f64>,
        p_x_given_z: Vec<Vec<f64>>,
        p_m_given_x: Vec<Vec<f64>>,
        p_y_given_mz: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let z = p_z.len();
        let x = p_m_given_x.len();
        let m = p_y_given_mz.len();
        let y = p_y_given_mz
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len);
        if z == 0 || x == 0 || m == 0 || y == 0 {
            return Err(Error::Probability("empty variable domain".into()));
        }
        check_row(&p_z, z, "P(Z)")?;
        if p_x_given_z.len() != z {
            return Err(Error::Probability("P(X|Z) has wrong number of rows".into()));
        }
        for row in &p_x_given_z {
            check_row(row, x, "P(X|Z)")?;
        }
        for row in &p_m_given_x {
            check_row(row, m, "P(M|X)")?;
        }
        for per_m in &p_y_given_mz {
            if per_m.len() != z {
                return Err(Error::Probability(
                    "P(Y|M,Z) has wrong number of rows".into(),
                ));
            }
            for row in per_m {
                check_row(row, y, "P(Y|M,Z)")?;
            }
        }
        Ok(Self {
            sizes: Cardinalities { z, x, m, y },
            p_z,
            p_x_given_z,
            p_m_given_x,
            p_y_given_mz,
        })
    }

    pub fn sizes(&self) -> Cardinalities {
        self.sizes
    }

    pub fn p_z(&self) -> &[f64] {
        &self.p_z
    }

    pub fn p_x_given_z(&self, z: usize) -> &[f64] {
        &self.p_x_given_z[z]
    }

    pub fn p_m_given_x(&self, x: usize) -> &[f64] {
        &self.p_m_given_x[x]
    }

    pub fn p_y_given_mz(&self, m: usize, z: usize) -> &[f64] {
        &self.p_y_given_mz[m][z]
    }

    fn check_x(&self, x: usize) -> Result<()> {
        if x >= self.sizes.x {
            return Err(Error::invalid(format!(
                "x = {x} outside domain of size {}",
                self.sizes.x
            )));
        }
        Ok(())
    }

    /// Marginal `P(X = x) = Σ_z P(x|z) P(z)`.
    pub fn p_x(&self, x: usize) -> f64 {
        let mut acc = KahanSum::default();
        for z in 0..self.sizes.z {
            acc.add(self.p_x_given_z[z][x] * self.p_z[z]);
        }
        acc.value()
    }

    /// `P(Y | x, z)` marginalized through the mediator.
    fn p_y_given_xz(&self, x: usize, z: usize) -> Distribution {
        (0..self.sizes.y)
            .map(|y| {
                let mut acc = KahanSum::default();
                for m in 0..self.sizes.m {
                    acc.add(self.p_y_given_mz[m][z][y] * self.p_m_given_x[x][m]);
                }
                acc.value()
            })
            .collect()
    }

    /// Observational joint `P(X, M, Y)` with Z summed out.
    pub fn observe(&self) -> ObservationalJoint {
        let s = self.sizes;
        let mut p = vec![0.0; s.x * s.m * s.y];
        for x in 0..s.x {
            for m in 0..s.m {
                for y in 0..s.y {
                    let mut acc = KahanSum::default();
                    for z in 0..s.z {
                        acc.add(
                            self.p_z[z]
                                * self.p_x_given_z[z][x]
                                * self.p_m_given_x[x][m]
                                * self.p_y_given_mz[m][z][y],
                        );
                    }
                    p[(x * s.m + m) * s.y + y] = acc.value();
                }
            }
        }
        ObservationalJoint {
            x: s.x,
            m: s.m,
            y: s.y,
            p,
        }
    }
}

/// Joint distribution over the observed variables only.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalJoint {
    x: usize,
    m: usize,
    y: usize,
    p: Vec<f64>,
}

impl ObservationalJoint {
    pub fn get(&self, x: usize, m: usize, y: usize) -> f64 {
        self.p[(x * self.m + m) * self.y + y]
    }

    pub fn p_x(&self, x: usize) -> f64 {
        let mut acc = KahanSum::default();
        for m in 0..self.m {
            for y in 0..self.y {
                acc.add(self.get(x, m, y));
            }
        }
        acc.value()
    }

    pub fn p_xm(&self, x: usize, m: usize) -> f64 {
        let mut acc = KahanSum::default();
        for y in 0..self.y {
            acc.add(self.get(x, m, y));
        }
        acc.value()
    }
}

/// Dirichlet(1) row of length `n`.
fn dirichlet_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let mut row: Vec<f64> = draws.iter().map(|d| d / total).collect();
    // push the rounding residue into the largest entry
    let residue = 1.0 - row.iter().sum::<f64>();
    let k = (0..n)
        .max_by(|&a, &b| row[a].total_cmp(&row[b]))
        .unwrap_or(0);
    row[k] += residue;
    row
}

/// Random SCM with Dirichlet(1) rows. Cardinalities must lie in `[1, 6]`.
pub fn random_scm(rng: &mut ChaCha8Rng, sizes: Cardinalities) -> Result<DiscreteScm> {
    for (name, v) in [
        ("Z", sizes.z),
        ("X", sizes.x),
        ("M", sizes.m),
        ("Y", sizes.y),
    ] {
        if !(1..=6).contains(&v) {
            return Err(Error::invalid(format!("|{name}| = {v} outside [1, 6]")));
        }
    }
    let p_z = dirichlet_row(rng, sizes.z);
    let p_x_given_z = (0..sizes.z).map(|_| dirichlet_row(rng, sizes.x)).collect();
    let p_m_given_x = (0..sizes.x).map(|_| dirichlet_row(rng, sizes.m)).collect();
    let p_y_given_mz = (0..sizes.m)
        .map(|_| (0..sizes.z).map(|_| dirichlet_row(rng, sizes.y)).collect())
        .collect();
    DiscreteScm::new(p_z, p_x_given_z, p_m_given_x, p_y_given_mz)
}

/// `P(Y | X = x) = Σ_z P(Y|x,z) P(z|x)`.
pub fn observational(scm: &DiscreteScm, x: usize) -> Result<Distribution> {
    scm.check_x(x)?;
    let px = scm.p_x(x);
    if px <= 0.0 {
        return Err(Error::Probability(format!(
            "P(X = {x}) = 0, cannot condition"
        )));
    }
    let s = scm.sizes();
    let mut acc = vec![KahanSum::default(); s.y];
    for z in 0..s.z {
        let p_z_given_x = scm.p_x_given_z[z][x] * scm.p_z[z] / px;
        for (y, v) in scm.p_y_given_xz(x, z).into_iter().enumerate() {
            acc[y].add(v * p_z_given_x);
        }
    }
    Ok(acc.into_iter().map(KahanSum::value).collect())
}

/// Ground truth by truncated factorization:
/// `P(Y | do(x)) = Σ_z Σ_m P(z) P(m|x) P(Y|m,z)`.
pub fn truncated_do(scm: &DiscreteScm, x: usize) -> Result<Distribution> {
    scm.check_x(x)?;
    let s = scm.sizes();
    Ok((0..s.y)
        .map(|y| {
            let mut acc = KahanSum::default();
            for z in 0..s.z {
                for m in 0..s.m {
                    acc.add(scm.p_z[z] * scm.p_m_given_x[x][m] * scm.p_y_given_mz[m][z][y]);
                }
            }
            acc.value()
        })
        .collect())
}

/// `Σ_z P(Y|x,z) P(z)` with Z observed.
pub fn backdoor_adjust(scm: &DiscreteScm, x: usize) -> Result<Distribution> {
    scm.check_x(x)?;
    let s = scm.sizes();
    let mut acc = vec![KahanSum::default(); s.y];
    for z in 0..s.z {
        for (y, v) in scm.p_y_given_xz(x, z).into_iter().enumerate() {
            acc[y].add(v * scm.p_z[z]);
        }
    }
    Ok(acc.into_iter().map(KahanSum::value).collect())
}

/// Front-door estimate together with the `(x̂, m)` terms skipped because
/// `P(x̂, m) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjusted {
    pub distribution: Distribution,
    pub skipped: Vec<(usize, usize)>,
}

/// `Σ_m P(m|x) Σ_x̂ P(x̂) P(Y|x̂,m)` from the observational joint of `scm`.
pub fn frontdoor_adjust(scm: &DiscreteScm, x: usize) -> Result<Adjusted> {
    scm.check_x(x)?;
    frontdoor_from_joint(&scm.observe(), x)
}

/// Front-door adjustment using only `P(X, M, Y)`.
pub fn frontdoor_from_joint(joint: &ObservationalJoint, x: usize) -> Result<Adjusted> {
    if x >= joint.x {
        return Err(Error::invalid(format!(
            "x = {x} outside domain of size {}",
            joint.x
        )));
    }
    let px = joint.p_x(x);
    if px <= 0.0 {
        return Err(Error::Probability(format!(
            "P(X = {x}) = 0, cannot condition"
        )));
    }
    let marg_x: Vec<f64> = (0..joint.x).map(|xh| joint.p_x(xh)).collect();
    let mut skipped = Vec::new();
    let mut acc = vec![KahanSum::default(); joint.y];
    for m in 0..joint.m {
        let p_m_given_x = joint.p_xm(x, m) / px;
        if p_m_given_x == 0.0 {
            continue;
        }
        for (xh, &p_xh) in marg_x.iter().enumerate() {
            let p_xhm = joint.p_xm(xh, m);
            if p_xhm <= 0.0 {
                if p_xh > 0.0 {
                    log::warn!("front-door term (x̂={xh}, m={m}) has zero probability, skipped");
                }
                skipped.push((xh, m));
                continue;
            }
            for (y, slot) in acc.iter_mut().enumerate() {
                slot.add(p_m_given_x * p_xh * joint.get(xh, m, y) / p_xhm);
            }
        }
    }
    Ok(Adjusted {
        distribution: acc.into_iter().map(KahanSum::value).collect(),
        skipped,
    })
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn max_abs_diff(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Binary SCM where Z nearly determines X and drives Y strongly.
pub fn confounded_scm() -> DiscreteScm {
    DiscreteScm::new(
        vec![0.5, 0.5],
        vec![vec![0.99, 0.01], vec![0.01, 0.99]],
        vec![vec![0.9, 0.1], vec![0.1, 0.9]],
        vec![
            vec![vec![0.95, 0.05], vec![0.15, 0.85]],
            vec![vec![0.85, 0.15], vec![0.05, 0.95]],
        ],
    )
    .expect("constructed tables are normalized")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorErrors {
    pub frontdoor: f64,
    pub backdoor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub trials: usize,
    /// Fixed cardinalities, or `None` when each trial draws them from `[2, 5]`.
    pub sizes: Option<Cardinalities>,
    pub max_abs_error: EstimatorErrors,
    /// Largest total variation between `P(Y|x)` and `P(Y|do(x))`; informational.
    pub max_confounding_gap: f64,
    pub skipped_terms: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks front-door ≡ truncated and back-door ≡ truncated on random SCMs.
pub fn scm_verify(
    seed: u64,
    trials: usize,
    sizes: Option<Cardinalities>,
) -> Result<VerificationReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = EstimatorErrors {
        frontdoor: 0.0,
        backdoor: 0.0,
    };
    let mut gap = 0.0f64;
    let mut skipped_terms = 0;
    for _ in 0..trials {
        let s = sizes.unwrap_or_else(|| {
            let mut draw = || rng.random_range(2..=5);
            Cardinalities::new(draw(), draw(), draw(), draw())
        });
        let scm = random_scm(&mut rng, s)?;
        for x in 0..s.x {
            let truth = truncated_do(&scm, x)?;
            let fd = frontdoor_adjust(&scm, x)?;
            skipped_terms += fd.skipped.len();
            errors.frontdoor = errors.frontdoor.max(max_abs_diff(&fd.distribution, &truth));
            errors.backdoor = errors
                .backdoor
                .max(max_abs_diff(&backdoor_adjust(&scm, x)?, &truth));
            if let Ok(obs) = observational(&scm, x) {
                gap = gap.max(total_variation(&obs, &truth));
            }
        }
    }
    let passed = errors.frontdoor <= VERIFY_TOLERANCE && errors.backdoor <= VERIFY_TOLERANCE;
    Ok(VerificationReport {
        seed,
        trials,
        sizes,
        max_abs_error: errors,
        max_confounding_gap: gap,
        skipped_terms,
        tolerance: VERIFY_TOLERANCE,
        passed,
    })
}
